//! Uniform Cartesian grids and the fields living on them.
//!
//! Fields are padded boxes: derivative stencils are only applied where they
//! fit, and nothing is ever extrapolated. Operations that differentiate
//! document their margin (1 cell for first derivatives, 2 for anything built
//! on curvature) and write zeros outside it.
//!
//! Symmetric 2-tensors are stored packed, one plane per component (i <= j),
//! so index symmetry holds bit-exactly by construction.

use crate::error::{Error, Result};
use crate::linalg;

/// A uniform Cartesian grid in n dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    mins: Vec<f64>,
    spacing: Vec<f64>,
    counts: Vec<usize>,
    strides: Vec<usize>,
}

impl GridSpec {
    /// Grid covering `[mins[a], mins[a] + extents[a]]` with `counts[a]` points
    /// per axis; spacing is `extent / (count - 1)`.
    pub fn new(mins: &[f64], extents: &[f64], counts: &[usize]) -> Result<Self> {
        let n = mins.len();
        if n == 0 || extents.len() != n || counts.len() != n {
            return Err(Error::InvalidParameter(
                "grid axes must be consistent and non-empty".into(),
            ));
        }
        for a in 0..n {
            if counts[a] < 5 {
                return Err(Error::InvalidParameter(format!(
                    "axis {a}: {} points < 5; second-order stencils need a 2-cell halo",
                    counts[a]
                )));
            }
            if !(extents[a] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "axis {a}: extent must be positive"
                )));
            }
        }
        let spacing = (0..n)
            .map(|a| extents[a] / (counts[a] - 1) as f64)
            .collect();
        let mut strides = vec![0usize; n];
        let mut s = 1;
        for a in (0..n).rev() {
            strides[a] = s;
            s *= counts[a];
        }
        Ok(GridSpec {
            mins: mins.to_vec(),
            spacing,
            counts: counts.to_vec(),
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn extents(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|a| self.spacing[a] * (self.counts[a] - 1) as f64)
            .collect()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Number of packed symmetric-tensor components.
    pub fn sym_len(&self) -> usize {
        linalg::sym_len(self.dim())
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn linear(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.strides)
            .map(|(i, s)| i * s)
            .sum::<usize>()
    }

    #[inline]
    pub fn decompose(&self, mut lin: usize, idx: &mut [usize]) {
        for a in 0..self.dim() {
            idx[a] = lin / self.strides[a];
            lin %= self.strides[a];
        }
    }

    #[inline]
    pub fn position_into(&self, idx: &[usize], p: &mut [f64]) {
        for a in 0..self.dim() {
            p[a] = self.mins[a] + idx[a] as f64 * self.spacing[a];
        }
    }

    pub fn position(&self, idx: &[usize]) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.position_into(idx, &mut p);
        p
    }

    pub fn position_linear(&self, lin: usize) -> Vec<f64> {
        let mut idx = vec![0usize; self.dim()];
        self.decompose(lin, &mut idx);
        self.position(&idx)
    }

    /// True if the multi-index is at least `margin` cells from every face.
    #[inline]
    pub fn is_interior(&self, idx: &[usize], margin: usize) -> bool {
        idx.iter()
            .zip(&self.counts)
            .all(|(&i, &c)| i >= margin && i + margin < c)
    }

    /// Linear indices of all points at least `margin` cells from the faces.
    pub fn interior_indices(&self, margin: usize) -> Vec<usize> {
        let n = self.dim();
        let mut idx = vec![0usize; n];
        let mut out = Vec::new();
        for lin in 0..self.len() {
            self.decompose(lin, &mut idx);
            if self.is_interior(&idx, margin) {
                out.push(lin);
            }
        }
        out
    }

    /// Multilinear interpolation weights: returns base multi-index and the
    /// fractional offsets, or None if `p` is outside the grid box.
    fn locate(&self, p: &[f64]) -> Option<(Vec<usize>, Vec<f64>)> {
        let n = self.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for a in 0..n {
            let t = (p[a] - self.mins[a]) / self.spacing[a];
            if t < -1e-12 || t > (self.counts[a] - 1) as f64 + 1e-12 {
                return None;
            }
            let t = t.clamp(0.0, (self.counts[a] - 1) as f64);
            let mut i = t.floor() as usize;
            if i + 1 >= self.counts[a] {
                i = self.counts[a] - 2;
            }
            base[a] = i;
            frac[a] = t - i as f64;
        }
        Some((base, frac))
    }

    /// Multilinear interpolation of `data` (one value per grid point) at `p`.
    pub fn interpolate(&self, data: &[f64], p: &[f64]) -> Option<f64> {
        let (base, frac) = self.locate(p)?;
        let n = self.dim();
        let mut sum = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut lin = 0usize;
            for a in 0..n {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    lin += (base[a] + 1) * self.strides[a];
                } else {
                    w *= 1.0 - frac[a];
                    lin += base[a] * self.strides[a];
                }
            }
            sum += w * data[lin];
        }
        Some(sum)
    }
}

/// Scalar field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        ScalarField {
            grid: grid.clone(),
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn<F: FnMut(&[f64]) -> f64>(grid: &GridSpec, mut f: F) -> Self {
        let n = grid.dim();
        let mut idx = vec![0usize; n];
        let mut p = vec![0.0; n];
        let data = (0..grid.len())
            .map(|lin| {
                grid.decompose(lin, &mut idx);
                grid.position_into(&idx, &mut p);
                f(&p)
            })
            .collect();
        ScalarField {
            grid: grid.clone(),
            data,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Max |value| over interior points only.
    pub fn max_abs_interior(&self, margin: usize) -> f64 {
        let mut idx = vec![0usize; self.grid.dim()];
        let mut m = 0.0f64;
        for lin in 0..self.data.len() {
            self.grid.decompose(lin, &mut idx);
            if self.grid.is_interior(&idx, margin) {
                m = m.max(self.data[lin].abs());
            }
        }
        m
    }

    pub fn sample(&self, p: &[f64]) -> Option<f64> {
        self.grid.interpolate(&self.data, p)
    }
}

/// Symmetric 2-tensor field, packed component planes (i <= j).
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensorField {
    pub grid: GridSpec,
    /// Layout: `data[c * npts + lin]` for packed component c.
    pub data: Vec<f64>,
}

impl SymTensorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        SymTensorField {
            grid: grid.clone(),
            data: vec![0.0; grid.len() * grid.sym_len()],
        }
    }

    /// Build from a function returning the packed components at a point.
    pub fn from_fn<F: FnMut(&[f64], &mut [f64])>(grid: &GridSpec, mut f: F) -> Self {
        let n = grid.dim();
        let npts = grid.len();
        let nsym = grid.sym_len();
        let mut data = vec![0.0; npts * nsym];
        let mut idx = vec![0usize; n];
        let mut p = vec![0.0; n];
        let mut comps = vec![0.0; nsym];
        for lin in 0..npts {
            grid.decompose(lin, &mut idx);
            grid.position_into(&idx, &mut p);
            f(&p, &mut comps);
            for c in 0..nsym {
                data[c * npts + lin] = comps[c];
            }
        }
        SymTensorField {
            grid: grid.clone(),
            data,
        }
    }

    #[inline]
    pub fn comp(&self, c: usize) -> &[f64] {
        let npts = self.grid.len();
        &self.data[c * npts..(c + 1) * npts]
    }

    #[inline]
    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        let npts = self.grid.len();
        &mut self.data[c * npts..(c + 1) * npts]
    }

    /// Gather the packed components at one point.
    #[inline]
    pub fn at(&self, lin: usize, out: &mut [f64]) {
        let npts = self.grid.len();
        for c in 0..self.grid.sym_len() {
            out[c] = self.data[c * npts + lin];
        }
    }

    #[inline]
    pub fn value(&self, lin: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.dim();
        self.data[linalg::pack(n, i, j) * self.grid.len() + lin]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Multilinear sample of every packed component at `p`.
    pub fn sample(&self, p: &[f64], out: &mut [f64]) -> bool {
        for c in 0..self.grid.sym_len() {
            match self.grid.interpolate(self.comp(c), p) {
                Some(v) => out[c] = v,
                None => return false,
            }
        }
        true
    }
}

/// Metric field: a symmetric 2-tensor that is pointwise positive-definite on
/// the region where it is used.
pub type MetricField = SymTensorField;

impl SymTensorField {
    /// Pointwise smallest eigenvalue over interior points; the sign check for
    /// positive-definiteness.
    pub fn min_eigenvalue_interior(&self, margin: usize) -> f64 {
        let n = self.grid.dim();
        let mut idx = vec![0usize; n];
        let mut comps = vec![0.0; self.grid.sym_len()];
        let mut evals = vec![0.0; n];
        let mut scratch = vec![0.0; n * n];
        let mut min = f64::INFINITY;
        for lin in 0..self.grid.len() {
            self.grid.decompose(lin, &mut idx);
            if !self.grid.is_interior(&idx, margin) {
                continue;
            }
            self.at(lin, &mut comps);
            linalg::sym_eigenvalues(n, &comps, &mut evals, &mut scratch);
            min = min.min(evals[0]);
        }
        min
    }
}

/// Christoffel symbols: `Gamma^k_{ij}`, symmetric in (i, j), stored as
/// `n * sym_len` planes indexed `k * sym_len + pack(i, j)`.
#[derive(Debug, Clone)]
pub struct ConnectionField {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl ConnectionField {
    pub fn zeros(grid: &GridSpec) -> Self {
        ConnectionField {
            grid: grid.clone(),
            data: vec![0.0; grid.len() * grid.dim() * grid.sym_len()],
        }
    }

    #[inline]
    pub fn comp(&self, k: usize, c: usize) -> &[f64] {
        let npts = self.grid.len();
        let nsym = self.grid.sym_len();
        let off = (k * nsym + c) * npts;
        &self.data[off..off + npts]
    }

    #[inline]
    pub fn comp_mut(&mut self, k: usize, c: usize) -> &mut [f64] {
        let npts = self.grid.len();
        let nsym = self.grid.sym_len();
        let off = (k * nsym + c) * npts;
        &mut self.data[off..off + npts]
    }

    #[inline]
    pub fn value(&self, lin: usize, k: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.dim();
        let nsym = self.grid.sym_len();
        let npts = self.grid.len();
        self.data[(k * nsym + linalg::pack(n, i, j)) * npts + lin]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn require_same_grid(a: &GridSpec, b: &GridSpec, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{what}: {:?} pts vs {:?} pts",
            a.counts(),
            b.counts()
        )));
    }
    Ok(())
}
