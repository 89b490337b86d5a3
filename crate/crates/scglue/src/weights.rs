//! Weights, cutoffs and weighted Sobolev norms.
//!
//! The two weights are `phi = x^2 / r` and `psi = r^mu x^sigma e^{-s r/x}`
//! with `mu = -n/2 - beta`. `psi` is always evaluated in log space
//! (`ln psi = mu ln r + sigma ln x - s r/x`, exponentiate last) because
//! `s r/x` runs into the hundreds near the boundary; once the exponent is
//! below the double-precision underflow line the weight is returned as an
//! exact zero, and nothing downstream is allowed to divide by it there.

use crate::domain::{radius, radius_gradient, DomainSpec, Side};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, SymTensorField};
use crate::linalg;
use crate::smooth;
use crate::summation;
use crate::tensor::GeometryCache;
use serde::{Deserialize, Serialize};

/// exp(t) with exact-zero underflow.
const LOG_UNDERFLOW: f64 = -745.0;

fn exp_or_zero(t: f64) -> f64 {
    if t < LOG_UNDERFLOW {
        0.0
    } else {
        t.exp()
    }
}

/// All weight exponents of a run. `mu = -n/2 - beta` is derived.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WeightParams {
    pub n: usize,
    /// radial weight; the large-distance decay rate of the correction
    pub beta: f64,
    /// boundary exponent
    #[serde(default)]
    pub sigma: f64,
    /// exponential rate; > 0 for gluing runs
    #[serde(default = "default_s")]
    pub s: f64,
    /// differentiability bookkeeping, must exceed n/2
    #[serde(default = "default_k")]
    pub k: usize,
    /// decay rate of the background toward flat
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// decay rate of g - ghat; must be below min(beta, -epsilon)
    #[serde(default)]
    pub beta_tilde: Option<f64>,
}

fn default_s() -> f64 {
    1.0
}

fn default_k() -> usize {
    2
}

fn default_epsilon() -> f64 {
    0.5
}

impl WeightParams {
    /// Midpoint of the mass-compatible beta range for dimension n.
    pub fn standard(n: usize) -> Self {
        WeightParams {
            n,
            beta: -((n as f64) - 2.0) / 2.0 / 2.0 - ((n as f64) - 2.0) / 4.0, // = -(n-2)/2 * 1/2 ... kept explicit below
            sigma: 0.0,
            s: 1.0,
            k: n / 2 + 1,
            epsilon: 0.5,
            beta_tilde: None,
        }
        .with_beta(-((n as f64) - 2.0) / 4.0 * 2.0)
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn mu(&self) -> f64 {
        -(self.n as f64) / 2.0 - self.beta
    }

    pub fn beta_tilde(&self) -> f64 {
        self.beta_tilde
            .unwrap_or_else(|| (self.beta - 0.1).min(-self.epsilon - 0.1))
    }

    /// The correction decays fast enough for a well-defined mass integral
    /// iff beta >= -(n-2)/2.
    pub fn adm_compatible(&self) -> bool {
        self.beta >= -((self.n as f64) - 2.0) / 2.0
    }

    /// Parameter constraints for gluing runs.
    pub fn validate_for_gluing(&self) -> Result<()> {
        let n = self.n as f64;
        if self.n < 3 {
            return Err(Error::InvalidParameter(
                "gluing runs need dimension n >= 3".into(),
            ));
        }
        if !(-(n - 2.0)..0.0).contains(&self.beta) {
            return Err(Error::InvalidParameter(format!(
                "beta = {} outside [-(n-2), 0) = [{}, 0)",
                self.beta,
                -(n - 2.0)
            )));
        }
        if self.s <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "exponential rate s = {} must be > 0 for gluing",
                self.s
            )));
        }
        if self.k as f64 <= n / 2.0 {
            return Err(Error::InvalidParameter(format!(
                "k = {} must exceed n/2 = {}",
                self.k,
                n / 2.0
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        let bt = self.beta_tilde();
        if bt >= self.beta.min(-self.epsilon) {
            return Err(Error::InvalidParameter(format!(
                "beta_tilde = {bt} must be < min(beta, -epsilon) = {}",
                self.beta.min(-self.epsilon)
            )));
        }
        Ok(())
    }

    /// ln psi at given (x, r); -inf when the exponential has underflowed.
    pub fn ln_psi(&self, x: f64, r: f64) -> f64 {
        self.mu() * r.ln() + self.sigma * x.ln() - self.s * r / x
    }

    pub fn psi_of_xr(&self, x: f64, r: f64) -> Result<f64> {
        if x <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "psi needs x > 0, got x = {x}"
            )));
        }
        Ok(exp_or_zero(self.ln_psi(x, r)))
    }

    pub fn psi_sq_of_xr(&self, x: f64, r: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        exp_or_zero(2.0 * self.ln_psi(x, r))
    }
}

/// phi = x^2 / r at a point of the domain.
pub fn weight_phi(d: &DomainSpec, p: &[f64]) -> Result<f64> {
    let x = d.defining_function(p)?;
    Ok(x * x / radius(p))
}

/// psi = r^mu x^sigma e^{-s r/x}; exact zero once the exponent underflows.
pub fn weight_psi(w: &WeightParams, d: &DomainSpec, p: &[f64]) -> Result<f64> {
    let x = d.defining_function(p)?;
    w.psi_of_xr(x, radius(p))
}

/// The interpolation cutoff profile: a mollified step in `x/r`, placed in
/// the collar on the A side, transitioning on `[lo, hi]` fractions of the
/// collar ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CutoffProfile {
    #[serde(default = "default_lo")]
    pub lo_frac: f64,
    #[serde(default = "default_hi")]
    pub hi_frac: f64,
}

fn default_lo() -> f64 {
    1.0 / 3.0
}

fn default_hi() -> f64 {
    2.0 / 3.0
}

impl Default for CutoffProfile {
    fn default() -> Self {
        CutoffProfile {
            lo_frac: default_lo(),
            hi_frac: default_hi(),
        }
    }
}

impl CutoffProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lo_frac && self.lo_frac < self.hi_frac && self.hi_frac < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "cutoff window needs 0 < lo < hi < 1, got ({}, {})",
                self.lo_frac, self.hi_frac
            )));
        }
        Ok(())
    }
}

/// The interpolation cutoff: exactly one in a neighborhood of the A
/// component (including beyond it), exactly zero from the middle of the
/// domain through the B side; in between it is a smooth non-increasing
/// function of `x/r` alone.
pub fn cutoff_chi(profile: &CutoffProfile, d: &DomainSpec, p: &[f64]) -> f64 {
    match d.side(p) {
        Side::A => 1.0,
        Side::B => 0.0,
        Side::Inside => {
            let tau = d.transverse(p).unwrap_or(1.0);
            if tau >= 0.5 {
                return 0.0;
            }
            let x = d.defining_or_zero(p);
            let ratio = x / radius(p);
            let c = d.collar_ratio();
            1.0 - smooth::step_between(ratio, profile.lo_frac * c, profile.hi_frac * c)
        }
    }
}

/// Logarithmic cutoff family: `Xi_lambda = ramp(-ln(x/r) / lambda)`, zero
/// iff `x >= e^-lambda r`, one iff `x <= e^-2 lambda r`.
pub fn log_cutoff_xi(lambda: f64, d: &DomainSpec, p: &[f64]) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda = {lambda} must be positive"
        )));
    }
    let x = d.defining_function(p)?;
    Ok(xi_of_ratio(lambda, x / radius(p)))
}

pub fn xi_of_ratio(lambda: f64, ratio: f64) -> f64 {
    if ratio <= 0.0 {
        return 1.0;
    }
    smooth::ramp12(-ratio.ln() / lambda)
}

/// |phi grad Xi_lambda| at a point, from the analytic gradients of x and r.
/// In the polynomial-weight setting where this family is used the
/// derivative weight is `phi = x`, so the product is
/// `(chi'/lambda) |grad x - (x/r) grad r|`, bounded uniformly in lambda.
pub fn phi_grad_xi(lambda: f64, d: &DomainSpec, p: &[f64]) -> Result<f64> {
    let x = d.defining_function(p)?;
    let r = radius(p);
    let gx = d.grad_defining(p);
    let gr = radius_gradient(p);
    let dchi = smooth::ramp12_deriv(-(x / r).ln() / lambda) / lambda;
    let mut norm2 = 0.0;
    for i in 0..p.len() {
        let v = gx[i] - (x / r) * gr[i];
        norm2 += v * v;
    }
    Ok(dchi * norm2.sqrt())
}

/// Quadrature over the intersection of the domain with the grid interior:
/// midpoint rule on cells whose 2^n subcell centers all lie inside, and
/// inside-fraction weighting for boundary-straddling cells (whose center is
/// still inside).
pub struct Quadrature {
    pub cells: Vec<usize>,
    /// inside-fraction times cell volume
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// Build for `margin`-interior cells; `domain = None` means the whole
    /// interior box.
    pub fn build(grid: &GridSpec, domain: Option<&DomainSpec>, margin: usize) -> Self {
        let n = grid.dim();
        let vol = grid.cell_volume();
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        let mut idx = vec![0usize; n];
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for lin in 0..grid.len() {
            grid.decompose(lin, &mut idx);
            if !grid.is_interior(&idx, margin) {
                continue;
            }
            grid.position_into(&idx, &mut p);
            match domain {
                None => {
                    cells.push(lin);
                    weights.push(vol);
                }
                Some(d) => {
                    if !d.contains(&p) {
                        continue;
                    }
                    let mut inside = 0usize;
                    for corner in 0..(1usize << n) {
                        for a in 0..n {
                            let off = if corner >> a & 1 == 1 { 0.25 } else { -0.25 };
                            q[a] = p[a] + off * grid.spacing()[a];
                        }
                        if d.contains(&q) {
                            inside += 1;
                        }
                    }
                    if inside == 0 {
                        continue;
                    }
                    cells.push(lin);
                    weights.push(vol * inside as f64 / (1usize << n) as f64);
                }
            }
        }
        Quadrature { cells, weights }
    }

    /// Deterministic weighted sum of `f(cell, weight)` over the set.
    pub fn integrate<F>(&self, f: F) -> f64
    where
        F: Fn(usize, f64) -> f64 + Sync,
    {
        summation::det_sum(self.cells.len(), |i| f(self.cells[i], self.weights[i]))
    }
}

/// Which field a weighted norm is taken of.
pub enum FieldRef<'a> {
    Scalar(&'a ScalarField),
    Sym(&'a SymTensorField),
}

/// Weighted Sobolev norm
/// `( integral sum_{i<=k} phi^{2i} |nabla^(i) u|^2_g psi^2 dmu_g )^{1/2}`
/// by midpoint quadrature over the domain cells. `k <= 2`. With
/// `domain = None` the weight `phi` is one and `psi = r^mu` (sigma and s
/// must vanish then).
pub fn weighted_norm(
    u: FieldRef,
    k: usize,
    w: &WeightParams,
    cache: &GeometryCache,
    domain: Option<&DomainSpec>,
) -> Result<f64> {
    if k > 2 {
        return Err(Error::Unsupported(format!(
            "weighted norms are implemented for k <= 2, got k = {k}"
        )));
    }
    if domain.is_none() && (w.sigma != 0.0 || w.s != 0.0) {
        return Err(Error::InvalidParameter(
            "boundary weights need a domain; set sigma = 0 and s = 0 for domain-free norms".into(),
        ));
    }
    let grid = cache.grid().clone();
    let quad = Quadrature::build(&grid, domain, k.max(1));
    if quad.cells.is_empty() {
        return Err(Error::EmptyActiveSet("weighted norm quadrature".into()));
    }
    // first covariant derivative of a tensor needs a stored field when
    // k = 2; build it once
    let grad_tensor: Option<Vec<SymTensorField>> = match (&u, k) {
        (FieldRef::Sym(t), 2) => Some(covariant_gradient_tensor(t, cache)),
        _ => None,
    };
    let total = quad.integrate(|lin, wq| {
        let p = grid.position_linear(lin);
        let r = radius(&p);
        let (x, phi) = match domain {
            Some(d) => {
                let x = d.defining_or_zero(&p);
                if x <= 0.0 {
                    return 0.0;
                }
                (x, x * x / r)
            }
            None => (1.0, 1.0),
        };
        let psi2 = if domain.is_some() {
            w.psi_sq_of_xr(x, r)
        } else {
            exp_or_zero(2.0 * w.mu() * r.ln())
        };
        if psi2 == 0.0 {
            return 0.0;
        }
        let mut sum = value_sq(&u, cache, lin);
        if k >= 1 {
            sum += phi * phi * grad_sq(&u, cache, lin);
        }
        if k >= 2 {
            let p4 = phi * phi * phi * phi;
            sum += p4 * hess_sq(&u, cache, grad_tensor.as_deref(), lin);
        }
        sum * psi2 * cache.sqrt_det.data[lin] * wq
    });
    Ok(total.max(0.0).sqrt())
}

fn value_sq(u: &FieldRef, cache: &GeometryCache, lin: usize) -> f64 {
    match u {
        FieldRef::Scalar(f) => f.data[lin] * f.data[lin],
        FieldRef::Sym(t) => {
            let n = t.grid.dim();
            let mut tc = vec![0.0; t.grid.sym_len()];
            let mut gi = vec![0.0; t.grid.sym_len()];
            t.at(lin, &mut tc);
            cache.ginv.at(lin, &mut gi);
            sym_norm_sq(n, &tc, &gi)
        }
    }
}

/// |T|^2_g for a packed symmetric 2-tensor with packed inverse metric.
pub fn sym_norm_sq(n: usize, t: &[f64], ginv: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            for a in 0..n {
                for b in 0..n {
                    s += ginv[linalg::pack(n, i, a)]
                        * ginv[linalg::pack(n, j, b)]
                        * t[linalg::pack(n, i, j)]
                        * t[linalg::pack(n, a, b)];
                }
            }
        }
    }
    s
}

fn d1(plane: &[f64], lin: usize, stride: usize, inv2dx: f64) -> f64 {
    (plane[lin + stride] - plane[lin - stride]) * inv2dx
}

fn grad_sq(u: &FieldRef, cache: &GeometryCache, lin: usize) -> f64 {
    let grid = cache.grid();
    let n = grid.dim();
    match u {
        FieldRef::Scalar(f) => {
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let da = d1(&f.data, lin, grid.stride(a), 0.5 / grid.spacing()[a]);
                    let db = d1(&f.data, lin, grid.stride(b), 0.5 / grid.spacing()[b]);
                    s += cache.ginv.value(lin, a, b) * da * db;
                }
            }
            s
        }
        FieldRef::Sym(t) => {
            let nsym = grid.sym_len();
            let mut grad = vec![0.0; n * nsym];
            covariant_gradient_at(t, cache, lin, &mut grad);
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let gab = cache.ginv.value(lin, a, b);
                    if gab == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        for j in 0..n {
                            for kk in 0..n {
                                for l in 0..n {
                                    s += gab
                                        * cache.ginv.value(lin, i, kk)
                                        * cache.ginv.value(lin, j, l)
                                        * grad[a * nsym + linalg::pack(n, i, j)]
                                        * grad[b * nsym + linalg::pack(n, kk, l)];
                                }
                            }
                        }
                    }
                }
            }
            s
        }
    }
}

/// Covariant gradient of a symmetric tensor at one point, packed per axis.
fn covariant_gradient_at(t: &SymTensorField, cache: &GeometryCache, lin: usize, out: &mut [f64]) {
    let grid = &t.grid;
    let n = grid.dim();
    let nsym = grid.sym_len();
    for a in 0..n {
        for c in 0..nsym {
            let (i, j) = linalg::unpack_index(n, c);
            let mut v = d1(t.comp(c), lin, grid.stride(a), 0.5 / grid.spacing()[a]);
            for m in 0..n {
                v -= cache.gamma.value(lin, m, a, i) * t.value(lin, m, j)
                    + cache.gamma.value(lin, m, a, j) * t.value(lin, i, m);
            }
            out[a * nsym + c] = v;
        }
    }
}

fn covariant_gradient_tensor(t: &SymTensorField, cache: &GeometryCache) -> Vec<SymTensorField> {
    let grid = t.grid.clone();
    let n = grid.dim();
    let nsym = grid.sym_len();
    let mut fields = vec![SymTensorField::zeros(&grid); n];
    let mut idx = vec![0usize; n];
    let mut buf = vec![0.0; n * nsym];
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        covariant_gradient_at(t, cache, lin, &mut buf);
        for a in 0..n {
            for c in 0..nsym {
                fields[a].comp_mut(c)[lin] = buf[a * nsym + c];
            }
        }
    }
    fields
}

fn hess_sq(
    u: &FieldRef,
    cache: &GeometryCache,
    grad_tensor: Option<&[SymTensorField]>,
    lin: usize,
) -> f64 {
    let grid = cache.grid();
    let n = grid.dim();
    match u {
        FieldRef::Scalar(f) => {
            // Hess_ij = S_ij f - Gamma^c_ij D_c f
            let mut hess = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let s = if i == j {
                        (f.data[lin + grid.stride(i)] - 2.0 * f.data[lin]
                            + f.data[lin - grid.stride(i)])
                            / (grid.spacing()[i] * grid.spacing()[i])
                    } else {
                        (f.data[lin + grid.stride(i) + grid.stride(j)]
                            - f.data[lin + grid.stride(i) - grid.stride(j)]
                            - f.data[lin - grid.stride(i) + grid.stride(j)]
                            + f.data[lin - grid.stride(i) - grid.stride(j)])
                            * 0.25
                            / (grid.spacing()[i] * grid.spacing()[j])
                    };
                    let mut v = s;
                    for c in 0..n {
                        v -= cache.gamma.value(lin, c, i, j)
                            * d1(&f.data, lin, grid.stride(c), 0.5 / grid.spacing()[c]);
                    }
                    hess[i * n + j] = v;
                    hess[j * n + i] = v;
                }
            }
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for a in 0..n {
                        for b in 0..n {
                            s += cache.ginv.value(lin, i, a)
                                * cache.ginv.value(lin, j, b)
                                * hess[i * n + j]
                                * hess[a * n + b];
                        }
                    }
                }
            }
            s
        }
        FieldRef::Sym(_) => {
            let nsym = grid.sym_len();
            let grads = grad_tensor.expect("tensor Hessian needs the stored gradient");
            // nabla_b (nabla_a t)_ij with connection corrections on all slots
            let mut s = 0.0;
            let mut d2 = vec![0.0; n * n * nsym];
            for b in 0..n {
                for a in 0..n {
                    for c in 0..nsym {
                        let (i, j) = linalg::unpack_index(n, c);
                        let mut v = d1(
                            grads[a].comp(c),
                            lin,
                            grid.stride(b),
                            0.5 / grid.spacing()[b],
                        );
                        for m in 0..n {
                            v -= cache.gamma.value(lin, m, b, a)
                                * grads[m].comp(c)[lin]
                                + cache.gamma.value(lin, m, b, i) * grads[a].value(lin, m, j)
                                + cache.gamma.value(lin, m, b, j) * grads[a].value(lin, i, m);
                        }
                        d2[(b * n + a) * nsym + c] = v;
                    }
                }
            }
            for b1 in 0..n {
                for b2 in 0..n {
                    for a1 in 0..n {
                        for a2 in 0..n {
                            let gbb = cache.ginv.value(lin, b1, b2);
                            let gaa = cache.ginv.value(lin, a1, a2);
                            if gbb == 0.0 || gaa == 0.0 {
                                continue;
                            }
                            for i1 in 0..n {
                                for i2 in 0..n {
                                    for j1 in 0..n {
                                        for j2 in 0..n {
                                            s += gbb
                                                * gaa
                                                * cache.ginv.value(lin, i1, i2)
                                                * cache.ginv.value(lin, j1, j2)
                                                * d2[(b1 * n + a1) * nsym
                                                    + linalg::pack(n, i1, j1)]
                                                * d2[(b2 * n + a2) * nsym
                                                    + linalg::pack(n, i2, j2)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            s
        }
    }
}
