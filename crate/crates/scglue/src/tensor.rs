//! Grid Riemannian geometry: Christoffel symbols, Ricci and scalar
//! curvature, the scalar-curvature linearization `P`, and its formal
//! adjoint `Pstar f = Hess f - (Lap f) g - f Ric(g)`.
//!
//! Everything is second-order centered differencing on the padded box, with
//! all nested derivatives expanded into compact first/second-difference
//! stencils (margin 1). `linearized_scalar` is the *exact* Gateaux
//! derivative of the discrete curvature map, term by term, so that
//! `R(g + eps h) - R(g) - eps P h = O(eps^2)` holds down to roundoff on a
//! fixed grid. `adjoint_linearized` discretizes the covariant formula
//! directly; the two are formally L^2-adjoint and the pairing discrepancy
//! shrinks at second order.

use crate::error::{Error, Result};
use crate::grid::{ConnectionField, GridSpec, MetricField, ScalarField, SymTensorField};
use crate::linalg;

/// Condition-number guard for per-point metric inversion. Metrics in scope
/// are uniformly equivalent to the flat one, so anything this skewed is a
/// data error, not geometry.
pub const MAX_METRIC_CONDITION: f64 = 1e12;

/// First centered difference of one component plane.
#[inline]
fn d1(plane: &[f64], lin: usize, stride: usize, inv_2dx: f64) -> f64 {
    (plane[lin + stride] - plane[lin - stride]) * inv_2dx
}

/// Compact second difference along one axis.
#[inline]
fn d2_axis(plane: &[f64], lin: usize, stride: usize, inv_dx2: f64) -> f64 {
    (plane[lin + stride] - 2.0 * plane[lin] + plane[lin - stride]) * inv_dx2
}

/// Compact cross second difference.
#[inline]
fn d2_cross(plane: &[f64], lin: usize, sa: usize, sb: usize, inv_4dxdy: f64) -> f64 {
    (plane[lin + sa + sb] - plane[lin + sa - sb] - plane[lin - sa + sb] + plane[lin - sa - sb])
        * inv_4dxdy
}

/// Per-point scratch buffers for the curvature pipeline; allocate once and
/// reuse across grid points.
pub struct TensorWorkspace {
    n: usize,
    nsym: usize,
    // gathered data, all full row-major n x n
    g: Vec<f64>,
    ginv: Vec<f64>,
    dg: Vec<f64>,  // [a][i*n+j]
    sg: Vec<f64>,  // [pack(a,b)][i*n+j]
    // derived geometry
    a_low: Vec<f64>, // lowered Christoffel A_l(i,j) = d_i g_jl + d_j g_il - d_l g_ij
    gamma: Vec<f64>, // Gamma^k(i,j)
    t: Vec<f64>,     // t_j = Gamma^k_{kj}
    m: Vec<f64>,     // M_k = Ginv DG_k Ginv
    e: Vec<f64>,     // E_l = -sum_k M_k(k,l)
    ric: Vec<f64>,
    // variation side
    h: Vec<f64>,
    dh: Vec<f64>,
    sh: Vec<f64>,
    dginv: Vec<f64>,
    da_low: Vec<f64>,
    dgamma: Vec<f64>,
    dt: Vec<f64>,
    dm: Vec<f64>,
    de: Vec<f64>,
    dric: Vec<f64>,
    packed: Vec<f64>,
    scratch: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
}

impl TensorWorkspace {
    pub fn new(n: usize) -> Self {
        let nn = n * n;
        let nsym = linalg::sym_len(n);
        TensorWorkspace {
            n,
            nsym,
            g: vec![0.0; nn],
            ginv: vec![0.0; nn],
            dg: vec![0.0; n * nn],
            sg: vec![0.0; nsym * nn],
            a_low: vec![0.0; n * nn],
            gamma: vec![0.0; n * nn],
            t: vec![0.0; n],
            m: vec![0.0; n * nn],
            e: vec![0.0; n],
            ric: vec![0.0; nn],
            h: vec![0.0; nn],
            dh: vec![0.0; n * nn],
            sh: vec![0.0; nsym * nn],
            dginv: vec![0.0; nn],
            da_low: vec![0.0; n * nn],
            dgamma: vec![0.0; n * nn],
            dt: vec![0.0; n],
            dm: vec![0.0; n * nn],
            de: vec![0.0; n],
            dric: vec![0.0; nn],
            packed: vec![0.0; nsym],
            scratch: vec![0.0; 2 * nn + n],
            tmp: vec![0.0; nn],
            tmp2: vec![0.0; nn],
        }
    }
}

/// Gather a symmetric tensor field and its first and compact second
/// differences at `lin` into full-matrix buffers.
fn gather(
    field: &SymTensorField,
    lin: usize,
    val: &mut [f64],
    dval: &mut [f64],
    sval: &mut [f64],
) {
    let grid = &field.grid;
    let n = grid.dim();
    let nn = n * n;
    for c in 0..grid.sym_len() {
        let (i, j) = linalg::unpack_index(n, c);
        let plane = field.comp(c);
        let v = plane[lin];
        val[i * n + j] = v;
        val[j * n + i] = v;
        for a in 0..n {
            let da = d1(plane, lin, grid.stride(a), 0.5 / grid.spacing()[a]);
            dval[a * nn + i * n + j] = da;
            dval[a * nn + j * n + i] = da;
        }
        for a in 0..n {
            for b in a..n {
                let s = if a == b {
                    d2_axis(
                        plane,
                        lin,
                        grid.stride(a),
                        1.0 / (grid.spacing()[a] * grid.spacing()[a]),
                    )
                } else {
                    d2_cross(
                        plane,
                        lin,
                        grid.stride(a),
                        grid.stride(b),
                        0.25 / (grid.spacing()[a] * grid.spacing()[b]),
                    )
                };
                let pab = linalg::pack(n, a, b);
                sval[pab * nn + i * n + j] = s;
                sval[pab * nn + j * n + i] = s;
            }
        }
    }
}

fn invert_full_spd(n: usize, a: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<f64> {
    let (l, col) = scratch.split_at_mut(n * n);
    l.copy_from_slice(&a[..n * n]);
    linalg::cholesky(n, l)?;
    let mut det = 1.0;
    for i in 0..n {
        det *= l[i * n + i] * l[i * n + i];
    }
    for j in 0..n {
        let col = &mut col[..n];
        col.fill(0.0);
        col[j] = 1.0;
        linalg::cholesky_solve(n, l, col);
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
    // exact symmetry of the inverse
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(det)
}

fn frob(n: usize, a: &[f64]) -> f64 {
    a[..n * n].iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn invert_metric_at(ws: &mut TensorWorkspace, grid: &GridSpec, lin: usize) -> Result<f64> {
    let n = ws.n;
    let det = invert_full_spd(n, &ws.g, &mut ws.ginv, &mut ws.scratch).map_err(|_| {
        let mut idx = vec![0usize; n];
        grid.decompose(lin, &mut idx);
        Error::SingularMetric {
            index: idx,
            detail: "not positive-definite".into(),
        }
    })?;
    let cond = frob(n, &ws.g) * frob(n, &ws.ginv);
    if cond > MAX_METRIC_CONDITION {
        let mut idx = vec![0usize; n];
        grid.decompose(lin, &mut idx);
        return Err(Error::SingularMetric {
            index: idx,
            detail: format!("condition estimate {cond:.3e} exceeds {MAX_METRIC_CONDITION:.0e}"),
        });
    }
    Ok(det)
}

/// Base-point geometry at one grid point: fills ginv, A, Gamma, t, M, E.
/// Requires `ws.g`, `ws.dg` already gathered.
fn base_geometry(ws: &mut TensorWorkspace, grid: &GridSpec, lin: usize) -> Result<f64> {
    let n = ws.n;
    let nn = n * n;
    let det = invert_metric_at(ws, grid, lin)?;
    // A_l(i,j) = dg_i(j,l) + dg_j(i,l) - dg_l(i,j)
    for l in 0..n {
        for i in 0..n {
            for j in 0..n {
                ws.a_low[l * nn + i * n + j] = ws.dg[i * nn + j * n + l]
                    + ws.dg[j * nn + i * n + l]
                    - ws.dg[l * nn + i * n + j];
            }
        }
    }
    // Gamma^k(i,j) = 1/2 ginv(k,l) A_l(i,j)
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..n {
                    s += ws.ginv[k * n + l] * ws.a_low[l * nn + i * n + j];
                }
                ws.gamma[k * nn + i * n + j] = 0.5 * s;
            }
        }
    }
    // t_j = 1/2 <ginv, dg_j>
    for j in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            for l in 0..n {
                s += ws.ginv[k * n + l] * ws.dg[j * nn + k * n + l];
            }
        }
        ws.t[j] = 0.5 * s;
    }
    // M_k = ginv dg_k ginv ; E_l = -sum_k M_k(k,l)
    for k in 0..n {
        mat_sandwich(
            n,
            &ws.ginv,
            &ws.dg[k * nn..(k + 1) * nn],
            &ws.ginv,
            &mut ws.m[k * nn..(k + 1) * nn],
            &mut ws.tmp,
        );
    }
    for l in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            s += ws.m[k * nn + k * n + l];
        }
        ws.e[l] = -s;
    }
    Ok(det)
}

/// out = a * b * c for full n x n matrices.
fn mat_sandwich(n: usize, a: &[f64], b: &[f64], c: &[f64], out: &mut [f64], tmp: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            tmp[i * n + j] = s;
        }
    }
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += tmp[i * n + k] * c[k * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

#[inline]
fn full_dot(n: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..n * n {
        s += a[i] * b[i];
    }
    s
}

/// Ricci tensor at the point from the prepared base geometry; writes the
/// full matrix into `ws.ric`.
fn ricci_at(ws: &mut TensorWorkspace) {
    let n = ws.n;
    let nn = n * n;
    for i in 0..n {
        for j in i..n {
            // T1 = d_k Gamma^k_{ij}, expanded
            let mut t1 = 0.0;
            for l in 0..n {
                t1 += 0.5 * ws.e[l] * ws.a_low[l * nn + i * n + j];
            }
            for k in 0..n {
                for l in 0..n {
                    let ski = ws.sg[linalg::pack(n, k, i) * nn + j * n + l];
                    let skj = ws.sg[linalg::pack(n, k, j) * nn + i * n + l];
                    let skl = ws.sg[linalg::pack(n, k, l) * nn + i * n + j];
                    t1 += 0.5 * ws.ginv[k * n + l] * (ski + skj - skl);
                }
            }
            // T2 = sym d_i t_j
            let u_ij = dt_partial(ws, i, j);
            let u_ji = dt_partial(ws, j, i);
            let t2 = 0.5 * (u_ij + u_ji);
            // T3 = t_l Gamma^l_{ij}
            let mut t3 = 0.0;
            for l in 0..n {
                t3 += ws.t[l] * ws.gamma[l * nn + i * n + j];
            }
            // T4 = Gamma^k_{il} Gamma^l_{kj}
            let mut t4 = 0.0;
            for k in 0..n {
                for l in 0..n {
                    t4 += ws.gamma[k * nn + i * n + l] * ws.gamma[l * nn + k * n + j];
                }
            }
            let v = t1 - t2 + t3 - t4;
            ws.ric[i * n + j] = v;
            ws.ric[j * n + i] = v;
        }
    }
}

/// d_i t_j expanded into compact stencil data.
fn dt_partial(ws: &TensorWorkspace, i: usize, j: usize) -> f64 {
    let n = ws.n;
    let nn = n * n;
    let mi = &ws.m[i * nn..(i + 1) * nn];
    let dgj = &ws.dg[j * nn..(j + 1) * nn];
    let sij = &ws.sg[linalg::pack(n, i, j) * nn..linalg::pack(n, i, j) * nn + nn];
    -0.5 * full_dot(n, mi, dgj) + 0.5 * full_dot(n, &ws.ginv, sij)
}

fn scalar_from_ric(ws: &TensorWorkspace) -> f64 {
    full_dot(ws.n, &ws.ginv, &ws.ric)
}

/// Exact variation of the discrete curvature at the point. Requires base
/// geometry and `ws.h`, `ws.dh`, `ws.sh` gathered for the perturbation.
fn linearized_at(ws: &mut TensorWorkspace) -> f64 {
    let n = ws.n;
    let nn = n * n;
    // dginv = -ginv h ginv
    mat_sandwich(n, &ws.ginv, &ws.h, &ws.ginv, &mut ws.dginv, &mut ws.tmp);
    for v in ws.dginv.iter_mut() {
        *v = -*v;
    }
    // dA_l(ij)
    for l in 0..n {
        for i in 0..n {
            for j in 0..n {
                ws.da_low[l * nn + i * n + j] = ws.dh[i * nn + j * n + l]
                    + ws.dh[j * nn + i * n + l]
                    - ws.dh[l * nn + i * n + j];
            }
        }
    }
    // dGamma
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..n {
                    s += ws.dginv[k * n + l] * ws.a_low[l * nn + i * n + j]
                        + ws.ginv[k * n + l] * ws.da_low[l * nn + i * n + j];
                }
                ws.dgamma[k * nn + i * n + j] = 0.5 * s;
            }
        }
    }
    // dt_j
    for j in 0..n {
        ws.dt[j] = 0.5 * full_dot(n, &ws.dginv, &ws.dg[j * nn..(j + 1) * nn])
            + 0.5 * full_dot(n, &ws.ginv, &ws.dh[j * nn..(j + 1) * nn]);
    }
    // dM_k = dginv dg_k ginv + ginv dh_k ginv + ginv dg_k dginv
    for k in 0..n {
        let dgk = &ws.dg[k * nn..(k + 1) * nn];
        let dhk = &ws.dh[k * nn..(k + 1) * nn];
        mat_sandwich(n, &ws.dginv, dgk, &ws.ginv, &mut ws.tmp2, &mut ws.tmp);
        ws.dm[k * nn..(k + 1) * nn].copy_from_slice(&ws.tmp2);
        mat_sandwich(n, &ws.ginv, dhk, &ws.ginv, &mut ws.tmp2, &mut ws.tmp);
        for (dst, src) in ws.dm[k * nn..(k + 1) * nn].iter_mut().zip(&ws.tmp2) {
            *dst += *src;
        }
        mat_sandwich(n, &ws.ginv, dgk, &ws.dginv, &mut ws.tmp2, &mut ws.tmp);
        for (dst, src) in ws.dm[k * nn..(k + 1) * nn].iter_mut().zip(&ws.tmp2) {
            *dst += *src;
        }
    }
    for l in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            s += ws.dm[k * nn + k * n + l];
        }
        ws.de[l] = -s;
    }
    // dRic
    for i in 0..n {
        for j in i..n {
            let mut dt1 = 0.0;
            for l in 0..n {
                dt1 += 0.5
                    * (ws.de[l] * ws.a_low[l * nn + i * n + j]
                        + ws.e[l] * ws.da_low[l * nn + i * n + j]);
            }
            for k in 0..n {
                for l in 0..n {
                    let ski = ws.sg[linalg::pack(n, k, i) * nn + j * n + l];
                    let skj = ws.sg[linalg::pack(n, k, j) * nn + i * n + l];
                    let skl = ws.sg[linalg::pack(n, k, l) * nn + i * n + j];
                    let shki = ws.sh[linalg::pack(n, k, i) * nn + j * n + l];
                    let shkj = ws.sh[linalg::pack(n, k, j) * nn + i * n + l];
                    let shkl = ws.sh[linalg::pack(n, k, l) * nn + i * n + j];
                    dt1 += 0.5 * ws.dginv[k * n + l] * (ski + skj - skl)
                        + 0.5 * ws.ginv[k * n + l] * (shki + shkj - shkl);
                }
            }
            let du_ij = ddt_partial(ws, i, j);
            let du_ji = ddt_partial(ws, j, i);
            let dt2 = 0.5 * (du_ij + du_ji);
            let mut dt3 = 0.0;
            for l in 0..n {
                dt3 += ws.dt[l] * ws.gamma[l * nn + i * n + j]
                    + ws.t[l] * ws.dgamma[l * nn + i * n + j];
            }
            let mut dt4 = 0.0;
            for k in 0..n {
                for l in 0..n {
                    dt4 += ws.dgamma[k * nn + i * n + l] * ws.gamma[l * nn + k * n + j]
                        + ws.gamma[k * nn + i * n + l] * ws.dgamma[l * nn + k * n + j];
                }
            }
            let v = dt1 - dt2 + dt3 - dt4;
            ws.dric[i * n + j] = v;
            ws.dric[j * n + i] = v;
        }
    }
    full_dot(n, &ws.dginv, &ws.ric) + full_dot(n, &ws.ginv, &ws.dric)
}

/// Variation of d_i t_j.
fn ddt_partial(ws: &TensorWorkspace, i: usize, j: usize) -> f64 {
    let n = ws.n;
    let nn = n * n;
    let pij = linalg::pack(n, i, j);
    let mi = &ws.m[i * nn..(i + 1) * nn];
    let dmi = &ws.dm[i * nn..(i + 1) * nn];
    let dgj = &ws.dg[j * nn..(j + 1) * nn];
    let dhj = &ws.dh[j * nn..(j + 1) * nn];
    let sij = &ws.sg[pij * nn..pij * nn + nn];
    let shij = &ws.sh[pij * nn..pij * nn + nn];
    -0.5 * full_dot(n, dmi, dgj) - 0.5 * full_dot(n, mi, dhj)
        + 0.5 * full_dot(n, &ws.dginv, sij)
        + 0.5 * full_dot(n, &ws.ginv, shij)
}

/// Christoffel symbols of `g` by centered differences; valid on the
/// margin-1 interior, zero on the halo.
pub fn christoffel(g: &MetricField) -> Result<ConnectionField> {
    let grid = g.grid.clone();
    let n = grid.dim();
    let nn = n * n;
    let mut ws = TensorWorkspace::new(n);
    let mut out = ConnectionField::zeros(&grid);
    let mut idx = vec![0usize; n];
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        gather(g, lin, &mut ws.g, &mut ws.dg, &mut ws.sg);
        base_geometry(&mut ws, &grid, lin)?;
        for k in 0..n {
            for c in 0..grid.sym_len() {
                let (i, j) = linalg::unpack_index(n, c);
                out.comp_mut(k, c)[lin] = ws.gamma[k * nn + i * n + j];
            }
        }
    }
    Ok(out)
}

/// Ricci tensor of `g`; valid on the margin-1 interior.
pub fn ricci(g: &MetricField) -> Result<SymTensorField> {
    let grid = g.grid.clone();
    let n = grid.dim();
    let mut ws = TensorWorkspace::new(n);
    let mut out = SymTensorField::zeros(&grid);
    let mut idx = vec![0usize; n];
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        gather(g, lin, &mut ws.g, &mut ws.dg, &mut ws.sg);
        base_geometry(&mut ws, &grid, lin)?;
        ricci_at(&mut ws);
        for c in 0..grid.sym_len() {
            let (i, j) = linalg::unpack_index(n, c);
            out.comp_mut(c)[lin] = ws.ric[i * n + j];
        }
    }
    Ok(out)
}

/// Scalar curvature of `g`; valid on the margin-1 interior.
pub fn scalar_curvature(g: &MetricField) -> Result<ScalarField> {
    let grid = g.grid.clone();
    let n = grid.dim();
    let mut ws = TensorWorkspace::new(n);
    let mut out = ScalarField::zeros(&grid);
    let mut idx = vec![0usize; n];
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        gather(g, lin, &mut ws.g, &mut ws.dg, &mut ws.sg);
        base_geometry(&mut ws, &grid, lin)?;
        ricci_at(&mut ws);
        out.data[lin] = scalar_from_ric(&ws);
    }
    Ok(out)
}

/// Exact linearization `P_g h` of the discrete scalar-curvature map.
///
/// `h` must vanish on the margin-1 halo (nothing is extrapolated there);
/// a perturbation touching the halo is rejected.
pub fn linearized_scalar(g: &MetricField, h: &SymTensorField) -> Result<ScalarField> {
    crate::grid::require_same_grid(&g.grid, &h.grid, "linearized_scalar")?;
    check_support_clear_of_halo(h, 1)?;
    let grid = g.grid.clone();
    let n = grid.dim();
    let mut ws = TensorWorkspace::new(n);
    let mut out = ScalarField::zeros(&grid);
    let mut idx = vec![0usize; n];
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        gather(g, lin, &mut ws.g, &mut ws.dg, &mut ws.sg);
        // borrow juggling: gather h into its own buffers
        {
            let (hbuf, dhbuf, shbuf) = (&mut ws.h, &mut ws.dh, &mut ws.sh);
            gather_into(h, lin, hbuf, dhbuf, shbuf);
        }
        base_geometry(&mut ws, &grid, lin)?;
        ricci_at(&mut ws);
        out.data[lin] = linearized_at(&mut ws);
    }
    Ok(out)
}

fn gather_into(field: &SymTensorField, lin: usize, v: &mut [f64], dv: &mut [f64], sv: &mut [f64]) {
    gather(field, lin, v, dv, sv);
}

fn check_support_clear_of_halo(h: &SymTensorField, margin: usize) -> Result<()> {
    let grid = &h.grid;
    let mut idx = vec![0usize; grid.dim()];
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if grid.is_interior(&idx, margin) {
            continue;
        }
        for c in 0..grid.sym_len() {
            if h.comp(c)[lin] != 0.0 {
                return Err(Error::SupportTouchesHalo(format!(
                    "nonzero component {c} at {idx:?}"
                )));
            }
        }
    }
    Ok(())
}

/// Stencil row of the formal adjoint at one point: coefficients such that
/// `(Pstar f)_(ij) = sum_(ab) c2[(ij)][(ab)] S_ab f + sum_a c1[(ij)][a] D_a f
/// + c0[(ij)] f`. Needs base geometry plus Ricci in the workspace.
pub struct PstarRow {
    /// c2[(ij) * nsym + (ab)]
    pub c2: Vec<f64>,
    /// c1[(ij) * n + a]
    pub c1: Vec<f64>,
    /// c0[(ij)]
    pub c0: Vec<f64>,
}

impl PstarRow {
    pub fn new(n: usize) -> Self {
        let nsym = linalg::sym_len(n);
        PstarRow {
            c2: vec![0.0; nsym * nsym],
            c1: vec![0.0; nsym * n],
            c0: vec![0.0; nsym],
        }
    }
}

fn pstar_row_at(ws: &TensorWorkspace, row: &mut PstarRow) {
    let n = ws.n;
    let nn = n * n;
    let nsym = ws.nsym;
    // trace Christoffel with metric: trg_c = g^{ab} Gamma^c_{ab}
    let mut trg = vec![0.0; n];
    for c in 0..n {
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                s += ws.ginv[a * n + b] * ws.gamma[c * nn + a * n + b];
            }
        }
        trg[c] = s;
    }
    for cij in 0..nsym {
        let (i, j) = linalg::unpack_index(n, cij);
        let gij = ws.g[i * n + j];
        for cab in 0..nsym {
            let (a, b) = linalg::unpack_index(n, cab);
            let own = if cab == cij { 1.0 } else { 0.0 };
            let m = if a == b { 1.0 } else { 2.0 };
            row.c2[cij * nsym + cab] = own - gij * m * ws.ginv[a * n + b];
        }
        for c in 0..n {
            row.c1[cij * n + c] = -ws.gamma[c * nn + i * n + j] + gij * trg[c];
        }
        row.c0[cij] = -ws.ric[i * n + j];
    }
}

/// Formal adjoint of the linearization: `Pstar f = Hess f - (Lap f) g - f Ric`,
/// componentwise; valid on the margin-1 interior.
pub fn adjoint_linearized(g: &MetricField, f: &ScalarField) -> Result<SymTensorField> {
    crate::grid::require_same_grid(&g.grid, &f.grid, "adjoint_linearized")?;
    let grid = g.grid.clone();
    let n = grid.dim();
    let nsym = grid.sym_len();
    let mut ws = TensorWorkspace::new(n);
    let mut row = PstarRow::new(n);
    let mut out = SymTensorField::zeros(&grid);
    let mut idx = vec![0usize; n];
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if !grid.is_interior(&idx, 1) {
            continue;
        }
        gather(g, lin, &mut ws.g, &mut ws.dg, &mut ws.sg);
        base_geometry(&mut ws, &grid, lin)?;
        ricci_at(&mut ws);
        pstar_row_at(&ws, &mut row);
        for cij in 0..nsym {
            let mut v = row.c0[cij] * f.data[lin];
            for cab in 0..nsym {
                let (a, b) = linalg::unpack_index(n, cab);
                let s = if a == b {
                    d2_axis(
                        &f.data,
                        lin,
                        grid.stride(a),
                        1.0 / (grid.spacing()[a] * grid.spacing()[a]),
                    )
                } else {
                    d2_cross(
                        &f.data,
                        lin,
                        grid.stride(a),
                        grid.stride(b),
                        0.25 / (grid.spacing()[a] * grid.spacing()[b]),
                    )
                };
                v += row.c2[cij * nsym + cab] * s;
            }
            for a in 0..n {
                v += row.c1[cij * n + a] * d1(&f.data, lin, grid.stride(a), 0.5 / grid.spacing()[a]);
            }
            out.comp_mut(cij)[lin] = v;
        }
    }
    Ok(out)
}

/// Precomputed geometry of a fixed background metric, shared by the solver
/// and the weighted norms.
pub struct GeometryCache {
    pub metric: MetricField,
    pub ginv: SymTensorField,
    pub sqrt_det: ScalarField,
    /// margin-1 interior
    pub gamma: ConnectionField,
    /// margin-1 interior
    pub ricci: SymTensorField,
    /// `g^{ab} Gamma^c_{ab}` per axis c, margin-1 interior
    pub gamma_trace: Vec<ScalarField>,
}

impl GeometryCache {
    pub fn new(g: &MetricField) -> Result<Self> {
        let grid = g.grid.clone();
        let n = grid.dim();
        let nn = n * n;
        let nsym = grid.sym_len();
        let mut ws = TensorWorkspace::new(n);
        let mut ginv = SymTensorField::zeros(&grid);
        let mut sqrt_det = ScalarField::zeros(&grid);
        let mut gamma = ConnectionField::zeros(&grid);
        let mut ric = SymTensorField::zeros(&grid);
        let mut gamma_trace = vec![ScalarField::zeros(&grid); n];
        let mut idx = vec![0usize; n];
        for lin in 0..grid.len() {
            grid.decompose(lin, &mut idx);
            if grid.is_interior(&idx, 1) {
                gather(g, lin, &mut ws.g, &mut ws.dg, &mut ws.sg);
                let det = base_geometry(&mut ws, &grid, lin)?;
                ricci_at(&mut ws);
                sqrt_det.data[lin] = det.sqrt();
                for c in 0..nsym {
                    let (i, j) = linalg::unpack_index(n, c);
                    ginv.comp_mut(c)[lin] = ws.ginv[i * n + j];
                    ric.comp_mut(c)[lin] = ws.ric[i * n + j];
                    for k in 0..n {
                        gamma.comp_mut(k, c)[lin] = ws.gamma[k * nn + i * n + j];
                    }
                }
                for c in 0..n {
                    let mut s = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            s += ws.ginv[a * n + b] * ws.gamma[c * nn + a * n + b];
                        }
                    }
                    gamma_trace[c].data[lin] = s;
                }
            } else {
                // halo: pointwise-only quantities are still defined
                g.at(lin, &mut ws.packed);
                linalg::unpack(n, &ws.packed, &mut ws.g);
                if invert_metric_at(&mut ws, &grid, lin).is_ok() {
                    let det = {
                        let mut l = ws.tmp.clone();
                        l.copy_from_slice(&ws.g);
                        if linalg::cholesky(n, &mut l).is_ok() {
                            let mut d = 1.0;
                            for i in 0..n {
                                d *= l[i * n + i] * l[i * n + i];
                            }
                            d
                        } else {
                            0.0
                        }
                    };
                    sqrt_det.data[lin] = det.sqrt();
                    for c in 0..nsym {
                        let (i, j) = linalg::unpack_index(n, c);
                        ginv.comp_mut(c)[lin] = ws.ginv[i * n + j];
                    }
                }
            }
        }
        Ok(GeometryCache {
            metric: g.clone(),
            ginv,
            sqrt_det,
            gamma,
            ricci: ric,
            gamma_trace,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.metric.grid
    }

    /// Fill the adjoint stencil row at a (margin-1 interior) point.
    pub fn pstar_row(&self, lin: usize, row: &mut PstarRow) {
        let grid = self.grid();
        let n = grid.dim();
        let nsym = grid.sym_len();
        for cij in 0..nsym {
            let gij = self.metric.comp(cij)[lin];
            for cab in 0..nsym {
                let (a, b) = linalg::unpack_index(n, cab);
                let own = if cab == cij { 1.0 } else { 0.0 };
                let m = if a == b { 1.0 } else { 2.0 };
                row.c2[cij * nsym + cab] = own - gij * m * self.ginv.comp(cab)[lin];
            }
            for c in 0..n {
                row.c1[cij * n + c] =
                    -self.gamma.comp(c, cij)[lin] + gij * self.gamma_trace[c].data[lin];
            }
            row.c0[cij] = -self.ricci.comp(cij)[lin];
        }
    }

    /// Apply the adjoint row to a scalar field at a point.
    pub fn apply_pstar_at(&self, f: &ScalarField, lin: usize, row: &PstarRow, out: &mut [f64]) {
        let grid = self.grid();
        let n = grid.dim();
        let nsym = grid.sym_len();
        for cij in 0..nsym {
            let mut v = row.c0[cij] * f.data[lin];
            for cab in 0..nsym {
                let (a, b) = linalg::unpack_index(n, cab);
                let s = if a == b {
                    d2_axis(
                        &f.data,
                        lin,
                        grid.stride(a),
                        1.0 / (grid.spacing()[a] * grid.spacing()[a]),
                    )
                } else {
                    d2_cross(
                        &f.data,
                        lin,
                        grid.stride(a),
                        grid.stride(b),
                        0.25 / (grid.spacing()[a] * grid.spacing()[b]),
                    )
                };
                v += row.c2[cij * nsym + cab] * s;
            }
            for a in 0..n {
                v += row.c1[cij * n + a]
                    * d1(&f.data, lin, grid.stride(a), 0.5 / grid.spacing()[a]);
            }
            out[cij] = v;
        }
    }
}
