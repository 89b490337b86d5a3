//! Scale-invariant gluing domains and the diffeomorphisms applied to them.
//!
//! A domain is an open region whose boundary has two connected components
//! and which, outside the ball of radius `r0`, is the cone over its trace on
//! the sphere `S(0, r0)`. The workhorse is the cone shell between two coaxial
//! cones; a generic kind extends a signed level function on the unit sphere
//! by homogeneity (a thickened "tennis-ball seam" sampler is built in).
//!
//! The defining function for a cone shell is `x(p) = r(p) * s(theta)` with
//! `s` vanishing linearly at both apertures and equal to `sin(angular
//! distance)` near them, so `x` is exactly the Euclidean distance to the
//! boundary inside the collar `x < c r` and exactly homogeneous of degree
//! one away from the origin. For the generic kind `x` is a valid defining
//! function with the same homogeneity, but matches the distance near the
//! boundary only to first order.

use crate::error::{Error, Result};
use crate::grid::{MetricField, SymTensorField};
use crate::linalg;
use crate::smooth;
use serde::{Deserialize, Serialize};

/// Smooth radius: coincides with |p| for |p| >= 1, stays in [1/2, 1] inside
/// the unit ball, monotone in |p|.
pub fn radius(p: &[f64]) -> f64 {
    let t = norm(p);
    radius_of_norm(t)
}

pub fn radius_of_norm(t: f64) -> f64 {
    if t >= 1.0 {
        t
    } else {
        (t * t + 0.25 * (1.0 - smooth::step(t))).sqrt()
    }
}

/// Gradient of the smooth radius.
pub fn radius_gradient(p: &[f64]) -> Vec<f64> {
    let t = norm(p);
    if t >= 1.0 {
        return p.iter().map(|v| v / t).collect();
    }
    if t == 0.0 {
        return vec![0.0; p.len()];
    }
    let f = radius_of_norm(t);
    let dfdt = (2.0 * t - 0.25 * smooth::step_deriv(t)) / (2.0 * f);
    p.iter().map(|v| dfdt * v / t).collect()
}

fn norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which side of the domain a point outside it belongs to. The `A` side is
/// the boundary component where the interpolation cutoff equals one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// beyond the A component (cone shell: inside the inner cone)
    A,
    /// beyond the B component (cone shell: outside the outer cone)
    B,
    Inside,
}

/// Built-in samplers for generic scale-invariant domains: a smooth level
/// function on the unit sphere whose thickened zero set is the domain trace.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SphereSampler {
    /// Thickening of the tennis-ball seam `z = amp (x^2 - y^2)` on the
    /// sphere; the domain trace is `|z - amp (x^2 - y^2)| < half_width`.
    TennisBall { amp: f64, half_width: f64 },
}

impl SphereSampler {
    fn level(&self, u: &[f64]) -> f64 {
        match self {
            SphereSampler::TennisBall { amp, .. } => u[2] - amp * (u[0] * u[0] - u[1] * u[1]),
        }
    }

    fn half_width(&self) -> f64 {
        match self {
            SphereSampler::TennisBall { half_width, .. } => *half_width,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainKind {
    ConeShell {
        theta1: f64,
        theta2: f64,
        #[serde(default = "default_axis")]
        axis: Vec<f64>,
        #[serde(default)]
        apex: Option<Vec<f64>>,
    },
    Generic { sampler: SphereSampler },
}

fn default_axis() -> Vec<f64> {
    vec![0.0, 0.0, 1.0]
}

/// A gluing domain: kind plus the radius `r0` past which it is exactly
/// scale-invariant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(flatten)]
    pub kind: DomainKind,
    #[serde(default = "default_r0")]
    pub r0: f64,
}

fn default_r0() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn cone_shell(theta1: f64, theta2: f64) -> Result<Self> {
        let d = DomainSpec {
            kind: DomainKind::ConeShell {
                theta1,
                theta2,
                axis: default_axis(),
                apex: None,
            },
            r0: 1.0,
        };
        d.validate(3)?;
        Ok(d)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.r0 < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "r0 = {} must be >= 1",
                self.r0
            )));
        }
        match &self.kind {
            DomainKind::ConeShell {
                theta1,
                theta2,
                axis,
                apex,
            } => {
                if !(0.0 < *theta1 && theta1 < theta2 && *theta2 < std::f64::consts::PI) {
                    return Err(Error::InvalidParameter(format!(
                        "cone shell needs 0 < theta1 < theta2 < pi, got ({theta1}, {theta2})"
                    )));
                }
                if axis.len() != dim || norm(axis) == 0.0 {
                    return Err(Error::InvalidParameter(
                        "cone axis must be a nonzero vector of the grid dimension".into(),
                    ));
                }
                if let Some(a) = apex {
                    if a.len() != dim {
                        return Err(Error::InvalidParameter(
                            "cone apex must match the grid dimension".into(),
                        ));
                    }
                }
            }
            DomainKind::Generic { sampler } => {
                if dim != 3 {
                    return Err(Error::Unsupported(
                        "generic scale-invariant domains are implemented for n = 3".into(),
                    ));
                }
                if sampler.half_width() <= 0.0 {
                    return Err(Error::InvalidParameter(
                        "sampler half_width must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Ratio below which `x` equals the distance to the boundary (cone
    /// shells; for generic domains the same window is used as the cutoff
    /// transition region).
    pub fn collar_ratio(&self) -> f64 {
        match &self.kind {
            DomainKind::ConeShell { theta1, theta2, .. } => ((theta2 - theta1) / 3.0).sin(),
            DomainKind::Generic { sampler } => sampler.half_width() / 3.0,
        }
    }

    fn apex(&self) -> Option<&[f64]> {
        match &self.kind {
            DomainKind::ConeShell { apex, .. } => apex.as_deref(),
            DomainKind::Generic { .. } => None,
        }
    }

    /// Polar angle about the cone axis, measured from the apex, plus the
    /// distance to the apex.
    fn cone_angle(&self, p: &[f64]) -> Option<(f64, f64)> {
        if let DomainKind::ConeShell { axis, apex, .. } = &self.kind {
            let v: Vec<f64> = match apex {
                Some(a) => p.iter().zip(a).map(|(x, y)| x - y).collect(),
                None => p.to_vec(),
            };
            let t = norm(&v);
            if t == 0.0 {
                return None;
            }
            let an = norm(axis);
            let c = (dot(&v, axis) / (t * an)).clamp(-1.0, 1.0);
            Some((c.acos(), t))
        } else {
            None
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        match &self.kind {
            DomainKind::ConeShell { theta1, theta2, .. } => match self.cone_angle(p) {
                Some((theta, _)) => *theta1 < theta && theta < *theta2,
                None => false,
            },
            DomainKind::Generic { sampler } => {
                let t = norm(p);
                if t == 0.0 {
                    return false;
                }
                let u: Vec<f64> = p.iter().map(|v| v / t).collect();
                sampler.level(&u).abs() < sampler.half_width()
            }
        }
    }

    /// Transverse progress coordinate from the A component (0) to the B
    /// component (1); homogeneous of degree zero.
    pub fn transverse(&self, p: &[f64]) -> Option<f64> {
        match &self.kind {
            DomainKind::ConeShell { theta1, theta2, .. } => {
                let (theta, _) = self.cone_angle(p)?;
                Some((theta - theta1) / (theta2 - theta1))
            }
            DomainKind::Generic { sampler } => {
                let t = norm(p);
                if t == 0.0 {
                    return None;
                }
                let u: Vec<f64> = p.iter().map(|v| v / t).collect();
                let w = sampler.half_width();
                Some((w - sampler.level(&u)) / (2.0 * w))
            }
        }
    }

    /// Which input metric governs a point outside the domain.
    pub fn side(&self, p: &[f64]) -> Side {
        match self.transverse(p) {
            Some(t) if t <= 0.0 => Side::A,
            Some(t) if t >= 1.0 => Side::B,
            Some(_) => Side::Inside,
            None => Side::A,
        }
    }

    /// The defining function: zero exactly on the boundary, positive inside,
    /// homogeneous of degree one outside `B(0, r0)` (for apex at the
    /// origin), equal to the boundary distance in the collar for cone
    /// shells. Points outside the closure are an error.
    pub fn defining_function(&self, p: &[f64]) -> Result<f64> {
        match &self.kind {
            DomainKind::ConeShell { theta1, theta2, .. } => {
                let (theta, _) = self
                    .cone_angle(p)
                    .ok_or_else(|| Error::OutsideDomain(p.to_vec()))?;
                // closure membership up to acos roundoff
                let tol = 1e-10;
                if theta < *theta1 - tol || theta > *theta2 + tol {
                    return Err(Error::OutsideDomain(p.to_vec()));
                }
                let rc = self.centered_radius(p);
                Ok(rc * cone_profile(*theta1, *theta2, theta.clamp(*theta1, *theta2)))
            }
            DomainKind::Generic { sampler } => {
                let t = norm(p);
                if t == 0.0 {
                    return Err(Error::OutsideDomain(p.to_vec()));
                }
                let u: Vec<f64> = p.iter().map(|v| v / t).collect();
                let z = sampler.level(&u);
                let w = sampler.half_width();
                if z.abs() > w {
                    return Err(Error::OutsideDomain(p.to_vec()));
                }
                Ok(radius(p) * generic_profile(w, z))
            }
        }
    }

    /// Defining function clamped to zero outside; total on all points.
    pub fn defining_or_zero(&self, p: &[f64]) -> f64 {
        self.defining_function(p).unwrap_or(0.0)
    }

    /// Radius measured from the apex when there is one, otherwise from the
    /// origin; smooth-capped near the base point.
    pub fn centered_radius(&self, p: &[f64]) -> f64 {
        match self.apex() {
            Some(a) => {
                let v: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
                radius(&v)
            }
            None => radius(p),
        }
    }

    /// Analytic gradient of the defining function (cone shells); centered
    /// differences elsewhere.
    pub fn grad_defining(&self, p: &[f64]) -> Vec<f64> {
        match &self.kind {
            DomainKind::ConeShell {
                theta1,
                theta2,
                axis,
                apex,
            } => {
                let v: Vec<f64> = match apex {
                    Some(a) => p.iter().zip(a).map(|(x, y)| x - y).collect(),
                    None => p.to_vec(),
                };
                let t = norm(&v);
                let an = norm(axis);
                let ah: Vec<f64> = axis.iter().map(|x| x / an).collect();
                let c = (dot(&v, &ah) / t).clamp(-1.0, 1.0);
                let theta = c.acos();
                let s = cone_profile(*theta1, *theta2, theta);
                let sp = cone_profile_deriv(*theta1, *theta2, theta);
                let rc = radius_of_norm(t);
                let drdt = if t >= 1.0 {
                    1.0
                } else {
                    (2.0 * t - 0.25 * smooth::step_deriv(t)) / (2.0 * rc)
                };
                let sin_t = theta.sin().max(1e-300);
                // grad theta = (cos(theta) v/t - ahat) / (t sin(theta))
                (0..p.len())
                    .map(|i| {
                        let grad_r = drdt * v[i] / t;
                        let grad_theta = (c * v[i] / t - ah[i]) / (t * sin_t);
                        s * grad_r + rc * sp * grad_theta
                    })
                    .collect()
            }
            _ => {
                let h = 1e-6 * (1.0 + norm(p));
                (0..p.len())
                    .map(|i| {
                        let mut pp = p.to_vec();
                        let mut pm = p.to_vec();
                        pp[i] += h;
                        pm[i] -= h;
                        (self.defining_or_zero(&pp) - self.defining_or_zero(&pm)) / (2.0 * h)
                    })
                    .collect()
            }
        }
    }

    /// Connectivity of the domain trace on the sphere `S(0, r0)`, sampled:
    /// returns (components of the trace, components of its complement).
    /// A cone shell has (1, 2); the two-component complement is the sampled
    /// stand-in for "the boundary has two circles". n = 3 only.
    pub fn sphere_topology(&self, samples: usize) -> Result<(usize, usize)> {
        let nt = samples;
        let np = 2 * samples;
        let mut inside = vec![false; nt * np];
        for it in 0..nt {
            // cell-centered in theta to avoid the poles
            let theta = std::f64::consts::PI * (it as f64 + 0.5) / nt as f64;
            for ip in 0..np {
                let phi = 2.0 * std::f64::consts::PI * ip as f64 / np as f64;
                let p = [
                    self.r0 * theta.sin() * phi.cos(),
                    self.r0 * theta.sin() * phi.sin(),
                    self.r0 * theta.cos(),
                ];
                inside[it * np + ip] = self.contains(&p);
            }
        }
        let comp_in = count_components(&inside, nt, np, true);
        let comp_out = count_components(&inside, nt, np, false);
        Ok((comp_in, comp_out))
    }
}

/// Flood-fill component count on the (theta, phi) sample grid, periodic in
/// phi. Pole rows additionally wrap to the antipodal cell; adequate for the
/// smoke-test topology check.
fn count_components(inside: &[bool], nt: usize, np: usize, value: bool) -> usize {
    let mut seen = vec![false; nt * np];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..nt * np {
        if seen[start] || inside[start] != value {
            continue;
        }
        count += 1;
        stack.push(start);
        seen[start] = true;
        while let Some(cell) = stack.pop() {
            let it = cell / np;
            let ip = cell % np;
            let mut push = |jt: usize, jp: usize| {
                let c = jt * np + jp;
                if !seen[c] && inside[c] == value {
                    seen[c] = true;
                    stack.push(c);
                }
            };
            if it > 0 {
                push(it - 1, ip);
            }
            if it + 1 < nt {
                push(it + 1, ip);
            }
            push(it, (ip + 1) % np);
            push(it, (ip + np - 1) % np);
            // pole rows wrap to the antipodal cell
            if it == 0 {
                push(0, (ip + np / 2) % np);
            }
            if it == nt - 1 {
                push(nt - 1, (ip + np / 2) % np);
            }
        }
    }
    count
}

/// Angular profile of the cone-shell defining function: a smooth blend of
/// the exact distances to the two cones, equal to each of them in its third
/// of the aperture window.
fn cone_profile(theta1: f64, theta2: f64, theta: f64) -> f64 {
    let tau = (theta - theta1) / (theta2 - theta1);
    if !(0.0..=1.0).contains(&tau) {
        return 0.0;
    }
    let b = 1.0 - smooth::step_between(tau, 1.0 / 3.0, 2.0 / 3.0);
    b * (theta - theta1).sin() + (1.0 - b) * (theta2 - theta).sin()
}

fn cone_profile_deriv(theta1: f64, theta2: f64, theta: f64) -> f64 {
    let span = theta2 - theta1;
    let tau = (theta - theta1) / span;
    if !(0.0..=1.0).contains(&tau) {
        return 0.0;
    }
    let b = 1.0 - smooth::step_between(tau, 1.0 / 3.0, 2.0 / 3.0);
    let db = -smooth::step_between_deriv(tau, 1.0 / 3.0, 2.0 / 3.0) / span;
    db * ((theta - theta1).sin() - (theta2 - theta).sin()) + b * (theta - theta1).cos()
        - (1.0 - b) * (theta2 - theta).cos()
}

fn generic_profile(w: f64, z: f64) -> f64 {
    let tau = (w - z) / (2.0 * w);
    let b = 1.0 - smooth::step_between(tau, 1.0 / 3.0, 2.0 / 3.0);
    b * (w - z) + (1.0 - b) * (z + w)
}

/// Diffeomorphisms of the ambient space.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffeoSpec {
    Identity,
    /// `(r, theta, phi) -> (r, theta, phi + alpha ln r)` about `axis`;
    /// defined for |p| >= 1.
    LogRotation {
        alpha: f64,
        #[serde(default = "default_axis")]
        axis: Vec<f64>,
    },
    /// Rotation by `alpha ln sqrt(rho^2 + 1)` with `rho` the distance to the
    /// axis line; smooth on all of space.
    RegularizedLogRotation {
        alpha: f64,
        #[serde(default = "default_axis")]
        axis: Vec<f64>,
    },
    Composition { maps: Vec<DiffeoSpec> },
}

impl DiffeoSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            DiffeoSpec::Identity => Ok(()),
            DiffeoSpec::LogRotation { alpha, axis }
            | DiffeoSpec::RegularizedLogRotation { alpha, axis } => {
                if dim != 3 {
                    return Err(Error::Unsupported(
                        "log rotations are implemented for n = 3".into(),
                    ));
                }
                if alpha.abs() >= 1.0 {
                    return Err(Error::InvalidParameter(format!(
                        "|alpha| = {} must be < 1 for uniform equivalence",
                        alpha.abs()
                    )));
                }
                if axis.len() != 3 || norm(axis) == 0.0 {
                    return Err(Error::InvalidParameter(
                        "rotation axis must be nonzero".into(),
                    ));
                }
                Ok(())
            }
            DiffeoSpec::Composition { maps } => {
                for m in maps {
                    m.validate(dim)?;
                }
                Ok(())
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            DiffeoSpec::Identity => true,
            DiffeoSpec::Composition { maps } => maps.iter().all(|m| m.is_identity()),
            _ => false,
        }
    }

    pub fn inverse(&self) -> DiffeoSpec {
        match self {
            DiffeoSpec::Identity => DiffeoSpec::Identity,
            DiffeoSpec::LogRotation { alpha, axis } => DiffeoSpec::LogRotation {
                alpha: -alpha,
                axis: axis.clone(),
            },
            DiffeoSpec::RegularizedLogRotation { alpha, axis } => {
                DiffeoSpec::RegularizedLogRotation {
                    alpha: -alpha,
                    axis: axis.clone(),
                }
            }
            DiffeoSpec::Composition { maps } => DiffeoSpec::Composition {
                maps: maps.iter().rev().map(|m| m.inverse()).collect(),
            },
        }
    }

    /// Apply the map. Pure log rotations are undefined strictly inside the
    /// unit ball.
    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        match self {
            DiffeoSpec::Identity => Ok(p.to_vec()),
            DiffeoSpec::LogRotation { alpha, axis } => {
                let r = norm(p);
                if r < 1.0 {
                    return Err(Error::OutOfChart(r));
                }
                Ok(rotate(axis, alpha * r.ln(), p))
            }
            DiffeoSpec::RegularizedLogRotation { alpha, axis } => {
                let rho2 = axis_dist2(axis, p);
                Ok(rotate(axis, 0.5 * alpha * (rho2 + 1.0).ln(), p))
            }
            DiffeoSpec::Composition { maps } => {
                let mut q = p.to_vec();
                for m in maps {
                    q = m.apply(&q)?;
                }
                Ok(q)
            }
        }
    }

    /// Analytic Jacobian, row-major: `jac[a * n + i] = d Psi^a / d p^i`.
    pub fn jacobian(&self, p: &[f64]) -> Result<Vec<f64>> {
        let n = p.len();
        match self {
            DiffeoSpec::Identity => Ok(identity_mat(n)),
            DiffeoSpec::LogRotation { alpha, axis } => {
                let r = norm(p);
                if r < 1.0 {
                    return Err(Error::OutOfChart(r));
                }
                let image = rotate(axis, alpha * r.ln(), p);
                let gen = cross_unit(axis, &image);
                let mut jac = rotation_matrix(axis, alpha * r.ln());
                for a in 0..3 {
                    for i in 0..3 {
                        jac[a * 3 + i] += gen[a] * alpha * p[i] / (r * r);
                    }
                }
                Ok(jac)
            }
            DiffeoSpec::RegularizedLogRotation { alpha, axis } => {
                let rho2 = axis_dist2(axis, p);
                let t = 0.5 * alpha * (rho2 + 1.0).ln();
                let image = rotate(axis, t, p);
                let gen = cross_unit(axis, &image);
                let perp = axis_perp(axis, p);
                let mut jac = rotation_matrix(axis, t);
                for a in 0..3 {
                    for i in 0..3 {
                        jac[a * 3 + i] += gen[a] * alpha * perp[i] / (rho2 + 1.0);
                    }
                }
                Ok(jac)
            }
            DiffeoSpec::Composition { maps } => {
                let mut q = p.to_vec();
                let mut jac = identity_mat(n);
                for m in maps {
                    let jm = m.jacobian(&q)?;
                    let mut out = vec![0.0; n * n];
                    for a in 0..n {
                        for i in 0..n {
                            let mut s = 0.0;
                            for b in 0..n {
                                s += jm[a * n + b] * jac[b * n + i];
                            }
                            out[a * n + i] = s;
                        }
                    }
                    jac = out;
                    q = m.apply(&q)?;
                }
                Ok(jac)
            }
        }
    }
}

fn identity_mat(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn unit_axis(axis: &[f64]) -> [f64; 3] {
    let an = norm(axis);
    [axis[0] / an, axis[1] / an, axis[2] / an]
}

fn rotate(axis: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    let a = unit_axis(axis);
    let (s, c) = t.sin_cos();
    let av = [
        a[1] * v[2] - a[2] * v[1],
        a[2] * v[0] - a[0] * v[2],
        a[0] * v[1] - a[1] * v[0],
    ];
    let ad = a[0] * v[0] + a[1] * v[1] + a[2] * v[2];
    (0..3)
        .map(|i| v[i] * c + av[i] * s + a[i] * ad * (1.0 - c))
        .collect()
}

fn rotation_matrix(axis: &[f64], t: f64) -> Vec<f64> {
    let mut m = vec![0.0; 9];
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let col = rotate(axis, t, &e);
        for a in 0..3 {
            m[a * 3 + i] = col[a];
        }
    }
    m
}

fn cross_unit(axis: &[f64], v: &[f64]) -> [f64; 3] {
    let a = unit_axis(axis);
    [
        a[1] * v[2] - a[2] * v[1],
        a[2] * v[0] - a[0] * v[2],
        a[0] * v[1] - a[1] * v[0],
    ]
}

fn axis_perp(axis: &[f64], p: &[f64]) -> Vec<f64> {
    let a = unit_axis(axis);
    let ad = a[0] * p[0] + a[1] * p[1] + a[2] * p[2];
    (0..3).map(|i| p[i] - ad * a[i]).collect()
}

fn axis_dist2(axis: &[f64], p: &[f64]) -> f64 {
    let perp = axis_perp(axis, p);
    perp.iter().map(|v| v * v).sum()
}

/// Pull back a grid-sampled metric: `(Psi^* g)_ij(p) = J^a_i J^b_j
/// g_ab(Psi(p))` with trilinear sampling at the image point. Points whose
/// image leaves the grid are left flat and reported.
pub fn pullback_metric(psi: &DiffeoSpec, g: &MetricField) -> Result<(MetricField, Vec<usize>)> {
    let grid = g.grid.clone();
    let n = grid.dim();
    let nsym = grid.sym_len();
    let npts = grid.len();
    let mut out = SymTensorField::zeros(&grid);
    let mut masked = Vec::new();
    let mut idx = vec![0usize; n];
    let mut comps = vec![0.0; nsym];
    let mut gfull = vec![0.0; n * n];
    for lin in 0..npts {
        grid.decompose(lin, &mut idx);
        let p = grid.position(&idx);
        let image = match psi.apply(&p) {
            Ok(q) => q,
            Err(_) => {
                set_flat(&mut out, lin, n);
                masked.push(lin);
                continue;
            }
        };
        if !g.sample(&image, &mut comps) {
            set_flat(&mut out, lin, n);
            masked.push(lin);
            continue;
        }
        let jac = psi.jacobian(&p)?;
        linalg::unpack(n, &comps, &mut gfull);
        for c in 0..nsym {
            let (i, j) = linalg::unpack_index(n, c);
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    s += jac[a * n + i] * jac[b * n + j] * gfull[a * n + b];
                }
            }
            out.comp_mut(c)[lin] = s;
        }
    }
    Ok((out, masked))
}

fn set_flat(out: &mut SymTensorField, lin: usize, n: usize) {
    for c in 0..linalg::sym_len(n) {
        let (i, j) = linalg::unpack_index(n, c);
        out.comp_mut(c)[lin] = if i == j { 1.0 } else { 0.0 };
    }
}

/// Extreme generalized eigenvalues of `g1` against `g2` over the margin
/// interior: the uniform-equivalence bracket.
pub fn uniform_equivalence_bounds(
    g1: &MetricField,
    g2: &MetricField,
    margin: usize,
) -> Result<(f64, f64)> {
    crate::grid::require_same_grid(&g1.grid, &g2.grid, "uniform_equivalence_bounds")?;
    let grid = &g1.grid;
    let n = grid.dim();
    let nsym = grid.sym_len();
    let mut a = vec![0.0; nsym];
    let mut b = vec![0.0; nsym];
    let mut scratch = vec![0.0; 4 * n * n + n];
    let mut idx = vec![0usize; n];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for lin in 0..grid.len() {
        grid.decompose(lin, &mut idx);
        if !grid.is_interior(&idx, margin) {
            continue;
        }
        g1.at(lin, &mut a);
        g2.at(lin, &mut b);
        let (l, h) = linalg::generalized_eig_bounds(n, &a, &b, &mut scratch)?;
        lo = lo.min(l);
        hi = hi.max(h);
    }
    if !lo.is_finite() {
        return Err(Error::EmptyActiveSet(
            "no interior points for equivalence bounds".into(),
        ));
    }
    Ok((lo, hi))
}

/// Pointwise generalized eigenvalue bounds of an analytic pullback of the
/// flat metric against the flat metric, over a set of sample points.
pub fn pullback_flat_bounds(psi: &DiffeoSpec, points: &[Vec<f64>]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let n = p.len();
        let jac = psi.jacobian(p)?;
        let mut packed = vec![0.0; linalg::sym_len(n)];
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for a in 0..n {
                    s += jac[a * n + i] * jac[a * n + j];
                }
                packed[linalg::pack(n, i, j)] = s;
            }
        }
        let mut ev = vec![0.0; n];
        let mut scratch = vec![0.0; n * n];
        linalg::sym_eigenvalues(n, &packed, &mut ev, &mut scratch);
        lo = lo.min(ev[0]);
        hi = hi.max(ev[n - 1]);
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn radius_cap_properties() {
        assert_eq!(radius(&[5.0, 0.0, 0.0]), 5.0);
        assert_eq!(radius(&[0.0, 1.0, 0.0]), 1.0);
        let r0 = radius(&[0.0, 0.0, 0.0]);
        assert!((0.5..=1.0).contains(&r0), "r(0) = {r0}");
        // monotone in |p|
        let mut prev = 0.0;
        for i in 0..=200 {
            let t = 1.5 * i as f64 / 200.0;
            let r = radius_of_norm(t);
            assert!(r >= prev, "not monotone at t = {t}");
            assert!(r >= 0.5);
            prev = r;
        }
    }

    #[test]
    fn radius_gradient_matches_fd() {
        for &p in &[[0.3, 0.2, -0.4], [0.9, 0.1, 0.0], [2.0, -1.0, 0.5]] {
            let g = radius_gradient(&p);
            for i in 0..3 {
                let h = 1e-6;
                let mut pp = p;
                let mut pm = p;
                pp[i] += h;
                pm[i] -= h;
                let fd = (radius(&pp) - radius(&pm)) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-6, "p = {p:?}, axis {i}");
            }
        }
    }

    #[test]
    fn defining_function_vanishes_on_boundary_and_is_positive_inside() {
        let d = DomainSpec::cone_shell(PI / 6.0, PI / 3.0).unwrap();
        // boundary point on the inner cone
        let th = PI / 6.0;
        let p = [3.0 * th.sin(), 0.0, 3.0 * th.cos()];
        let x = d.defining_function(&p).unwrap();
        assert!(x.abs() < 1e-14);
        // interior
        let th = PI / 4.0;
        let q = [3.0 * th.sin(), 0.0, 3.0 * th.cos()];
        assert!(d.defining_function(&q).unwrap() > 0.0);
        // outside
        let th = PI / 2.0;
        let o = [3.0 * th.sin(), 0.0, 3.0 * th.cos()];
        assert!(matches!(
            d.defining_function(&o),
            Err(Error::OutsideDomain(_))
        ));
    }

    #[test]
    fn defining_function_is_homogeneous_outside_r0() {
        let d = DomainSpec::cone_shell(PI / 6.0, PI / 3.0).unwrap();
        let th = 0.3 + PI / 6.0;
        let p = [2.0 * th.sin(), 0.4, 2.0 * th.cos()];
        assert!(d.contains(&p), "test point should be inside");
        let x1 = d.defining_function(&p).unwrap();
        let p2: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let x2 = d.defining_function(&p2).unwrap();
        assert!(
            (x2 - 2.0 * x1).abs() < 1e-14 * x1,
            "lambda = 2: {x2} vs {}",
            2.0 * x1
        );
        let p3: Vec<f64> = p.iter().map(|v| 3.0 * v).collect();
        let x3 = d.defining_function(&p3).unwrap();
        assert!((x3 - 3.0 * x1).abs() < 1e-13 * x1.abs());
    }

    #[test]
    fn bisector_value_matches_exact_cone_distance() {
        let d = DomainSpec::cone_shell(PI / 6.0, PI / 3.0).unwrap();
        let th = PI / 4.0;
        let r = 10.0;
        let p = [r * th.sin(), 0.0, r * th.cos()];
        let x = d.defining_function(&p).unwrap();
        assert!((x - 10.0 * (PI / 12.0).sin()).abs() < 1e-12);
        // brute-force distance to the inner cone surface
        let mut best = f64::INFINITY;
        for i in 0..20000 {
            let s = 20.0 * i as f64 / 20000.0;
            let q = [
                s * (PI / 6.0).sin(),
                0.0,
                s * (PI / 6.0).cos(),
            ];
            let dd =
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            best = best.min(dd);
        }
        assert!((x - best).abs() < 1e-3, "x = {x}, exact = {best}");
    }

    #[test]
    fn collar_gradient_is_unit() {
        // |grad x| = 1 where x equals the boundary distance
        let d = DomainSpec::cone_shell(PI / 6.0, PI / 3.0).unwrap();
        let c = d.collar_ratio();
        let th = PI / 6.0 + 0.3 * (PI / 6.0); // tau = 0.3 < 1/3
        let p = [4.0 * th.sin(), 0.0, 4.0 * th.cos()];
        let x = d.defining_function(&p).unwrap();
        assert!(x / 4.0 < c, "point should be in the collar");
        let g = d.grad_defining(&p);
        let gn = (g.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!((gn - 1.0).abs() < 1e-10, "|grad x| = {gn}");
    }

    #[test]
    fn transverse_and_sides() {
        let d = DomainSpec::cone_shell(PI / 6.0, PI / 3.0).unwrap();
        let point = |th: f64| [2.0 * f64::sin(th), 0.0, 2.0 * f64::cos(th)];
        assert_eq!(d.side(&point(0.1)), Side::A);
        assert_eq!(d.side(&point(1.4)), Side::B);
        assert_eq!(d.side(&point(PI / 4.0)), Side::Inside);
        let t = d.transverse(&point(PI / 4.0)).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cone_shell_sphere_topology() {
        let d = DomainSpec::cone_shell(PI / 6.0, PI / 3.0).unwrap();
        let (inside, outside) = d.sphere_topology(80).unwrap();
        assert_eq!(inside, 1, "cone-shell trace is connected");
        assert_eq!(outside, 2, "complement has two caps");
    }

    #[test]
    fn tennis_ball_sphere_topology() {
        let d = DomainSpec {
            kind: DomainKind::Generic {
                sampler: SphereSampler::TennisBall {
                    amp: 0.5,
                    half_width: 0.25,
                },
            },
            r0: 1.0,
        };
        d.validate(3).unwrap();
        let (inside, outside) = d.sphere_topology(120).unwrap();
        assert_eq!(inside, 1);
        assert_eq!(outside, 2);
    }

    #[test]
    fn log_rotation_basics() {
        let id = DiffeoSpec::LogRotation {
            alpha: 0.0,
            axis: vec![0.0, 0.0, 1.0],
        };
        let p = [2.0, 1.0, -0.5];
        assert_eq!(id.apply(&p).unwrap(), p.to_vec());
        // |p| = 1 maps to itself (ln 1 = 0)
        let rot = DiffeoSpec::LogRotation {
            alpha: 0.7,
            axis: vec![0.0, 0.0, 1.0],
        };
        let q = rot.apply(&[1.0, 0.0, 0.0]).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-15 && q[1].abs() < 1e-15);
        // inside the ball: out of chart
        assert!(matches!(
            rot.apply(&[0.5, 0.0, 0.0]),
            Err(Error::OutOfChart(_))
        ));
        // spherical form: (e, pi/2, 0) with alpha = 1 -> phi = 1
        let rot1 = DiffeoSpec::LogRotation {
            alpha: 1.0,
            axis: vec![0.0, 0.0, 1.0],
        };
        let e = std::f64::consts::E;
        let q = rot1.apply(&[e, 0.0, 0.0]).unwrap();
        assert!((q[0] - e * 1.0f64.cos()).abs() < 1e-12);
        assert!((q[1] - e * 1.0f64.sin()).abs() < 1e-12);
        assert!(q[2].abs() < 1e-15);
    }

    #[test]
    fn log_rotation_preserves_radius() {
        let rot = DiffeoSpec::LogRotation {
            alpha: 0.5,
            axis: vec![0.0, 1.0, 0.0],
        };
        for p in [[3.0, 1.0, 2.0], [1.5, -2.0, 0.3]] {
            let q = rot.apply(&p).unwrap();
            let rp = norm(&p);
            let rq = norm(&q);
            assert!((rp - rq).abs() < 1e-14 * rp);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let maps = vec![
            DiffeoSpec::LogRotation {
                alpha: 0.5,
                axis: vec![0.0, 0.0, 1.0],
            },
            DiffeoSpec::RegularizedLogRotation {
                alpha: -0.4,
                axis: vec![0.0, 1.0, 1.0],
            },
            DiffeoSpec::Composition {
                maps: vec![
                    DiffeoSpec::RegularizedLogRotation {
                        alpha: 0.3,
                        axis: vec![0.0, 0.0, 1.0],
                    },
                    DiffeoSpec::RegularizedLogRotation {
                        alpha: 0.2,
                        axis: vec![1.0, 0.0, 0.0],
                    },
                ],
            },
        ];
        let p = [2.0, 1.3, -1.1];
        for m in maps {
            let jac = m.jacobian(&p).unwrap();
            for i in 0..3 {
                let h = 1e-6;
                let mut pp = p;
                let mut pm = p;
                pp[i] += h;
                pm[i] -= h;
                let qp = m.apply(&pp).unwrap();
                let qm = m.apply(&pm).unwrap();
                for a in 0..3 {
                    let fd = (qp[a] - qm[a]) / (2.0 * h);
                    assert!(
                        (jac[a * 3 + i] - fd).abs() < 1e-7,
                        "{m:?} entry ({a},{i}): {} vs {fd}",
                        jac[a * 3 + i]
                    );
                }
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let m = DiffeoSpec::Composition {
            maps: vec![
                DiffeoSpec::LogRotation {
                    alpha: 0.5,
                    axis: vec![0.0, 0.0, 1.0],
                },
                DiffeoSpec::RegularizedLogRotation {
                    alpha: 0.3,
                    axis: vec![1.0, 0.0, 0.0],
                },
            ],
        };
        let inv = m.inverse();
        let p = [2.0, -1.0, 1.5];
        let q = inv.apply(&m.apply(&p).unwrap()).unwrap();
        for i in 0..3 {
            assert!((q[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pullback_identity_is_unchanged() {
        let grid = GridSpec::new(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0], &[7, 7, 7]).unwrap();
        let g = MetricField::from_fn(&grid, |p, c| {
            c.fill(0.0);
            c[0] = 1.0 + 0.1 * p[0];
            c[3] = 1.0;
            c[5] = 1.0;
        });
        let (pb, masked) = pullback_metric(&DiffeoSpec::Identity, &g).unwrap();
        assert!(masked.is_empty());
        for c in 0..6 {
            for lin in 0..grid.len() {
                assert!((pb.comp(c)[lin] - g.comp(c)[lin]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn pullback_of_flat_matches_closed_form() {
        // analytic route: J^T J against the expanded line element, which
        // carries the sin^2(theta) factor in the r-phi cross term
        let rot = DiffeoSpec::LogRotation {
            alpha: 0.5,
            axis: vec![0.0, 0.0, 1.0],
        };
        let mut rng = 12345u64;
        let mut rand01 = move || {
            rng = rng
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let r = 2.0 + 8.0 * rand01();
            let theta = 0.2 + 2.7 * rand01();
            let phi = 2.0 * PI * rand01();
            let p = [
                r * theta.sin() * phi.cos(),
                r * theta.sin() * phi.sin(),
                r * theta.cos(),
            ];
            let jac = rot.jacobian(&p).unwrap();
            let mut pb = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for a in 0..3 {
                        s += jac[a * 3 + i] * jac[a * 3 + j];
                    }
                    pb[i * 3 + j] = s;
                }
            }
            // spherical coordinate vector fields
            let er = [p[0] / r, p[1] / r, p[2] / r];
            let et = [
                theta.cos() * phi.cos(),
                theta.cos() * phi.sin(),
                -theta.sin(),
            ];
            let ep = [-phi.sin(), phi.cos(), 0.0];
            let dr = er;
            let dth: Vec<f64> = et.iter().map(|v| r * v).collect();
            let dph: Vec<f64> = ep.iter().map(|v| r * theta.sin() * v).collect();
            let pair = |u: &[f64], v: &[f64]| -> f64 {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += u[i] * pb[i * 3 + j] * v[j];
                    }
                }
                s
            };
            let alpha = 0.5;
            let st2 = theta.sin() * theta.sin();
            assert!((pair(&dr, &dr) - (1.0 + alpha * alpha * st2)).abs() < 1e-12);
            assert!((pair(&dth, &dth) - r * r).abs() < 1e-9 * r * r);
            assert!((pair(&dph, &dph) - r * r * st2).abs() < 1e-9 * r * r);
            assert!((pair(&dr, &dph) - alpha * r * st2).abs() < 1e-10 * r);
            assert!(pair(&dr, &dth).abs() < 1e-10 * r);
            assert!(pair(&dth, &dph).abs() < 1e-9 * r * r);
        }
    }

    #[test]
    fn pullback_eigenvalue_bracket() {
        for &alpha in &[0.25, 0.5, 0.9] {
            let rot = DiffeoSpec::LogRotation {
                alpha,
                axis: vec![0.0, 0.0, 1.0],
            };
            let pts: Vec<Vec<f64>> = (0..300)
                .map(|k| {
                    let t = k as f64 / 300.0;
                    vec![
                        2.0 + 5.0 * t,
                        3.0 * (7.0 * t).sin(),
                        2.0 * (13.0 * t).cos(),
                    ]
                })
                .collect();
            let (lo, hi) = pullback_flat_bounds(&rot, &pts).unwrap();
            assert!(lo >= 1.0 - alpha - 1e-12, "lo = {lo}");
            assert!(hi <= 3.0 + 1e-12, "hi = {hi}");
        }
    }

    #[test]
    fn pullback_functoriality() {
        // (Psi1 o Psi2)^* g = Psi2^* (Psi1^* g) up to interpolation error;
        // small angles keep the image points inside the sampled box
        let psi1 = DiffeoSpec::RegularizedLogRotation {
            alpha: 0.03,
            axis: vec![0.0, 0.0, 1.0],
        };
        let psi2 = DiffeoSpec::RegularizedLogRotation {
            alpha: -0.02,
            axis: vec![0.0, 0.0, 1.0],
        };
        // composition applies psi2 then psi1, i.e. Psi = Psi1 o Psi2
        let comp = DiffeoSpec::Composition {
            maps: vec![psi2.clone(), psi1.clone()],
        };
        // masked cells near the box faces hold flat placeholders, so compare
        // only at a fixed physical distance from the boundary
        let run = |npts: usize| -> f64 {
            let grid =
                GridSpec::new(&[3.0, 3.0, 3.0], &[4.0, 4.0, 4.0], &[npts, npts, npts]).unwrap();
            let g = MetricField::from_fn(&grid, |p, c| {
                let w = 1.0 + 0.2 * (0.3 * p[0] + 0.2 * p[1]).sin();
                c.fill(0.0);
                c[0] = w;
                c[3] = 1.0 / w;
                c[5] = 1.0;
            });
            let (a, _) = pullback_metric(&comp, &g).unwrap();
            let (b1, _) = pullback_metric(&psi1, &g).unwrap();
            let (b, _) = pullback_metric(&psi2, &b1).unwrap();
            // fixed physical probes, well away from masked boundary cells
            let mut max = 0.0f64;
            let mut ca = vec![0.0; 6];
            let mut cb = vec![0.0; 6];
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        let p = [
                            4.6 + 0.25 * i as f64,
                            4.6 + 0.25 * j as f64,
                            4.6 + 0.25 * k as f64,
                        ];
                        assert!(a.sample(&p, &mut ca) && b.sample(&p, &mut cb));
                        for c in 0..6 {
                            max = max.max((ca[c] - cb[c]).abs());
                        }
                    }
                }
            }
            max
        };
        let e1 = run(15);
        let e2 = run(57);
        assert!(
            e2 < e1 / 3.0,
            "interpolation error should shrink under 4x refinement: {e1} -> {e2}"
        );
    }

    #[test]
    fn equivalence_bounds_basics() {
        let grid = GridSpec::new(&[0.0; 3], &[1.0; 3], &[5, 5, 5]).unwrap();
        let flat = MetricField::from_fn(&grid, |_, c| {
            c.fill(0.0);
            c[0] = 1.0;
            c[3] = 1.0;
            c[5] = 1.0;
        });
        let double = MetricField::from_fn(&grid, |_, c| {
            c.fill(0.0);
            c[0] = 2.0;
            c[3] = 2.0;
            c[5] = 2.0;
        });
        let (lo, hi) = uniform_equivalence_bounds(&flat, &flat, 0).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        let (lo, hi) = uniform_equivalence_bounds(&double, &flat, 0).unwrap();
        assert!((lo - 2.0).abs() < 1e-12 && (hi - 2.0).abs() < 1e-12);
    }
}
