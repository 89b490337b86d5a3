//! The one mollifier used everywhere: the classical C-infinity transition
//! built from t -> exp(-1/t), plus the compactly supported bump derived
//! from it. All cutoffs in the crate (chi, Xi_lambda, radius cap, domain
//! blends) go through these functions.

/// exp(-1/t) for t > 0, zero otherwise. C-infinity on the whole line.
fn phi(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

fn phi_prime(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp() / (t * t)
    }
}

/// Smooth step: 0 for t <= 0, 1 for t >= 1, strictly increasing in between.
pub fn step(t: f64) -> f64 {
    let a = phi(t);
    let b = phi(1.0 - t);
    if a == 0.0 {
        0.0
    } else if b == 0.0 {
        1.0
    } else {
        a / (a + b)
    }
}

/// Derivative of [`step`].
pub fn step_deriv(t: f64) -> f64 {
    let a = phi(t);
    let b = phi(1.0 - t);
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        let s = a + b;
        (phi_prime(t) * b + a * phi_prime(1.0 - t)) / (s * s)
    }
}

/// Step rescaled to the window [lo, hi].
pub fn step_between(t: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(hi > lo);
    step((t - lo) / (hi - lo))
}

pub fn step_between_deriv(t: f64, lo: f64, hi: f64) -> f64 {
    step_deriv((t - lo) / (hi - lo)) / (hi - lo)
}

/// Compactly supported bump: exp(-1/(1-t^2)) for |t| < 1, exactly zero
/// outside. Peak value exp(-1) at t = 0; not normalized.
pub fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

/// Non-decreasing profile used by the logarithmic cutoff family:
/// 0 for s <= 1, 1 for s >= 2.
pub fn ramp12(s: f64) -> f64 {
    step(s - 1.0)
}

pub fn ramp12_deriv(s: f64) -> f64 {
    step_deriv(s - 1.0)
}
