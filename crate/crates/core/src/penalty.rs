//! Minimax concave penalty (MCP) and its proximal maps.
//!
//! For `t >= 0`,
//!
//! ```text
//! p(t; lambda) = lambda*t - t^2/(2a)   if t <= a*lambda
//!              = a*lambda^2/2          otherwise
//! ```
//!
//! The proximal maps minimize `(kappa/2)*(xi - u)^2 + p(|xi|)` (scalar) and
//! `(kappa/2)*||v - w||^2 + p(sqrt(eta + ||v||^2))` (group, with a fixed
//! offset `eta` contributed by blocks held constant). Both objectives are
//! strictly convex when `a*kappa > 1`, so the minimizers are unique.

use crate::error::{Error, Result};

/// MCP level and concavity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McpSpec {
    pub lambda: f64,
    pub a: f64,
}

impl McpSpec {
    pub fn new(lambda: f64, a: f64) -> Self {
        McpSpec { lambda, a }
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(Error::NegativeArgument(t));
        }
        Ok(self.value_abs(t))
    }

    pub fn deriv(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(Error::NegativeArgument(t));
        }
        Ok(self.deriv_abs(t))
    }

    /// `p(|t|)`.
    #[inline]
    pub(crate) fn value_abs(&self, t: f64) -> f64 {
        let t = t.abs();
        if t <= self.a * self.lambda {
            self.lambda * t - t * t / (2.0 * self.a)
        } else {
            0.5 * self.a * self.lambda * self.lambda
        }
    }

    /// `p'(|t|)`, with `p'(0+) = lambda`.
    #[inline]
    pub(crate) fn deriv_abs(&self, t: f64) -> f64 {
        (self.lambda - t.abs() / self.a).max(0.0)
    }
}

pub fn mcp_value(t: f64, spec: McpSpec) -> Result<f64> {
    spec.value(t)
}

pub fn mcp_deriv(t: f64, spec: McpSpec) -> Result<f64> {
    spec.deriv(t)
}

/// `(|t| - lambda)_+ * sign(t)`.
#[inline]
pub fn soft_threshold(t: f64, lambda: f64) -> f64 {
    let m = t.abs() - lambda;
    if m > 0.0 {
        m.copysign(t)
    } else {
        0.0
    }
}

fn check_convex(a: f64, kappa: f64) -> Result<()> {
    if a * kappa <= 1.0 || !(kappa > 0.0) {
        return Err(Error::ProxNotConvex { a, kappa });
    }
    Ok(())
}

/// Minimizer of `(kappa/2)*(xi - u)^2 + p(|xi|; lambda, a)`.
pub fn mcp_prox_scalar(u: f64, lambda: f64, a: f64, kappa: f64) -> Result<f64> {
    check_convex(a, kappa)?;
    Ok(mcp_prox_unchecked(u, lambda, a, kappa))
}

#[inline]
pub(crate) fn mcp_prox_unchecked(u: f64, lambda: f64, a: f64, kappa: f64) -> f64 {
    if u.abs() > a * lambda {
        u
    } else {
        soft_threshold(u, lambda / kappa) / (1.0 - 1.0 / (a * kappa))
    }
}

/// Minimizer of `(kappa_prime/2)*||v - w||^2 + p(sqrt(eta + ||v||^2); lambda, a)`.
///
/// The solution is `s * w/||w||` for a scalar `s >= 0`. With `eta = 0` the
/// usual group-MCP closed form applies. With `eta > 0` the penalty is smooth
/// at the origin, so `s` solves
///
/// ```text
/// kappa_prime*(s - ||w||) + (lambda/r(s) - 1/a)*s = 0,  r(s) = sqrt(eta + s^2)
/// ```
///
/// on `(0, ||w||]`, which is found by safeguarded Newton iteration.
pub fn group_mcp_prox(
    w: &[f64],
    eta: f64,
    lambda: f64,
    a: f64,
    kappa_prime: f64,
) -> Result<Vec<f64>> {
    check_convex(a, kappa_prime)?;
    if eta < 0.0 {
        return Err(Error::NegativeArgument(eta));
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = group_prox_radius(norm, eta, lambda, a, kappa_prime);
    if norm == 0.0 {
        return Ok(vec![0.0; w.len()]);
    }
    let scale = s / norm;
    Ok(w.iter().map(|v| v * scale).collect())
}

/// Norm of the group proximal point for an input of norm `norm`.
pub(crate) fn group_prox_radius(norm: f64, eta: f64, lambda: f64, a: f64, kappa: f64) -> f64 {
    if norm == 0.0 {
        return 0.0;
    }
    let r0 = (eta + norm * norm).sqrt();
    if lambda == 0.0 || r0 > a * lambda {
        return norm;
    }
    if eta == 0.0 {
        return soft_threshold(norm, lambda / kappa) / (1.0 - 1.0 / (a * kappa));
    }
    // phi is increasing with phi(0) = -kappa*norm < 0 <= phi(norm).
    let phi = |s: f64| {
        let r = (eta + s * s).sqrt();
        kappa * (s - norm) + (lambda / r - 1.0 / a) * s
    };
    let dphi = |s: f64| {
        let r2 = eta + s * s;
        let r = r2.sqrt();
        kappa - 1.0 / a + lambda * eta / (r2 * r)
    };
    let (mut lo, mut hi) = (0.0, norm);
    let mut s = norm * kappa / (kappa + lambda / r0.max(f64::MIN_POSITIVE));
    for _ in 0..100 {
        let f = phi(s);
        if f == 0.0 {
            return s;
        }
        if f < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let mut next = s - f / dphi(s);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-16 * norm.max(1.0) {
            return next;
        }
        s = next;
    }
    s
}
