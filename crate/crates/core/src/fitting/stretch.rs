//! Fourth-order polynomial correction for actuator nonlinearity.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};

/// Maps raw actuator readings `p` to physical displacement:
/// `scale · (u + c₀ + c₂u² + c₃u³ + c₄u⁴)` with `u = (p − center)/half_range`.
///
/// The linear coefficient is pinned to 1 so that `scale` carries the
/// overall gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyStretch {
    pub center: f64,
    pub half_range: f64,
    pub scale: f64,
    /// `[c₀, c₂, c₃, c₄]`.
    pub coeffs: [f64; 4],
}

impl PolyStretch {
    pub fn new(center: f64, half_range: f64, scale: f64, coeffs: [f64; 4]) -> Result<Self> {
        ensure_finite("stretch center", center)?;
        ensure_positive("stretch half range", half_range)?;
        ensure_finite("stretch scale", scale)?;
        if scale == 0.0 {
            return Err(Error::invalid("stretch scale must be nonzero"));
        }
        for c in coeffs {
            ensure_finite("stretch coefficient", c)?;
        }
        Ok(Self {
            center,
            half_range,
            scale,
            coeffs,
        })
    }

    /// Linear map normalized over `[lo, hi]`.
    pub fn identity_over(lo: f64, hi: f64, scale: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::invalid(format!("degenerate raw range [{lo}, {hi}]")));
        }
        Self::new(0.5 * (lo + hi), 0.5 * (hi - lo), scale, [0.0; 4])
    }

    pub fn normalize(&self, p: f64) -> f64 {
        (p - self.center) / self.half_range
    }

    pub fn eval(&self, p: f64) -> f64 {
        let u = self.normalize(p);
        let [c0, c2, c3, c4] = self.coeffs;
        self.scale * (c0 + u * (1.0 + u * (c2 + u * (c3 + u * c4))))
    }

    /// Derivative with respect to `u`.
    pub fn slope_u(&self, u: f64) -> f64 {
        let [_, c2, c3, c4] = self.coeffs;
        self.scale * (1.0 + u * (2.0 * c2 + u * (3.0 * c3 + u * 4.0 * c4)))
    }

    /// Strict monotonicity over the raw interval `[lo, hi]`, checked on a
    /// dense grid plus the real roots of the derivative.
    pub fn is_monotone_over(&self, lo: f64, hi: f64) -> bool {
        let (ua, ub) = (self.normalize(lo.min(hi)), self.normalize(lo.max(hi)));
        let sign = self.slope_u(0.5 * (ua + ub)).signum();
        if sign == 0.0 {
            return false;
        }
        let n = 2000;
        (0..=n).all(|i| {
            let u = ua + (ub - ua) * i as f64 / n as f64;
            self.slope_u(u) * sign > 0.0
        })
    }

    /// Inverse map on `[lo, hi]` by bisection; requires monotonicity there.
    pub fn invert(&self, y: f64, lo: f64, hi: f64) -> Result<f64> {
        let (fa, fb) = (self.eval(lo) - y, self.eval(hi) - y);
        if fa * fb > 0.0 {
            return Err(Error::invalid(format!("value {y} outside the stretch image of [{lo}, {hi}]")));
        }
        crate::numerics::brent_root(|p| self.eval(p) - y, lo, hi, 0.0, 1e-15)
    }

    /// Power-series coefficients in the raw variable `p`, lowest first.
    fn raw_polynomial(&self) -> [f64; 5] {
        let [c0, c2, c3, c4] = self.coeffs;
        let u_coeffs = [c0, 1.0, c2, c3, c4];
        // u = a + b p
        let b = 1.0 / self.half_range;
        let a = -self.center * b;
        let mut out = [0.0; 5];
        let mut power = [1.0, 0.0, 0.0, 0.0, 0.0];
        for (deg, &cu) in u_coeffs.iter().enumerate() {
            if deg > 0 {
                let mut next = [0.0; 5];
                for i in 0..5 {
                    next[i] += a * power[i];
                    if i + 1 < 5 {
                        next[i + 1] += b * power[i];
                    }
                }
                power = next;
            }
            for i in 0..5 {
                out[i] += cu * power[i];
            }
        }
        out.map(|c| c * self.scale)
    }

    /// The same map written over a different normalization.
    pub fn rebased(&self, center: f64, half_range: f64) -> Result<Self> {
        ensure_positive("stretch half range", half_range)?;
        let raw = self.raw_polynomial();
        // Substitute p = center + half_range·w.
        let mut w = [0.0; 5];
        for (deg, &c) in raw.iter().enumerate() {
            for j in 0..=deg {
                w[j] += c * binomial(deg, j) * center.powi((deg - j) as i32) * half_range.powi(j as i32);
            }
        }
        let scale = w[1];
        if scale == 0.0 {
            return Err(Error::Degenerate("stretch has zero slope at the new center".into()));
        }
        Self::new(center, half_range, scale, [w[0] / scale, w[2] / scale, w[3] / scale, w[4] / scale])
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
