//! Convex penalties `f(x) = |x|^p / p` and their Fenchel conjugates.

use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};

/// `f(x) = |x|^p / p` with `p > 1`; the conjugate is `f*(y) = |y|^q / q`
/// where `1/p + 1/q = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyFunction {
    p: f64,
    q: f64,
}

impl PenaltyFunction {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(DiceError::InvalidArgument(format!(
                "penalty exponent must be finite and > 1, got {p}"
            )));
        }
        Ok(Self { p, q: p / (p - 1.0) })
    }

    pub fn square() -> Self {
        Self { p: 2.0, q: 2.0 }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn f(&self, x: f64) -> f64 {
        x.abs().powf(self.p) / self.p
    }

    pub fn f_prime(&self, x: f64) -> f64 {
        x.signum() * x.abs().powf(self.p - 1.0)
    }

    pub fn conjugate(&self, y: f64) -> f64 {
        y.abs().powf(self.q) / self.q
    }

    /// `(f*(y), f*'(y))` with a single power evaluation.
    pub fn conjugate_with_prime(&self, y: f64) -> (f64, f64) {
        if self.q == 2.0 {
            return (0.5 * y * y, y);
        }
        if y == 0.0 {
            return (0.0, 0.0);
        }
        let m = y.abs().powf(self.q - 1.0);
        (m * y.abs() / self.q, y.signum() * m)
    }

    pub fn conjugate_prime(&self, y: f64) -> f64 {
        if y == 0.0 {
            return 0.0;
        }
        y.signum() * y.abs().powf(self.q - 1.0)
    }
}
