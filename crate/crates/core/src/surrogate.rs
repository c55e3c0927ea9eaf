//! Smooth truncated surrogate for `2·1{u > 0}` and its split into two convex
//! C¹ pieces, `S = S1 − S2`.

use serde::{Deserialize, Serialize};

/// Transition half-width `δ` of the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub delta: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

impl SurrogateParams {
    /// Returns `None` unless `delta` is positive and finite.
    pub fn new(delta: f64) -> Option<Self> {
        (delta > 0.0 && delta.is_finite()).then_some(Self { delta })
    }

    /// `0`, `(1+u/δ)²`, `2 − (1−u/δ)²`, `2` on `(−∞,−δ]`, `(−δ,0]`, `(0,δ]`, `(δ,∞)`.
    #[inline]
    pub fn s(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t <= -1.0 {
            0.0
        } else if t <= 0.0 {
            (1.0 + t) * (1.0 + t)
        } else if t <= 1.0 {
            2.0 - (1.0 - t) * (1.0 - t)
        } else {
            2.0
        }
    }

    #[inline]
    pub fn s_prime(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t <= -1.0 || t > 1.0 {
            0.0
        } else if t <= 0.0 {
            2.0 * (1.0 + t) / self.delta
        } else {
            2.0 * (1.0 - t) / self.delta
        }
    }

    /// Convex part: `0`, `(1+u/δ)²`, `1 + 2u/δ`.
    #[inline]
    pub fn s1(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t <= -1.0 {
            0.0
        } else if t <= 0.0 {
            (1.0 + t) * (1.0 + t)
        } else {
            1.0 + 2.0 * t
        }
    }

    /// Subtracted convex part: `0`, `(u/δ)²`, `2u/δ − 1`.
    #[inline]
    pub fn s2(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t <= 0.0 {
            0.0
        } else if t <= 1.0 {
            t * t
        } else {
            2.0 * t - 1.0
        }
    }

    #[inline]
    pub fn s1_prime(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t <= -1.0 {
            0.0
        } else if t <= 0.0 {
            2.0 * (1.0 + t) / self.delta
        } else {
            2.0 / self.delta
        }
    }

    #[inline]
    pub fn s2_prime(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t <= 0.0 {
            0.0
        } else if t <= 1.0 {
            2.0 * t / self.delta
        } else {
            2.0 / self.delta
        }
    }

    /// Second derivative of `S1` (a generalized Hessian at the kinks).
    #[inline]
    pub fn s1_second(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t > -1.0 && t <= 0.0 {
            2.0 / (self.delta * self.delta)
        } else {
            0.0
        }
    }

    #[inline]
    pub fn s2_second(&self, u: f64) -> f64 {
        let t = u / self.delta;
        if t > 0.0 && t <= 1.0 {
            2.0 / (self.delta * self.delta)
        } else {
            0.0
        }
    }
}
