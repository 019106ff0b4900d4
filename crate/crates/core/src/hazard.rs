//! Hazard distributions on `[0, 1]` and exact next-event waiting times.
//!
//! A hazard distribution `H` drives every event clock in the crate: split and
//! deletion times of the conditional process, and the DFM scheduler CDFs.
//! Because `H` is supported on `[0, 1]`, its hazard rate `f / (1 - F)`
//! diverges as `t -> 1`, which forces every scheduled event to fire by `t = 1`.
//!
//! Waiting times are drawn by inversion: given `R` remaining events at time
//! `t` (each an independent `H` draw known to exceed `t`), the next event
//! time `V` satisfies `P(V >= y) = (S(y) / S(t))^R`, so
//! `V = S^{-1}(S(t) (1 - u)^{1/R})` for `u ~ U(0, 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{Error, Result};

/// Largest event time a waiting-time draw can produce.
pub const MAX_EVENT_TIME: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HazardSpec {
    #[default]
    Uniform,
    Beta { alpha: f64, beta: f64 },
}

impl HazardSpec {
    pub fn beta(alpha: f64, beta: f64) -> Self {
        HazardSpec::Beta { alpha, beta }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            HazardSpec::Uniform => Ok(()),
            HazardSpec::Beta { alpha, beta } => {
                if alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "beta hazard needs positive finite parameters, got ({alpha}, {beta})"
                    )))
                }
            }
        }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        if !(0.0..=1.0).contains(&t) {
            return 0.0;
        }
        match *self {
            HazardSpec::Uniform => 1.0,
            HazardSpec::Beta { alpha, beta } => {
                let log = xlogy(alpha - 1.0, t) + xlogy(beta - 1.0, 1.0 - t) - ln_beta(alpha, beta);
                log.exp()
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        match *self {
            HazardSpec::Uniform => t,
            HazardSpec::Beta { alpha, beta } => beta_reg(alpha, beta, t),
        }
    }

    /// `1 - F(t)`, evaluated on the mirrored distribution so the upper tail keeps precision.
    pub fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        if t >= 1.0 {
            return 0.0;
        }
        match *self {
            HazardSpec::Uniform => 1.0 - t,
            HazardSpec::Beta { alpha, beta } => beta_reg(beta, alpha, 1.0 - t),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match *self {
            HazardSpec::Uniform => p,
            HazardSpec::Beta { alpha, beta } => beta_quantile(alpha, beta, p),
        }
    }

    /// The `y` with `S(y) = s`.
    pub fn inverse_survival(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        match *self {
            HazardSpec::Uniform => 1.0 - s,
            HazardSpec::Beta { alpha, beta } => 1.0 - beta_quantile(beta, alpha, s),
        }
    }

    /// `f(t) / (1 - F(t))`. Diverges at `t = 1`, which is rejected.
    pub fn hazard_rate(&self, t: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::domain(format!("hazard rate needs 0 <= t < 1, got {t}")));
        }
        Ok(self.hazard_rate_unchecked(t))
    }

    pub(crate) fn hazard_rate_unchecked(&self, t: f64) -> f64 {
        match *self {
            HazardSpec::Uniform => 1.0 / (1.0 - t),
            HazardSpec::Beta { .. } => {
                let s = self.survival(t);
                if s <= 0.0 {
                    f64::INFINITY
                } else {
                    self.pdf(t) / s
                }
            }
        }
    }

    /// Wait until the next of `remaining` pending events, all known to lie in `(t, 1]`.
    ///
    /// `u` is a uniform draw on `[0, 1)`. The result satisfies
    /// `t + wait <= MAX_EVENT_TIME`.
    pub fn sample_interarrival(&self, t: f64, remaining: u32, u: f64) -> Result<f64> {
        if remaining == 0 {
            return Err(Error::contract("no remaining events to wait for"));
        }
        if !(0.0..1.0).contains(&t) {
            return Err(Error::domain(format!("interarrival needs 0 <= t < 1, got {t}")));
        }
        if !(0.0..1.0).contains(&u) {
            return Err(Error::domain(format!("uniform draw must lie in [0, 1), got {u}")));
        }
        let target = self.survival(t) * ((-u).ln_1p() / remaining as f64).exp();
        let event = self.inverse_survival(target).clamp(t, MAX_EVENT_TIME.max(t));
        Ok(event - t)
    }

    pub fn draw_interarrival<R: Rng + ?Sized>(&self, t: f64, remaining: u32, rng: &mut R) -> Result<f64> {
        let u: f64 = rng.random();
        self.sample_interarrival(t, remaining, u)
    }
}

/// `x * ln(y)` with the convention `0 * ln(0) = 0`.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Quantile of Beta(a, b) by safeguarded Newton iteration on the regularized
/// incomplete beta function.
pub(crate) fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let ln_b = ln_beta(a, b);
    let pdf = |x: f64| (xlogy(a - 1.0, x) + xlogy(b - 1.0, 1.0 - x) - ln_b).exp();

    // Tail approximations: F(x) ~ x^a / (a B) near 0 and 1 - F ~ (1-x)^b / (b B) near 1.
    let lower = ((p.ln() + a.ln() + ln_b) / a).exp();
    let upper = 1.0 - (((1.0 - p).ln() + b.ln() + ln_b) / b).exp();
    let mut x = if lower < 0.5 && beta_reg(a, b, lower) >= 0.5 * p {
        lower
    } else if upper > 0.5 {
        upper
    } else {
        0.5
    };
    x = x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let f = beta_reg(a, b, x) - p;
        if f == 0.0 {
            return x;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = pdf(x);
        let newton = if d > 0.0 && d.is_finite() { x - f / d } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.max(f64::MIN_POSITIVE) || hi - lo <= f64::EPSILON * hi {
            return next;
        }
        x = next;
    }
    x
}
