//! Per-element base processes between tree events.
//!
//! Continuous coordinates follow a time-inhomogeneous Ornstein-Uhlenbeck
//! process `dX = theta (a - X) dt + sqrt(v_t) dW` that mean-reverts towards the
//! anchor `a`, conditioned (Doob bridge) to hit `a` at `t = 1`. Tokens follow
//! the interval discrete interpolant `k1 d_{x1} + k2 uniform + k3 d_{x_t0}`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::HazardSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSchedule {
    /// `v_t = v0 (v1 / v0)^t`
    #[default]
    Geometric,
    /// `v_t = v0 + (v1 - v0) t`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuSpec {
    pub theta: f64,
    pub v0: f64,
    pub v1: f64,
    #[serde(default)]
    pub schedule: VarianceSchedule,
}

impl Default for OuSpec {
    fn default() -> Self {
        OuSpec { theta: 5.0, v0: 1.0, v1: 1.0, schedule: VarianceSchedule::Geometric }
    }
}

/// Moments of `X_v` given `X_s = x`, in the affine form `mean = a + coef (x - a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussMoments {
    pub coef: f64,
    pub variance: f64,
}

impl GaussMoments {
    pub fn mean(&self, x: f64, anchor: f64) -> f64 {
        anchor + self.coef * (x - anchor)
    }
}

impl OuSpec {
    /// Noise-free process; bridges collapse onto their conditional mean.
    pub fn noiseless(theta: f64) -> Self {
        OuSpec { theta, v0: 0.0, v1: 0.0, schedule: VarianceSchedule::Linear }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(Error::config(format!("OU theta must be positive, got {}", self.theta)));
        }
        let ok = match self.schedule {
            VarianceSchedule::Geometric => {
                (self.v0 > 0.0 && self.v1 > 0.0) || (self.v0 == 0.0 && self.v1 == 0.0)
            }
            VarianceSchedule::Linear => self.v0 >= 0.0 && self.v1 >= 0.0,
        };
        if !ok || !self.v0.is_finite() || !self.v1.is_finite() {
            return Err(Error::config(format!(
                "OU variances ({}, {}) invalid for {:?} schedule",
                self.v0, self.v1, self.schedule
            )));
        }
        Ok(())
    }

    pub fn variance_at(&self, t: f64) -> f64 {
        match self.schedule {
            VarianceSchedule::Geometric if self.v0 > 0.0 => self.v0 * (self.v1 / self.v0).powf(t),
            VarianceSchedule::Geometric => 0.0,
            VarianceSchedule::Linear => self.v0 + (self.v1 - self.v0) * t,
        }
    }

    fn is_noiseless(&self) -> bool {
        self.v0 == 0.0 && self.v1 == 0.0
    }

    /// `int_s^v exp(-2 theta (v - u)) v_u du`, in closed form.
    pub fn integrated_variance(&self, s: f64, v: f64) -> f64 {
        let dt = v - s;
        if dt <= 0.0 {
            return 0.0;
        }
        let k = 2.0 * self.theta;
        match self.schedule {
            VarianceSchedule::Geometric => {
                if self.v0 == 0.0 {
                    return 0.0;
                }
                let g = (self.v1 / self.v0).ln();
                let c = k + g;
                // v0 e^{g s - k dt} (e^{c dt} - 1) / c
                let ratio = if c.abs() < 1e-12 { dt } else { (c * dt).exp_m1() / c };
                self.v0 * (g * s - k * dt).exp() * ratio
            }
            VarianceSchedule::Linear => {
                let a = self.v0;
                let b = self.v1 - self.v0;
                let decay = -(-k * dt).exp_m1(); // 1 - e^{-k dt}
                let first = (a + b * v) * decay / k;
                // int_0^dt tau e^{-k tau} dtau
                let second = (decay - k * dt * (-k * dt).exp()) / (k * k);
                (first - b * second).max(0.0)
            }
        }
    }

    fn decay(&self, s: f64, v: f64) -> f64 {
        (-self.theta * (v - s)).exp()
    }

    /// Unconditioned transition `X_v | X_s` (mean reverting towards the anchor).
    pub fn transition_moments(&self, s: f64, v: f64) -> Result<GaussMoments> {
        check_times(s, v)?;
        Ok(GaussMoments { coef: self.decay(s, v), variance: self.integrated_variance(s, v) })
    }

    /// Bridge transition `X_v | X_s, X_1 = anchor`.
    pub fn bridge_moments(&self, s: f64, v: f64) -> Result<GaussMoments> {
        check_times(s, v)?;
        if v >= 1.0 {
            return Ok(GaussMoments { coef: 0.0, variance: 0.0 });
        }
        if v <= s {
            return Ok(GaussMoments { coef: 1.0, variance: 0.0 });
        }
        let e_sv = self.decay(s, v);
        let e_s1 = self.decay(s, 1.0);
        let e_v1 = self.decay(v, 1.0);
        // The weight only depends on the shape of the schedule, so a
        // noiseless process takes the zero-noise limit of a constant schedule.
        let shape = if self.is_noiseless() {
            OuSpec { theta: self.theta, v0: 1.0, v1: 1.0, schedule: VarianceSchedule::Linear }
        } else {
            *self
        };
        let var_sv = shape.integrated_variance(s, v);
        let var_s1 = shape.integrated_variance(s, 1.0);
        let c = if var_s1 > 0.0 { e_v1 * var_sv / var_s1 } else { 0.0 };
        let variance = if self.is_noiseless() { 0.0 } else { (var_sv * (1.0 - c * e_v1)).max(0.0) };
        Ok(GaussMoments { coef: e_sv - c * e_s1, variance })
    }
}

fn check_times(s: f64, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&v) || v < s {
        return Err(Error::domain(format!("need 0 <= s <= v <= 1, got s={s}, v={v}")));
    }
    Ok(())
}

/// Gaussian parameters of the unconditioned process: `(mean, variance)`.
pub fn ou_transition(spec: &OuSpec, x_s: &[f64], anchor: &[f64], s: f64, v: f64) -> Result<(Vec<f64>, f64)> {
    check_len(x_s, anchor)?;
    let m = spec.transition_moments(s, v)?;
    let mean = x_s.iter().zip(anchor).map(|(&x, &a)| m.mean(x, a)).collect();
    Ok((mean, m.variance))
}

/// Draw `X_v` from the bridge started at `(s, x_s)` and pinned to `anchor` at `t = 1`.
pub fn ou_bridge_sample<R: Rng + ?Sized>(
    spec: &OuSpec,
    x_s: &[f64],
    anchor: &[f64],
    s: f64,
    v: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_len(x_s, anchor)?;
    let m = spec.bridge_moments(s, v)?;
    if v >= 1.0 {
        return Ok(anchor.to_vec());
    }
    if v <= s {
        return Ok(x_s.to_vec());
    }
    let sd = m.variance.sqrt();
    Ok(x_s
        .iter()
        .zip(anchor)
        .map(|(&x, &a)| {
            let z: f64 = if sd > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            m.mean(x, a) + sd * z
        })
        .collect())
}

fn check_len(x: &[f64], a: &[f64]) -> Result<()> {
    if x.len() != a.len() {
        return Err(Error::structural(format!("state has {} coordinates, anchor {}", x.len(), a.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DfmSpec {
    pub f1: HazardSpec,
    pub f2: HazardSpec,
    pub omega_u: f64,
    pub alphabet_size: u32,
    /// Defaults to `alphabet_size` (the class after the data tokens).
    #[serde(default)]
    pub mask_token: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl DfmSpec {
    pub fn new(f1: HazardSpec, f2: HazardSpec, omega_u: f64, alphabet_size: u32) -> Self {
        DfmSpec { f1, f2, omega_u, alphabet_size, mask_token: None }
    }

    pub fn mask(&self) -> u32 {
        self.mask_token.unwrap_or(self.alphabet_size)
    }

    /// Number of token classes: the data alphabet plus the mask.
    pub fn num_classes(&self) -> usize {
        self.alphabet_size as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.f1.validate()?;
        self.f2.validate()?;
        if !(0.0..1.0).contains(&self.omega_u) {
            return Err(Error::config(format!("omega_u must lie in [0, 1), got {}", self.omega_u)));
        }
        if self.mask() != self.alphabet_size {
            return Err(Error::config("mask token must be the class after the alphabet"));
        }
        Ok(())
    }

    pub fn schedulers(&self, t: f64) -> Kappa {
        let f1 = self.f1.cdf(t);
        let f2 = self.f2.cdf(t);
        let k1 = f1;
        let k2 = self.omega_u * (1.0 - f1) * f2;
        let k3 = (1.0 - f1) * (1.0 - self.omega_u * f2);
        Kappa { k1, k2, k3 }
    }

    /// Mixture weights `(alpha1, alpha2, alpha3)` over `(x1, uniform, x_t0)` of
    /// the interpolant restarted at `(t0, x_t0)`.
    pub fn interval_weights(&self, t0: f64, t: f64) -> Result<[f64; 3]> {
        check_times(t0, t)?;
        let start = self.schedulers(t0);
        if start.k3 <= 0.0 {
            return Err(Error::domain(format!("interpolant degenerate at t0={t0}: k3 = 0")));
        }
        let now = self.schedulers(t);
        let a3 = now.k3 / start.k3;
        let a1 = (now.k1 - start.k1 * a3).max(0.0);
        let a2 = (now.k2 - start.k2 * a3).max(0.0);
        let total = a1 + a2 + a3;
        Ok([a1 / total, a2 / total, a3 / total])
    }
}

pub fn dfm_schedulers(spec: &DfmSpec, t: f64) -> Kappa {
    spec.schedulers(t)
}

pub fn dfm_interval_sample<R: Rng + ?Sized>(
    spec: &DfmSpec,
    x_t0: u32,
    x1: u32,
    t0: f64,
    t: f64,
    rng: &mut R,
) -> Result<u32> {
    check_times(t0, t)?;
    if t >= 1.0 {
        return Ok(x1);
    }
    if t <= t0 {
        return Ok(x_t0);
    }
    if spec.schedulers(t0).k3 <= 0.0 {
        // Already absorbed at x1 (up to floating point).
        return Ok(x1);
    }
    let w = spec.interval_weights(t0, t)?;
    let u: f64 = rng.random();
    if u < w[0] {
        Ok(x1)
    } else if u < w[0] + w[1] && spec.alphabet_size > 0 {
        Ok(rng.random_range(0..spec.alphabet_size))
    } else {
        Ok(x_t0)
    }
}

/// Rate coefficients of the discrete generator at a fixed time.
///
/// The off-diagonal rate to `y` is `towards_x1 * p1(y) + uniform * pu(y)` where
/// `pu` is uniform over the data alphabet (zero on the mask class).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DfmRates {
    pub towards_x1: f64,
    pub uniform: f64,
    alphabet_size: u32,
}

impl DfmRates {
    pub fn at(spec: &DfmSpec, t: f64) -> Result<Self> {
        let f1 = spec.f1.cdf(t);
        let f2 = spec.f2.cdf(t);
        let d1 = spec.f1.pdf(t);
        let d2 = spec.f2.pdf(t);
        let w = spec.omega_u;
        let k1 = f1;
        let k2 = w * (1.0 - f1) * f2;
        let k3 = (1.0 - f1) * (1.0 - w * f2);
        if !(k3 > 0.0) {
            return Err(Error::domain(format!("discrete rates undefined at t={t}: k3 = 0")));
        }
        let dk1 = d1;
        let dk2 = w * (-d1 * f2 + (1.0 - f1) * d2);
        let dk3 = -dk1 - dk2;
        let towards_x1 = dk1 - k1 * dk3 / k3;
        let uniform = dk2 - k2 * dk3 / k3;
        for (name, r) in [("x1", towards_x1), ("uniform", uniform)] {
            if r < -1e-9 || r.is_nan() {
                return Err(Error::domain(format!("scheduler produced negative {name} rate {r} at t={t}")));
            }
        }
        Ok(DfmRates { towards_x1: towards_x1.max(0.0), uniform: uniform.max(0.0), alphabet_size: spec.alphabet_size })
    }

    fn rate_to(&self, y: usize, x1_dist: &[f64]) -> f64 {
        let pu = if (y as u32) < self.alphabet_size { 1.0 / self.alphabet_size as f64 } else { 0.0 };
        self.towards_x1 * x1_dist[y] + self.uniform * pu
    }

    /// One Euler step of the token CTMC from `x_t` over `dt`.
    pub fn step<R: Rng + ?Sized>(&self, x_t: u32, x1_dist: &[f64], dt: f64, rng: &mut R) -> u32 {
        if dt <= 0.0 {
            return x_t;
        }
        let x = x_t as usize;
        let total: f64 = (0..x1_dist.len()).filter(|&y| y != x).map(|y| self.rate_to(y, x1_dist)).sum();
        let p = (dt * total).min(1.0);
        if !(total > 0.0) || rng.random::<f64>() >= p {
            return x_t;
        }
        let mut v = rng.random::<f64>() * total;
        let mut last = x_t;
        for y in (0..x1_dist.len()).filter(|&y| y != x) {
            let r = self.rate_to(y, x1_dist);
            if r <= 0.0 {
                continue;
            }
            last = y as u32;
            v -= r;
            if v < 0.0 {
                return last;
            }
        }
        last
    }
}

pub fn dfm_step<R: Rng + ?Sized>(
    spec: &DfmSpec,
    x_t: u32,
    x1_distribution: &[f64],
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<u32> {
    if x1_distribution.len() != spec.num_classes() {
        return Err(Error::structural(format!(
            "token distribution has {} classes, expected {}",
            x1_distribution.len(),
            spec.num_classes()
        )));
    }
    let sum: f64 = x1_distribution.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || x1_distribution.iter().any(|&p| p < 0.0) {
        return Err(Error::domain(format!("token distribution must be a probability vector (sums to {sum})")));
    }
    if dt <= 0.0 {
        return Ok(x_t);
    }
    Ok(DfmRates::at(spec, t)?.step(x_t, x1_distribution, dt, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn ou(theta: f64, v0: f64, v1: f64, schedule: VarianceSchedule) -> OuSpec {
        OuSpec { theta, v0, v1, schedule }
    }

    #[test]
    fn transition_fixed_point_and_zero_time() {
        let spec = OuSpec::default();
        let (m, _) = ou_transition(&spec, &[0.3, -1.0], &[0.3, -1.0], 0.1, 0.7).unwrap();
        assert_eq!(m, vec![0.3, -1.0]);
        let (m, v) = ou_transition(&spec, &[2.0], &[0.0], 0.4, 0.4).unwrap();
        assert_eq!((m[0], v), (2.0, 0.0));
        assert!(ou_transition(&spec, &[0.0], &[0.0], 0.5, 0.4).is_err());
    }

    #[test]
    fn transition_variance_matches_quadrature() {
        // Oracle: Simpson quadrature of int_0^0.2 e^{-10 (0.2 - u)} du = (1 - e^{-2}) / 10.
        let oracle = simpson(|u| (-10.0 * (0.2 - u)).exp(), 0.0, 0.2, 10_000);
        assert!((oracle - 0.086_466_471_676_338_73).abs() < 1e-12);
        for schedule in [VarianceSchedule::Geometric, VarianceSchedule::Linear] {
            let (_, v) = ou_transition(&ou(5.0, 1.0, 1.0, schedule), &[0.0], &[1.0], 0.0, 0.2).unwrap();
            assert!((v - 0.086_466_471_676_338_73).abs() < 1e-12, "{schedule:?} {v}");
        }
    }

    #[test]
    fn closed_form_variance_matches_quadrature_for_varying_schedules() {
        let cases = [
            ou(5.0, 10.0, 0.001, VarianceSchedule::Geometric),
            ou(2.0, 0.5, 3.0, VarianceSchedule::Geometric),
            ou(5.0, 10.0, 0.001, VarianceSchedule::Linear),
            ou(1.0, 0.0, 2.0, VarianceSchedule::Linear),
            // 2 theta + ln(v1 / v0) = 0
            ou(1.0, 1.0, (-2.0f64).exp(), VarianceSchedule::Geometric),
        ];
        for spec in cases {
            for &(s, v) in &[(0.0, 1.0), (0.3, 0.35), (0.1, 0.9)] {
                let oracle = simpson(|u| (-2.0 * spec.theta * (v - u)).exp() * spec.variance_at(u), s, v, 20_000);
                let got = spec.integrated_variance(s, v);
                assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0), "{spec:?} {s} {v}: {got} vs {oracle}");
            }
        }
    }

    #[test]
    fn bridge_pinning() {
        let spec = OuSpec::default();
        let mut rng = seeded(3);
        let x = ou_bridge_sample(&spec, &[5.0, -2.0], &[0.25, 0.5], 0.3, 1.0, &mut rng).unwrap();
        assert_eq!(x, vec![0.25, 0.5]);
        let x = ou_bridge_sample(&spec, &[5.0], &[0.25], 0.3, 0.3, &mut rng).unwrap();
        assert_eq!(x, vec![5.0]);
        for s in [0.0, 0.5, 0.99] {
            let m = spec.bridge_moments(s, 1.0).unwrap();
            assert!(m.variance <= 1e-12 && m.coef == 0.0);
            // Approaching the endpoint from below.
            let m = spec.bridge_moments(s, 1.0 - 1e-9).unwrap();
            assert!(m.variance <= 1e-8, "{}", m.variance);
        }
    }

    #[test]
    fn bridge_matches_rejection_conditioned_exact_transitions() {
        // Oracle: draw X_v and then X_1 | X_v from the unconditioned Gaussian
        // transitions, keep paths with |X_1 - anchor| < 0.02.
        let spec = ou(5.0, 1.0, 1.0, VarianceSchedule::Geometric);
        let (s, v, x0, a) = (0.0, 0.5, 0.0, 1.0);
        let first = spec.transition_moments(s, v).unwrap();
        let second = spec.transition_moments(v, 1.0).unwrap();
        let mut rng = seeded(17);
        let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
        while n < 40_000 {
            let z1: f64 = rng.sample(StandardNormal);
            let xv = first.mean(x0, a) + first.variance.sqrt() * z1;
            let z2: f64 = rng.sample(StandardNormal);
            let x1 = second.mean(xv, a) + second.variance.sqrt() * z2;
            if (x1 - a).abs() < 0.02 {
                n += 1;
                sum += xv;
                sum2 += xv * xv;
            }
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let m = spec.bridge_moments(s, v).unwrap();
        assert!((m.mean(x0, a) - mean).abs() / mean < 0.01, "{} vs {mean}", m.mean(x0, a));
        assert!((m.variance - var).abs() / var < 0.03, "{} vs {var}", m.variance);
    }

    #[test]
    fn bridge_chapman_kolmogorov() {
        // Two-stage composition s -> u -> v of affine-Gaussian kernels equals s -> v.
        for spec in [
            ou(5.0, 1.0, 1.0, VarianceSchedule::Geometric),
            ou(5.0, 10.0, 0.001, VarianceSchedule::Geometric),
            ou(1.5, 0.2, 4.0, VarianceSchedule::Linear),
        ] {
            for &(s, u, v) in &[(0.0, 0.3, 0.6), (0.2, 0.5, 0.95), (0.1, 0.11, 0.99)] {
                let su = spec.bridge_moments(s, u).unwrap();
                let uv = spec.bridge_moments(u, v).unwrap();
                let sv = spec.bridge_moments(s, v).unwrap();
                let coef = uv.coef * su.coef;
                let var = uv.coef * uv.coef * su.variance + uv.variance;
                assert!((coef - sv.coef).abs() < 1e-8, "{spec:?} coef {coef} vs {}", sv.coef);
                assert!((var - sv.variance).abs() < 1e-8, "{spec:?} var {var} vs {}", sv.variance);
            }
        }
    }

    #[test]
    fn noiseless_bridge_is_deterministic() {
        let spec = OuSpec::noiseless(5.0);
        let mut rng = seeded(1);
        let a = ou_bridge_sample(&spec, &[0.0], &[1.0], 0.0, 0.5, &mut rng).unwrap();
        let b = ou_bridge_sample(&spec, &[0.0], &[1.0], 0.0, 0.5, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a[0] > 0.0 && a[0] < 1.0);
    }

    fn uniform_dfm(omega: f64, k: u32) -> DfmSpec {
        DfmSpec::new(HazardSpec::Uniform, HazardSpec::Uniform, omega, k)
    }

    #[test]
    fn scheduler_examples() {
        let spec = uniform_dfm(0.2, 4);
        let k = spec.schedulers(0.0);
        assert_eq!((k.k1, k.k2, k.k3), (0.0, 0.0, 1.0));
        let k = spec.schedulers(1.0);
        assert_eq!((k.k1, k.k2, k.k3), (1.0, 0.0, 0.0));
        let k = spec.schedulers(0.5);
        assert!((k.k1 - 0.5).abs() < 1e-15 && (k.k2 - 0.05).abs() < 1e-15 && (k.k3 - 0.45).abs() < 1e-15);
    }

    #[test]
    fn scheduler_simplex() {
        let spec = DfmSpec::new(HazardSpec::beta(2.0, 2.0), HazardSpec::beta(1.5, 1.5), 0.2, 4);
        let mut rng = seeded(5);
        for _ in 0..1000 {
            let t: f64 = rng.random();
            let k = spec.schedulers(t);
            assert!(k.k1 >= 0.0 && k.k2 >= 0.0 && k.k3 >= 0.0);
            assert!((k.k1 + k.k2 + k.k3 - 1.0).abs() < 1e-12);
            let t0 = t * rng.random::<f64>();
            let w = spec.interval_weights(t0, t).unwrap();
            assert!(w.iter().all(|&a| a >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_sample_endpoints_and_frequencies() {
        let spec = uniform_dfm(0.2, 4);
        let mut rng = seeded(9);
        for _ in 0..100 {
            assert_eq!(dfm_interval_sample(&spec, 4, 2, 0.3, 0.3, &mut rng).unwrap(), 4);
            assert_eq!(dfm_interval_sample(&spec, 4, 2, 0.3, 1.0, &mut rng).unwrap(), 2);
        }
        assert!(dfm_interval_sample(&spec, 4, 2, 1.0, 1.0, &mut rng).is_ok());
        assert!(spec.interval_weights(1.0, 1.0).is_err());

        // Oracle: scheduler evaluation gives mixture (0.5, 0.05, 0.45); x1 = 2, x0 = mask.
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[dfm_interval_sample(&spec, 4, 2, 0.0, 0.5, &mut rng).unwrap() as usize] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let expected = [0.0125, 0.0125, 0.5125, 0.0125, 0.45];
        for (f, e) in freq.iter().zip(expected) {
            assert!((f - e).abs() < 0.005, "{freq:?}");
        }
    }

    #[test]
    fn dfm_step_trivial_cases() {
        let spec = uniform_dfm(0.0, 4);
        let mut rng = seeded(2);
        let delta = [0.0, 1.0, 0.0, 0.0, 0.0];
        for _ in 0..1000 {
            assert_eq!(dfm_step(&spec, 1, &delta, 0.4, 0.01, &mut rng).unwrap(), 1);
            assert_eq!(dfm_step(&spec, 3, &delta, 0.4, 0.0, &mut rng).unwrap(), 3);
        }
        assert!(dfm_step(&spec, 3, &[0.5, 0.5], 0.4, 0.1, &mut rng).is_err());
        assert!(dfm_step(&spec, 3, &[0.5, 0.6, 0.0, 0.0, 0.0], 0.4, 0.1, &mut rng).is_err());
    }

    #[test]
    fn dfm_step_chain_hits_interpolant_marginal() {
        // Oracle: with omega = 0 and uniform F1 the marginal mass on x1 is k1(t) = t.
        let spec = uniform_dfm(0.0, 2);
        let target = [0.0, 1.0, 0.0];
        let dt = 1e-3;
        let n = 100_000;
        let mut rng = seeded(21);
        let mut state = vec![2u32; n];
        let mut t = 0.0;
        for step in 0..750 {
            let rates = DfmRates::at(&spec, t).unwrap();
            for x in state.iter_mut() {
                *x = rates.step(*x, &target, dt, &mut rng);
            }
            t = (step + 1) as f64 * dt;
            if step + 1 == 250 || step + 1 == 500 || step + 1 == 750 {
                let hit = state.iter().filter(|&&x| x == 1).count() as f64 / n as f64;
                assert!((hit - t).abs() < 0.01, "t={t}: {hit}");
            }
        }
    }

    #[test]
    fn rates_nonnegative_across_configs() {
        let hazards = [
            HazardSpec::Uniform,
            HazardSpec::beta(2.0, 2.0),
            HazardSpec::beta(1.5, 1.5),
            HazardSpec::beta(3.0, 1.5),
        ];
        for f1 in hazards {
            for f2 in hazards {
                let spec = DfmSpec::new(f1, f2, 0.2, 4);
                for i in 0..1000 {
                    let t = i as f64 / 1000.0;
                    let r = DfmRates::at(&spec, t).unwrap();
                    assert!(r.towards_x1 >= 0.0 && r.uniform >= 0.0);
                }
            }
        }
    }
}
