//! Oracle-equivalence suites.
//!
//! Each suite compares a component against an independent construction and
//! returns one [`SuiteReport`]. `scale` multiplies every sample count;
//! statistical tolerances widen by `1 / sqrt(scale)` so smaller runs keep the
//! same false-alarm rate. Exact tolerances do not change.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::Serialize;

use crate::base::{ou_bridge_sample, DfmRates, DfmSpec, OuSpec};
use crate::conditional::{counting_flow_exact, counting_flow_stepped, sample_conditional_state, ProcessSpec};
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::data::ToyDatasetSpec;
use crate::harness::eval::{evaluate, ks_distance};
use crate::hazard::HazardSpec;
use crate::latent::{coalesce_forest, AugmentedLeaf, DeletionScheme, Element, LatentConfig, LatentZ};
use crate::model::{build_batch, grad_check, Model, ModelConfig, TrainSetup};
use crate::objective::split_loss;
use crate::rng::{stream, stream_id, BfRng};
use crate::sampler::{make_schedule, sample, OraclePredictor, SampleInit, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the suite's statistic.
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &str, metric: f64, threshold: f64, passed: bool, detail: String) -> Self {
        SuiteReport { name: name.into(), passed, metric, threshold, detail }
    }

    fn error(name: &str, e: crate::Error) -> Self {
        SuiteReport { name: name.into(), passed: false, metric: f64::NAN, threshold: f64::NAN, detail: format!("error: {e}") }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: metric={:.4e} threshold={:.4e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.metric,
            self.threshold,
            self.detail
        )
    }
}

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

fn widen(tol: f64, scale: f64) -> f64 {
    tol / scale.min(1.0).sqrt()
}

fn rng_for(seed: u64, suite: u64, index: u64) -> BfRng {
    stream(seed, stream_id(suite, index))
}

fn finish(name: &str, r: Result<SuiteReport>) -> SuiteReport {
    r.unwrap_or_else(|e| SuiteReport::error(name, e))
}

fn tv(a: &[usize], b: &[usize]) -> f64 {
    let (na, nb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    0.5 * a.iter().zip(b).map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs()).sum::<f64>()
}

/// A draw from `H` by a sampler that does not use the crate's CDF code.
fn hazard_draw(h: &HazardSpec, rng: &mut BfRng) -> f64 {
    match *h {
        HazardSpec::Uniform => rng.random(),
        HazardSpec::Beta { alpha, beta } => Beta::new(alpha, beta).expect("valid beta").sample(rng),
    }
}

/// Waiting-time draws versus the minimum of `R` rejection-sampled `H` draws above `t`.
pub fn interarrival_law(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "interarrival_law";
    let n = scaled(100_000, scale);
    let tol = widen(0.01, scale);
    let run = || -> Result<SuiteReport> {
        let hazards = [HazardSpec::Uniform, HazardSpec::beta(1.0, 1.5), HazardSpec::beta(2.0, 2.0)];
        let mut worst: f64 = 0.0;
        let mut idx = 0;
        for h in hazards {
            for t in [0.0, 0.3, 0.7] {
                for r in [1u32, 3, 10] {
                    let mut rng = rng_for(seed, 1, idx);
                    idx += 1;
                    let mut ours = Vec::with_capacity(n);
                    for _ in 0..n {
                        ours.push(t + h.draw_interarrival(t, r, &mut rng)?);
                    }
                    let mut oracle = Vec::with_capacity(n);
                    for _ in 0..n {
                        let mut m = f64::INFINITY;
                        for _ in 0..r {
                            let x = loop {
                                let x = hazard_draw(&h, &mut rng);
                                if x > t {
                                    break x;
                                }
                            };
                            m = m.min(x);
                        }
                        oracle.push(m);
                    }
                    worst = worst.max(ks_distance(&mut ours, &mut oracle)?);
                }
            }
        }
        Ok(SuiteReport::new(NAME, worst, tol, worst < tol, format!("max KS over 27 configs, n={n}")))
    };
    finish(NAME, run())
}

/// Counting flow: exact event times versus a fixed-step chain.
pub fn ctmc_equivalence(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "ctmc_equivalence";
    let n = scaled(100_000, scale);
    let tol = widen(0.02, scale);
    let run = || -> Result<SuiteReport> {
        let h = HazardSpec::Uniform;
        let z_c = 5u32;
        let mut rng = rng_for(seed, 2, 0);
        let mut exact = vec![0usize; z_c as usize + 1];
        let mut stepped = vec![0usize; z_c as usize + 1];
        for _ in 0..n {
            exact[counting_flow_exact(&h, z_c, 0.5, &mut rng)? as usize] += 1;
        }
        for _ in 0..n {
            stepped[counting_flow_stepped(&h, z_c, 0.5, 1e-4, &mut rng)? as usize] += 1;
        }
        let d = tv(&exact, &stepped);
        Ok(SuiteReport::new(NAME, d, tol, d < tol, format!("TV of counts at t=0.5, z_c=5, delta=1e-4, n={n}")))
    };
    finish(NAME, run())
}

fn termination_process(k: u32) -> ProcessSpec {
    ProcessSpec {
        split_hazard: HazardSpec::Uniform,
        del_hazard: HazardSpec::beta(1.0, 1.5),
        ou: OuSpec::default(),
        dfm: DfmSpec::new(HazardSpec::Uniform, HazardSpec::Uniform, 0.2, k),
    }
}

fn toy_tasks() -> [ToyDatasetSpec; 2] {
    [ToyDatasetSpec::token_runs(), ToyDatasetSpec::polyline2d()]
}

/// `X_1 | Z` equals the data for random `Z` from both toy tasks.
pub fn conditional_termination(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "conditional_termination";
    let n = scaled(10_000, scale);
    let run = || -> Result<SuiteReport> {
        let latent = LatentConfig { lambda: 1.0, deletion: DeletionScheme::Rate { d_r: 1.5 } };
        let (mut failures, mut worst) = (0usize, 0.0f64);
        for i in 0..n {
            let task = &toy_tasks()[i % 2];
            let spec = termination_process(task.alphabet());
            let mut rng = rng_for(seed, 3, i as u64);
            let x1 = task.generate(&mut rng);
            let z = LatentZ::sample(&x1, &latent, task.d(), spec.dfm.mask(), &mut rng)?;
            let (state, _) = sample_conditional_state(&z, 1.0, &spec, &mut rng)?;
            let out = state.values();
            if out.len() != x1.len() || out.iter().zip(&x1).any(|(a, b)| a.token != b.token) {
                failures += 1;
                continue;
            }
            for (a, b) in out.iter().zip(&x1) {
                for (p, q) in a.continuous.iter().zip(&b.continuous) {
                    worst = worst.max((p - q).abs());
                }
            }
        }
        let passed = failures == 0 && worst <= 1e-9;
        Ok(SuiteReport::new(
            NAME,
            worst,
            1e-9,
            passed,
            format!("{failures} length/token mismatches over {n} Z; metric is max continuous error"),
        ))
    };
    finish(NAME, run())
}

/// Bridge moments at `v = 0.5` against Euler-Maruyama paths accepted when they end near the anchor.
pub fn ou_bridge(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "ou_bridge";
    let target = scaled(100_000, scale);
    let tol = widen(0.02, scale);
    let run = || -> Result<SuiteReport> {
        let spec = OuSpec { theta: 5.0, v0: 1.0, v1: 1.0, ..OuSpec::default() };
        let (x0, a, eps, dt) = (2.0, 0.0, 0.02, 1e-3);
        let steps = (1.0 / dt) as usize;
        let mid = steps / 2;
        let mut rng = rng_for(seed, 4, 0);
        let (mut sum, mut sum2, mut accepted, mut paths) = (0.0, 0.0, 0usize, 0usize);
        let sd: Vec<f64> = (0..steps).map(|k| (spec.variance_at(k as f64 * dt) * dt).sqrt()).collect();
        while accepted < target && paths < 200 * target {
            paths += 1;
            let mut x = x0;
            let mut at_mid = 0.0;
            for (k, s) in sd.iter().enumerate() {
                if k == mid {
                    at_mid = x;
                }
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                x += spec.theta * (a - x) * dt + s * z;
            }
            if (x - a).abs() < eps {
                accepted += 1;
                sum += at_mid;
                sum2 += at_mid * at_mid;
            }
        }
        let m = spec.bridge_moments(0.0, 0.5)?;
        let mean = m.mean(x0, a);
        let emp_mean = sum / accepted as f64;
        let emp_var = sum2 / accepted as f64 - emp_mean * emp_mean;
        let err_mean = (emp_mean - mean).abs() / mean.abs();
        let err_var = (emp_var - m.variance).abs() / m.variance;
        let pin = spec.bridge_moments(0.5, 1.0)?.variance;
        let pinned = ou_bridge_sample(&spec, &[0.3], &[a], 0.5, 1.0, &mut rng)?[0] == a;
        let worst = err_mean.max(err_var);
        let passed = worst < tol && pin.abs() <= 1e-12 && pinned;
        Ok(SuiteReport::new(
            NAME,
            worst,
            tol,
            passed,
            format!(
                "mean {emp_mean:.5} vs {mean:.5}, variance {emp_var:.5} vs {:.5}, {accepted} of {paths} paths, pinning variance {pin:e}",
                m.variance
            ),
        ))
    };
    finish(NAME, run())
}

/// Token chains against the interpolant marginal.
pub fn dfm_marginal(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "dfm_marginal";
    let n = scaled(100_000, scale);
    let tol = widen(0.01, scale);
    let run = || -> Result<SuiteReport> {
        let k = 4u32;
        let spec = DfmSpec::new(HazardSpec::Uniform, HazardSpec::beta(2.0, 2.0), 0.3, k);
        let (x1, mask) = (2u32, spec.mask());
        let dist: Vec<f64> = (0..spec.num_classes()).map(|c| if c == x1 as usize { 1.0 } else { 0.0 }).collect();
        let dt = 1e-3;
        let checkpoints = [250usize, 500, 750];
        let mut rng = rng_for(seed, 5, 0);
        let mut chains = vec![mask; n];
        let mut worst: f64 = 0.0;
        for step in 0..=750 {
            if checkpoints.contains(&step) {
                let t = step as f64 * dt;
                let kap = spec.schedulers(t);
                let mut counts = vec![0usize; spec.num_classes()];
                chains.iter().for_each(|&c| counts[c as usize] += 1);
                for (c, &cnt) in counts.iter().enumerate() {
                    let expected = if c == mask as usize {
                        kap.k3
                    } else {
                        kap.k2 / k as f64 + if c == x1 as usize { kap.k1 } else { 0.0 }
                    };
                    worst = worst.max((cnt as f64 / n as f64 - expected).abs());
                }
            }
            if step == 750 {
                break;
            }
            let rates = DfmRates::at(&spec, step as f64 * dt)?;
            for c in chains.iter_mut() {
                *c = rates.step(*c, &dist, dt, &mut rng);
            }
        }
        Ok(SuiteReport::new(NAME, worst, tol, worst < tol, format!("max per-class error at t=0.25,0.5,0.75, n={n}")))
    };
    finish(NAME, run())
}

/// Exhaustive law of the uniform adjacent-merge chain on `leaves` leaves.
pub fn enumerate_merge_shapes(leaves: usize) -> HashMap<String, f64> {
    fn go(items: Vec<String>, p: f64, out: &mut HashMap<String, f64>) {
        if items.len() == 1 {
            *out.entry(items[0].clone()).or_default() += p;
            return;
        }
        let k = items.len() - 1;
        for j in 0..k {
            let mut next = items.clone();
            next[j] = format!("({}{})", items[j], items[j + 1]);
            next.remove(j + 1);
            go(next, p / k as f64, out);
        }
    }
    let mut out = HashMap::new();
    go(vec![".".to_string(); leaves], 1.0, &mut out);
    out
}

/// Structural invariants of sampled forests and 4-leaf shape frequencies.
pub fn forest(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "forest";
    let n_z = scaled(10_000, scale);
    let n_shapes = scaled(100_000, scale);
    let tol = widen(0.01, scale);
    let run = || -> Result<SuiteReport> {
        let mut violations = 0usize;
        let cfgs = [
            LatentConfig { lambda: 0.0, deletion: DeletionScheme::Rate { d_r: 1.3 } },
            LatentConfig { lambda: 2.0, deletion: DeletionScheme::Rate { d_r: 1.0 } },
            LatentConfig { lambda: 0.0, deletion: DeletionScheme::DuplicateEach },
        ];
        for i in 0..n_z {
            let mut rng = rng_for(seed, 6, i as u64);
            let groups = 1 + rng.random_range(0..3u32);
            let mut x1 = Vec::new();
            for g in 0..groups {
                if g > 0 && rng.random_bool(0.5) {
                    x1.push(Element::new(vec![9.0], 0).fixed());
                }
                let len = 1 + rng.random_range(0..10);
                x1.extend((0..len).map(|j| Element::new(vec![j as f64], rng.random_range(0..4)).in_group(g)));
            }
            let z = LatentZ::sample(&x1, &cfgs[i % cfgs.len()], 1, 4, &mut rng)?;
            if z.check_invariants().is_err() || z.x1() != x1 {
                violations += 1;
            }
        }
        let oracle = enumerate_merge_shapes(4);
        let leaves: Vec<AugmentedLeaf> =
            (0..4).map(|j| AugmentedLeaf { element: Element::new(vec![j as f64], 0), deleted: false }).collect();
        let mut rng = rng_for(seed, 6, u64::MAX);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..n_shapes {
            let f = coalesce_forest(&leaves, &[1], &mut rng)?;
            *counts.entry(f.trees[0].shape()).or_default() += 1;
        }
        let worst = oracle
            .iter()
            .map(|(shape, p)| (counts.get(shape).copied().unwrap_or(0) as f64 / n_shapes as f64 - p).abs())
            .fold(0.0, f64::max);
        let passed = violations == 0 && counts.len() == oracle.len() && worst < tol;
        Ok(SuiteReport::new(
            NAME,
            worst,
            tol,
            passed,
            format!("{violations} invariant violations over {n_z} Z; metric is max shape-frequency error, n={n_shapes}"),
        ))
    };
    finish(NAME, run())
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-10 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (a + b) / 2.0
}

/// Gradient check over five seeds and split-loss posterior-mean recovery.
pub fn loss_gradient(seed: u64, _scale: f64) -> SuiteReport {
    const NAME: &str = "loss_gradient";
    let run = || -> Result<SuiteReport> {
        let mut worst_grad: f64 = 0.0;
        for s in 0..5u64 {
            let task = &toy_tasks()[(s % 2) as usize];
            let config = ModelConfig {
                hidden_dim: 12,
                num_blocks: 2,
                d: task.d(),
                k: task.alphabet(),
                time_features: 3,
                batch_size: 6,
                ..ModelConfig::default()
            };
            let setup = TrainSetup {
                process: termination_process(task.alphabet()),
                latent: LatentConfig { lambda: 0.5, deletion: DeletionScheme::Rate { d_r: 1.5 } },
            };
            let mut rng = rng_for(seed, 7, s);
            let model = Model::init(config.clone(), &mut rng)?;
            let data = task.clone();
            let source = move |r: &mut BfRng| data.generate(r);
            let batch = build_batch(&source, &setup, &config, seed ^ s, 0)?;
            worst_grad = worst_grad.max(grad_check(&model, &batch, &mut rng)?);
        }
        let mut worst_mean: f64 = 0.0;
        let mut rng = rng_for(seed, 7, 99);
        for _ in 0..20 {
            let w: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = w.iter().sum();
            let mean: f64 = w.iter().enumerate().map(|(c, p)| c as f64 * p / total).sum();
            let expected =
                |r: f64| w.iter().enumerate().map(|(c, p)| p / total * split_loss(c as u32, r).expect("positive")).sum::<f64>();
            worst_mean = worst_mean.max((golden_section(expected, 1e-9, 10.0) - mean).abs());
        }
        let passed = worst_grad < 1e-4 && worst_mean < 1e-3;
        Ok(SuiteReport::new(
            NAME,
            worst_grad,
            1e-4,
            passed,
            format!("max relative gradient error over 5 seeds; posterior-mean error {worst_mean:.2e} (limit 1e-3)"),
        ))
    };
    finish(NAME, run())
}

/// Sampler driven by exact targets of a known `Z` reproduces its `x1`.
pub fn oracle_sampler(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "oracle_sampler";
    let n = scaled(1_000, scale);
    let run = || -> Result<SuiteReport> {
        let grid = make_schedule(ScheduleKind::Cosine, 1000)?;
        let latent = LatentConfig { lambda: 0.5, deletion: DeletionScheme::Rate { d_r: 1.5 } };
        let (mut failures, mut worst) = (0usize, 0.0f64);
        for i in 0..n {
            let task = &toy_tasks()[i % 2];
            let spec = termination_process(task.alphabet());
            let mut rng = rng_for(seed, 8, i as u64);
            let x1 = task.generate(&mut rng);
            let z = LatentZ::sample(&x1, &latent, task.d(), spec.dfm.mask(), &mut rng)?;
            let oracle = OraclePredictor { z: &z, num_classes: spec.dfm.num_classes() };
            let out = sample(&oracle, &grid, &SampleInit::single(z.x0.len()), &spec, task.d(), &mut rng, false)?;
            if out.elements.len() != x1.len() || out.elements.iter().zip(&x1).any(|(a, b)| a.token != b.token) {
                failures += 1;
                continue;
            }
            for (a, b) in out.elements.iter().zip(&x1) {
                for (p, q) in a.continuous.iter().zip(&b.continuous) {
                    worst = worst.max((p - q).abs());
                }
            }
        }
        let passed = failures == 0 && worst < 1e-2;
        Ok(SuiteReport::new(
            NAME,
            worst,
            1e-2,
            passed,
            format!("{failures} length/token mismatches over {n} trials; metric is max continuous error"),
        ))
    };
    finish(NAME, run())
}

/// Held-out data against itself: every overlap near 1.
pub fn eval_null(seed: u64, scale: f64) -> SuiteReport {
    const NAME: &str = "eval_null";
    let n = scaled(10_000, scale);
    let min = 1.0 - widen(0.02, scale);
    let run = || -> Result<SuiteReport> {
        let mut worst: f64 = 1.0;
        for (i, task) in toy_tasks().iter().enumerate() {
            let cfg = RunConfig::preset(task.clone());
            let a = task.held_out(n, seed.wrapping_add(2 * i as u64));
            let b = task.held_out(n, seed.wrapping_add(2 * i as u64 + 1));
            let r = evaluate(&a, &b, cfg.data.d(), cfg.data.alphabet() as usize, seed)?;
            worst = worst.min(r.min_overlap());
        }
        Ok(SuiteReport::new(NAME, worst, min, worst >= min, format!("min 1-KS over data-vs-data statistics, n={n}")))
    };
    finish(NAME, run())
}

pub type Suite = fn(u64, f64) -> SuiteReport;

pub const SUITES: [(&str, Suite); 9] = [
    ("interarrival_law", interarrival_law),
    ("ctmc_equivalence", ctmc_equivalence),
    ("conditional_termination", conditional_termination),
    ("ou_bridge", ou_bridge),
    ("dfm_marginal", dfm_marginal),
    ("forest", forest),
    ("loss_gradient", loss_gradient),
    ("oracle_sampler", oracle_sampler),
    ("eval_null", eval_null),
];

pub fn run_all(seed: u64, scale: f64, mut on_report: impl FnMut(&SuiteReport)) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .map(|(_, f)| {
            let r = f(seed, scale);
            on_report(&r);
            r
        })
        .collect()
}
