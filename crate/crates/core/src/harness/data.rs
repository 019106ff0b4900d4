//! Toy variable-length datasets.
//!
//! - `token_runs`: discrete-only sequences of runs over a small alphabet.
//! - `polyline2d`: noisy points along a circular arc, each labelled with the
//!   quadrant of its noise-free position.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{poisson, Element};
use crate::rng::{stream, stream_id};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyDatasetSpec {
    TokenRuns {
        #[serde(default = "runs_base")]
        base_length: usize,
        #[serde(default = "runs_extra")]
        mean_extra: f64,
        #[serde(default = "runs_alphabet")]
        alphabet: u32,
        /// Probability that a run continues for one more element.
        #[serde(default = "runs_continue")]
        continue_prob: f64,
        /// Law of the first token; uniform when empty.
        #[serde(default = "runs_first")]
        first_token_probs: Vec<f64>,
    },
    Polyline2d {
        #[serde(default = "poly_base")]
        base_length: usize,
        #[serde(default = "poly_extra")]
        mean_extra: f64,
        #[serde(default = "poly_jitter")]
        jitter: f64,
        #[serde(default = "poly_radius")]
        radius: (f64, f64),
        #[serde(default = "poly_arc")]
        arc: (f64, f64),
    },
}

fn runs_base() -> usize {
    3
}
fn runs_extra() -> f64 {
    6.0
}
fn runs_alphabet() -> u32 {
    4
}
fn runs_continue() -> f64 {
    2.0 / 3.0
}
fn runs_first() -> Vec<f64> {
    vec![0.4, 0.3, 0.2, 0.1]
}
fn poly_base() -> usize {
    4
}
fn poly_extra() -> f64 {
    8.0
}
fn poly_jitter() -> f64 {
    0.05
}
fn poly_radius() -> (f64, f64) {
    (1.0, 2.0)
}
fn poly_arc() -> (f64, f64) {
    (PI / 2.0, PI)
}

/// Stream unit reserved for held-out reference data.
pub const HELD_OUT_UNIT: u64 = u64::MAX - 1;

impl ToyDatasetSpec {
    pub fn token_runs() -> Self {
        ToyDatasetSpec::TokenRuns {
            base_length: runs_base(),
            mean_extra: runs_extra(),
            alphabet: runs_alphabet(),
            continue_prob: runs_continue(),
            first_token_probs: runs_first(),
        }
    }

    pub fn polyline2d() -> Self {
        ToyDatasetSpec::Polyline2d {
            base_length: poly_base(),
            mean_extra: poly_extra(),
            jitter: poly_jitter(),
            radius: poly_radius(),
            arc: poly_arc(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyDatasetSpec::TokenRuns { .. } => "token_runs",
            ToyDatasetSpec::Polyline2d { .. } => "polyline2d",
        }
    }

    /// Continuous dimension.
    pub fn d(&self) -> usize {
        match self {
            ToyDatasetSpec::TokenRuns { .. } => 0,
            ToyDatasetSpec::Polyline2d { .. } => 2,
        }
    }

    pub fn alphabet(&self) -> u32 {
        match self {
            ToyDatasetSpec::TokenRuns { alphabet, .. } => *alphabet,
            ToyDatasetSpec::Polyline2d { .. } => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ToyDatasetSpec::TokenRuns { base_length, mean_extra, alphabet, continue_prob, first_token_probs } => {
                if *base_length == 0 || !(*mean_extra >= 0.0) || *alphabet < 2 || !(0.0..1.0).contains(continue_prob) {
                    return Err(Error::config("token_runs needs base_length >= 1, mean_extra >= 0, alphabet >= 2, continue_prob in [0, 1)"));
                }
                if !first_token_probs.is_empty() {
                    let s: f64 = first_token_probs.iter().sum();
                    if first_token_probs.len() != *alphabet as usize || (s - 1.0).abs() > 1e-9 || first_token_probs.iter().any(|&p| p < 0.0) {
                        return Err(Error::config("first_token_probs must be a distribution over the alphabet"));
                    }
                }
            }
            ToyDatasetSpec::Polyline2d { base_length, mean_extra, jitter, radius, arc } => {
                if *base_length < 2 || !(*mean_extra >= 0.0) || !(*jitter >= 0.0) || !(radius.0 > 0.0 && radius.1 >= radius.0) || !(arc.0 > 0.0 && arc.1 >= arc.0) {
                    return Err(Error::config("polyline2d needs base_length >= 2 and ordered positive ranges"));
                }
            }
        }
        Ok(())
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Element> {
        match self {
            ToyDatasetSpec::TokenRuns { base_length, mean_extra, alphabet, continue_prob, first_token_probs } => {
                gen_token_runs(*base_length, *mean_extra, *alphabet, *continue_prob, first_token_probs, rng)
            }
            ToyDatasetSpec::Polyline2d { base_length, mean_extra, jitter, radius, arc } => {
                gen_polyline2d(*base_length, *mean_extra, *jitter, *radius, *arc, rng)
            }
        }
    }

    /// `n` held-out samples; sample `i` uses its own stream of `seed`.
    pub fn held_out(&self, n: usize, seed: u64) -> Vec<Vec<Element>> {
        (0..n).map(|i| self.generate(&mut stream(seed, stream_id(HELD_OUT_UNIT, i as u64)))).collect()
    }
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> u32 {
    let mut u: f64 = rng.random();
    for (i, &w) in p.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i as u32;
        }
    }
    (p.len() - 1) as u32
}

pub fn gen_token_runs<R: Rng + ?Sized>(
    base_length: usize,
    mean_extra: f64,
    alphabet: u32,
    continue_prob: f64,
    first_token_probs: &[f64],
    rng: &mut R,
) -> Vec<Element> {
    let n = base_length + poisson(mean_extra, rng);
    let mut tok = if first_token_probs.is_empty() { rng.random_range(0..alphabet) } else { categorical(first_token_probs, rng) };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && !rng.random_bool(continue_prob) {
            // A new run switches to one of the other symbols.
            let other = rng.random_range(0..alphabet - 1);
            tok = if other >= tok { other + 1 } else { other };
        }
        out.push(Element::new(Vec::new(), tok));
    }
    out
}

pub fn quadrant(x: f64, y: f64) -> u32 {
    match (x >= 0.0, y >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

pub fn gen_polyline2d<R: Rng + ?Sized>(
    base_length: usize,
    mean_extra: f64,
    jitter: f64,
    radius: (f64, f64),
    arc: (f64, f64),
    rng: &mut R,
) -> Vec<Element> {
    let n = base_length + poisson(mean_extra, rng);
    let r = rng.random_range(radius.0..=radius.1);
    let start = rng.random_range(0.0..2.0 * PI);
    let span = rng.random_range(arc.0..=arc.1);
    let noise = Normal::new(0.0, jitter).expect("finite jitter");
    (0..n)
        .map(|i| {
            let a = start + span * i as f64 / (n - 1) as f64;
            let (x, y) = (r * a.cos(), r * a.sin());
            let p = vec![x + noise.sample(rng), y + noise.sample(rng)];
            Element::new(p, quadrant(x, y))
        })
        .collect()
}
