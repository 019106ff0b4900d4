//! Distribution-matching statistics between generated and reference samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Element;

/// Two-sample Kolmogorov-Smirnov distance. Sorts both inputs in place.
pub fn ks_distance(a: &mut [f64], b: &mut [f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("KS distance needs two nonempty samples"));
    }
    if a.iter().chain(b.iter()).any(|x| x.is_nan()) {
        return Err(Error::domain("KS distance on NaN input"));
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// `1 - KS`: 1 for identical empirical laws, 0 for disjoint supports.
pub fn ks_overlap(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    Ok(1.0 - ks_distance(&mut a, &mut b)?)
}

/// Positions whose token frequencies are compared need this many samples on both sides.
pub const MIN_POSITION_SUPPORT: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequencyL1 {
    pub max: f64,
    pub mean: f64,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_generated: usize,
    pub n_reference: usize,
    /// `1 - KS` per scalar statistic.
    pub overlaps: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_l1: Option<TokenFrequencyL1>,
}

impl EvalReport {
    pub fn min_overlap(&self) -> f64 {
        self.overlaps.values().copied().fold(1.0, f64::min)
    }
}

fn lengths(samples: &[Vec<Element>]) -> Vec<f64> {
    samples.iter().map(|s| s.len() as f64).collect()
}

fn coordinate(samples: &[Vec<Element>], c: usize) -> Vec<f64> {
    samples.iter().flatten().filter_map(|e| e.continuous.get(c).copied()).collect()
}

fn dist(a: &Element, b: &Element) -> f64 {
    a.continuous.iter().zip(&b.continuous).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn step_lengths(samples: &[Vec<Element>]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.windows(2).map(|w| dist(&w[0], &w[1]))).collect()
}

fn pairwise(samples: &[Vec<Element>]) -> Vec<f64> {
    samples
        .iter()
        .flat_map(|s| (0..s.len()).flat_map(move |i| (i + 1..s.len()).map(move |j| dist(&s[i], &s[j]))))
        .collect()
}

fn position_frequencies(samples: &[Vec<Element>], k: usize) -> Vec<(usize, Vec<f64>)> {
    let max_len = samples.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(max_len);
    for p in 0..max_len {
        let mut counts = vec![0usize; k];
        let mut n = 0;
        for s in samples {
            if let Some(e) = s.get(p) {
                n += 1;
                if (e.token as usize) < k {
                    counts[e.token as usize] += 1;
                }
            }
        }
        out.push((n, counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect()));
    }
    out
}

/// Max and mean L1 distance between per-position token frequency vectors,
/// over positions with at least [`MIN_POSITION_SUPPORT`] samples in both sets.
pub fn token_frequency_l1(generated: &[Vec<Element>], reference: &[Vec<Element>], k: usize) -> TokenFrequencyL1 {
    let g = position_frequencies(generated, k);
    let r = position_frequencies(reference, k);
    let l1s: Vec<f64> = g
        .iter()
        .zip(&r)
        .filter(|((ng, _), (nr, _))| *ng >= MIN_POSITION_SUPPORT && *nr >= MIN_POSITION_SUPPORT)
        .map(|((_, fg), (_, fr))| fg.iter().zip(fr).map(|(a, b)| (a - b).abs()).sum())
        .collect();
    let positions = l1s.len();
    TokenFrequencyL1 {
        max: l1s.iter().copied().fold(0.0, f64::max),
        mean: if positions == 0 { 0.0 } else { l1s.iter().sum::<f64>() / positions as f64 },
        positions,
    }
}

/// Length overlap always; coordinate marginals, adjacent-step and pairwise
/// distances when `d > 0`; per-position token frequencies when `k > 0`.
pub fn evaluate(generated: &[Vec<Element>], reference: &[Vec<Element>], d: usize, k: usize, seed: u64) -> Result<EvalReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::contract("evaluation needs nonempty sample sets"));
    }
    let mut overlaps = BTreeMap::new();
    overlaps.insert("length".to_string(), ks_overlap(&lengths(generated), &lengths(reference))?);
    if d > 0 {
        let names = ["x", "y", "z"];
        for c in 0..d {
            let name = names.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("coord{c}"));
            let (g, r) = (coordinate(generated, c), coordinate(reference, c));
            if !g.is_empty() && !r.is_empty() {
                overlaps.insert(name, ks_overlap(&g, &r)?);
            }
        }
        for (name, f) in [("step_distance", step_lengths as fn(&[Vec<Element>]) -> Vec<f64>), ("pairwise_distance", pairwise)] {
            let (g, r) = (f(generated), f(reference));
            if !g.is_empty() && !r.is_empty() {
                overlaps.insert(name.to_string(), ks_overlap(&g, &r)?);
            }
        }
    }
    let token_l1 = (k > 0).then(|| token_frequency_l1(generated, reference, k));
    Ok(EvalReport { seed, n_generated: generated.len(), n_reference: reference.len(), overlaps, token_l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn boundary_cases() {
        let a = [1.0, 2.0, 2.0, 3.0];
        assert_eq!(ks_overlap(&a, &[3.0, 2.0, 1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(ks_overlap(&a, &[10.0, 11.0]).unwrap(), 0.0);
        assert!(ks_overlap(&[], &a).is_err());
        assert!(ks_overlap(&a, &[]).is_err());
    }

    #[test]
    fn ties_are_handled_jointly() {
        assert_eq!(ks_overlap(&[0.0, 1.0], &[0.0, 1.0, 1.0, 0.0]).unwrap(), 1.0);
        // F_a jumps to 1 at 0; F_b is 1/2 there.
        assert!((ks_overlap(&[0.0, 0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shifted_uniforms() {
        // sup |F_a - F_b| = 0.5, attained at x = 0.5.
        let mut rng = seeded(11);
        let a: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..100_000).map(|_| 0.5 + rng.random::<f64>()).collect();
        let o = ks_overlap(&a, &b).unwrap();
        assert!((o - 0.5).abs() < 0.01, "{o}");
    }

    #[test]
    fn token_l1_on_identical_sets_is_zero() {
        let s: Vec<Vec<Element>> =
            (0..MIN_POSITION_SUPPORT).map(|i| (0..3).map(|p| Element::new(vec![], ((i + p) % 4) as u32)).collect()).collect();
        let l1 = token_frequency_l1(&s, &s, 4);
        assert_eq!(l1.positions, 3);
        assert_eq!(l1.max, 0.0);
        let r = evaluate(&s, &s, 0, 4, 0).unwrap();
        assert_eq!(r.min_overlap(), 1.0);
    }
}
