//! Euler sampling of the marginal process.
//!
//! Each step moves every non-fixed element along the OU bridge towards its
//! predicted endpoint and its token along the discrete generator towards the
//! predicted token distribution, then draws at most one event per element:
//! deletion with probability `dt h_del(t) rho`, otherwise a split with
//! probability `dt h_split(t) R`. On the last interval the base step is
//! replaced by a snap: after the events a fresh prediction at `t = 1` sets
//! each value to its predicted mean and draws each token from the predicted
//! data-token distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::base::{DfmRates, GaussMoments};
use crate::conditional::{targets_from_state, ProcessSpec};
use crate::error::{Error, Result};
use crate::latent::{base_element, AugElement, AugState, Child, Element, LatentZ};
use crate::model::Model;
use crate::objective::{log_sum_exp, softmax, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Uniform,
    #[default]
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleKind::Uniform),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!("unknown schedule '{other}' (expected uniform or cosine)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub n_steps: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { kind: ScheduleKind::Cosine, n_steps: 100 }
    }
}

impl StepSchedule {
    pub fn grid(&self) -> Result<Vec<f64>> {
        make_schedule(self.kind, self.n_steps)
    }
}

/// Time grid `t_0 = 0 < ... < t_n = 1`.
pub fn make_schedule(kind: ScheduleKind, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::contract(format!("a schedule needs at least 2 steps, got {n}")));
    }
    let grid: Vec<f64> = (0..=n)
        .map(|k| {
            let tau = k as f64 / n as f64;
            match kind {
                ScheduleKind::Uniform => tau,
                ScheduleKind::Cosine => 1.0 - ((std::f64::consts::PI * tau).cos() + 1.0) / 2.0,
            }
        })
        .collect();
    let mut grid = grid;
    grid[0] = 0.0;
    grid[n] = 1.0;
    check_grid(&grid)?;
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 3 || grid[0] != 0.0 || *grid.last().expect("nonempty") != 1.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("time grid must start at 0, end at 1 and increase strictly"));
    }
    Ok(())
}

/// Anything that maps states to per-element predictions.
pub trait Predictor: Sync {
    fn predict_batch(&self, items: &[(f64, &AugState)]) -> Result<Vec<Vec<Prediction>>>;

    /// `(continuous dimension, number of token classes)` when fixed by the predictor.
    fn dims(&self) -> Option<(usize, usize)> {
        None
    }

    fn predict(&self, t: f64, state: &AugState) -> Result<Vec<Prediction>> {
        Ok(self.predict_batch(&[(t, state)])?.pop().unwrap_or_default())
    }
}

impl Predictor for Model {
    fn predict_batch(&self, items: &[(f64, &AugState)]) -> Result<Vec<Vec<Prediction>>> {
        self.forward_batch(items)
    }

    fn dims(&self) -> Option<(usize, usize)> {
        Some((self.config.d, self.config.num_classes()))
    }
}

/// Predicts the exact conditional targets of a known `Z` from branch ids.
pub struct OraclePredictor<'a> {
    pub z: &'a LatentZ,
    pub num_classes: usize,
}

impl Predictor for OraclePredictor<'_> {
    fn predict_batch(&self, items: &[(f64, &AugState)]) -> Result<Vec<Vec<Prediction>>> {
        items
            .iter()
            .map(|(_, state)| {
                let targets = targets_from_state(self.z, state)?;
                Ok(state
                    .elements
                    .iter()
                    .zip(&targets.items)
                    .map(|(e, tg)| match tg {
                        None => Prediction {
                            endpoint_mean: e.element.continuous.clone(),
                            token_logits: one_hot_logits(self.num_classes, e.element.token),
                            log_splits: f64::NEG_INFINITY,
                            delete_logit: f64::NEG_INFINITY,
                        },
                        Some(tg) => Prediction {
                            endpoint_mean: tg.anchor.continuous.clone(),
                            token_logits: one_hot_logits(self.num_classes, tg.anchor.token),
                            log_splits: (tg.splits as f64).ln(),
                            delete_logit: if tg.deleted { f64::INFINITY } else { f64::NEG_INFINITY },
                        },
                    })
                    .collect())
            })
            .collect()
    }
}

fn one_hot_logits(n: usize, token: u32) -> Vec<f64> {
    (0..n).map(|c| if c == token as usize { 0.0 } else { f64::NEG_INFINITY }).collect()
}

/// Quantities shared by every element within one step.
struct StepContext {
    bridge: GaussMoments,
    rates: Option<DfmRates>,
    h_split: f64,
    h_del: f64,
    t: f64,
    dt: f64,
}

impl StepContext {
    fn new(spec: &ProcessSpec, t: f64, dt: f64, base_step: bool) -> Result<Self> {
        let (bridge, rates) = if base_step {
            let rates = if spec.dfm.alphabet_size > 0 { Some(DfmRates::at(&spec.dfm, t)?) } else { None };
            (spec.ou.bridge_moments(t, t + dt)?, rates)
        } else {
            (GaussMoments { coef: 1.0, variance: 0.0 }, None)
        };
        Ok(StepContext {
            bridge,
            rates,
            h_split: spec.split_hazard.hazard_rate_unchecked(t),
            h_del: spec.del_hazard.hazard_rate_unchecked(t),
            t,
            dt,
        })
    }
}

/// Split and deletion counts of one step or of a whole trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EventCounts {
    pub splits: usize,
    pub deletions: usize,
}

/// Event probability `min(1, dt h rate)` with `0 * inf = 0`.
fn event_prob(dt: f64, h: f64, rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    (dt * h * rate).min(1.0)
}

fn base_step<R: Rng + ?Sized>(ctx: &StepContext, el: &mut Element, pred: &Prediction, rng: &mut R) -> Result<()> {
    if pred.endpoint_mean.len() != el.continuous.len() {
        return Err(Error::structural("prediction and element dimensions differ"));
    }
    let sd = ctx.bridge.variance.sqrt();
    for (x, &a) in el.continuous.iter_mut().zip(&pred.endpoint_mean) {
        let z: f64 = if sd > 0.0 { rng.sample(rand_distr::StandardNormal) } else { 0.0 };
        *x = ctx.bridge.mean(*x, a) + sd * z;
    }
    if let Some(rates) = &ctx.rates {
        el.token = rates.step(el.token, &softmax(&pred.token_logits), ctx.dt, rng);
    }
    Ok(())
}

fn step_with<R: Rng + ?Sized>(
    ctx: &StepContext,
    state: &AugState,
    preds: &[Prediction],
    base: bool,
    rng: &mut R,
) -> Result<(AugState, EventCounts)> {
    if preds.len() != state.len() {
        return Err(Error::structural(format!("{} predictions for {} elements", preds.len(), state.len())));
    }
    let mut counts = EventCounts::default();
    let mut elements = Vec::with_capacity(state.len() + 4);
    for (e, p) in state.elements.iter().zip(preds) {
        if e.element.fixed {
            elements.push(e.clone());
            continue;
        }
        let mut el = e.element.clone();
        if base {
            base_step(ctx, &mut el, p, rng)?;
        }
        let u: f64 = rng.random();
        let p_del = event_prob(ctx.dt, ctx.h_del, p.delete_prob());
        if u < p_del {
            counts.deletions += 1;
            continue;
        }
        let p_split = event_prob(ctx.dt, ctx.h_split, p.splits());
        if rng.random::<f64>() < p_split {
            counts.splits += 1;
            let (a, b) = match &e.branch {
                Some(br) => (Some(br.child(Child::First)), Some(br.child(Child::Second))),
                None => (None, None),
            };
            elements.push(AugElement { element: el.clone(), branch: a });
            elements.push(AugElement { element: el, branch: b });
        } else {
            elements.push(AugElement { element: el, branch: e.branch.clone() });
        }
    }
    Ok((AugState { t: ctx.t + ctx.dt, elements }, counts))
}

/// One Euler step from `t` to `t + dt`: base moves, then delete-or-split events.
pub fn euler_step<R: Rng + ?Sized>(
    state: &AugState,
    predictions: &[Prediction],
    t: f64,
    dt: f64,
    spec: &ProcessSpec,
    rng: &mut R,
) -> Result<(AugState, EventCounts)> {
    if !(dt > 0.0) || t < 0.0 || t + dt > 1.0 + 1e-12 {
        return Err(Error::contract(format!("euler step needs dt > 0 and t + dt <= 1, got t={t} dt={dt}")));
    }
    let ctx = StepContext::new(spec, t, dt, true)?;
    step_with(&ctx, state, predictions, true, rng)
}

/// Draw from the data tokens only (mask excluded). Keeps `current` when no data token has mass.
fn sample_data_token<R: Rng + ?Sized>(logits: &[f64], k: usize, current: u32, rng: &mut R) -> u32 {
    let data = &logits[..k.min(logits.len())];
    let lse = log_sum_exp(data);
    if data.is_empty() || !lse.is_finite() {
        return current;
    }
    let mut u: f64 = rng.random();
    for (c, &l) in data.iter().enumerate() {
        u -= (l - lse).exp();
        if u < 0.0 {
            return c as u32;
        }
    }
    data.iter().enumerate().filter(|(_, l)| l.is_finite()).map(|(c, _)| c as u32).next_back().unwrap_or(current)
}

fn snap<R: Rng + ?Sized>(state: &mut AugState, preds: &[Prediction], k: usize, rng: &mut R) {
    for (e, p) in state.elements.iter_mut().zip(preds) {
        if e.element.fixed {
            continue;
        }
        e.element.continuous.clone_from(&p.endpoint_mean);
        e.element.token = sample_data_token(&p.token_logits, k, e.element.token, rng);
    }
}

/// Layout of the initial state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSegment {
    /// `length` base elements of group `group`.
    Group { group: u32, length: usize },
    /// A conditioning element, carried through unchanged.
    Fixed(Element),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleInit {
    pub segments: Vec<InitSegment>,
}

impl SampleInit {
    pub fn single(length: usize) -> Self {
        SampleInit { segments: vec![InitSegment::Group { group: 0, length }] }
    }

    fn draw_x0<R: Rng + ?Sized>(&self, d: usize, mask: u32, rng: &mut R) -> Result<Vec<Element>> {
        let mut x0 = Vec::new();
        for s in &self.segments {
            match s {
                InitSegment::Group { group, length } => {
                    if *length == 0 {
                        return Err(Error::contract(format!("group {group} needs an initial length >= 1")));
                    }
                    x0.extend((0..*length).map(|_| base_element(*group, d, mask, rng)));
                }
                InitSegment::Fixed(e) => {
                    let mut e = e.clone();
                    e.fixed = true;
                    x0.push(e);
                }
            }
        }
        Ok(x0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub elements: Vec<Element>,
    pub initial_len: usize,
    pub events: EventCounts,
    /// State at every grid time, when requested.
    pub trajectory: Option<Vec<AugState>>,
}

/// Runs several trajectories in lockstep so the predictor sees one packed batch per step.
/// Trajectory `i` draws only from `rngs[i]`.
pub fn sample_batch<P: Predictor + ?Sized, R: Rng>(
    predictor: &P,
    grid: &[f64],
    inits: &[SampleInit],
    spec: &ProcessSpec,
    d: usize,
    rngs: &mut [R],
    record: bool,
) -> Result<Vec<SampleOutput>> {
    check_grid(grid)?;
    if inits.len() != rngs.len() {
        return Err(Error::structural("one generator per trajectory is required"));
    }
    if let Some((pd, pc)) = predictor.dims() {
        if pd != d || pc != spec.dfm.num_classes() {
            return Err(Error::config(format!(
                "predictor emits d={pd}, {pc} classes; process expects d={d}, {} classes",
                spec.dfm.num_classes()
            )));
        }
    }
    let mask = spec.dfm.mask();
    let k = spec.dfm.alphabet_size as usize;
    let mut states = Vec::with_capacity(inits.len());
    for (init, rng) in inits.iter().zip(rngs.iter_mut()) {
        states.push(AugState::initial(&init.draw_x0(d, mask, rng)?));
    }
    let initial: Vec<usize> = states.iter().map(AugState::len).collect();
    let mut counts = vec![EventCounts::default(); states.len()];
    let mut trajectories: Vec<Vec<AugState>> = if record { states.iter().map(|s| vec![s.clone()]).collect() } else { Vec::new() };

    let n = grid.len() - 1;
    for step in 0..n {
        let (t, dt) = (grid[step], grid[step + 1] - grid[step]);
        let last = step + 1 == n;
        let ctx = StepContext::new(spec, t, dt, !last)?;
        let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].is_empty()).collect();
        let items: Vec<(f64, &AugState)> = active.iter().map(|&i| (t, &states[i])).collect();
        let preds = predictor.predict_batch(&items)?;
        for (&i, p) in active.iter().zip(&preds) {
            let (next, c) = step_with(&ctx, &states[i], p, !last, &mut rngs[i])?;
            states[i] = next;
            counts[i].splits += c.splits;
            counts[i].deletions += c.deletions;
        }
        if last {
            let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].is_empty()).collect();
            let items: Vec<(f64, &AugState)> = active.iter().map(|&i| (1.0, &states[i])).collect();
            let preds = predictor.predict_batch(&items)?;
            for (&i, p) in active.iter().zip(&preds) {
                snap(&mut states[i], p, k, &mut rngs[i]);
            }
        }
        if record {
            for (traj, s) in trajectories.iter_mut().zip(&states) {
                traj.push(s.clone());
            }
        }
    }
    let mut trajectories = trajectories.into_iter();
    Ok(states
        .into_iter()
        .zip(initial)
        .zip(counts)
        .map(|((s, initial_len), events)| SampleOutput {
            elements: s.values(),
            initial_len,
            events,
            trajectory: if record { trajectories.next() } else { None },
        })
        .collect())
}

/// A single trajectory.
pub fn sample<P: Predictor + ?Sized, R: Rng>(
    predictor: &P,
    grid: &[f64],
    init: &SampleInit,
    spec: &ProcessSpec,
    d: usize,
    rng: &mut R,
    record: bool,
) -> Result<SampleOutput> {
    let mut out = sample_batch(predictor, grid, std::slice::from_ref(init), spec, d, std::slice::from_mut(rng), record)?;
    Ok(out.pop().expect("one trajectory"))
}
