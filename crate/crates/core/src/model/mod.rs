//! A small per-element regressor for the branching loss.
//!
//! Each element is encoded from its value, token, fixed flag, position and
//! the time; residual blocks then mix in a mean-pooled context of its
//! sequence and its two neighbours. A linear skip from the input features to
//! the heads lets the split head follow `ln(1 - t)` directly.
//!
//! Batches are packed: sequences are stored back to back with segment
//! boundaries, so no padding is needed.

pub mod optim;
pub mod tape;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conditional::{sample_conditional_state, PathTargets, ProcessSpec};
use crate::error::{Error, Result};
use crate::latent::{AugState, Element, LatentConfig, LatentZ};
use crate::objective::{cbf_loss, element_loss, element_loss_grad, LossBreakdown, LossItem, LossWeights, Prediction};
use crate::rng::{stream, stream_id, BfRng};

use optim::{Optimizer, OptimizerKind};
use tape::{Mat, Shift, Tape, Var};

/// `ln(1 - t)` is floored at `ln(LOG_SURVIVAL_FLOOR)`.
const LOG_SURVIVAL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `final_fraction` of it.
    Cosine { final_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    /// Continuous dimension.
    pub d: usize,
    /// Data alphabet size; the mask is class `k`.
    pub k: u32,
    pub time_features: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default)]
    pub grad_clip: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Decay of the parameter moving average that replaces the final weights; 0 disables.
    #[serde(default)]
    pub ema_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            num_blocks: 2,
            d: 0,
            k: 4,
            time_features: 4,
            learning_rate: 2e-3,
            batch_size: 32,
            steps: 1000,
            optimizer: OptimizerKind::default(),
            lr_schedule: LrSchedule::Constant,
            grad_clip: 0.0,
            loss_weights: LossWeights::default(),
            ema_decay: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.time_features == 0 || self.batch_size == 0 {
            return Err(Error::config("hidden_dim, time_features and batch_size must be positive"));
        }
        if self.d == 0 && self.k == 0 {
            return Err(Error::config("a task needs a continuous or a discrete part"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k as usize + 1
    }

    pub fn feature_dim(&self) -> usize {
        // value, one-hot token, fixed flag, time (sin/cos + log survival), position (sin/cos + relative), ln(1 + n)
        self.d + self.num_classes() + 1 + (2 * self.time_features + 1) + (2 * self.time_features + 1) + 1
    }

    pub fn output_dim(&self) -> usize {
        self.d + self.num_classes() + 2
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine { final_fraction } => {
                let p = (step as f64 / self.steps.max(1) as f64).min(1.0);
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
                self.learning_rate * (final_fraction + (1.0 - final_fraction) * c)
            }
        }
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        let (f, h, o) = (self.feature_dim(), self.hidden_dim, self.output_dim());
        let mut s = vec![(f, h), (1, h)];
        for _ in 0..self.num_blocks {
            s.extend([(h, h), (h, h), (h, h), (h, h), (1, h), (h, h), (1, h)]);
        }
        s.extend([(h, o), (1, o), (f, o)]);
        s
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

const PER_BLOCK: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub t: f64,
    pub state: AugState,
    pub targets: PathTargets,
}

impl Model {
    /// Glorot-uniform weights, zero biases; block output and head weights scaled down.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        let n_tensors = shapes.len();
        let mut params = Vec::with_capacity(config.num_params());
        for (idx, &(r, c)) in shapes.iter().enumerate() {
            let is_bias = r == 1;
            let is_skip = idx == n_tensors - 1;
            let in_block = idx >= 2 && idx < 2 + PER_BLOCK * config.num_blocks;
            let scale = if is_bias || is_skip {
                0.0
            } else if idx == n_tensors - 3 || (in_block && (idx - 2) % PER_BLOCK == 5) {
                0.3
            } else {
                1.0
            };
            let limit = scale * (6.0 / (r + c) as f64).sqrt();
            params.extend((0..r * c).map(|_| if limit > 0.0 { rng.random_range(-limit..limit) } else { 0.0 }));
        }
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_params();
        Ok(Model { config, params: vec![0.0; n] })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(Error::structural(format!(
                "{} parameters for a model with {}",
                params.len(),
                config.num_params()
            )));
        }
        Ok(Model { config, params })
    }

    fn features(&self, items: &[(f64, &AugState)]) -> Result<(Mat, Vec<std::ops::Range<usize>>)> {
        let cfg = &self.config;
        let n_rows: usize = items.iter().map(|(_, s)| s.len()).sum();
        let f = cfg.feature_dim();
        let mut m = Mat::zeros(n_rows, f);
        let mut segs = Vec::with_capacity(items.len());
        let mut row = 0;
        for &(t, state) in items {
            let n = state.len();
            segs.push(row..row + n);
            let log_surv = (1.0 - t).max(LOG_SURVIVAL_FLOOR).ln();
            for (i, e) in state.elements.iter().enumerate() {
                let el = &e.element;
                if el.continuous.len() != cfg.d {
                    return Err(Error::structural(format!(
                        "element has {} continuous coordinates, model expects {}",
                        el.continuous.len(),
                        cfg.d
                    )));
                }
                if el.token > cfg.k {
                    return Err(Error::structural(format!("token {} outside alphabet of size {}", el.token, cfg.k)));
                }
                let r = m.row_mut(row + i);
                let mut c = 0;
                r[..cfg.d].copy_from_slice(&el.continuous);
                c += cfg.d;
                r[c + el.token as usize] = 1.0;
                c += cfg.num_classes();
                r[c] = f64::from(u8::from(el.fixed));
                c += 1;
                for j in 0..cfg.time_features {
                    let w = std::f64::consts::PI * (1u64 << j) as f64 * t;
                    r[c] = w.sin();
                    r[c + 1] = w.cos();
                    c += 2;
                }
                r[c] = log_surv;
                c += 1;
                for j in 0..cfg.time_features {
                    let w = std::f64::consts::PI / (1u64 << (j + 1)) as f64 * i as f64;
                    r[c] = w.sin();
                    r[c + 1] = w.cos();
                    c += 2;
                }
                r[c] = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                c += 1;
                r[c] = (1.0 + n as f64).ln();
            }
            row += n;
        }
        Ok((m, segs))
    }

    /// Builds the computation graph. Returns the tape, the output node and the parameter leaves.
    fn graph(&self, params: &[f64], items: &[(f64, &AugState)]) -> Result<(Tape, Var, Vec<Var>)> {
        let (x, segs) = self.features(items)?;
        let mut tape = Tape::new(segs);
        let mut leaves = Vec::new();
        let mut off = 0;
        for (r, c) in self.config.shapes() {
            leaves.push(tape.param(Mat::from_vec(r, c, params[off..off + r * c].to_vec())));
            off += r * c;
        }
        let x = tape.input(x);
        let h = tape.matmul(x, leaves[0]);
        let h = tape.bias(h, leaves[1]);
        let mut h = tape.tanh(h);
        for b in 0..self.config.num_blocks {
            let p = &leaves[2 + PER_BLOCK * b..2 + PER_BLOCK * (b + 1)];
            let pooled = tape.seg_mean(h);
            let ctx = tape.broadcast(pooled);
            let prev = tape.shift(h, Shift::Prev);
            let next = tape.shift(h, Shift::Next);
            let mut z = tape.matmul(h, p[0]);
            for (src, w) in [(ctx, p[1]), (prev, p[2]), (next, p[3])] {
                let term = tape.matmul(src, w);
                z = tape.add(z, term);
            }
            let z = tape.bias(z, p[4]);
            let u = tape.tanh(z);
            let u = tape.matmul(u, p[5]);
            let u = tape.bias(u, p[6]);
            h = tape.add(h, u);
        }
        let n = leaves.len();
        let out = tape.matmul(h, leaves[n - 3]);
        let out = tape.bias(out, leaves[n - 2]);
        let skip = tape.matmul(x, leaves[n - 1]);
        let out = tape.add(out, skip);
        Ok((tape, out, leaves))
    }

    fn decode(&self, out: &Mat, range: std::ops::Range<usize>) -> Vec<Prediction> {
        let (d, c) = (self.config.d, self.config.num_classes());
        range
            .map(|i| {
                let r = out.row(i);
                Prediction {
                    endpoint_mean: r[..d].to_vec(),
                    token_logits: r[d..d + c].to_vec(),
                    log_splits: r[d + c],
                    delete_logit: r[d + c + 1],
                }
            })
            .collect()
    }

    fn check_nonempty(items: &[(f64, &AugState)]) -> Result<()> {
        if items.iter().any(|(_, s)| s.is_empty()) {
            return Err(Error::contract("forward needs nonempty states"));
        }
        Ok(())
    }

    fn forward_with(&self, params: &[f64], items: &[(f64, &AugState)]) -> Result<Vec<Vec<Prediction>>> {
        Self::check_nonempty(items)?;
        let (tape, out, _) = self.graph(params, items)?;
        let out = tape.value(out);
        Ok(tape.segments().iter().map(|r| self.decode(out, r.clone())).collect())
    }

    pub fn forward(&self, t: f64, state: &AugState) -> Result<Vec<Prediction>> {
        Ok(self.forward_with(&self.params, &[(t, state)])?.pop().expect("one item"))
    }

    /// Packed forward over several `(t, state)` pairs.
    pub fn forward_batch(&self, items: &[(f64, &AugState)]) -> Result<Vec<Vec<Prediction>>> {
        self.forward_with(&self.params, items)
    }

    /// Loss of `batch` under `params`, through the same path as [`cbf_loss`].
    pub fn loss_at(&self, params: &[f64], batch: &[TrainExample]) -> Result<LossBreakdown> {
        let items: Vec<(f64, &AugState)> = batch.iter().map(|e| (e.t, &e.state)).collect();
        let preds = self.forward_with(params, &items)?;
        let loss_items: Vec<LossItem<'_>> = batch
            .iter()
            .zip(&preds)
            .map(|(e, p)| LossItem { t: e.t, targets: &e.targets, predictions: p })
            .collect();
        cbf_loss(&loss_items, &self.config.loss_weights)
    }

    /// Batch loss and its gradient with respect to the parameters.
    pub fn loss_and_grad(&self, batch: &[TrainExample]) -> Result<(LossBreakdown, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let items: Vec<(f64, &AugState)> = batch.iter().map(|e| (e.t, &e.state)).collect();
        Self::check_nonempty(&items)?;
        let (tape, out, leaves) = self.graph(&self.params, &items)?;
        let values = tape.value(out);
        if values.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                message: "model output is not finite".into(),
                dump: batch_dump(batch, &LossBreakdown::default()),
            });
        }
        let (d, c) = (self.config.d, self.config.num_classes());
        let inv_b = 1.0 / batch.len() as f64;
        let mut seed = Mat::zeros(values.rows, values.cols);
        let mut loss = LossBreakdown::default();
        for (ex, r) in batch.iter().zip(tape.segments()) {
            if ex.targets.len() != r.len() {
                return Err(Error::structural(format!("{} targets for {} elements", ex.targets.len(), r.len())));
            }
            for (tg, (i, p)) in ex.targets.items.iter().zip(r.clone().zip(self.decode(values, r.clone()))) {
                let Some(tg) = tg else { continue };
                let l = element_loss(tg, &p, &self.config.loss_weights, ex.t)?;
                loss.split += l.split * inv_b;
                loss.delete += l.delete * inv_b;
                loss.continuous += l.continuous * inv_b;
                loss.discrete += l.discrete * inv_b;
                loss.total += l.total * inv_b;
                let g = element_loss_grad(tg, &p, &self.config.loss_weights, ex.t);
                let row = seed.row_mut(i);
                for (dst, src) in row[..d].iter_mut().zip(&g.endpoint_mean) {
                    *dst = src * inv_b;
                }
                for (dst, src) in row[d..d + c].iter_mut().zip(&g.token_logits) {
                    *dst = src * inv_b;
                }
                row[d + c] = g.log_splits * inv_b;
                row[d + c + 1] = g.delete_logit * inv_b;
            }
        }
        let grads = tape.backward(out, seed);
        let mut flat = Vec::with_capacity(self.params.len());
        for (leaf, (r, cc)) in leaves.iter().zip(self.config.shapes()) {
            match &grads[*leaf] {
                Some(g) => flat.extend_from_slice(&g.data),
                None => flat.extend(std::iter::repeat_n(0.0, r * cc)),
            }
        }
        Ok((loss, flat))
    }
}

fn batch_dump(batch: &[TrainExample], loss: &LossBreakdown) -> String {
    let examples: Vec<_> = batch
        .iter()
        .map(|e| {
            json!({
                "t": e.t,
                "tokens": e.state.elements.iter().map(|x| x.element.token).collect::<Vec<_>>(),
                "continuous": e.state.elements.iter().map(|x| x.element.continuous.clone()).collect::<Vec<_>>(),
                "splits": e.targets.items.iter().map(|x| x.as_ref().map(|t| t.splits)).collect::<Vec<_>>(),
                "deleted": e.targets.items.iter().map(|x| x.as_ref().map(|t| t.deleted)).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({"loss": format!("{loss:?}"), "examples": examples}).to_string()
}

/// One optimiser step at learning rate `lr`. Aborts on a non-finite loss or gradient.
pub fn train_step(model: &mut Model, opt: &mut Optimizer, batch: &[TrainExample], lr: f64) -> Result<LossBreakdown> {
    let (loss, mut grad) = model.loss_and_grad(batch)?;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !loss.total.is_finite() || !norm.is_finite() {
        return Err(Error::NonFinite {
            message: format!("loss {} with gradient norm {norm}", loss.total),
            dump: batch_dump(batch, &loss),
        });
    }
    let clip = model.config.grad_clip;
    if clip > 0.0 && norm > clip {
        grad.iter_mut().for_each(|g| *g *= clip / norm);
    }
    opt.update(&mut model.params, &grad, lr);
    Ok(loss)
}

/// Everything needed to turn data samples into training examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSetup {
    pub process: ProcessSpec,
    pub latent: LatentConfig,
}

/// Source of `x1` draws.
pub type DataSource<'a> = dyn Fn(&mut BfRng) -> Vec<Element> + Sync + 'a;

/// Draws `x1`, `Z`, `t ~ U[0, 1)` and `X~_t | Z`, redrawing `t` while the state is empty.
pub fn make_example(x1: &[Element], setup: &TrainSetup, d: usize, rng: &mut BfRng) -> Result<TrainExample> {
    let mask = setup.process.dfm.mask();
    let z = LatentZ::sample(x1, &setup.latent, d, mask, rng)?;
    for _ in 0..64 {
        let t: f64 = rng.random();
        let (state, targets) = sample_conditional_state(&z, t, &setup.process, rng)?;
        if !state.is_empty() {
            return Ok(TrainExample { t, state, targets });
        }
    }
    Err(Error::contract("conditional state stayed empty; check the deletion settings"))
}

/// Batch for optimiser step `step`; example `b` uses stream `(seed, stream_id(step, b))`.
pub fn build_batch(
    source: &DataSource<'_>,
    setup: &TrainSetup,
    config: &ModelConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<TrainExample>> {
    (0..config.batch_size)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, stream_id(step as u64, b as u64));
            let x1 = source(&mut rng);
            make_example(&x1, setup, config.d, &mut rng)
        })
        .collect()
}

/// Runs `model.config.steps` steps, calling `on_step` after each.
pub fn train(
    model: &mut Model,
    source: &DataSource<'_>,
    setup: &TrainSetup,
    seed: u64,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Optimizer> {
    let mut opt = Optimizer::new(model.config.optimizer, model.params.len());
    let decay = model.config.ema_decay;
    let mut ema = vec![0.0; if decay > 0.0 { model.params.len() } else { 0 }];
    let mut weight = 0.0;
    for step in 0..model.config.steps {
        let batch = build_batch(source, setup, &model.config, seed, step)?;
        let lr = model.config.lr_at(step);
        let loss = train_step(model, &mut opt, &batch, lr)?;
        if decay > 0.0 {
            ema.iter_mut().zip(&model.params).for_each(|(e, p)| *e = decay * *e + (1.0 - decay) * p);
            weight = decay * weight + (1.0 - decay);
        }
        on_step(step, &loss);
    }
    if decay > 0.0 && weight > 0.0 {
        // Bias-corrected average.
        model.params.iter_mut().zip(&ema).for_each(|(p, e)| *p = e / weight);
    }
    Ok(opt)
}

/// Relative-error floor: gradients smaller than this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;
pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_COORDS: usize = 64;

/// Largest relative error between the tape gradient and central differences
/// of the batch loss, over a random subset of coordinates.
pub fn grad_check<R: Rng + ?Sized>(model: &Model, batch: &[TrainExample], rng: &mut R) -> Result<f64> {
    let (_, grad) = model.loss_and_grad(batch)?;
    let n = model.params.len();
    let coords: Vec<usize> = if n <= GRAD_CHECK_COORDS {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, GRAD_CHECK_COORDS).into_vec()
    };
    let mut worst: f64 = 0.0;
    let mut p = model.params.clone();
    for i in coords {
        let orig = p[i];
        p[i] = orig + GRAD_CHECK_STEP;
        let up = model.loss_at(&p, batch)?.total;
        p[i] = orig - GRAD_CHECK_STEP;
        let down = model.loss_at(&p, batch)?.total;
        p[i] = orig;
        let fd = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{DfmSpec, OuSpec};
    use crate::conditional::ElementTarget;
    use crate::hazard::HazardSpec;
    use crate::latent::{DeletionScheme, ElementState};
    use crate::objective::split_loss;
    use crate::rng::seeded;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig { hidden_dim: 8, num_blocks: 2, d, k: 4, time_features: 2, batch_size: 4, ..Default::default() }
    }

    fn setup() -> TrainSetup {
        TrainSetup {
            process: ProcessSpec {
                split_hazard: HazardSpec::Uniform,
                del_hazard: HazardSpec::Uniform,
                ou: OuSpec::default(),
                dfm: DfmSpec::new(HazardSpec::Uniform, HazardSpec::Uniform, 0.1, 4),
            },
            latent: LatentConfig { lambda: 0.5, deletion: DeletionScheme::Rate { d_r: 1.5 } },
        }
    }

    fn toy_source(rng: &mut BfRng) -> Vec<Element> {
        let n = 2 + rng.random_range(0..6);
        (0..n).map(|i| Element::new(vec![i as f64 * 0.3, rng.random()], rng.random_range(0..4))).collect()
    }

    fn state(n: usize, d: usize) -> AugState {
        let x0: Vec<Element> = (0..n).map(|i| Element::new(vec![0.1 * i as f64; d], (i % 5) as u32)).collect();
        AugState::initial(&x0)
    }

    #[test]
    fn output_shapes() {
        let mut rng = seeded(50);
        let m = Model::init(cfg(2), &mut rng).unwrap();
        for n in 1..=64 {
            let p = m.forward(0.3, &state(n, 2)).unwrap();
            assert_eq!(p.len(), n);
            assert!(p.iter().all(|q| q.endpoint_mean.len() == 2 && q.token_logits.len() == 5));
            assert!(p.iter().all(|q| q.splits() > 0.0 && q.delete_prob() > 0.0 && q.delete_prob() < 1.0));
        }
        assert!(m.forward(0.3, &state(3, 1)).is_err());
        assert!(m.forward(0.3, &AugState { t: 0.3, elements: vec![] }).is_err());
    }

    #[test]
    fn batch_equivariance_and_determinism() {
        let mut rng = seeded(51);
        let m = Model::init(cfg(2), &mut rng).unwrap();
        let (a, b, c) = (state(3, 2), state(5, 2), state(1, 2));
        let fwd = m.forward_batch(&[(0.1, &a), (0.5, &b), (0.9, &c)]).unwrap();
        let rev = m.forward_batch(&[(0.9, &c), (0.5, &b), (0.1, &a)]).unwrap();
        assert_eq!(fwd[0], rev[2]);
        assert_eq!(fwd[1], rev[1]);
        assert_eq!(fwd[2], rev[0]);
        assert_eq!(fwd[1], m.forward(0.5, &b).unwrap());
    }

    #[test]
    fn zero_parameters_give_unit_links() {
        let m = Model::zeros(cfg(2)).unwrap();
        for p in m.forward(0.4, &state(4, 2)).unwrap() {
            assert_eq!(p.log_splits, 0.0);
            assert_eq!(p.splits(), 1.0);
            assert_eq!(p.delete_prob(), 0.5);
        }
    }

    fn batch(seed: u64, config: &ModelConfig) -> Vec<TrainExample> {
        build_batch(&toy_source, &setup(), config, seed, 0).unwrap()
    }

    #[test]
    fn gradients_pass_the_check() {
        let config = cfg(2);
        for seed in 0..5 {
            let mut rng = seeded(60 + seed);
            let m = Model::init(config.clone(), &mut rng).unwrap();
            let err = grad_check(&m, &batch(seed, &config), &mut rng).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
        let z = Model::zeros(config.clone()).unwrap();
        let err = grad_check(&z, &batch(9, &config), &mut seeded(9)).unwrap();
        assert!(err < 1e-4, "zeros: {err}");
    }

    #[test]
    fn zero_rate_keeps_parameters() {
        let config = cfg(2);
        let mut m = Model::init(config.clone(), &mut seeded(52)).unwrap();
        let before = m.params.clone();
        let mut opt = Optimizer::new(config.optimizer, m.params.len());
        train_step(&mut m, &mut opt, &batch(1, &config), 0.0).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let config = ModelConfig { steps: 10, ..cfg(2) };
        let run = || {
            let mut m = Model::init(config.clone(), &mut seeded(53)).unwrap();
            let mut losses = Vec::new();
            train(&mut m, &toy_source, &setup(), 7, |_, l| losses.push(l.total.to_bits())).unwrap();
            (losses, m.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_targets_reach_the_split_minimum() {
        let config = ModelConfig { learning_rate: 0.02, ..cfg(0) };
        let mut m = Model::init(config.clone(), &mut seeded(54)).unwrap();
        let target = ElementTarget { splits: 2, deleted: false, anchor: ElementState { continuous: vec![], token: 1 } };
        let fixed_batch: Vec<TrainExample> = (1..5)
            .map(|n| {
                let s = state(n, 0);
                TrainExample { t: 0.25 * n as f64 - 0.2, targets: PathTargets { items: vec![Some(target.clone()); n] }, state: s }
            })
            .collect();
        let elements: usize = fixed_batch.iter().map(|e| e.state.len()).sum();
        let per_element = |l: &LossBreakdown| l.split * fixed_batch.len() as f64 / elements as f64;
        let mut opt = Optimizer::new(config.optimizer, m.params.len());
        for _ in 0..500 {
            train_step(&mut m, &mut opt, &fixed_batch, config.learning_rate).unwrap();
        }
        let l = m.loss_at(&m.params, &fixed_batch).unwrap();
        let minimum = split_loss(2, 2.0).unwrap();
        assert!((per_element(&l) - minimum).abs() < 1e-3, "{} vs {minimum}", per_element(&l));
    }

    #[test]
    fn loss_trends_down() {
        let config = ModelConfig { steps: 200, batch_size: 16, hidden_dim: 16, ..cfg(2) };
        let mut m = Model::init(config.clone(), &mut seeded(55)).unwrap();
        let mut losses = Vec::new();
        train(&mut m, &toy_source, &setup(), 3, |_, l| losses.push(l.total)).unwrap();
        let head: f64 = losses[..40].iter().sum::<f64>() / 40.0;
        let tail: f64 = losses[160..].iter().sum::<f64>() / 40.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let config = cfg(2);
        let mut m = Model::init(config.clone(), &mut seeded(56)).unwrap();
        let mut b = batch(2, &config);
        b[0].state.elements[0].element.continuous[0] = f64::NAN;
        let mut opt = Optimizer::new(config.optimizer, m.params.len());
        match train_step(&mut m, &mut opt, &b, 1e-3) {
            Err(Error::NonFinite { dump, .. }) => assert!(dump.contains("examples")),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn ema_replaces_final_weights() {
        let plain = ModelConfig { steps: 3, ..cfg(2) };
        let averaged = ModelConfig { ema_decay: 0.5, ..plain.clone() };
        let run = |config: &ModelConfig| {
            let mut m = Model::init(config.clone(), &mut seeded(57)).unwrap();
            let mut snapshots = Vec::new();
            let mut opt = Optimizer::new(config.optimizer, m.params.len());
            for step in 0..config.steps {
                let b = build_batch(&toy_source, &setup(), config, 7, step).unwrap();
                train_step(&mut m, &mut opt, &b, config.lr_at(step)).unwrap();
                snapshots.push(m.params.clone());
            }
            snapshots
        };
        let snaps = run(&plain);
        let mut m = Model::init(averaged.clone(), &mut seeded(57)).unwrap();
        train(&mut m, &toy_source, &setup(), 7, |_, _| {}).unwrap();
        // Oracle: bias-corrected weights 1/7, 2/7, 4/7 on the three iterates.
        for (i, p) in m.params.iter().enumerate() {
            let expected = (snaps[0][i] + 2.0 * snaps[1][i] + 4.0 * snaps[2][i]) / 7.0;
            assert!((p - expected).abs() < 1e-12);
        }
        assert!(ModelConfig { ema_decay: 1.0, ..plain }.validate().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let config = ModelConfig { lr_schedule: LrSchedule::Cosine { final_fraction: 0.1 }, steps: 100, ..cfg(1) };
        assert_eq!(config.lr_at(0), config.learning_rate);
        assert!((config.lr_at(100) - 0.1 * config.learning_rate).abs() < 1e-15);
    }
}
