//! Sampling the conditional process `X_t | Z` and its training targets.
//!
//! Every lineage starts at an `x0` element on the root branch of its tree. A
//! lineage ahead of an internal node with `w` leaves waits for the next of its
//! `w - 1` pending splits; a lineage ahead of a deleted leaf waits for its
//! deletion. In between, the continuous part follows the OU bridge towards the
//! branch anchor and the token follows the interval discrete interpolant.
//! Lineages are simulated depth first, first child before second, which emits
//! the frontier at `t` directly in planar order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::base::{dfm_interval_sample, ou_bridge_sample, DfmSpec, OuSpec};
use crate::error::{Error, Result};
use crate::hazard::HazardSpec;
use crate::latent::{AugElement, AugState, BranchId, Child, ElementState, LatentZ, Tree};

/// Event clocks and base processes shared by training and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub split_hazard: HazardSpec,
    pub del_hazard: HazardSpec,
    pub ou: OuSpec,
    pub dfm: DfmSpec,
}

impl ProcessSpec {
    pub fn validate(&self) -> Result<()> {
        self.split_hazard.validate()?;
        self.del_hazard.validate()?;
        self.ou.validate()?;
        self.dfm.validate()
    }
}

/// Training target of a non-fixed element.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTarget {
    /// Remaining splits ahead: `w - 1`.
    pub splits: u32,
    /// Whether the branch ends in a deleted leaf.
    pub deleted: bool,
    pub anchor: ElementState,
}

/// Per-element targets aligned with an [`AugState`]; `None` for fixed elements.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathTargets {
    pub items: Vec<Option<ElementTarget>>,
}

impl PathTargets {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Split,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub tree: u32,
}

fn target_of(tree: &Tree, node: usize) -> ElementTarget {
    let n = tree.node(node);
    ElementTarget { splits: (n.w - 1) as u32, deleted: n.deleted, anchor: n.anchor.clone() }
}

struct Walk<'a, R: Rng + ?Sized> {
    spec: &'a ProcessSpec,
    t: f64,
    rng: &'a mut R,
    out: Vec<AugElement>,
    targets: Vec<Option<ElementTarget>>,
    events: Option<Vec<Event>>,
}

impl<R: Rng + ?Sized> Walk<'_, R> {
    fn advance(&mut self, state: &ElementState, anchor: &ElementState, s: f64, v: f64) -> Result<ElementState> {
        let continuous = ou_bridge_sample(&self.spec.ou, &state.continuous, &anchor.continuous, s, v, self.rng)?;
        let token = if self.spec.dfm.alphabet_size > 0 {
            dfm_interval_sample(&self.spec.dfm, state.token, anchor.token, s, v, self.rng)?
        } else {
            state.token
        };
        Ok(ElementState { continuous, token })
    }

    fn log(&mut self, time: f64, kind: EventKind, tree: u32) {
        if let Some(events) = self.events.as_mut() {
            events.push(Event { time, kind, tree });
        }
    }

    /// Lineage on the branch ahead of `node`, at value `state` at time `s`.
    fn lineage(&mut self, z: &LatentZ, branch: BranchId, node: usize, state: ElementState, s: f64, template: &crate::latent::Element) -> Result<()> {
        let tree = &z.forest.trees[branch.tree as usize];
        let n = tree.node(node);
        let event = match (n.children, n.deleted) {
            (Some(_), _) => Some(s + self.spec.split_hazard.draw_interarrival(s, (n.w - 1) as u32, self.rng)?),
            (None, true) => Some(s + self.spec.del_hazard.draw_interarrival(s, 1, self.rng)?),
            (None, false) => None,
        };
        match event {
            Some(tau) if tau <= self.t => {
                let at_event = self.advance(&state, &n.anchor, s, tau)?;
                match n.children {
                    Some([l, r]) => {
                        self.log(tau, EventKind::Split, branch.tree);
                        self.lineage(z, branch.child(Child::First), l, at_event.clone(), tau, template)?;
                        self.lineage(z, branch.child(Child::Second), r, at_event, tau, template)?;
                    }
                    None => self.log(tau, EventKind::Delete, branch.tree),
                }
            }
            _ => {
                let now = self.advance(&state, &n.anchor, s, self.t)?;
                self.out.push(AugElement { element: template.with_state(&now), branch: Some(branch) });
                self.targets.push(Some(target_of(tree, node)));
            }
        }
        Ok(())
    }
}

fn simulate<R: Rng + ?Sized>(
    z: &LatentZ,
    t: f64,
    spec: &ProcessSpec,
    rng: &mut R,
    log: bool,
) -> Result<(AugState, PathTargets, Vec<Event>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("conditional state needs 0 <= t <= 1, got {t}")));
    }
    let mut walk = Walk {
        spec,
        t,
        rng,
        out: Vec::with_capacity(z.x1_aug.len()),
        targets: Vec::with_capacity(z.x1_aug.len()),
        events: log.then(Vec::new),
    };
    let mut tree = 0u32;
    for e in &z.x0 {
        if e.fixed {
            walk.out.push(AugElement { element: e.clone(), branch: None });
            walk.targets.push(None);
            continue;
        }
        let root = z.forest.trees[tree as usize].root;
        walk.lineage(z, BranchId::root(tree), root, e.state(), 0.0, e)?;
        tree += 1;
    }
    let events = walk.events.take().unwrap_or_default();
    Ok((AugState { t, elements: walk.out }, PathTargets { items: walk.targets }, events))
}

/// Draws `X~_t | Z` and the targets of every element of it.
pub fn sample_conditional_state<R: Rng + ?Sized>(
    z: &LatentZ,
    t: f64,
    spec: &ProcessSpec,
    rng: &mut R,
) -> Result<(AugState, PathTargets)> {
    let (state, targets, _) = simulate(z, t, spec, rng, false)?;
    Ok((state, targets))
}

/// As [`sample_conditional_state`], also returning every event up to `t` in simulation order.
pub fn sample_with_events<R: Rng + ?Sized>(
    z: &LatentZ,
    t: f64,
    spec: &ProcessSpec,
    rng: &mut R,
) -> Result<(AugState, PathTargets, Vec<Event>)> {
    simulate(z, t, spec, rng, true)
}

/// Recovers targets from branch ids.
pub fn targets_from_state(z: &LatentZ, state: &AugState) -> Result<PathTargets> {
    let items = state
        .elements
        .iter()
        .map(|e| match &e.branch {
            None => Ok(None),
            Some(b) => {
                let (tree, node) = z.node(b)?;
                Ok(Some(target_of(tree, node)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathTargets { items })
}

/// Header of the trajectory CSV for `d` continuous coordinates.
pub fn dump_header(d: usize) -> String {
    let mut cols = vec!["sample_id".to_string(), "t".into(), "element_index".into(), "tree".into(), "path".into()];
    cols.extend((0..d).map(|c| format!("x{c}")));
    cols.extend(["token".into(), "R_Z".into(), "rho_Z".into()]);
    cols.join(",")
}

/// CSV rows of one state; targets may be absent (e.g. during marginal sampling).
pub fn dump_rows(sample_id: usize, state: &AugState, targets: Option<&PathTargets>) -> Vec<String> {
    state
        .elements
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (tree, path) = match &e.branch {
                Some(b) => (b.tree.to_string(), b.path.to_string()),
                None => ("fixed".to_string(), "-".to_string()),
            };
            let mut row = vec![sample_id.to_string(), format!("{}", state.t), i.to_string(), tree, path];
            row.extend(e.element.continuous.iter().map(|x| format!("{x}")));
            row.push(e.element.token.to_string());
            match targets.and_then(|t| t.items.get(i)).and_then(Option::as_ref) {
                Some(tg) => {
                    row.push(tg.splits.to_string());
                    row.push(u8::from(tg.deleted).to_string());
                }
                None => row.extend(["".into(), "".into()]),
            }
            row.join(",")
        })
        .collect()
}

/// Counting flow by exact event times: the count at `t_end` after `z_c` increments.
pub fn counting_flow_exact<R: Rng + ?Sized>(h: &HazardSpec, z_c: u32, t_end: f64, rng: &mut R) -> Result<u32> {
    let mut t = 0.0;
    for count in 0..z_c {
        t += h.draw_interarrival(t, z_c - count, rng)?;
        if t > t_end {
            return Ok(count);
        }
    }
    Ok(z_c)
}

/// Counting flow by a fixed-step chain: increment with probability
/// `(z_c - count) h(t) delta` each step.
pub fn counting_flow_stepped<R: Rng + ?Sized>(h: &HazardSpec, z_c: u32, t_end: f64, delta: f64, rng: &mut R) -> Result<u32> {
    if !(delta > 0.0) || !(0.0..1.0).contains(&t_end) {
        return Err(Error::domain("stepped counting flow needs delta > 0 and t_end < 1"));
    }
    let steps = (t_end / delta).round() as usize;
    let mut count = 0;
    for k in 0..steps {
        if count == z_c {
            break;
        }
        let rate = (z_c - count) as f64 * h.hazard_rate(k as f64 * delta)?;
        if rng.random::<f64>() < (rate * delta).min(1.0) {
            count += 1;
        }
    }
    Ok(count)
}
