//! The conditioning variable `Z = (x1 with deletions, x0, forest, anchors)`.
//!
//! `Z` fully determines the conditional process. It is built from a data
//! sample `x1` in four steps:
//!
//! 1. [`sample_x0`]: one block of `1 + Poisson(lambda)` base elements per group.
//! 2. [`insert_deletions`]: to-be-deleted copies of `x1` elements.
//! 3. [`coalesce_forest`]: planar binary trees by uniform adjacent-pair merges.
//! 4. [`assign_anchors`]: descendant-weighted internal anchors, masked tokens.
//!
//! Groups are contiguous runs of non-fixed elements. Fixed elements are
//! conditioning context: they pass through unchanged and belong to no tree.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Continuous and discrete value of an element, or of a tree anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ElementState {
    pub continuous: Vec<f64>,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Element {
    pub continuous: Vec<f64>,
    pub token: u32,
    #[serde(default)]
    pub group: u32,
    #[serde(default)]
    pub fixed: bool,
}

impl Element {
    pub fn new(continuous: Vec<f64>, token: u32) -> Self {
        Element { continuous, token, group: 0, fixed: false }
    }

    pub fn in_group(mut self, group: u32) -> Self {
        self.group = group;
        self
    }

    pub fn fixed(mut self) -> Self {
        self.fixed = true;
        self
    }

    pub fn state(&self) -> ElementState {
        ElementState { continuous: self.continuous.clone(), token: self.token }
    }

    pub fn with_state(&self, state: &ElementState) -> Element {
        Element { continuous: state.continuous.clone(), token: state.token, group: self.group, fixed: self.fixed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Child {
    First,
    Second,
}

/// Root-to-node sequence of child choices, packed one bit per level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BranchPath {
    words: SmallVec<[u64; 2]>,
    len: u32,
}

impl BranchPath {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> Option<Child> {
        if i >= self.len() {
            return None;
        }
        let bit = (self.words[i / 64] >> (i % 64)) & 1;
        Some(if bit == 0 { Child::First } else { Child::Second })
    }

    pub fn push(&mut self, child: Child) {
        let i = self.len();
        if i.is_multiple_of(64) {
            self.words.push(0);
        }
        if child == Child::Second {
            self.words[i / 64] |= 1 << (i % 64);
        }
        self.len += 1;
    }

    pub fn child(&self, child: Child) -> Self {
        let mut next = self.clone();
        next.push(child);
        next
    }

    pub fn iter(&self) -> impl Iterator<Item = Child> + '_ {
        (0..self.len()).filter_map(move |i| self.get(i))
    }

    pub fn is_prefix_of(&self, other: &BranchPath) -> bool {
        self.len <= other.len && (0..self.len()).all(|i| self.get(i) == other.get(i))
    }
}

impl std::fmt::Display for BranchPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        for c in self.iter() {
            f.write_str(if c == Child::First { "0" } else { "1" })?;
        }
        Ok(())
    }
}

/// Tree index plus path: identifies the branch an element is currently on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BranchId {
    pub tree: u32,
    pub path: BranchPath,
}

impl BranchId {
    pub fn root(tree: u32) -> Self {
        BranchId { tree, path: BranchPath::root() }
    }

    pub fn child(&self, child: Child) -> Self {
        BranchId { tree: self.tree, path: self.path.child(child) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub anchor: ElementState,
    pub children: Option<[usize; 2]>,
    pub deleted: bool,
    /// Leaf count of the subtree.
    pub w: usize,
    /// Index into `x1_aug` for leaves.
    pub leaf: Option<usize>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Binary rooted plane tree stored as an arena; children precede parents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub root: usize,
    pub group: u32,
}

impl Tree {
    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn root_node(&self) -> &Node {
        &self.nodes[self.root]
    }

    pub fn resolve(&self, path: &BranchPath) -> Option<usize> {
        let mut cur = self.root;
        for c in path.iter() {
            let [l, r] = self.nodes[cur].children?;
            cur = if c == Child::First { l } else { r };
        }
        Some(cur)
    }

    /// Leaf indices (into `x1_aug`) in left-to-right order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.root_node().w);
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            match self.nodes[i].children {
                Some([l, r]) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.extend(self.nodes[i].leaf),
            }
        }
        out
    }

    /// Parenthesised shape, e.g. `((..).)`, for comparing topologies.
    pub fn shape(&self) -> String {
        fn go(t: &Tree, i: usize, out: &mut String) {
            match t.nodes[i].children {
                Some([l, r]) => {
                    out.push('(');
                    go(t, l, out);
                    go(t, r, out);
                    out.push(')');
                }
                None => out.push('.'),
            }
        }
        let mut s = String::new();
        go(self, self.root, &mut s);
        s
    }

    fn to_json(&self, i: usize) -> Value {
        let n = &self.nodes[i];
        let anchor = json!({"continuous": n.anchor.continuous, "token": n.anchor.token});
        match n.children {
            Some([l, r]) => json!({"w": n.w, "anchor": anchor, "children": [self.to_json(l), self.to_json(r)]}),
            None => json!({"w": 1, "leaf": n.leaf, "deleted": n.deleted, "anchor": anchor}),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedLeaf {
    pub element: Element,
    pub deleted: bool,
}

/// A maximal run of same-group non-fixed elements, or a single fixed element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Group { group: u32, range: Range<usize> },
    Fixed(usize),
}

/// Splits a sequence into group runs and fixed elements.
///
/// Errors when a group is interrupted (by another group or a fixed element) and resumes later.
pub fn segments(elements: &[Element]) -> Result<Vec<Segment>> {
    let mut out: Vec<Segment> = Vec::new();
    let mut seen: Vec<u32> = Vec::new();
    for (i, e) in elements.iter().enumerate() {
        if e.fixed {
            out.push(Segment::Fixed(i));
            continue;
        }
        if let Some(Segment::Group { group, range }) = out.last_mut() {
            if *group == e.group {
                range.end = i + 1;
                continue;
            }
        }
        if seen.contains(&e.group) {
            return Err(Error::structural(format!("group {} is not contiguous", e.group)));
        }
        seen.push(e.group);
        out.push(Segment::Group { group: e.group, range: i..i + 1 });
    }
    Ok(out)
}

fn group_ranges(elements: &[Element]) -> Result<Vec<(u32, Range<usize>)>> {
    Ok(segments(elements)?
        .into_iter()
        .filter_map(|s| match s {
            Segment::Group { group, range } => Some((group, range)),
            Segment::Fixed(_) => None,
        })
        .collect())
}

/// `1 + Poisson(lambda)`.
pub fn draw_initial_length<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<usize> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("initial-length rate must be >= 0, got {lambda}")));
    }
    Ok(1 + poisson(lambda, rng))
}

pub(crate) fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let p = Poisson::new(lambda).expect("positive finite rate");
    let v: f64 = p.sample(rng);
    v as usize
}

/// A base element: standard normal coordinates and a masked token.
pub fn base_element<R: Rng + ?Sized>(group: u32, d: usize, mask: u32, rng: &mut R) -> Element {
    let continuous = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Element { continuous, token: mask, group, fixed: false }
}

/// Initial state: per group `1 + Poisson(lambda)` base elements; fixed elements copied in place.
pub fn sample_x0<R: Rng + ?Sized>(x1: &[Element], lambda: f64, d: usize, k: u32, rng: &mut R) -> Result<Vec<Element>> {
    if x1.is_empty() {
        return Err(Error::contract("x1 must be nonempty"));
    }
    let mut out = Vec::new();
    for seg in segments(x1)? {
        match seg {
            Segment::Fixed(i) => out.push(x1[i].clone()),
            Segment::Group { group, .. } => {
                let n = draw_initial_length(lambda, rng)?;
                out.extend((0..n).map(|_| base_element(group, d, k, rng)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum DeletionScheme {
    /// `Poisson(max(l0, l1) d_r - l1)` copies per group.
    Rate { d_r: f64 },
    /// Every element duplicated once; only valid when `l0 = 1` per group.
    DuplicateEach,
}

impl Default for DeletionScheme {
    fn default() -> Self {
        DeletionScheme::Rate { d_r: 1.0 }
    }
}

/// Adds to-be-deleted copies of `x1` elements. `x0_lens` lists the initial
/// length of each group run, in sequence order.
pub fn insert_deletions<R: Rng + ?Sized>(
    x1: &[Element],
    x0_lens: &[usize],
    scheme: DeletionScheme,
    rng: &mut R,
) -> Result<Vec<AugmentedLeaf>> {
    let segs = segments(x1)?;
    let n_groups = segs.iter().filter(|s| matches!(s, Segment::Group { .. })).count();
    if x0_lens.len() != n_groups {
        return Err(Error::structural(format!("{} initial lengths for {n_groups} groups", x0_lens.len())));
    }
    if let DeletionScheme::Rate { d_r } = scheme {
        if !(d_r >= 1.0 && d_r.is_finite()) {
            return Err(Error::config(format!("deletion rate d_r must be >= 1, got {d_r}")));
        }
    }
    let mut out = Vec::with_capacity(x1.len() * 2);
    let mut lens = x0_lens.iter();
    for seg in segs {
        let range = match seg {
            Segment::Fixed(i) => {
                out.push(AugmentedLeaf { element: x1[i].clone(), deleted: false });
                continue;
            }
            Segment::Group { range, .. } => range,
        };
        let l0 = *lens.next().expect("checked above");
        let l1 = range.len();
        // Copies placed before / after each template.
        let mut before = vec![0usize; l1];
        let mut after = vec![0usize; l1];
        match scheme {
            DeletionScheme::Rate { d_r } => {
                let param = l0.max(l1) as f64 * d_r - l1 as f64;
                debug_assert!(param >= -1e-9);
                // Floor keeps condition 1 (l1_aug >= l0) when l0 > l1.
                let count = poisson(param.max(0.0), rng).max(l0.saturating_sub(l1));
                for _ in 0..count {
                    let j = rng.random_range(0..l1);
                    if rng.random_bool(0.5) {
                        before[j] += 1;
                    } else {
                        after[j] += 1;
                    }
                }
            }
            DeletionScheme::DuplicateEach => {
                if l0 != 1 {
                    return Err(Error::config(format!("duplicate_each needs one initial element per group, got {l0}")));
                }
                for j in 0..l1 {
                    if rng.random_bool(0.5) {
                        before[j] += 1;
                    } else {
                        after[j] += 1;
                    }
                }
            }
        }
        for (j, i) in range.enumerate() {
            let copy = AugmentedLeaf { element: x1[i].clone(), deleted: true };
            out.extend(std::iter::repeat_n(copy.clone(), before[j]));
            out.push(AugmentedLeaf { element: x1[i].clone(), deleted: false });
            out.extend(std::iter::repeat_n(copy, after[j]));
        }
    }
    Ok(out)
}

struct ProtoNode {
    children: Option<[usize; 2]>,
    leaf: Option<usize>,
}

/// Uniform adjacent-pair coalescence, run independently in each group until
/// that group has `x0_lens[g]` roots. Leaf anchors are taken from `x1_aug`;
/// internal anchors are left empty for [`assign_anchors`].
pub fn coalesce_forest<R: Rng + ?Sized>(x1_aug: &[AugmentedLeaf], x0_lens: &[usize], rng: &mut R) -> Result<Forest> {
    let elements: Vec<Element> = x1_aug.iter().map(|l| l.element.clone()).collect();
    let groups = group_ranges(&elements)?;
    if groups.len() != x0_lens.len() {
        return Err(Error::structural(format!("{} initial lengths for {} groups", x0_lens.len(), groups.len())));
    }
    let mut forest = Forest::default();
    for ((group, range), &roots) in groups.into_iter().zip(x0_lens) {
        if roots == 0 || range.len() < roots {
            return Err(Error::contract(format!(
                "group {group}: {} leaves cannot form {roots} trees",
                range.len()
            )));
        }
        let mut arena: Vec<ProtoNode> = range.clone().map(|i| ProtoNode { children: None, leaf: Some(i) }).collect();
        let mut frontier: Vec<usize> = (0..arena.len()).collect();
        while frontier.len() > roots {
            let j = rng.random_range(0..frontier.len() - 1);
            let parent = arena.len();
            arena.push(ProtoNode { children: Some([frontier[j], frontier[j + 1]]), leaf: None });
            frontier[j] = parent;
            frontier.remove(j + 1);
        }
        for root in frontier {
            forest.trees.push(extract_tree(&arena, root, group, x1_aug));
        }
    }
    Ok(forest)
}

fn extract_tree(arena: &[ProtoNode], root: usize, group: u32, x1_aug: &[AugmentedLeaf]) -> Tree {
    fn copy(arena: &[ProtoNode], i: usize, x1_aug: &[AugmentedLeaf], out: &mut Vec<Node>) -> usize {
        let node = match arena[i].children {
            Some([l, r]) => {
                let l = copy(arena, l, x1_aug, out);
                let r = copy(arena, r, x1_aug, out);
                let w = out[l].w + out[r].w;
                Node { anchor: ElementState::default(), children: Some([l, r]), deleted: false, w, leaf: None }
            }
            None => {
                let leaf = arena[i].leaf.expect("leaf proto node");
                Node {
                    anchor: x1_aug[leaf].element.state(),
                    children: None,
                    deleted: x1_aug[leaf].deleted,
                    w: 1,
                    leaf: Some(leaf),
                }
            }
        };
        out.push(node);
        out.len() - 1
    }
    let mut nodes = Vec::new();
    let root = copy(arena, root, x1_aug, &mut nodes);
    Tree { nodes, root, group }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Leaf-count weighted mean of the children; masked token.
    #[default]
    WeightedGeodesic,
}

/// Fills internal anchors from the leaves up.
pub fn assign_anchors(mut forest: Forest, policy: AnchorPolicy, mask_token: u32) -> Forest {
    let AnchorPolicy::WeightedGeodesic = policy;
    for tree in &mut forest.trees {
        // Children precede parents in the arena.
        for i in 0..tree.nodes.len() {
            let Some([l, r]) = tree.nodes[i].children else { continue };
            let (wl, wr) = (tree.nodes[l].w as f64, tree.nodes[r].w as f64);
            let continuous = tree.nodes[l]
                .anchor
                .continuous
                .iter()
                .zip(&tree.nodes[r].anchor.continuous)
                .map(|(&a, &b)| (wl * a + wr * b) / (wl + wr))
                .collect();
            tree.nodes[i].anchor = ElementState { continuous, token: mask_token };
        }
    }
    forest
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    /// Rate of the Poisson part of the initial length per group.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub deletion: DeletionScheme,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig { lambda: 0.0, deletion: DeletionScheme::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ {
    pub x1_aug: Vec<AugmentedLeaf>,
    /// Initial sequence, fixed elements included in place.
    pub x0: Vec<Element>,
    /// One tree per non-fixed element of `x0`, in order.
    pub forest: Forest,
}

impl LatentZ {
    /// Samples `Z | x1` with the concrete schemes of this module.
    pub fn sample<R: Rng + ?Sized>(x1: &[Element], cfg: &LatentConfig, d: usize, mask: u32, rng: &mut R) -> Result<Self> {
        let x0 = sample_x0(x1, cfg.lambda, d, mask, rng)?;
        let x0_lens: Vec<usize> = group_ranges(&x0)?.iter().map(|(_, r)| r.len()).collect();
        let x1_aug = insert_deletions(x1, &x0_lens, cfg.deletion, rng)?;
        let forest = coalesce_forest(&x1_aug, &x0_lens, rng)?;
        let forest = assign_anchors(forest, AnchorPolicy::WeightedGeodesic, mask);
        Ok(LatentZ { x1_aug, x0, forest })
    }

    /// `x1` with the to-be-deleted copies removed.
    pub fn x1(&self) -> Vec<Element> {
        self.x1_aug.iter().filter(|l| !l.deleted).map(|l| l.element.clone()).collect()
    }

    /// Resolves a branch id to `(tree, node)`.
    pub fn node(&self, branch: &BranchId) -> Result<(&Tree, usize)> {
        let tree = self
            .forest
            .trees
            .get(branch.tree as usize)
            .ok_or_else(|| Error::structural(format!("no tree {}", branch.tree)))?;
        let node = tree
            .resolve(&branch.path)
            .ok_or_else(|| Error::structural(format!("dangling path {} in tree {}", branch.path, branch.tree)))?;
        Ok((tree, node))
    }

    /// Checks planarity, leaf counts, group separation and both construction conditions.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::structural(m));
        let non_fixed_x0 = self.x0.iter().filter(|e| !e.fixed).count();
        if non_fixed_x0 != self.forest.trees.len() {
            return fail(format!("{} trees for {non_fixed_x0} initial elements", self.forest.trees.len()));
        }
        let mut order = Vec::new();
        for (ti, tree) in self.forest.trees.iter().enumerate() {
            for (i, n) in tree.nodes.iter().enumerate() {
                match n.children {
                    Some([l, r]) => {
                        if n.deleted {
                            return fail(format!("tree {ti}: internal node {i} marked deleted"));
                        }
                        if n.w != tree.nodes[l].w + tree.nodes[r].w {
                            return fail(format!("tree {ti}: leaf count mismatch at node {i}"));
                        }
                    }
                    None => {
                        let Some(leaf) = n.leaf else { return fail(format!("tree {ti}: leaf {i} without index")) };
                        let aug = &self.x1_aug[leaf];
                        if n.w != 1 || aug.deleted != n.deleted || aug.element.fixed || aug.element.group != tree.group {
                            return fail(format!("tree {ti}: leaf {i} inconsistent with x1_aug[{leaf}]"));
                        }
                        if !n.deleted && n.anchor != aug.element.state() {
                            return fail(format!("tree {ti}: surviving leaf anchor differs from x1"));
                        }
                    }
                }
            }
            order.extend(tree.leaves());
        }
        let expected: Vec<usize> = (0..self.x1_aug.len()).filter(|&i| !self.x1_aug[i].element.fixed).collect();
        if order != expected {
            return fail("leaf order differs from x1_aug order".into());
        }
        let x0_groups = group_ranges(&self.x0)?;
        let x1_elems: Vec<Element> = self.x1_aug.iter().map(|l| l.element.clone()).collect();
        let x1_groups = group_ranges(&x1_elems)?;
        if x0_groups.len() != x1_groups.len() {
            return fail("group layout differs between x0 and x1_aug".into());
        }
        for ((g0, r0), (g1, r1)) in x0_groups.iter().zip(&x1_groups) {
            if g0 != g1 || r1.len() < r0.len() {
                return fail(format!("group {g1}: {} augmented elements for {} initial", r1.len(), r0.len()));
            }
        }
        Ok(())
    }

    /// One JSON line: augmented data, initial state and nested trees.
    pub fn to_json(&self) -> Value {
        json!({
            "x1_aug": self.x1_aug,
            "x0": self.x0,
            "forest": self.forest.trees.iter().map(|t| json!({"group": t.group, "root": t.to_json(t.root)})).collect::<Vec<_>>(),
        })
    }
}

/// One element of the augmented state: value plus branch (absent for fixed elements).
#[derive(Debug, Clone, PartialEq)]
pub struct AugElement {
    pub element: Element,
    pub branch: Option<BranchId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugState {
    pub t: f64,
    pub elements: Vec<AugElement>,
}

impl AugState {
    /// State at `t = 0`: each non-fixed `x0` element at the root of its tree.
    pub fn initial(x0: &[Element]) -> Self {
        let mut tree = 0u32;
        let elements = x0
            .iter()
            .map(|e| {
                let branch = if e.fixed {
                    None
                } else {
                    tree += 1;
                    Some(BranchId::root(tree - 1))
                };
                AugElement { element: e.clone(), branch }
            })
            .collect();
        AugState { t: 0.0, elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn values(&self) -> Vec<Element> {
        self.elements.iter().map(|e| e.element.clone()).collect()
    }
}

/// Replaces element `i` (0-based) by two copies on its first and second child branches.
pub fn split_op(state: &AugState, i: usize) -> Result<AugState> {
    let target = state
        .elements
        .get(i)
        .ok_or_else(|| Error::structural(format!("split index {i} out of range for length {}", state.len())))?;
    let branch = target
        .branch
        .as_ref()
        .ok_or_else(|| Error::structural(format!("element {i} is fixed and cannot split")))?;
    let mut elements = Vec::with_capacity(state.len() + 1);
    elements.extend_from_slice(&state.elements[..i]);
    elements.push(AugElement { element: target.element.clone(), branch: Some(branch.child(Child::First)) });
    elements.push(AugElement { element: target.element.clone(), branch: Some(branch.child(Child::Second)) });
    elements.extend_from_slice(&state.elements[i + 1..]);
    Ok(AugState { t: state.t, elements })
}

/// Removes element `i` (0-based).
pub fn del_op(state: &AugState, i: usize) -> Result<AugState> {
    if i >= state.len() {
        return Err(Error::structural(format!("delete index {i} out of range for length {}", state.len())));
    }
    let mut elements = state.elements.clone();
    elements.remove(i);
    Ok(AugState { t: state.t, elements })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::collections::HashMap;

    fn seq(values: &[f64], group: u32) -> Vec<Element> {
        values.iter().enumerate().map(|(i, &v)| Element::new(vec![v], i as u32 % 4).in_group(group)).collect()
    }

    #[test]
    fn branch_path_packing() {
        let mut p = BranchPath::root();
        for i in 0..150 {
            p.push(if i % 3 == 0 { Child::Second } else { Child::First });
        }
        assert_eq!(p.len(), 150);
        for i in 0..150 {
            assert_eq!(p.get(i), Some(if i % 3 == 0 { Child::Second } else { Child::First }));
        }
        assert_eq!(p.get(150), None);
        let q = p.child(Child::First);
        assert!(p.is_prefix_of(&q) && !q.is_prefix_of(&p));
    }

    #[test]
    fn segments_reject_split_groups() {
        let mut x = seq(&[0.0, 1.0], 0);
        x.extend(seq(&[2.0], 1));
        assert_eq!(segments(&x).unwrap().len(), 2);
        x.extend(seq(&[3.0], 0));
        assert!(segments(&x).is_err());
        let y = vec![Element::new(vec![], 0), Element::new(vec![], 1).fixed(), Element::new(vec![], 0)];
        assert!(segments(&y).is_err());
    }

    #[test]
    fn x0_lengths() {
        let mut rng = seeded(1);
        let x1 = seq(&[0.0, 1.0, 2.0], 0);
        for _ in 0..100 {
            assert_eq!(sample_x0(&x1, 0.0, 1, 4, &mut rng).unwrap().len(), 1);
        }
        let mut two = seq(&[0.0, 1.0], 3);
        two.extend(seq(&[5.0], 7));
        let x0 = sample_x0(&two, 0.0, 1, 4, &mut rng).unwrap();
        assert_eq!(x0.iter().map(|e| e.group).collect::<Vec<_>>(), vec![3, 7]);
        assert!(x0.iter().all(|e| e.token == 4));

        // Oracle: 1 + Poisson(20) has mean 21.
        let n = 100_000;
        let total: usize = (0..n).map(|_| sample_x0(&x1, 20.0, 0, 4, &mut rng).unwrap().len()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 21.0).abs() < 0.1, "{mean}");
        assert!(sample_x0(&[], 0.0, 1, 4, &mut rng).is_err());
    }

    #[test]
    fn deletion_counts() {
        let mut rng = seeded(2);
        let two = seq(&[0.0, 1.0], 0);
        for _ in 0..200 {
            let aug = insert_deletions(&two, &[2], DeletionScheme::Rate { d_r: 1.0 }, &mut rng).unwrap();
            assert_eq!(aug.len(), 2);
        }
        // Oracle: Poisson(max(1, 4) * 1.2 - 4) has mean 0.8.
        let four = seq(&[0.0, 1.0, 2.0, 3.0], 0);
        let n = 100_000;
        let mut total = 0usize;
        for _ in 0..n {
            let aug = insert_deletions(&four, &[1], DeletionScheme::Rate { d_r: 1.2 }, &mut rng).unwrap();
            total += aug.iter().filter(|l| l.deleted).count();
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 0.8).abs() < 0.02, "{mean}");

        let three = seq(&[0.0, 1.0, 2.0], 0);
        let aug = insert_deletions(&three, &[1], DeletionScheme::DuplicateEach, &mut rng).unwrap();
        assert_eq!(aug.len(), 6);
        assert_eq!(aug.iter().filter(|l| l.deleted).count(), 3);
        assert!(insert_deletions(&three, &[2], DeletionScheme::DuplicateEach, &mut rng).is_err());
        assert!(insert_deletions(&three, &[1], DeletionScheme::Rate { d_r: 0.5 }, &mut rng).is_err());
    }

    #[test]
    fn deleted_copies_sit_next_to_their_template() {
        let mut rng = seeded(3);
        let x1 = seq(&[0.0, 10.0, 20.0, 30.0], 0);
        for _ in 0..500 {
            let aug = insert_deletions(&x1, &[1], DeletionScheme::Rate { d_r: 2.0 }, &mut rng).unwrap();
            let survivors: Vec<Element> = aug.iter().filter(|l| !l.deleted).map(|l| l.element.clone()).collect();
            assert_eq!(survivors, x1);
            // Each deleted copy is adjacent to a run that reaches its template.
            for (i, l) in aug.iter().enumerate() {
                if l.deleted {
                    let same = |j: usize| aug[j].element == l.element;
                    let mut k = i;
                    while k > 0 && same(k - 1) && aug[k].deleted {
                        k -= 1;
                    }
                    let mut m = i;
                    while m + 1 < aug.len() && same(m + 1) && aug[m].deleted {
                        m += 1;
                    }
                    assert!((k..=m).any(|j| !aug[j].deleted && same(j)));
                }
            }
        }
    }

    #[test]
    fn condition_one_floor() {
        let mut rng = seeded(4);
        let x1 = seq(&[0.0, 1.0], 0);
        for _ in 0..200 {
            let aug = insert_deletions(&x1, &[5], DeletionScheme::Rate { d_r: 1.0 }, &mut rng).unwrap();
            assert!(aug.len() >= 5);
        }
    }

    #[test]
    fn coalesce_small_cases() {
        let mut rng = seeded(5);
        let leaves: Vec<AugmentedLeaf> =
            seq(&[0.0, 1.0, 2.0], 0).into_iter().map(|e| AugmentedLeaf { element: e, deleted: false }).collect();
        let f = coalesce_forest(&leaves, &[1], &mut rng).unwrap();
        assert_eq!(f.trees.len(), 1);
        assert_eq!(f.trees[0].root_node().w, 3);
        assert_eq!(f.trees[0].nodes.len(), 5); // 3 leaves + 2 merges

        let mut mixed = seq(&[0.0, 1.0], 0);
        mixed.extend(seq(&[2.0], 1));
        let leaves: Vec<AugmentedLeaf> = mixed.into_iter().map(|e| AugmentedLeaf { element: e, deleted: false }).collect();
        for _ in 0..50 {
            let f = coalesce_forest(&leaves, &[1, 1], &mut rng).unwrap();
            assert_eq!(f.trees.len(), 2);
            assert_eq!(f.trees[0].leaves(), vec![0, 1]);
            assert_eq!(f.trees[1].leaves(), vec![2]);
        }
        assert!(coalesce_forest(&leaves, &[3, 1], &mut rng).is_err());
    }

    /// Exhaustive enumeration of the uniform adjacent-merge chain.
    fn enumerate_shapes(items: Vec<String>, prob: f64, out: &mut HashMap<String, f64>) {
        if items.len() == 1 {
            *out.entry(items[0].clone()).or_default() += prob;
            return;
        }
        let k = items.len() - 1;
        for j in 0..k {
            let mut next = items.clone();
            let merged = format!("({}{})", next[j], next[j + 1]);
            next[j] = merged;
            next.remove(j + 1);
            enumerate_shapes(next, prob / k as f64, out);
        }
    }

    #[test]
    fn four_leaf_shape_frequencies() {
        let mut oracle = HashMap::new();
        enumerate_shapes(vec![".".into(); 4], 1.0, &mut oracle);
        assert_eq!(oracle.len(), 5);
        assert!((oracle["((..)(..))"] - 1.0 / 3.0).abs() < 1e-12);

        let mut rng = seeded(6);
        let leaves: Vec<AugmentedLeaf> =
            seq(&[0.0, 1.0, 2.0, 3.0], 0).into_iter().map(|e| AugmentedLeaf { element: e, deleted: false }).collect();
        let n = 100_000;
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..n {
            let f = coalesce_forest(&leaves, &[1], &mut rng).unwrap();
            *counts.entry(f.trees[0].shape()).or_default() += 1;
        }
        for (shape, p) in oracle {
            let f = counts.get(&shape).copied().unwrap_or(0) as f64 / n as f64;
            assert!((f - p).abs() < 0.01, "{shape}: {f} vs {p}");
        }
    }

    #[test]
    fn anchors_are_weighted_means() {
        let leaf = |v: f64, i: usize| Node {
            anchor: ElementState { continuous: vec![v], token: 1 },
            children: None,
            deleted: false,
            w: 1,
            leaf: Some(i),
        };
        let internal = |l: usize, r: usize, w: usize| Node {
            anchor: ElementState::default(),
            children: Some([l, r]),
            deleted: false,
            w,
            leaf: None,
        };
        let pair = Forest { trees: vec![Tree { nodes: vec![leaf(0.0, 0), leaf(2.0, 1), internal(0, 1, 2)], root: 2, group: 0 }] };
        let f = assign_anchors(pair, AnchorPolicy::WeightedGeodesic, 9);
        assert_eq!(f.trees[0].root_node().anchor, ElementState { continuous: vec![1.0], token: 9 });

        // Left subtree with three leaves at 0, right leaf at 4: (3 * 0 + 1 * 4) / 4 = 1.
        let nodes = vec![
            leaf(0.0, 0),
            leaf(0.0, 1),
            internal(0, 1, 2),
            leaf(0.0, 2),
            internal(2, 3, 3),
            leaf(4.0, 3),
            internal(4, 5, 4),
        ];
        let f = assign_anchors(Forest { trees: vec![Tree { nodes, root: 6, group: 0 }] }, AnchorPolicy::WeightedGeodesic, 9);
        let t = &f.trees[0];
        assert_eq!(t.root_node().anchor.continuous, vec![1.0]);
        assert!(t.nodes.iter().filter(|n| !n.is_leaf()).all(|n| n.anchor.token == 9));
    }

    #[test]
    fn split_and_delete_ops() {
        let x0 = seq(&[0.0, 1.0, 2.0], 0);
        let mut state = AugState::initial(&x0);
        for (i, e) in state.elements.iter_mut().enumerate() {
            e.branch = Some(BranchId::root(i as u32));
        }
        let s = split_op(&state, 1).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.elements[1].element, x0[1]);
        assert_eq!(s.elements[2].element, x0[1]);
        let parent = state.elements[1].branch.as_ref().unwrap();
        for (k, c) in [(1, Child::First), (2, Child::Second)] {
            let b = s.elements[k].branch.as_ref().unwrap();
            assert!(parent.path.is_prefix_of(&b.path));
            assert_eq!(b.path.get(0), Some(c));
        }
        assert_eq!(s.elements[0], state.elements[0]);
        assert_eq!(s.elements[3], state.elements[2]);
        let d = del_op(&state, 1).unwrap();
        assert_eq!(d.values(), vec![x0[0].clone(), x0[2].clone()]);
        assert_eq!(del_op(&s, 2).unwrap().len(), state.len());
        assert!(split_op(&state, 3).is_err());
        assert!(del_op(&state, 3).is_err());

        let one = AugState::initial(&x0[..1]);
        assert_eq!(split_op(&one, 0).unwrap().len(), 2);
        let fixed = AugState::initial(&[Element::new(vec![], 0).fixed()]);
        assert!(split_op(&fixed, 0).is_err());
    }

    #[test]
    fn latent_z_invariants_hold() {
        let mut rng = seeded(7);
        let cfgs = [
            LatentConfig { lambda: 0.0, deletion: DeletionScheme::Rate { d_r: 1.5 } },
            LatentConfig { lambda: 3.0, deletion: DeletionScheme::Rate { d_r: 1.2 } },
            LatentConfig { lambda: 0.0, deletion: DeletionScheme::DuplicateEach },
        ];
        for i in 0..10_000 {
            let cfg = &cfgs[i % cfgs.len()];
            let n = 1 + rng.random_range(0..12);
            let mut x1: Vec<Element> =
                (0..n).map(|j| Element::new(vec![j as f64, -(j as f64)], j as u32 % 4).in_group(0)).collect();
            if i % 2 == 0 {
                x1.push(Element::new(vec![99.0, 99.0], 2).fixed());
                x1.extend((0..3).map(|j| Element::new(vec![j as f64, 0.0], 1).in_group(1)));
            }
            let z = LatentZ::sample(&x1, cfg, 2, 4, &mut rng).unwrap();
            z.check_invariants().unwrap();
            assert_eq!(z.x1(), x1);
            let total_w: usize = z.forest.trees.iter().map(|t| t.root_node().w).sum();
            assert_eq!(total_w, z.x1_aug.iter().filter(|l| !l.element.fixed).count());
        }
    }

    #[test]
    fn json_dump_nests_trees() {
        let mut rng = seeded(8);
        let x1 = seq(&[0.0, 1.0, 2.0], 0);
        let z = LatentZ::sample(&x1, &LatentConfig::default(), 1, 4, &mut rng).unwrap();
        let v = z.to_json();
        let root = &v["forest"][0]["root"];
        assert_eq!(root["w"], 3);
        assert_eq!(root["children"].as_array().unwrap().len(), 2);
        assert_eq!(v["x1_aug"].as_array().unwrap().len(), 3);
    }
}
