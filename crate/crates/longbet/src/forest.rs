//! Axis-aligned Bayesian regression trees and the grow-from-root sampler.
//!
//! Trees split on static covariates, calendar time, and exposure time.
//! Each sweep regenerates a tree from scratch: at every node the sampler
//! enumerates cutpoint candidates, weights them by the conjugate
//! normal-normal marginal likelihood times a depth-decaying split prior,
//! and samples one outcome (or no split) categorically. Leaf values are
//! drawn from their conjugate normal posterior.
//!
//! Observations carry optional weights `w`, modelling `r_j ~ N(leaf,
//! sigma2 / w_j)`. Unweighted fits use `w = 1`, for which the sufficient
//! statistics and marginal likelihood reduce to the plain count-based
//! forms. Zero-weight rows are routed through splits but contribute no
//! likelihood, so a leaf containing only them draws from the prior.

use std::collections::HashMap;

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::CovariateKind;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("variance parameters must be positive: sigma2={sigma2}, tau_mu={tau_mu}")]
    NonPositiveVariance { sigma2: f64, tau_mu: f64 },
    #[error("covariate arity mismatch: forest expects {expected}, query has {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("malformed forest payload: {0}")]
    Malformed(String),
}

/// Split axis: a covariate column, calendar time `t`, or exposure time `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAxis {
    Covariate(usize),
    CalendarTime,
    ExposureTime,
}

/// Decision rule at an internal node. Ordered rules send `value <=
/// cutpoint` left; categorical rules send levels in `left_levels` left.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRule {
    pub axis: SplitAxis,
    pub kind: SplitKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitKind {
    Ordered { cutpoint: f64 },
    Categorical { left_levels: Vec<i64> },
}

impl SplitRule {
    pub fn goes_left(&self, x: &[f64], t: f64, s: f64) -> bool {
        let v = match self.axis {
            SplitAxis::Covariate(j) => x[j],
            SplitAxis::CalendarTime => t,
            SplitAxis::ExposureTime => s,
        };
        self.admits_value(v)
    }

    #[inline]
    fn admits_value(&self, v: f64) -> bool {
        match &self.kind {
            SplitKind::Ordered { cutpoint } => v <= *cutpoint,
            SplitKind::Categorical { left_levels } => {
                left_levels.binary_search(&(v.round() as i64)).is_ok()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Internal {
        rule: SplitRule,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        mu: f64,
    },
}

/// A single regression tree. Serializes to nested JSON node records;
/// floats use shortest-round-trip encoding so round trips are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NodeRepr", try_from = "NodeRepr")]
pub struct Tree {
    root: Node,
}

impl Tree {
    pub fn leaf(mu: f64) -> Self {
        Tree {
            root: Node::Leaf { mu },
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Leaf value reached by the query point. Points beyond any trained
    /// range follow the rule directions as written and land in a boundary
    /// leaf.
    pub fn response(&self, x: &[f64], t: f64, s: f64) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { mu } => return *mu,
                Node::Internal { rule, left, right } => {
                    node = if rule.goes_left(x, t, s) { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(node: &Node) -> usize {
            match node {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => 1 + walk(left).max(walk(right)),
            }
        }
        walk(&self.root)
    }

    pub fn num_leaves(&self) -> usize {
        fn walk(node: &Node) -> usize {
            match node {
                Node::Leaf { .. } => 1,
                Node::Internal { left, right, .. } => walk(left) + walk(right),
            }
        }
        walk(&self.root)
    }

    /// Leaf count and sum of squared leaf values, the sufficient
    /// statistics for the conjugate update of the leaf prior variance.
    pub fn leaf_sum_sq(&self) -> (usize, f64) {
        fn walk(node: &Node, acc: &mut (usize, f64)) {
            match node {
                Node::Leaf { mu } => {
                    acc.0 += 1;
                    acc.1 += mu * mu;
                }
                Node::Internal { left, right, .. } => {
                    walk(left, acc);
                    walk(right, acc);
                }
            }
        }
        let mut acc = (0, 0.0);
        walk(&self.root, &mut acc);
        acc
    }

    /// Structural check: rules along every root-to-leaf path must be
    /// strictly nested and non-contradictory, rule kinds must match the
    /// covariate kinds, and the depth bound must hold.
    pub fn validate(&self, kinds: &[CovariateKind], max_depth: usize) -> Result<(), ForestError> {
        #[derive(Clone)]
        struct Scope {
            bounds: HashMap<SplitAxis, (f64, f64)>,
            levels: HashMap<usize, Vec<i64>>,
        }

        fn walk(
            node: &Node,
            depth: usize,
            scope: &Scope,
            kinds: &[CovariateKind],
            max_depth: usize,
        ) -> Result<(), ForestError> {
            let Node::Internal { rule, left, right } = node else {
                return Ok(());
            };
            if depth >= max_depth {
                return Err(ForestError::InvalidTree(format!(
                    "internal node at depth {depth} exceeds max_depth {max_depth}"
                )));
            }
            match (&rule.axis, &rule.kind) {
                (SplitAxis::Covariate(j), _) if *j >= kinds.len() => {
                    return Err(ForestError::InvalidTree(format!(
                        "covariate index {j} out of range"
                    )));
                }
                (SplitAxis::Covariate(j), SplitKind::Ordered { cutpoint }) => {
                    if kinds[*j].is_categorical() {
                        return Err(ForestError::InvalidTree(format!(
                            "ordered rule on categorical covariate {j}"
                        )));
                    }
                    let (lo, hi) = scope
                        .bounds
                        .get(&rule.axis)
                        .copied()
                        .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
                    if !(*cutpoint > lo && *cutpoint < hi) {
                        return Err(ForestError::InvalidTree(format!(
                            "cutpoint {cutpoint} outside open interval ({lo}, {hi})"
                        )));
                    }
                    let mut ls = scope.clone();
                    ls.bounds.insert(rule.axis, (lo, *cutpoint));
                    walk(left, depth + 1, &ls, kinds, max_depth)?;
                    let mut rs = scope.clone();
                    rs.bounds.insert(rule.axis, (*cutpoint, hi));
                    return walk(right, depth + 1, &rs, kinds, max_depth);
                }
                (SplitAxis::Covariate(j), SplitKind::Categorical { left_levels }) => {
                    let CovariateKind::Categorical { levels } = &kinds[*j] else {
                        return Err(ForestError::InvalidTree(format!(
                            "categorical rule on continuous covariate {j}"
                        )));
                    };
                    let avail = scope.levels.get(j).unwrap_or(levels);
                    if left_levels.is_empty()
                        || left_levels.len() >= avail.len()
                        || left_levels.iter().any(|l| !avail.contains(l))
                    {
                        return Err(ForestError::InvalidTree(format!(
                            "left levels {left_levels:?} not a proper non-empty subset of {avail:?}"
                        )));
                    }
                    let mut ls = scope.clone();
                    ls.levels.insert(*j, left_levels.clone());
                    walk(left, depth + 1, &ls, kinds, max_depth)?;
                    let mut rs = scope.clone();
                    rs.levels.insert(
                        *j,
                        avail.iter().copied().filter(|l| !left_levels.contains(l)).collect(),
                    );
                    return walk(right, depth + 1, &rs, kinds, max_depth);
                }
                (_, SplitKind::Categorical { .. }) => {
                    return Err(ForestError::InvalidTree(
                        "categorical rule on a time axis".into(),
                    ));
                }
                (_, SplitKind::Ordered { cutpoint }) => {
                    let (lo, hi) = scope
                        .bounds
                        .get(&rule.axis)
                        .copied()
                        .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
                    if !(*cutpoint > lo && *cutpoint < hi) {
                        return Err(ForestError::InvalidTree(format!(
                            "cutpoint {cutpoint} outside open interval ({lo}, {hi})"
                        )));
                    }
                    let mut ls = scope.clone();
                    ls.bounds.insert(rule.axis, (lo, *cutpoint));
                    walk(left, depth + 1, &ls, kinds, max_depth)?;
                    let mut rs = scope.clone();
                    rs.bounds.insert(rule.axis, (*cutpoint, hi));
                    return walk(right, depth + 1, &rs, kinds, max_depth);
                }
            }
        }

        let scope = Scope {
            bounds: HashMap::new(),
            levels: HashMap::new(),
        };
        walk(&self.root, 0, &scope, kinds, max_depth)
    }
}

/// Serialized node layout: `{leaf: mu}` or
/// `{axis, kind: "ordered"|"categorical", cutpoint|leftset, children}`.
#[derive(Serialize, Deserialize)]
struct NodeRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leaf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<SplitAxis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cutpoint: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leftset: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<NodeRepr>>,
}

fn node_to_repr(node: &Node) -> NodeRepr {
    match node {
        Node::Leaf { mu } => NodeRepr {
            leaf: Some(*mu),
            axis: None,
            kind: None,
            cutpoint: None,
            leftset: None,
            children: None,
        },
        Node::Internal { rule, left, right } => {
            let (kind, cutpoint, leftset) = match &rule.kind {
                SplitKind::Ordered { cutpoint } => ("ordered", Some(*cutpoint), None),
                SplitKind::Categorical { left_levels } => {
                    ("categorical", None, Some(left_levels.clone()))
                }
            };
            NodeRepr {
                leaf: None,
                axis: Some(rule.axis),
                kind: Some(kind.to_string()),
                cutpoint,
                leftset,
                children: Some(vec![node_to_repr(left), node_to_repr(right)]),
            }
        }
    }
}

fn node_from_repr(repr: NodeRepr) -> Result<Node, ForestError> {
    if let Some(mu) = repr.leaf {
        if repr.axis.is_some() || repr.children.is_some() {
            return Err(ForestError::Malformed("leaf with internal fields".into()));
        }
        return Ok(Node::Leaf { mu });
    }
    let axis = repr
        .axis
        .ok_or_else(|| ForestError::Malformed("internal node missing axis".into()))?;
    let kind = match repr.kind.as_deref() {
        Some("ordered") => SplitKind::Ordered {
            cutpoint: repr
                .cutpoint
                .ok_or_else(|| ForestError::Malformed("ordered rule missing cutpoint".into()))?,
        },
        Some("categorical") => SplitKind::Categorical {
            left_levels: repr
                .leftset
                .ok_or_else(|| ForestError::Malformed("categorical rule missing leftset".into()))?,
        },
        other => {
            return Err(ForestError::Malformed(format!(
                "unknown rule kind {other:?}"
            )));
        }
    };
    let mut children = repr
        .children
        .ok_or_else(|| ForestError::Malformed("internal node missing children".into()))?;
    if children.len() != 2 {
        return Err(ForestError::Malformed(format!(
            "internal node with {} children",
            children.len()
        )));
    }
    let right = node_from_repr(children.pop().unwrap())?;
    let left = node_from_repr(children.pop().unwrap())?;
    Ok(Node::Internal {
        rule: SplitRule { axis, kind },
        left: Box::new(left),
        right: Box::new(right),
    })
}

impl From<Tree> for NodeRepr {
    fn from(tree: Tree) -> Self {
        node_to_repr(&tree.root)
    }
}

impl TryFrom<NodeRepr> for Tree {
    type Error = ForestError;

    fn try_from(repr: NodeRepr) -> Result<Self, ForestError> {
        Ok(Tree {
            root: node_from_repr(repr)?,
        })
    }
}

/// An additive ensemble: the forest prediction is the exact sum of its
/// trees' leaf values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    num_covariates: usize,
    trees: Vec<Tree>,
}

impl Forest {
    pub fn new(num_covariates: usize, trees: Vec<Tree>) -> Self {
        Forest {
            num_covariates,
            trees,
        }
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn num_covariates(&self) -> usize {
        self.num_covariates
    }

    pub fn predict(&self, x: &[f64], t: f64, s: f64) -> Result<f64, ForestError> {
        if x.len() != self.num_covariates {
            return Err(ForestError::ArityMismatch {
                expected: self.num_covariates,
                got: x.len(),
            });
        }
        Ok(self.response(x, t, s))
    }

    /// Unchecked sum over trees; callers validate arity once up front.
    pub fn response(&self, x: &[f64], t: f64, s: f64) -> f64 {
        debug_assert_eq!(x.len(), self.num_covariates);
        self.trees.iter().map(|tree| tree.response(x, t, s)).sum()
    }
}

/// Weighted sufficient statistics for a set of observations.
///
/// `n` is the total observation weight (the plain count for unweighted
/// fits), `sum_r` the weighted residual sum, `sum_r2` the weighted sum of
/// squared residuals. Additive under disjoint union.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub n: f64,
    pub sum_r: f64,
    pub sum_r2: f64,
}

impl SufficientStats {
    pub fn from_residuals(residuals: &[f64]) -> Self {
        let mut stats = SufficientStats::default();
        for &r in residuals {
            stats.add(r, 1.0);
        }
        stats
    }

    #[inline]
    pub fn add(&mut self, r: f64, w: f64) {
        self.n += w;
        self.sum_r += w * r;
        self.sum_r2 += w * r * r;
    }

    pub fn merge(&self, other: &SufficientStats) -> SufficientStats {
        SufficientStats {
            n: self.n + other.n,
            sum_r: self.sum_r + other.sum_r,
            sum_r2: self.sum_r2 + other.sum_r2,
        }
    }

    pub fn minus(&self, other: &SufficientStats) -> SufficientStats {
        SufficientStats {
            n: (self.n - other.n).max(0.0),
            sum_r: self.sum_r - other.sum_r,
            sum_r2: self.sum_r2 - other.sum_r2,
        }
    }
}

/// Sampler hyperparameters for one forest.
///
/// The split prior is `p(split | depth) = depth_alpha * (1 +
/// depth)^(-depth_beta)`, decaying exponentially in practice as the tree
/// deepens. `leaf_prior_var` is the conjugate normal prior variance of a
/// leaf value; the default `0.6 / num_trees` matches outcomes scaled to
/// unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub num_trees: usize,
    pub max_depth: usize,
    pub max_cutpoints: usize,
    pub depth_alpha: f64,
    pub depth_beta: f64,
    pub leaf_prior_var: f64,
}

impl ForestParams {
    pub fn with_trees(num_trees: usize) -> Self {
        ForestParams {
            num_trees,
            max_depth: 10,
            max_cutpoints: 20,
            depth_alpha: 0.95,
            depth_beta: 1.0,
            leaf_prior_var: 0.6 / num_trees.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        if self.num_trees == 0
            || !(self.depth_alpha > 0.0 && self.depth_alpha < 1.0)
            || self.depth_beta <= 0.0
            || self.leaf_prior_var <= 0.0
            || self.max_cutpoints == 0
        {
            return Err(ForestError::InvalidTree(format!(
                "invalid forest params: {self:?}"
            )));
        }
        Ok(())
    }

    fn p_split(&self, depth: usize) -> f64 {
        self.depth_alpha * (1.0 + depth as f64).powf(-self.depth_beta)
    }
}

/// Integrated log likelihood of a node's residuals under the conjugate
/// normal-normal model, up to the residual-independent constant
/// `-sum_r2/(2 sigma2) - (n/2) log(2 pi sigma2)`, which is dropped
/// identically for every candidate compared at a node.
pub fn marginal_loglik(
    stats: &SufficientStats,
    sigma2: f64,
    tau_mu: f64,
) -> Result<f64, ForestError> {
    if sigma2 <= 0.0 || tau_mu <= 0.0 {
        return Err(ForestError::NonPositiveVariance { sigma2, tau_mu });
    }
    Ok(loglik(stats, sigma2, tau_mu))
}

#[inline]
fn loglik(stats: &SufficientStats, sigma2: f64, tau_mu: f64) -> f64 {
    if stats.n <= 0.0 {
        return 0.0;
    }
    let denom = sigma2 + stats.n * tau_mu;
    0.5 * (sigma2 / denom).ln() + tau_mu * stats.sum_r * stats.sum_r / (2.0 * sigma2 * denom)
}

/// Conjugate inverse-gamma resample of the leaf prior variance from the
/// forest's current leaf values, anchored at `tau_init` through the prior
/// mode. Leaf values are a priori N(0, tau), so
/// `tau | leaves ~ IG(a + n_leaves/2, b + sum mu^2 / 2)`.
pub fn sample_leaf_prior_var(
    trees: &[Tree],
    tau_init: f64,
    rng: &mut impl Rng,
) -> f64 {
    let (mut count, mut sum_sq) = (0usize, 0.0);
    for tree in trees {
        let (c, s) = tree.leaf_sum_sq();
        count += c;
        sum_sq += s;
    }
    let a = 3.0;
    let b = (a + 1.0) * tau_init;
    let gamma = Gamma::new(a + count as f64 / 2.0, 1.0 / (b + sum_sq / 2.0)).expect("valid gamma");
    1.0 / gamma.sample(rng)
}

/// Conjugate leaf posterior N(tau*sum_r/(sigma2 + n*tau), sigma2*tau/(sigma2 + n*tau)).
fn draw_leaf(stats: &SufficientStats, sigma2: f64, tau_mu: f64, rng: &mut impl Rng) -> f64 {
    let denom = sigma2 + stats.n.max(0.0) * tau_mu;
    let mean = tau_mu * stats.sum_r / denom;
    let var = sigma2 * tau_mu / denom;
    let z: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * z
}

/// Per-observation design: covariate rows plus calendar and exposure time.
pub struct DesignView<'a> {
    x: ArrayView2<'a, f64>,
    t: &'a [f64],
    s: &'a [f64],
    kinds: &'a [CovariateKind],
}

impl<'a> DesignView<'a> {
    pub fn new(
        x: ArrayView2<'a, f64>,
        t: &'a [f64],
        s: &'a [f64],
        kinds: &'a [CovariateKind],
    ) -> Self {
        assert_eq!(x.nrows(), t.len());
        assert_eq!(x.nrows(), s.len());
        assert_eq!(x.ncols(), kinds.len());
        DesignView { x, t, s, kinds }
    }

    pub fn n_rows(&self) -> usize {
        self.t.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn kinds(&self) -> &[CovariateKind] {
        self.kinds
    }

    #[inline]
    fn value(&self, axis: SplitAxis, row: usize) -> f64 {
        match axis {
            SplitAxis::Covariate(j) => self.x[[row, j]],
            SplitAxis::CalendarTime => self.t[row],
            SplitAxis::ExposureTime => self.s[row],
        }
    }

    fn axis_is_categorical(&self, axis: SplitAxis) -> bool {
        match axis {
            SplitAxis::Covariate(j) => self.kinds[j].is_categorical(),
            _ => false,
        }
    }
}

/// Row indices sorted per axis, computed once per design and cloned into
/// each grow so the sampler never re-sorts below the root: splitting a
/// node partitions each axis list stably, preserving order.
pub struct Presorted {
    axes: Vec<SplitAxis>,
    lists: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(data: &DesignView, axes: &[SplitAxis]) -> Self {
        let lists = axes
            .iter()
            .map(|&axis| {
                let mut idx: Vec<u32> = (0..data.n_rows() as u32).collect();
                idx.sort_by(|&a, &b| {
                    data.value(axis, a as usize)
                        .partial_cmp(&data.value(axis, b as usize))
                        .unwrap()
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        Presorted {
            axes: axes.to_vec(),
            lists,
        }
    }

    pub fn axes(&self) -> &[SplitAxis] {
        &self.axes
    }
}

struct GrowCtx<'a, 'b> {
    data: &'b DesignView<'a>,
    axes: &'b [SplitAxis],
    target: &'b [f64],
    weight: &'b [f64],
    sigma2: f64,
    params: &'b ForestParams,
}

enum CandidateKind {
    Ordered(f64),
    Categorical(Vec<i64>),
}

struct Candidate {
    axis_ix: usize,
    kind: CandidateKind,
    left: SufficientStats,
}

fn node_stats(ctx: &GrowCtx<'_, '_>, rows: &[u32]) -> SufficientStats {
    let mut stats = SufficientStats::default();
    for &row in rows {
        let row = row as usize;
        stats.add(ctx.target[row], ctx.weight[row]);
    }
    stats
}

/// Candidate cutpoints for an ordered axis: midpoints between consecutive
/// distinct values (so every cutpoint is strictly inside the node's
/// observed range with both children non-empty), thinned to at most
/// `max_cutpoints` evenly spaced order statistics when there are more.
fn ordered_candidates(ctx: &GrowCtx<'_, '_>, axis_ix: usize, list: &[u32], out: &mut Vec<Candidate>) {
    let axis = ctx.axes[axis_ix];
    // (value, cumulative stats through this group, end position)
    let mut groups: Vec<(f64, SufficientStats, usize)> = Vec::new();
    let mut acc = SufficientStats::default();
    let mut cur: Option<f64> = None;
    for (pos, &row) in list.iter().enumerate() {
        let row = row as usize;
        let v = ctx.data.value(axis, row);
        if cur != Some(v) {
            if let Some(c) = cur {
                groups.push((c, acc, pos));
            }
            cur = Some(v);
        }
        acc.add(ctx.target[row], ctx.weight[row]);
    }
    if let Some(c) = cur {
        groups.push((c, acc, list.len()));
    }
    let n_bounds = groups.len().saturating_sub(1);
    if n_bounds == 0 {
        return;
    }
    let push = |out: &mut Vec<Candidate>, gi: usize| {
        out.push(Candidate {
            axis_ix,
            kind: CandidateKind::Ordered(0.5 * (groups[gi].0 + groups[gi + 1].0)),
            left: groups[gi].1,
        });
    };
    if n_bounds <= ctx.params.max_cutpoints {
        for gi in 0..n_bounds {
            push(out, gi);
        }
    } else {
        let n = list.len();
        let mut last: Option<usize> = None;
        for j in 1..=ctx.params.max_cutpoints {
            let pos = j * n / (ctx.params.max_cutpoints + 1);
            // group containing this order statistic
            let gi = groups.partition_point(|g| g.2 <= pos).min(n_bounds - 1);
            if last != Some(gi) {
                push(out, gi);
                last = Some(gi);
            }
        }
    }
}

/// Candidate subsets for a categorical axis. Levels observed at the node
/// are enumerated exhaustively as non-empty proper left subsets when there
/// are at most five; beyond that, one-vs-rest splits are offered.
fn categorical_candidates(ctx: &GrowCtx<'_, '_>, axis_ix: usize, list: &[u32], out: &mut Vec<Candidate>) {
    let axis = ctx.axes[axis_ix];
    let mut level_stats: Vec<(i64, SufficientStats)> = Vec::new();
    for &row in list {
        let row = row as usize;
        let level = ctx.data.value(axis, row).round() as i64;
        match level_stats.last_mut() {
            Some((l, stats)) if *l == level => {
                stats.add(ctx.target[row], ctx.weight[row]);
            }
            _ => {
                let mut stats = SufficientStats::default();
                stats.add(ctx.target[row], ctx.weight[row]);
                level_stats.push((level, stats));
            }
        }
    }
    let n_levels = level_stats.len();
    if n_levels < 2 {
        return;
    }
    if n_levels <= 5 {
        for mask in 1u32..((1u32 << n_levels) - 1) {
            let mut left = SufficientStats::default();
            let mut left_levels = Vec::new();
            for (bit, (level, stats)) in level_stats.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    left = left.merge(stats);
                    left_levels.push(*level);
                }
            }
            out.push(Candidate {
                axis_ix,
                kind: CandidateKind::Categorical(left_levels),
                left,
            });
        }
    } else {
        for (level, stats) in &level_stats {
            out.push(Candidate {
                axis_ix,
                kind: CandidateKind::Categorical(vec![*level]),
                left: *stats,
            });
        }
    }
}

/// Samples the split decision for a node: each candidate is weighted by
/// `exp(loglik_left + loglik_right) * p_split(depth)` and no-split by
/// `exp(loglik_node) * (1 - p_split(depth)) * n_candidates`, the latter
/// factor keeping the no-split prior mass independent of candidate count.
fn choose(
    ctx: &GrowCtx<'_, '_>,
    stats: &SufficientStats,
    cands: &[Candidate],
    depth: usize,
    rng: &mut impl Rng,
) -> Option<usize> {
    if cands.is_empty() {
        return None;
    }
    let tau = ctx.params.leaf_prior_var;
    let p_split = ctx.params.p_split(depth);
    let mut logw = Vec::with_capacity(cands.len() + 1);
    logw.push(
        loglik(stats, ctx.sigma2, tau) + (1.0 - p_split).ln() + (cands.len() as f64).ln(),
    );
    for cand in cands {
        let right = stats.minus(&cand.left);
        logw.push(
            loglik(&cand.left, ctx.sigma2, tau)
                + loglik(&right, ctx.sigma2, tau)
                + p_split.ln(),
        );
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (ix, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return ix.checked_sub(1);
        }
    }
    Some(cands.len() - 1)
}

fn grow_node(
    ctx: &GrowCtx<'_, '_>,
    lists: Vec<Vec<u32>>,
    depth: usize,
    rng: &mut impl Rng,
    fitted: &mut [f64],
) -> Node {
    let stats = node_stats(ctx, &lists[0]);
    let tau = ctx.params.leaf_prior_var;

    let chosen = if depth >= ctx.params.max_depth {
        None
    } else {
        let mut cands = Vec::new();
        for axis_ix in 0..ctx.axes.len() {
            if ctx.data.axis_is_categorical(ctx.axes[axis_ix]) {
                categorical_candidates(ctx, axis_ix, &lists[axis_ix], &mut cands);
            } else {
                ordered_candidates(ctx, axis_ix, &lists[axis_ix], &mut cands);
            }
        }
        choose(ctx, &stats, &cands, depth, rng).map(|ix| {
            let cand = &cands[ix];
            let kind = match &cand.kind {
                CandidateKind::Ordered(cut) => SplitKind::Ordered { cutpoint: *cut },
                CandidateKind::Categorical(levels) => SplitKind::Categorical {
                    left_levels: levels.clone(),
                },
            };
            SplitRule {
                axis: ctx.axes[cand.axis_ix],
                kind,
            }
        })
    };

    match chosen {
        None => {
            let mu = draw_leaf(&stats, ctx.sigma2, tau, rng);
            for &row in &lists[0] {
                fitted[row as usize] = mu;
            }
            Node::Leaf { mu }
        }
        Some(rule) => {
            let mut left_lists = Vec::with_capacity(lists.len());
            let mut right_lists = Vec::with_capacity(lists.len());
            for list in lists {
                let (l, r): (Vec<u32>, Vec<u32>) = list
                    .into_iter()
                    .partition(|&row| rule.admits_value(ctx.data.value(rule.axis, row as usize)));
                left_lists.push(l);
                right_lists.push(r);
            }
            let left = grow_node(ctx, left_lists, depth + 1, rng, fitted);
            let right = grow_node(ctx, right_lists, depth + 1, rng, fitted);
            Node::Internal {
                rule,
                left: Box::new(left),
                right: Box::new(right),
            }
        }
    }
}

/// Grows a whole tree from the root with per-row weights, returning the
/// tree and its fitted value for every design row.
pub fn grow_from_root_weighted(
    data: &DesignView,
    pre: &Presorted,
    target: &[f64],
    weight: &[f64],
    sigma2: f64,
    params: &ForestParams,
    rng: &mut impl Rng,
) -> (Tree, Vec<f64>) {
    assert_eq!(target.len(), data.n_rows());
    assert_eq!(weight.len(), data.n_rows());
    let ctx = GrowCtx {
        data,
        axes: &pre.axes,
        target,
        weight,
        sigma2,
        params,
    };
    let mut fitted = vec![0.0; data.n_rows()];
    let root = grow_node(&ctx, pre.lists.clone(), 0, rng, &mut fitted);
    (Tree { root }, fitted)
}

/// Unweighted grow-from-root over the given axes.
pub fn grow_from_root(
    data: &DesignView,
    residuals: &[f64],
    axes: &[SplitAxis],
    sigma2: f64,
    params: &ForestParams,
    rng: &mut impl Rng,
) -> Tree {
    let pre = Presorted::new(data, axes);
    let weight = vec![1.0; data.n_rows()];
    grow_from_root_weighted(data, &pre, residuals, &weight, sigma2, params, rng).0
}

/// Samples a split decision for one node over the given observation set;
/// `None` means no split. Used stand-alone it re-derives the per-axis
/// orderings for the node rows.
pub fn sample_split(
    data: &DesignView,
    node_rows: &[u32],
    residuals: &[f64],
    axes: &[SplitAxis],
    sigma2: f64,
    params: &ForestParams,
    depth: usize,
    rng: &mut impl Rng,
) -> Option<SplitRule> {
    if node_rows.is_empty() || depth >= params.max_depth {
        return None;
    }
    let weight = vec![1.0; data.n_rows()];
    let ctx = GrowCtx {
        data,
        axes,
        target: residuals,
        weight: &weight,
        sigma2,
        params,
    };
    let mut cands = Vec::new();
    for (axis_ix, &axis) in axes.iter().enumerate() {
        let mut list = node_rows.to_vec();
        list.sort_by(|&a, &b| {
            data.value(axis, a as usize)
                .partial_cmp(&data.value(axis, b as usize))
                .unwrap()
                .then(a.cmp(&b))
        });
        if data.axis_is_categorical(axis) {
            categorical_candidates(&ctx, axis_ix, &list, &mut cands);
        } else {
            ordered_candidates(&ctx, axis_ix, &list, &mut cands);
        }
    }
    let stats = node_stats(&ctx, node_rows);
    choose(&ctx, &stats, &cands, depth, rng).map(|ix| {
        let cand = &cands[ix];
        SplitRule {
            axis: axes[cand.axis_ix],
            kind: match &cand.kind {
                CandidateKind::Ordered(cut) => SplitKind::Ordered { cutpoint: *cut },
                CandidateKind::Categorical(levels) => SplitKind::Categorical {
                    left_levels: levels.clone(),
                },
            },
        }
    })
}

/// Plain backfitting regression with this module's sampler: outcomes are
/// standardized internally, each sweep regrows every tree on its partial
/// residual and then draws the noise variance from its inverse-gamma
/// conditional. Returns posterior-mean fits on the original scale.
pub struct RegressionFit {
    pub fitted: Vec<f64>,
    pub query_mean: Vec<f64>,
    pub sigma2_mean: f64,
    pub forest: Forest,
}

pub fn fit_regression_forest(
    data: &DesignView,
    axes: &[SplitAxis],
    y: &[f64],
    params: &ForestParams,
    num_sweeps: usize,
    num_burnin: usize,
    query: Option<(&DesignView, &[f64], &[f64])>,
    rng: &mut impl Rng,
) -> RegressionFit {
    assert!(num_burnin < num_sweeps);
    params.validate().expect("valid forest params");
    let n = data.n_rows();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-12);
    let ys: Vec<f64> = y.iter().map(|v| (v - mean) / sd).collect();

    let pre = Presorted::new(data, axes);
    let weight = vec![1.0; n];
    let mut trees: Vec<Tree> = (0..params.num_trees).map(|_| Tree::leaf(0.0)).collect();
    let mut tree_fit = vec![vec![0.0; n]; params.num_trees];
    let mut total_fit = vec![0.0; n];
    let mut sigma2 = 1.0;
    let (a0, b0) = (3.0, 4.0);

    let mut fit_acc = vec![0.0; n];
    let mut query_acc = query.map(|(q, _, _)| vec![0.0; q.n_rows()]);
    let mut sigma2_acc = 0.0;
    let mut retained = 0usize;
    let mut target = vec![0.0; n];

    for sweep in 0..num_sweeps {
        for l in 0..params.num_trees {
            for r in 0..n {
                target[r] = ys[r] - (total_fit[r] - tree_fit[l][r]);
            }
            let (tree, fitted) =
                grow_from_root_weighted(data, &pre, &target, &weight, sigma2, params, rng);
            for r in 0..n {
                total_fit[r] += fitted[r] - tree_fit[l][r];
            }
            tree_fit[l] = fitted;
            trees[l] = tree;
        }
        let ssr: f64 = ys
            .iter()
            .zip(&total_fit)
            .map(|(y, f)| (y - f) * (y - f))
            .sum();
        let gamma = Gamma::new(a0 + n as f64 / 2.0, 1.0 / (b0 + ssr / 2.0)).unwrap();
        sigma2 = 1.0 / gamma.sample(rng);

        if sweep >= num_burnin {
            retained += 1;
            for r in 0..n {
                fit_acc[r] += total_fit[r];
            }
            sigma2_acc += sigma2;
            if let (Some(acc), Some((q, qt, qs))) = (query_acc.as_mut(), query) {
                let forest = Forest::new(data.n_covariates(), trees.clone());
                for (qi, item) in acc.iter_mut().enumerate() {
                    let row = q.x.row(qi);
                    *item += forest.response(row.to_slice().unwrap(), qt[qi], qs[qi]);
                }
            }
        }
    }
    let d = retained as f64;
    RegressionFit {
        fitted: fit_acc.iter().map(|v| mean + sd * v / d).collect(),
        query_mean: query_acc
            .map(|acc| acc.iter().map(|v| mean + sd * v / d).collect())
            .unwrap_or_default(),
        sigma2_mean: sigma2_acc / d * sd * sd,
        forest: Forest::new(data.n_covariates(), trees),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    fn continuous(p: usize) -> Vec<CovariateKind> {
        vec![CovariateKind::Continuous; p]
    }

    #[test]
    fn marginal_loglik_matches_closed_form_values() {
        let empty = SufficientStats::default();
        assert_eq!(marginal_loglik(&empty, 1.0, 1.0).unwrap(), 0.0);

        let one = SufficientStats {
            n: 1.0,
            sum_r: 0.0,
            sum_r2: 0.3,
        };
        assert_abs_diff_eq!(
            marginal_loglik(&one, 1.0, 1.0).unwrap(),
            0.5 * (0.5f64).ln(), // about -0.34657
            epsilon = 1e-12
        );
        assert!(marginal_loglik(&one, 0.0, 1.0).is_err());
        assert!(marginal_loglik(&one, 1.0, -2.0).is_err());
    }

    #[test]
    fn true_step_split_beats_no_split_at_scale() {
        // Step of size 1 at x = 0 with sigma = 0.1: the summed marginal
        // log likelihood of the true split must exceed no-split.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1000;
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut left = SufficientStats::default();
        let mut right = SufficientStats::default();
        for i in 0..n {
            let below = i < n / 2;
            let r = if below { -0.5 } else { 0.5 } + noise.sample(&mut rng);
            if below {
                left.add(r, 1.0);
            } else {
                right.add(r, 1.0);
            }
        }
        let node = left.merge(&right);
        let sigma2 = 0.01;
        let tau = 0.6;
        let split_ll = marginal_loglik(&left, sigma2, tau).unwrap()
            + marginal_loglik(&right, sigma2, tau).unwrap();
        let node_ll = marginal_loglik(&node, sigma2, tau).unwrap();
        assert!(split_ll > node_ll, "split {split_ll} vs node {node_ll}");
    }

    fn design_1d(values: &[f64]) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let n = values.len();
        let x = Array2::from_shape_vec((n, 1), values.to_vec()).unwrap();
        (x, vec![0.0; n], vec![0.0; n])
    }

    #[test]
    fn max_depth_forces_no_split() {
        let (x, t, s) = design_1d(&[0.0, 1.0, 2.0, 3.0]);
        let kinds = continuous(1);
        let data = DesignView::new(x.view(), &t, &s, &kinds);
        let mut params = ForestParams::with_trees(1);
        params.max_depth = 0;
        let rows: Vec<u32> = (0..4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let got = sample_split(
            &data,
            &rows,
            &[1.0; 4],
            &[SplitAxis::Covariate(0)],
            1.0,
            &params,
            0,
            &mut rng,
        );
        assert!(got.is_none());
    }

    #[test]
    fn pure_noise_mostly_declines_to_split() {
        // At depth 1 the split prior is 0.95 * 2^-1.25 (about 0.40) and with
        // correctly specified noise the Occam factor pushes the categorical
        // draw toward no-split in most seeds.
        let n = 500;
        let mut params = ForestParams::with_trees(1);
        params.leaf_prior_var = 0.6;
        let mut no_split = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let resid: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
            let (x, t, s) = design_1d(&xs);
            let kinds = continuous(1);
            let data = DesignView::new(x.view(), &t, &s, &kinds);
            let rows: Vec<u32> = (0..n as u32).collect();
            if sample_split(
                &data,
                &rows,
                &resid,
                &[SplitAxis::Covariate(0)],
                1.0,
                &params,
                1,
                &mut rng,
            )
            .is_none()
            {
                no_split += 1;
            }
        }
        assert!(no_split > 50, "no_split chosen {no_split}/100 times");
    }

    #[test]
    fn sharp_step_pins_the_cutpoint() {
        // Small node with every boundary enumerated: near-zero noise makes
        // the boundary flanking x = 0 all but certain.
        let n = 20;
        let mut params = ForestParams::with_trees(1);
        params.leaf_prior_var = 0.6;
        let mut hits = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1e-3).unwrap();
            let xs: Vec<f64> = (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) / 4.0).collect();
            let resid: Vec<f64> = xs
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 } + noise.sample(&mut rng))
                .collect();
            let (x, t, s) = design_1d(&xs);
            let kinds = continuous(1);
            let data = DesignView::new(x.view(), &t, &s, &kinds);
            let rows: Vec<u32> = (0..n as u32).collect();
            let rule = sample_split(
                &data,
                &rows,
                &resid,
                &[SplitAxis::Covariate(0)],
                1e-6,
                &params,
                0,
                &mut rng,
            );
            let below = xs.iter().copied().filter(|v| *v <= 0.0).fold(f64::MIN, f64::max);
            let above = xs.iter().copied().filter(|v| *v > 0.0).fold(f64::MAX, f64::min);
            if let Some(SplitRule {
                kind: SplitKind::Ordered { cutpoint },
                ..
            }) = rule
            {
                if cutpoint > below && cutpoint < above {
                    hits += 1;
                }
            }
        }
        assert!(hits >= 99, "flanking cutpoint picked {hits}/100 times");
    }

    #[test]
    fn single_leaf_tree_shrinks_toward_zero_as_prior_tightens() {
        let (x, t, s) = design_1d(&[0.0, 1.0, 2.0, 3.0]);
        let kinds = continuous(1);
        let data = DesignView::new(x.view(), &t, &s, &kinds);
        let mut params = ForestParams::with_trees(1);
        params.max_depth = 0;
        params.leaf_prior_var = 1e-10;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = grow_from_root(
            &data,
            &[1.0; 4],
            &[SplitAxis::Covariate(0)],
            1.0,
            &params,
            &mut rng,
        );
        assert_eq!(tree.num_leaves(), 1);
        assert!(tree.response(&[0.0], 0.0, 0.0).abs() < 1e-4);
    }

    #[test]
    fn constant_residuals_with_loose_prior_recover_the_constant() {
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (x, t, s) = design_1d(&xs);
        let kinds = continuous(1);
        let data = DesignView::new(x.view(), &t, &s, &kinds);
        let mut params = ForestParams::with_trees(1);
        params.max_depth = 0;
        params.leaf_prior_var = 1e6;
        let sigma = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tree = grow_from_root(
            &data,
            &vec![2.0; n],
            &[SplitAxis::Covariate(0)],
            sigma * sigma,
            &params,
            &mut rng,
        );
        let mu = tree.response(&[0.0], 0.0, 0.0);
        assert!((mu - 2.0).abs() < 3.0 * sigma, "leaf {mu}");
    }

    #[test]
    fn ensemble_recovers_depth_two_interaction() {
        // mu(x) = 1{x1 > 0} 1{x2 > 0}, n = 2000, sigma = 0.1: a 50-tree
        // backfitting run should reach in-sample RMSE below 0.1.
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        let std = Normal::new(0.0, 1.0).unwrap();
        for i in 0..n {
            x[[i, 0]] = std.sample(&mut rng);
            x[[i, 1]] = std.sample(&mut rng);
            let f = if x[[i, 0]] > 0.0 && x[[i, 1]] > 0.0 { 1.0 } else { 0.0 };
            truth.push(f);
            y.push(f + noise.sample(&mut rng));
        }
        let t = vec![0.0; n];
        let s = vec![0.0; n];
        let kinds = continuous(2);
        let data = DesignView::new(x.view(), &t, &s, &kinds);
        let params = ForestParams::with_trees(50);
        let fit = fit_regression_forest(
            &data,
            &[SplitAxis::Covariate(0), SplitAxis::Covariate(1)],
            &y,
            &params,
            40,
            15,
            None,
            &mut rng,
        );
        let rmse = (fit
            .fitted
            .iter()
            .zip(&truth)
            .map(|(f, t)| (f - t) * (f - t))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!(rmse < 0.1, "in-sample RMSE {rmse}");
    }

    #[test]
    fn prediction_is_additive_and_step_extrapolates() {
        let tree = Tree::leaf(1.5);
        assert_eq!(tree.response(&[9.9], -3.0, 2.0), 1.5);
        let forest = Forest::new(1, vec![tree.clone(), tree]);
        assert_eq!(forest.predict(&[0.0], 0.0, 0.0).unwrap(), 3.0);
        assert!(matches!(
            forest.predict(&[0.0, 1.0], 0.0, 0.0),
            Err(ForestError::ArityMismatch { expected: 1, got: 2 })
        ));

        // A calendar-time split: queries beyond the trained range land in
        // the boundary leaf.
        let split = Node::Internal {
            rule: SplitRule {
                axis: SplitAxis::CalendarTime,
                kind: SplitKind::Ordered { cutpoint: 5.5 },
            },
            left: Box::new(Node::Leaf { mu: -1.0 }),
            right: Box::new(Node::Leaf { mu: 4.0 }),
        };
        let tree = Tree { root: split };
        assert_eq!(tree.response(&[], 5.0, 0.0), -1.0);
        assert_eq!(tree.response(&[], 6.0, 0.0), 4.0);
        assert_eq!(tree.response(&[], 1e9, 0.0), 4.0);
    }

    #[test]
    fn growth_is_deterministic_and_structurally_valid() {
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut x = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            x[[i, 0]] = std.sample(&mut rng);
            x[[i, 1]] = (i % 3) as f64 + 1.0;
        }
        let t: Vec<f64> = (0..n).map(|i| (i % 6) as f64).collect();
        let s: Vec<f64> = (0..n).map(|i| (i % 4) as f64).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[[i, 0]].signum() + 0.1 * std.sample(&mut rng) + t[i] * 0.05)
            .collect();
        let kinds = vec![
            CovariateKind::Continuous,
            CovariateKind::Categorical { levels: vec![1, 2, 3] },
        ];
        let data = DesignView::new(x.view(), &t, &s, &kinds);
        let axes = [
            SplitAxis::Covariate(0),
            SplitAxis::Covariate(1),
            SplitAxis::CalendarTime,
            SplitAxis::ExposureTime,
        ];
        let params = ForestParams::with_trees(1);

        for seed in 0..20u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let t1 = grow_from_root(&data, &y, &axes, 0.25, &params, &mut r1);
            let t2 = grow_from_root(&data, &y, &axes, 0.25, &params, &mut r2);
            assert_eq!(t1, t2);
            t1.validate(&kinds, params.max_depth).unwrap();
            // Fitted values agree with tree traversal.
            let pre = Presorted::new(&data, &axes);
            let w = vec![1.0; n];
            let mut r3 = ChaCha8Rng::seed_from_u64(seed);
            let (t3, fitted) =
                grow_from_root_weighted(&data, &pre, &y, &w, 0.25, &params, &mut r3);
            assert_eq!(t1, t3);
            for row in 0..n {
                let q = [x[[row, 0]], x[[row, 1]]];
                assert_eq!(t3.response(&q, t[row], s[row]), fitted[row]);
            }
        }
    }

    #[test]
    fn zero_weight_rows_draw_from_the_prior() {
        let n = 50;
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (x, t, s) = design_1d(&xs);
        let kinds = continuous(1);
        let data = DesignView::new(x.view(), &t, &s, &kinds);
        let mut params = ForestParams::with_trees(1);
        params.max_depth = 0;
        params.leaf_prior_var = 0.04;
        let pre = Presorted::new(&data, &[SplitAxis::Covariate(0)]);
        let target = vec![100.0; n];
        let weight = vec![0.0; n];
        let mut draws = Vec::new();
        for seed in 0..400u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tree, _) =
                grow_from_root_weighted(&data, &pre, &target, &weight, 1.0, &params, &mut rng);
            draws.push(tree.response(&[0.0], 0.0, 0.0));
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.05, "prior mean {mean}");
        assert!((var - 0.04).abs() < 0.015, "prior var {var}");
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut x = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            x[[i, 0]] = std.sample(&mut rng);
        }
        let t = vec![0.0; n];
        let s = vec![0.0; n];
        let y: Vec<f64> = (0..n).map(|i| x[[i, 0]].sin() + 0.01 * std.sample(&mut rng)).collect();
        let kinds = continuous(1);
        let data = DesignView::new(x.view(), &t, &s, &kinds);
        let params = ForestParams::with_trees(1);
        let tree = grow_from_root(&data, &y, &[SplitAxis::Covariate(0)], 0.01, &params, &mut rng);
        let forest = Forest::new(1, vec![tree]);
        let text = serde_json::to_string(&forest).unwrap();
        let back: Forest = serde_json::from_str(&text).unwrap();
        assert_eq!(forest, back);

        let bad = serde_json::from_str::<Forest>(
            r#"{"num_covariates":1,"trees":[{"axis":"calendar_time","kind":"ordered","children":[{"leaf":0.0},{"leaf":1.0}]}]}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn stats_are_additive_over_disjoint_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let std = Normal::new(0.0, 2.0).unwrap();
        let values: Vec<f64> = (0..500).map(|_| std.sample(&mut rng)).collect();
        let whole = SufficientStats::from_residuals(&values);
        let part_a = SufficientStats::from_residuals(&values[..137]);
        let part_b = SufficientStats::from_residuals(&values[137..]);
        let merged = part_a.merge(&part_b);
        assert_abs_diff_eq!(whole.n, merged.n, epsilon = 1e-9);
        assert_abs_diff_eq!(whole.sum_r, merged.sum_r, epsilon = 1e-9 * whole.sum_r.abs().max(1.0));
        assert_abs_diff_eq!(
            whole.sum_r2,
            merged.sum_r2,
            epsilon = 1e-9 * whole.sum_r2.abs().max(1.0)
        );
        // Cauchy-Schwarz lower bound on the squared sum.
        assert!(whole.sum_r2 >= whole.sum_r * whole.sum_r / whole.n - 1e-9);
    }
}
