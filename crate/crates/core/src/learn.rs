//! Gradient-boosted regression trees for binary classification, with exact
//! additive explanations.
//!
//! Training minimises weighted logistic loss. Each round fits one tree to the
//! current gradients with exact greedy splits (every distinct midpoint of
//! every feature is tried), sets leaf values by a Newton step
//! `-G / (H + lambda)`, and scales them by the learning rate. If a leaf's step
//! would raise the loss of the rows that reach it, the step is halved until
//! it does not, so training loss never goes up from one round to the next.
//!
//! Explanations use path-dependent TreeSHAP in log-odds space. Each node's
//! cover is the number of in-bag rows that reached it during training.

use std::cmp::Ordering;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureTable;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Splits must improve the objective by more than this.
const MIN_SPLIT_GAIN: f64 = 1e-12;
const MAX_HALVINGS: u32 = 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnError {
    #[error("need at least two examples of each class (positives {positives}, negatives {negatives})")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("row {row}, feature {feature}: value is not finite")]
    NonFiniteValue { row: usize, feature: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("risk acceptance threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("malformed model: {0}")]
    MalformedModel(String),
}

impl LearnError {
    pub fn code(&self) -> &'static str {
        match self {
            LearnError::DegenerateLabels { .. } => "learn.DegenerateLabels",
            LearnError::SchemaMismatch { .. } => "learn.SchemaMismatch",
            LearnError::NonFiniteValue { .. } => "learn.NonFiniteValue",
            LearnError::EmptyTestSet => "learn.EmptyTestSet",
            LearnError::InvalidConfig(_) => "learn.InvalidConfig",
            LearnError::InvalidThreshold(_) => "learn.InvalidThreshold",
            LearnError::MalformedModel(_) => "learn.MalformedModel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
    /// Weight of each positive row; `None` means negatives / positives.
    pub positive_weight: Option<f64>,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 200,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 1,
            subsample: 1.0,
            positive_weight: None,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.to_string()));
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be positive");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if let Some(w) = self.positive_weight {
            if !(w.is_finite() && w > 0.0) {
                return bad("positive_weight must be positive");
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

/// Rows, labels and the schema they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub feature_names: Vec<String>,
    pub schema_hash: String,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<bool>,
}

impl TrainSet {
    pub fn new(feature_names: Vec<String>, schema_hash: impl Into<String>, x: Vec<Vec<f64>>, y: Vec<bool>) -> Self {
        TrainSet {
            feature_names,
            schema_hash: schema_hash.into(),
            x,
            y,
        }
    }

    pub fn from_table(table: &FeatureTable) -> Result<Self, LearnError> {
        let labels = table.labels.clone().ok_or_else(|| LearnError::SchemaMismatch {
            expected: "labelled feature table".into(),
            found: "unlabelled feature table".into(),
        })?;
        Ok(TrainSet::new(
            table.names.clone(),
            crate::features::schema_hash(),
            table.matrix(),
            labels,
        ))
    }

    pub fn subset(&self, rows: &[usize]) -> TrainSet {
        TrainSet {
            feature_names: self.feature_names.clone(),
            schema_hash: self.schema_hash.clone(),
            x: rows.iter().map(|&r| self.x[r].clone()).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn check(&self) -> Result<(), LearnError> {
        let dim = self.feature_names.len();
        if self.x.len() != self.y.len() {
            return Err(LearnError::SchemaMismatch {
                expected: format!("{} labels", self.x.len()),
                found: format!("{} labels", self.y.len()),
            });
        }
        for (r, row) in self.x.iter().enumerate() {
            if row.len() != dim {
                return Err(LearnError::SchemaMismatch {
                    expected: format!("{dim} features"),
                    found: format!("{} features in row {r}", row.len()),
                });
            }
            if let Some(f) = row.iter().position(|v| !v.is_finite()) {
                return Err(LearnError::NonFiniteValue { row: r, feature: f });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    /// Unscaled output for `x`.
    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => *value,
            Node::Split { .. } => unreachable!("leaf_index stops at a leaf"),
        }
    }

    /// Cover-weighted mean of the leaf values.
    pub fn expected_value(&self) -> f64 {
        fn go(t: &Tree, i: usize) -> f64 {
            match &t.nodes[i] {
                Node::Leaf { value, .. } => *value,
                Node::Split { left, right, cover, .. } => {
                    (t.nodes[*left].cover() * go(t, *left) + t.nodes[*right].cover() * go(t, *right)) / cover
                }
            }
        }
        go(self, 0)
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    pub fn features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub format_version: u32,
    pub schema_hash: String,
    pub feature_names: Vec<String>,
    /// Log-odds of the weighted positive rate in the training data.
    pub base_score: f64,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub trees: Vec<Tree>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn row_loss(raw: f64, y: bool, w: f64) -> f64 {
    w * (softplus(raw) - if y { raw } else { 0.0 })
}

impl GbmModel {
    /// A model with no trees predicting the given prior.
    pub fn constant(feature_names: Vec<String>, schema_hash: impl Into<String>, prior: f64) -> Self {
        GbmModel {
            format_version: MODEL_FORMAT_VERSION,
            schema_hash: schema_hash.into(),
            feature_names,
            base_score: (prior / (1.0 - prior)).ln(),
            learning_rate: 0.1,
            max_depth: 1,
            trees: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    fn check_vector(&self, x: &[f64]) -> Result<(), LearnError> {
        if x.len() != self.dim() {
            return Err(LearnError::SchemaMismatch {
                expected: format!("{} features", self.dim()),
                found: format!("{} features", x.len()),
            });
        }
        Ok(())
    }

    pub fn check_schema(&self, schema_hash: &str) -> Result<(), LearnError> {
        if schema_hash != self.schema_hash {
            return Err(LearnError::SchemaMismatch {
                expected: format!("schema {}", self.schema_hash),
                found: format!("schema {schema_hash}"),
            });
        }
        Ok(())
    }

    /// Log-odds output.
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64, LearnError> {
        self.check_vector(x)?;
        let mut raw = self.base_score;
        for t in &self.trees {
            raw += self.learning_rate * t.value(x);
        }
        Ok(raw)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, LearnError> {
        self.predict_raw(x).map(sigmoid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LearnError> {
        let m: GbmModel = serde_json::from_str(text).map_err(|e| LearnError::MalformedModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::MalformedModel(m));
        if self.format_version != MODEL_FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        if !self.base_score.is_finite() || !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("base score or learning rate out of range".into());
        }
        for (t, tree) in self.trees.iter().enumerate() {
            if tree.nodes.is_empty() {
                return bad(format!("tree {t} has no nodes"));
            }
            for (i, n) in tree.nodes.iter().enumerate() {
                if let Node::Split {
                    feature, left, right, ..
                } = n
                {
                    if *feature >= self.dim() {
                        return bad(format!("tree {t} node {i} splits on feature {feature}"));
                    }
                    // children come after their parent, which also rules out cycles
                    if *left <= i || *right <= i || *left >= tree.nodes.len() || *right >= tree.nodes.len() {
                        return bad(format!("tree {t} node {i} has invalid children"));
                    }
                }
            }
            if tree.depth() > self.max_depth {
                return bad(format!("tree {t} is deeper than {}", self.max_depth));
            }
        }
        Ok(())
    }
}

struct Grower<'a> {
    cols: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    cfg: &'a TrainConfig,
    nodes: Vec<Node>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    /// `sorted[f]` holds this node's rows ordered by feature `f`.
    fn grow(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let rows = &sorted[0];
        let n = rows.len();
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let id = self.nodes.len();
        let leaf = Node::Leaf {
            value: -g / (h + self.cfg.lambda),
            cover: n as f64,
        };
        self.nodes.push(leaf);
        if depth >= self.cfg.max_depth || n < 2 * self.cfg.min_samples_leaf {
            return id;
        }
        let Some(best) = self.best_split(&sorted, g, h) else {
            return id;
        };
        let col = &self.cols[best.feature];
        let (left, right): (Vec<Vec<usize>>, Vec<Vec<usize>>) = sorted
            .into_iter()
            .map(|list| list.into_iter().partition(|&i| col[i] < best.threshold))
            .unzip();
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
            cover: n as f64,
        };
        id
    }

    fn best_split(&self, sorted: &[Vec<usize>], g: f64, h: f64) -> Option<BestSplit> {
        let lambda = self.cfg.lambda;
        let min_leaf = self.cfg.min_samples_leaf;
        let parent = g * g / (h + lambda);
        let mut best: Option<BestSplit> = None;
        for (f, list) in sorted.iter().enumerate() {
            let col = &self.cols[f];
            let n = list.len();
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..n - 1 {
                let i = list[k];
                gl += self.grad[i];
                hl += self.hess[i];
                let (v, next) = (col[i], col[list[k + 1]]);
                if v >= next || k + 1 < min_leaf || n - k - 1 < min_leaf {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > best.as_ref().map_or(MIN_SPLIT_GAIN, |b| b.gain) {
                    let mid = v + (next - v) / 2.0;
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold: if mid > v { mid } else { next },
                    });
                }
            }
        }
        best
    }
}

/// Weighted logistic loss of a model's raw outputs.
pub fn weighted_log_loss(raw: &[f64], y: &[bool], weights: &[f64]) -> f64 {
    raw.iter()
        .zip(y)
        .zip(weights)
        .map(|((r, y), w)| row_loss(*r, *y, *w))
        .sum()
}

/// Per-row weights: `positive_weight` for positives, 1 for negatives.
pub fn sample_weights(y: &[bool], cfg: &TrainConfig) -> Vec<f64> {
    let pos = y.iter().filter(|v| **v).count();
    let neg = y.len() - pos;
    let wp = cfg
        .positive_weight
        .unwrap_or(if pos > 0 { neg as f64 / pos as f64 } else { 1.0 });
    y.iter().map(|v| if *v { wp } else { 1.0 }).collect()
}

/// Training result with the weighted training loss before the first tree
/// and after each one.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: GbmModel,
    pub loss_history: Vec<f64>,
}

pub fn train(set: &TrainSet, cfg: &TrainConfig) -> Result<GbmModel, LearnError> {
    train_traced(set, cfg).map(|t| t.model)
}

pub fn train_traced(set: &TrainSet, cfg: &TrainConfig) -> Result<Trained, LearnError> {
    cfg.validate()?;
    set.check()?;
    let positives = set.y.iter().filter(|v| **v).count();
    let negatives = set.len() - positives;
    if positives < 2 || negatives < 2 {
        return Err(LearnError::DegenerateLabels { positives, negatives });
    }
    let n = set.len();
    let dim = set.feature_names.len();
    let weights = sample_weights(&set.y, cfg);
    let wsum: f64 = weights.iter().sum();
    let wpos: f64 = weights.iter().zip(&set.y).filter(|(_, y)| **y).map(|(w, _)| w).sum();
    let prior = wpos / wsum;
    let base_score = (prior / (1.0 - prior)).ln();

    let cols: Vec<Vec<f64>> = (0..dim).map(|f| set.x.iter().map(|r| r[f]).collect()).collect();
    let presorted: Vec<Vec<usize>> = cols
        .iter()
        .map(|col| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bag_size = ((n as f64 * cfg.subsample).floor() as usize).clamp(1, n);
    let mut raw = vec![base_score; n];
    let mut loss_history = vec![weighted_log_loss(&raw, &set.y, &weights)];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut in_bag = vec![true; n];

    for _ in 0..cfg.n_trees {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            let y = if set.y[i] { 1.0 } else { 0.0 };
            grad[i] = weights[i] * (p - y);
            hess[i] = weights[i] * p * (1.0 - p);
        }
        if bag_size < n {
            in_bag.fill(false);
            for i in rand::seq::index::sample(&mut rng, n, bag_size) {
                in_bag[i] = true;
            }
        }
        let sorted: Vec<Vec<usize>> = presorted
            .iter()
            .map(|list| list.iter().copied().filter(|&i| in_bag[i]).collect())
            .collect();
        let mut grower = Grower {
            cols: &cols,
            grad: &grad,
            hess: &hess,
            cfg,
            nodes: Vec::new(),
        };
        grower.grow(sorted, 0);
        let mut tree = Tree { nodes: grower.nodes };

        // damp any leaf whose step would raise the loss of its rows
        let leaf_of: Vec<usize> = set.x.iter().map(|x| tree.leaf_index(x)).collect();
        for (id, node) in tree.nodes.iter_mut().enumerate() {
            let Node::Leaf { value, .. } = node else { continue };
            let members: Vec<usize> = (0..n).filter(|&i| leaf_of[i] == id).collect();
            let loss_at = |step: f64| -> f64 {
                members
                    .iter()
                    .map(|&i| row_loss(raw[i] + cfg.learning_rate * step, set.y[i], weights[i]))
                    .sum()
            };
            let before = loss_at(0.0);
            let mut halvings = 0;
            while *value != 0.0 && loss_at(*value) > before {
                *value = if halvings < MAX_HALVINGS { *value / 2.0 } else { 0.0 };
                halvings += 1;
            }
        }
        for (r, x) in raw.iter_mut().zip(&set.x) {
            *r += cfg.learning_rate * tree.value(x);
        }
        loss_history.push(weighted_log_loss(&raw, &set.y, &weights));
        trees.push(tree);
    }

    Ok(Trained {
        model: GbmModel {
            format_version: MODEL_FORMAT_VERSION,
            schema_hash: set.schema_hash.clone(),
            feature_names: set.feature_names.clone(),
            base_score,
            learning_rate: cfg.learning_rate,
            max_depth: cfg.max_depth,
            trees,
        },
        loss_history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Alert,
    Pass,
}

/// Alert iff `score >= threshold`.
pub fn classify(score: f64, threshold: f64) -> Result<Verdict, LearnError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(LearnError::InvalidThreshold(threshold));
    }
    Ok(if score >= threshold {
        Verdict::Alert
    } else {
        Verdict::Pass
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub index: usize,
    pub feature: String,
    pub value: f64,
    /// Contribution in log-odds.
    pub contribution: f64,
    /// Change in probability when this contribution is removed from the
    /// raw output.
    pub probability_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    /// Always `log_odds`.
    pub space: String,
    pub base_value: f64,
    pub raw: f64,
    pub score: f64,
    /// One entry per feature, in schema order.
    pub contributions: Vec<FeatureAttribution>,
}

impl Explanation {
    /// The `k` largest contributions by magnitude; ties keep schema order.
    pub fn top(&self, k: usize) -> Vec<&FeatureAttribution> {
        let mut v: Vec<&FeatureAttribution> = self.contributions.iter().collect();
        v.sort_by(|a, b| {
            b.contribution
                .abs()
                .partial_cmp(&a.contribution.abs())
                .unwrap_or(Ordering::Equal)
                .then(a.index.cmp(&b.index))
        });
        v.truncate(k);
        v
    }

    pub fn sum(&self) -> f64 {
        self.base_value + self.contributions.iter().map(|c| c.contribution).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: usize,
    zero: f64,
    one: f64,
    pweight: f64,
}

const NO_FEATURE: usize = usize::MAX;

fn extend_path(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: usize) {
    let d = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        pweight: if d == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..d).rev() {
        path[i + 1].pweight += one * path[i].pweight * (i + 1) as f64 / (d + 1) as f64;
        path[i].pweight = zero * path[i].pweight * (d - i) as f64 / (d + 1) as f64;
    }
}

fn unwind_path(path: &mut Vec<PathElem>, k: usize) {
    let d = path.len() - 1;
    let PathElem { zero, one, .. } = path[k];
    let mut next = path[d].pweight;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next * (d + 1) as f64 / ((i + 1) as f64 * one);
            next = tmp - path[i].pweight * zero * (d - i) as f64 / (d + 1) as f64;
        } else {
            path[i].pweight = path[i].pweight * (d + 1) as f64 / (zero * (d - i) as f64);
        }
    }
    for i in k..d {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], k: usize) -> f64 {
    let d = path.len() - 1;
    let PathElem { zero, one, .. } = path[k];
    let mut next = path[d].pweight;
    let mut total = 0.0;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = next * (d + 1) as f64 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].pweight - tmp * zero * (d - i) as f64 / (d + 1) as f64;
        } else {
            total += path[i].pweight / (zero * (d - i) as f64 / (d + 1) as f64);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn shap_recurse(
    tree: &Tree,
    node: usize,
    x: &[f64],
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: usize,
    phi: &mut [f64],
) {
    extend_path(&mut path, zero, one, feature);
    match &tree.nodes[node] {
        Node::Leaf { value, .. } => {
            for k in 1..path.len() {
                let w = unwound_sum(&path, k);
                let e = path[k];
                phi[e.feature] += w * (e.one - e.zero) * value;
            }
        }
        Node::Split {
            feature: f,
            threshold,
            left,
            right,
            cover,
        } => {
            let (hot, cold) = if x[*f] < *threshold {
                (*left, *right)
            } else {
                (*right, *left)
            };
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = path.iter().skip(1).position(|e| e.feature == *f).map(|k| k + 1) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind_path(&mut path, k);
            }
            let hot_frac = tree.nodes[hot].cover() / cover;
            let cold_frac = tree.nodes[cold].cover() / cover;
            shap_recurse(tree, hot, x, path.clone(), hot_frac * in_zero, in_one, *f, phi);
            shap_recurse(tree, cold, x, path, cold_frac * in_zero, 0.0, *f, phi);
        }
    }
}

/// Path-dependent SHAP values of one tree's unscaled output.
pub fn tree_shap(tree: &Tree, x: &[f64]) -> Vec<f64> {
    let mut phi = vec![0.0; x.len()];
    shap_recurse(tree, 0, x, Vec::new(), 1.0, 1.0, NO_FEATURE, &mut phi);
    phi
}

pub fn explain(model: &GbmModel, x: &[f64]) -> Result<Explanation, LearnError> {
    let raw = model.predict_raw(x)?;
    let mut phi = vec![0.0; x.len()];
    let mut base = model.base_score;
    for t in &model.trees {
        base += model.learning_rate * t.expected_value();
        for (p, v) in phi.iter_mut().zip(tree_shap(t, x)) {
            *p += model.learning_rate * v;
        }
    }
    let score = sigmoid(raw);
    Ok(Explanation {
        space: "log_odds".into(),
        base_value: base,
        raw,
        score,
        contributions: phi
            .iter()
            .enumerate()
            .map(|(i, c)| FeatureAttribution {
                index: i,
                feature: model.feature_names[i].clone(),
                value: x[i],
                contribution: *c,
                probability_delta: score - sigmoid(raw - c),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (p, a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (false, true) => c.fn_ += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(hit: u64, false_alarm: u64, missed: u64) -> ClassMetrics {
    let precision = ratio(hit, hit + false_alarm);
    let recall = ratio(hit, hit + missed);
    ClassMetrics {
        precision,
        recall,
        f1: ratio(2 * hit, 2 * hit + false_alarm + missed),
        support: hit + missed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    /// The bug-inducing class.
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Unweighted mean of the per-class F1 scores.
    pub macro_f1: f64,
    /// Harmonic mean of the macro precision and macro recall.
    pub f1_of_macro_averages: f64,
    pub accuracy: f64,
    /// Absent when the test set holds a single class.
    pub roc_auc: Option<f64>,
    pub threshold: f64,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion, roc_auc: Option<f64>, threshold: f64) -> Self {
        let Confusion { tp, fn_, fp, tn } = confusion;
        let positive = class_metrics(tp, fp, fn_);
        let negative = class_metrics(tn, fn_, fp);
        let macro_precision = (positive.precision + negative.precision) / 2.0;
        let macro_recall = (positive.recall + negative.recall) / 2.0;
        let f1_of_macro_averages = if macro_precision + macro_recall > 0.0 {
            2.0 * macro_precision * macro_recall / (macro_precision + macro_recall)
        } else {
            0.0
        };
        EvalReport {
            confusion,
            positive,
            negative,
            macro_precision,
            macro_recall,
            macro_f1: (positive.f1 + negative.f1) / 2.0,
            f1_of_macro_averages,
            accuracy: ratio(tp + tn, confusion.total()),
            roc_auc,
            threshold,
        }
    }

    /// Two-row table of per-class metrics plus the macro row.
    pub fn to_tsv(&self) -> String {
        let row = |name: &str, m: &ClassMetrics| {
            format!(
                "{name}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                m.precision, m.recall, m.f1, m.support
            )
        };
        let mut s = String::from("class\tprecision\trecall\tf1\tsupport\n");
        s.push_str(&row("bug_inducing", &self.positive));
        s.push_str(&row("clean", &self.negative));
        s.push_str(&format!(
            "macro\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.confusion.total()
        ));
        s
    }
}

/// Area under the ROC curve from the rank-sum statistic; tied scores share
/// their average rank.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < idx.len() {
        let mut j = k;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[k]] {
            j += 1;
        }
        let avg_rank = (k + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * idx[k..=j].iter().filter(|&&i| labels[i]).count() as f64;
        k = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

pub fn evaluate(model: &GbmModel, test: &TrainSet, threshold: f64) -> Result<EvalReport, LearnError> {
    if test.is_empty() {
        return Err(LearnError::EmptyTestSet);
    }
    classify(0.5, threshold)?;
    let scores = test
        .x
        .iter()
        .map(|x| model.predict_proba(x))
        .collect::<Result<Vec<_>, _>>()?;
    let predicted: Vec<bool> = scores.iter().map(|s| *s >= threshold).collect();
    Ok(EvalReport::from_confusion(
        Confusion::from_predictions(&predicted, &test.y),
        roc_auc(&scores, &test.y),
        threshold,
    ))
}

/// Indices of the earliest `1 - test_fraction` rows by time (train) and the
/// rest (test). Equal timestamps keep their input order.
pub fn time_ordered_split(timestamps: &[DateTime<Utc>], test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..timestamps.len()).collect();
    idx.sort_by_key(|&i| (timestamps[i], i));
    let n_test = ((timestamps.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let cut = timestamps.len() - n_test.min(timestamps.len());
    let test = idx.split_off(cut);
    (idx, test)
}
