//! Independent reference implementations used to check the library.
//!
//! Each oracle recomputes a result from first principles with a different
//! algorithm than the production code: brute-force sums instead of running
//! accumulators, per-line provenance records instead of origin vectors,
//! subset enumeration instead of the polynomial TreeSHAP recursion.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use qarisk::learn::{GbmModel, Node, Tree};
use qarisk::model::{BugReport, Commit, FileAction, StorageType};

/// `Σ v·w / Σ w`, accumulated term by term from normalized weights.
pub fn weighted_mean(items: &[(f64, f64)]) -> f64 {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    items.iter().map(|(v, w)| v * (w / total)).sum()
}

pub fn plain_mean(items: &[f64]) -> f64 {
    items.iter().sum::<f64>() / items.len() as f64
}

/// `(P, I, T, R)` for probability, impact and time values.
pub fn exposure(p: &[(f64, f64)], i: &[(f64, f64)], t: &[f64]) -> (f64, f64, f64, f64) {
    let (pf, imf, tf) = (weighted_mean(p), weighted_mean(i), plain_mean(t));
    (pf, imf, tf, pf * imf * tf)
}

/// Min, max, mean and median by full sort.
pub fn spread(values: &[f64]) -> (f64, f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    let median = if n.is_multiple_of(2) {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    } else {
        v[n / 2]
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    (v[0], v[n - 1], mean, median)
}

/// Base-2 Shannon entropy divided by `log2(n)`.
pub fn entropy(counts: &[f64]) -> f64 {
    if counts.len() < 2 {
        return 0.0;
    }
    let total: f64 = counts.iter().sum();
    let h: f64 = counts
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum();
    h / (counts.len() as f64).log2()
}

// ---------------------------------------------------------------------------
// Line provenance

/// One line of a simulated file with its complete history.
#[derive(Debug, Clone)]
pub struct SimLine {
    /// Commit that wrote the current text of the line.
    pub author_commit: usize,
    /// Every path the line has lived under, oldest first.
    pub paths: Vec<String>,
}

/// Working tree after each commit, with full per-line provenance.
#[derive(Debug, Clone, Default)]
pub struct ProvenanceSim {
    /// `states[k]` is the tree after commit `k`.
    pub states: Vec<BTreeMap<String, Vec<SimLine>>>,
}

impl ProvenanceSim {
    pub fn replay(commits: &[Commit]) -> Self {
        let mut states: Vec<BTreeMap<String, Vec<SimLine>>> = Vec::with_capacity(commits.len());
        let mut tree: BTreeMap<String, Vec<SimLine>> = BTreeMap::new();
        for (k, c) in commits.iter().enumerate() {
            let before = tree.clone();
            for ch in &c.changes {
                let base: Vec<SimLine> = match ch.action {
                    FileAction::Delete | FileAction::MoveDelete => {
                        tree.remove(&ch.path);
                        continue;
                    }
                    FileAction::Add => Vec::new(),
                    FileAction::Edit => before.get(&ch.path).cloned().unwrap_or_default(),
                    FileAction::MoveAdd | FileAction::Branch => ch
                        .from_path
                        .as_ref()
                        .and_then(|p| before.get(p))
                        .or_else(|| before.get(&ch.path))
                        .cloned()
                        .unwrap_or_default(),
                    FileAction::Integrate => before
                        .get(&ch.path)
                        .or_else(|| ch.from_path.as_ref().and_then(|p| before.get(p)))
                        .cloned()
                        .unwrap_or_default(),
                };
                let mut lines: Vec<SimLine> = base
                    .into_iter()
                    .map(|mut l| {
                        if l.paths.last() != Some(&ch.path) {
                            l.paths.push(ch.path.clone());
                        }
                        l
                    })
                    .collect();
                let fresh = |n: u32| {
                    (0..n).map(|_| SimLine {
                        author_commit: k,
                        paths: vec![ch.path.clone()],
                    })
                };
                if ch.hunks.is_empty() {
                    if ch.action == FileAction::Add {
                        lines = fresh(ch.lines_added).collect();
                    }
                } else {
                    // back to front, so earlier hunk positions stay valid
                    for h in ch.hunks.iter().rev() {
                        let at = h.old_start as usize - 1;
                        lines.splice(at..at + h.old_lines as usize, fresh(h.new_lines));
                    }
                }
                tree.insert(ch.path.clone(), lines);
            }
            states.push(tree.clone());
        }
        ProvenanceSim { states }
    }

    /// Commit that last wrote `line` (1-based) of `path` after commit `k`.
    pub fn blame(&self, k: usize, path: &str, line: u32) -> Option<usize> {
        self.states[k]
            .get(path)
            .and_then(|f| f.get(line as usize - 1))
            .map(|l| l.author_commit)
    }
}

fn mentions(message: &str, key: &str) -> bool {
    message
        .split(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '-'))
        .any(|tok| tok == key)
}

/// Bug-inducing commit ids by exhaustive replay: every fix's deleted or
/// edited pre-image lines are looked up in the simulated tree before the
/// fix, and writers dated on or before the bug report are kept.
pub fn szz_labels(commits: &[Commit], bugs: &[BugReport]) -> BTreeSet<String> {
    let sim = ProvenanceSim::replay(commits);
    let mut out = BTreeSet::new();
    for bug in bugs {
        for (k, fix) in commits.iter().enumerate() {
            let linked = bug.fixed_by_commit.as_deref() == Some(fix.id.as_str()) || mentions(&fix.message, &bug.id);
            if !linked || k == 0 {
                continue;
            }
            for ch in &fix.changes {
                if ch.storage_type == StorageType::Binary {
                    continue;
                }
                let pre_path = match ch.action {
                    FileAction::MoveAdd | FileAction::Branch => ch.from_path.clone().unwrap_or_else(|| ch.path.clone()),
                    _ => ch.path.clone(),
                };
                for h in &ch.hunks {
                    for line in h.old_start..h.old_start + h.old_lines {
                        let writer = sim.blame(k - 1, &pre_path, line).expect("pre-image line exists");
                        if commits[writer].timestamp.date_naive() <= bug.opened_on {
                            out.insert(commits[writer].id.clone());
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shapley values

/// Expected tree output when only the features in `known` are observed;
/// unobserved splits average their children by training cover.
fn conditional_value(tree: &Tree, node: usize, x: &[f64], known: &[bool]) -> f64 {
    match &tree.nodes[node] {
        Node::Leaf { value, .. } => *value,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            if known[*feature] {
                let next = if x[*feature] < *threshold { *left } else { *right };
                conditional_value(tree, next, x, known)
            } else {
                let lc = tree.nodes[*left].cover();
                let rc = tree.nodes[*right].cover();
                (lc * conditional_value(tree, *left, x, known) + rc * conditional_value(tree, *right, x, known)) / cover
            }
        }
    }
}

fn model_conditional(model: &GbmModel, x: &[f64], known: &[bool]) -> f64 {
    model.base_score
        + model
            .trees
            .iter()
            .map(|t| model.learning_rate * conditional_value(t, 0, x, known))
            .sum::<f64>()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values of the model's log-odds output by enumerating
/// every feature coalition. Exponential in the feature count.
pub fn shapley(model: &GbmModel, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    assert!(n <= 16, "brute force over {n} features is too slow");
    let mut phi = vec![0.0; n];
    for (i, slot) in phi.iter_mut().enumerate() {
        for mask in 0u32..(1 << n) {
            if mask & (1 << i) != 0 {
                continue;
            }
            let size = mask.count_ones() as usize;
            let weight = factorial(size) * factorial(n - size - 1) / factorial(n);
            let mut known: Vec<bool> = (0..n).map(|j| mask & (1 << j) != 0).collect();
            let without = model_conditional(model, x, &known);
            known[i] = true;
            let with = model_conditional(model, x, &known);
            *slot += weight * (with - without);
        }
    }
    phi
}

/// Model output with no features observed.
pub fn expected_output(model: &GbmModel, dim: usize) -> f64 {
    model_conditional(model, &vec![0.0; dim], &vec![false; dim])
}
