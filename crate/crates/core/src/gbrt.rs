//! Multi-target gradient-boosted regression trees.
//!
//! Squared loss, exact greedy split search over midpoints of consecutive
//! distinct values, learned default direction for missing values. Trees
//! are grown level by level; each level is one pass over the presorted
//! columns.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GbrtError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("row counts differ: {x} features, {y} targets, {w} weights")]
    ShapeMismatch { x: usize, y: usize, w: usize },
    #[error("sample weight at row {0} is not positive")]
    NonPositiveWeight(usize),
    #[error("target at row {0} is not finite")]
    NonFiniteTarget(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),
    #[error("feature columns do not match the model manifest")]
    ColumnMismatch,
    #[error("model io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub l2_leaf_reg: f64,
    pub subsample_rows: f64,
    pub subsample_cols: f64,
    pub random_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 5,
            l2_leaf_reg: 3.0,
            subsample_rows: 1.0,
            subsample_cols: 1.0,
            random_seed: 0,
        }
    }
}

impl Hyperparams {
    /// A learning rate of 0 is accepted and yields a base-only model.
    pub fn validate(&self) -> Result<(), GbrtError> {
        let bad = |m: &str| Err(GbrtError::InvalidHyperparams(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite nonnegative number");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1");
        }
        if !(self.l2_leaf_reg >= 0.0 && self.l2_leaf_reg.is_finite()) {
            return bad("l2_leaf_reg must be nonnegative");
        }
        for (name, v) in [("subsample_rows", self.subsample_rows), ("subsample_cols", self.subsample_cols)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(GbrtError::InvalidHyperparams(format!("{name} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        missing_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        value: Vec<f64>,
    },
}

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_value(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let x = row[*feature];
                    let go_left = if x.is_nan() { *missing_left } else { x <= *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn d(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + d(t, *left).max(d(t, *right)),
            }
        }
        d(self, 0)
    }
}

/// Boosted ensemble over `n_targets` outputs (2 for the joint μ/σ model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBRTEnsemble {
    pub format_version: u32,
    pub columns: Vec<String>,
    pub base_prediction: Vec<f64>,
    pub trees: Vec<Tree>,
    pub gains: Vec<f64>,
    pub hyperparams: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub columns: Vec<String>,
    pub gain: Vec<f64>,
}

impl FeatureImportance {
    /// Indices ordered by decreasing importance, ties by column order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.gain.len()).collect();
        idx.sort_by(|&a, &b| self.gain[b].total_cmp(&self.gain[a]).then(a.cmp(&b)));
        idx
    }
}

impl GBRTEnsemble {
    pub fn n_targets(&self) -> usize {
        self.base_prediction.len()
    }

    fn check_columns(&self, x: &FeatureMatrix) -> Result<(), GbrtError> {
        if x.n_cols() != self.columns.len() || x.columns.iter().zip(&self.columns).any(|(c, n)| &c.name != n) {
            return Err(GbrtError::ColumnMismatch);
        }
        Ok(())
    }

    /// Unclipped predictions from the base and the first `k` trees.
    pub fn predict_raw_upto(&self, x: &FeatureMatrix, k: usize) -> Result<Vec<Vec<f64>>, GbrtError> {
        self.check_columns(x)?;
        let trees = &self.trees[..k.min(self.trees.len())];
        Ok((0..x.n_rows())
            .into_par_iter()
            .map(|i| {
                let row = x.row(i);
                let mut out = self.base_prediction.clone();
                for t in trees {
                    for (o, v) in out.iter_mut().zip(t.leaf_value(row)) {
                        *o += v;
                    }
                }
                out
            })
            .collect())
    }

    pub fn predict_raw(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>, GbrtError> {
        self.predict_raw_upto(x, self.trees.len())
    }

    pub fn importance(&self) -> FeatureImportance {
        let total: f64 = self.gains.iter().sum();
        FeatureImportance {
            columns: self.columns.clone(),
            gain: if total > 0.0 {
                self.gains.iter().map(|g| g / total).collect()
            } else {
                vec![0.0; self.gains.len()]
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, GbrtError> {
        let m: GBRTEnsemble = serde_json::from_str(s).map_err(|e| GbrtError::Io(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(GbrtError::Io(format!("unsupported format version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), GbrtError> {
        std::fs::write(path, self.to_json()).map_err(|e| GbrtError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GbrtError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| GbrtError::Io(e.to_string()))?)
    }
}

/// (μ, σ) clipped to the valid output range.
pub fn clip_output(raw: &[f64]) -> (f64, f64) {
    (raw[0].clamp(0.0, 100.0), raw[1].max(0.0))
}

/// Whether μ and σ share tree structure or get an ensemble each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    #[default]
    Joint,
    Independent,
}

/// The (μ, σ) regressor used by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthModel {
    pub mode: TargetMode,
    /// One ensemble over both targets, or one per target.
    pub parts: Vec<GBRTEnsemble>,
}

impl WealthModel {
    pub fn fit(
        x: &FeatureMatrix,
        y: &[[f64; 2]],
        w: &[f64],
        hp: &Hyperparams,
        mode: TargetMode,
    ) -> Result<Self, GbrtError> {
        let parts = match mode {
            TargetMode::Joint => vec![fit(x, y, w, hp)?],
            TargetMode::Independent => (0..2)
                .map(|t| {
                    let yt: Vec<Vec<f64>> = y.iter().map(|r| vec![r[t]]).collect();
                    fit_targets(x, &yt, w, hp)
                })
                .collect::<Result<_, _>>()?,
        };
        Ok(Self { mode, parts })
    }

    pub fn predict_raw(&self, x: &FeatureMatrix) -> Result<Vec<[f64; 2]>, GbrtError> {
        let preds: Vec<Vec<Vec<f64>>> = self.parts.iter().map(|p| p.predict_raw(x)).collect::<Result<_, _>>()?;
        Ok((0..x.n_rows())
            .map(|i| {
                let v: Vec<f64> = preds.iter().flat_map(|p| p[i].iter().copied()).collect();
                [v[0], v[1]]
            })
            .collect())
    }

    /// Clipped (μ̂, σ̂) per row.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<(f64, f64)>, GbrtError> {
        Ok(self.predict_raw(x)?.iter().map(|r| clip_output(r)).collect())
    }

    /// Gain importance pooled over all parts.
    pub fn importance(&self) -> FeatureImportance {
        let first = &self.parts[0];
        let mut gains = vec![0.0; first.columns.len()];
        for p in &self.parts {
            for (g, v) in gains.iter_mut().zip(&p.gains) {
                *g += v;
            }
        }
        GBRTEnsemble {
            gains,
            ..first.clone()
        }
        .importance()
    }

    pub fn columns(&self) -> &[String] {
        &self.parts[0].columns
    }

    pub fn save(&self, path: &Path) -> Result<(), GbrtError> {
        std::fs::write(path, serde_json::to_string(self).expect("serializable")).map_err(|e| GbrtError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GbrtError> {
        let s = std::fs::read_to_string(path).map_err(|e| GbrtError::Io(e.to_string()))?;
        serde_json::from_str(&s).map_err(|e| GbrtError::Io(e.to_string()))
    }
}

/// Joint (μ, σ) ensemble.
pub fn fit(x: &FeatureMatrix, y: &[[f64; 2]], w: &[f64], hp: &Hyperparams) -> Result<GBRTEnsemble, GbrtError> {
    let yv: Vec<Vec<f64>> = y.iter().map(|r| r.to_vec()).collect();
    fit_targets(x, &yv, w, hp)
}

/// Most targets a single ensemble fits jointly.
pub const MAX_TARGETS: usize = 2;

// Per-node sufficient statistics: per-target weighted residual sums, total
// weight, row count. Unused target slots stay zero.
#[derive(Debug, Clone, Copy)]
struct Stats {
    g: [f64; MAX_TARGETS],
    w: f64,
    n: usize,
}

impl Stats {
    const ZERO: Stats = Stats {
        g: [0.0; MAX_TARGETS],
        w: 0.0,
        n: 0,
    };

    fn add(&mut self, r: &[f64], w: f64) {
        for (g, v) in self.g.iter_mut().zip(r) {
            *g += w * v;
        }
        self.w += w;
        self.n += 1;
    }

    fn plus(&self, o: &Stats) -> Stats {
        Stats {
            g: [self.g[0] + o.g[0], self.g[1] + o.g[1]],
            w: self.w + o.w,
            n: self.n + o.n,
        }
    }

    fn minus(&self, o: &Stats) -> Stats {
        Stats {
            g: [self.g[0] - o.g[0], self.g[1] - o.g[1]],
            w: self.w - o.w,
            n: self.n - o.n,
        }
    }

    /// Σ_t G_t² / (W + λ): the loss reduction achieved by the optimal leaf.
    fn score(&self, l2: f64) -> f64 {
        let d = self.w + l2;
        if d <= 0.0 {
            return 0.0;
        }
        (self.g[0] * self.g[0] + self.g[1] * self.g[1]) / d
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    missing_left: bool,
}

fn better(a: &Candidate, b: &Option<Candidate>) -> bool {
    match b {
        None => true,
        Some(b) => a.gain > b.gain,
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

struct Presorted {
    /// Non-missing rows of each column, ascending by value (ties by row).
    sorted: Vec<Vec<u32>>,
    missing: Vec<Vec<u32>>,
}

fn presort(x: &FeatureMatrix) -> Presorted {
    let n = x.n_rows();
    let (sorted, missing) = (0..x.n_cols())
        .into_par_iter()
        .map(|j| {
            let mut present: Vec<u32> = Vec::with_capacity(n);
            let mut miss = Vec::new();
            for i in 0..n {
                if x.get(i, j).is_nan() {
                    miss.push(i as u32);
                } else {
                    present.push(i as u32);
                }
            }
            present.sort_by(|&a, &b| x.get(a as usize, j).total_cmp(&x.get(b as usize, j)).then(a.cmp(&b)));
            (present, miss)
        })
        .unzip();
    Presorted { sorted, missing }
}

const NO_NODE: u32 = u32::MAX;

/// Fits an ensemble over arbitrary target vectors of equal length.
///
/// Sample weights are rescaled to mean 1, so multiplying every weight by a
/// constant leaves the model unchanged.
pub fn fit_targets(x: &FeatureMatrix, y: &[Vec<f64>], w: &[f64], hp: &Hyperparams) -> Result<GBRTEnsemble, GbrtError> {
    hp.validate()?;
    let n = x.n_rows();
    if n != y.len() || n != w.len() {
        return Err(GbrtError::ShapeMismatch {
            x: n,
            y: y.len(),
            w: w.len(),
        });
    }
    if n < 2 {
        return Err(GbrtError::TooFewRows(n));
    }
    let k = y[0].len();
    if k == 0 || k > MAX_TARGETS {
        return Err(GbrtError::InvalidHyperparams(format!("between 1 and {MAX_TARGETS} targets supported, got {k}")));
    }
    for (i, r) in y.iter().enumerate() {
        if r.len() != k || r.iter().any(|v| !v.is_finite()) {
            return Err(GbrtError::NonFiniteTarget(i));
        }
    }
    if let Some(i) = w.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(GbrtError::NonPositiveWeight(i));
    }
    let wsum: f64 = w.iter().sum();
    let mean_w = wsum / n as f64;
    let w: Vec<f64> = w.iter().map(|v| v / mean_w).collect();
    let wtot: f64 = w.iter().sum();

    let mut base = vec![0.0; k];
    for (r, wi) in y.iter().zip(&w) {
        for (b, v) in base.iter_mut().zip(r) {
            *b += wi * v;
        }
    }
    for b in &mut base {
        *b /= wtot;
    }

    let p = x.n_cols();
    let mut model = GBRTEnsemble {
        format_version: FORMAT_VERSION,
        columns: x.column_names(),
        base_prediction: base.clone(),
        trees: Vec::new(),
        gains: vec![0.0; p],
        hyperparams: hp.clone(),
    };
    if y.iter().all(|r| r == &y[0]) {
        log::warn!("all targets identical; model is base prediction only");
        return Ok(model);
    }
    if hp.learning_rate == 0.0 || p == 0 {
        return Ok(model);
    }

    let pre = presort(x);
    let mut pred: Vec<Vec<f64>> = vec![base; n];
    let n_rows_sample = ((hp.subsample_rows * n as f64).round() as usize).clamp(1, n);
    let n_cols_sample = ((hp.subsample_cols * p as f64).round() as usize).clamp(1, p);
    let deterministic = n_rows_sample == n && n_cols_sample == p;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.random_seed);

    for _ in 0..hp.n_trees {
        let resid: Vec<Vec<f64>> = y
            .iter()
            .zip(&pred)
            .map(|(t, f)| t.iter().zip(f).map(|(a, b)| a - b).collect())
            .collect();
        let in_sample: Vec<bool> = if n_rows_sample == n {
            vec![true; n]
        } else {
            let mut m = vec![false; n];
            for i in sample(&mut rng, n, n_rows_sample) {
                m[i] = true;
            }
            m
        };
        let cols: Vec<usize> = if n_cols_sample == p {
            (0..p).collect()
        } else {
            let mut c = sample(&mut rng, p, n_cols_sample).into_vec();
            c.sort_unstable();
            c
        };
        let (tree, split_gains) = grow_tree(x, &pre, &resid, &w, &in_sample, &cols, hp, k);
        let root_only = tree.nodes.len() == 1;
        if root_only && deterministic {
            break;
        }
        for (j, g) in split_gains {
            model.gains[j] += g;
        }
        pred.par_iter_mut().enumerate().for_each(|(i, f)| {
            for (a, v) in f.iter_mut().zip(tree.leaf_value(x.row(i))) {
                *a += v;
            }
        });
        model.trees.push(tree);
    }
    Ok(model)
}

#[allow(clippy::too_many_arguments)]
fn grow_tree(
    x: &FeatureMatrix,
    pre: &Presorted,
    resid: &[Vec<f64>],
    w: &[f64],
    in_sample: &[bool],
    cols: &[usize],
    hp: &Hyperparams,
    k: usize,
) -> (Tree, Vec<(usize, f64)>) {
    let n = x.n_rows();
    let l2 = hp.l2_leaf_reg;
    let msl = hp.min_samples_leaf;
    let mut node_of: Vec<u32> = (0..n).map(|i| if in_sample[i] { 0 } else { NO_NODE }).collect();
    let mut root = Stats::ZERO;
    for i in (0..n).filter(|&i| in_sample[i]) {
        root.add(&resid[i], w[i]);
    }
    // active[level_slot] = (tree node index, stats)
    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut active: Vec<(usize, Stats)> = vec![(0, root)];
    let mut gains = Vec::new();

    for _depth in 0..hp.max_depth {
        if active.is_empty() {
            break;
        }
        let m = active.len();
        let per_col: Vec<Vec<Option<Candidate>>> = cols
            .par_iter()
            .map(|&j| best_splits_for_column(x, pre, j, resid, w, &node_of, &active, l2, msl))
            .collect();
        let mut best: Vec<Option<Candidate>> = vec![None; m];
        for col_best in per_col {
            for (b, c) in best.iter_mut().zip(col_best) {
                if let Some(c) = c {
                    if better(&c, b) {
                        *b = Some(c);
                    }
                }
            }
        }
        // Route rows into children; remap slot ids for the next level.
        let mut next: Vec<(usize, Stats)> = Vec::new();
        let mut child_slot: Vec<Option<(u32, u32)>> = vec![None; m];
        for (s, cand) in best.iter().enumerate() {
            let Some(c) = cand else { continue };
            let (tree_idx, _) = active[s];
            let l = nodes.len();
            nodes.push(None);
            nodes.push(None);
            nodes[tree_idx] = Some(Node::Split {
                feature: c.feature,
                threshold: c.threshold,
                missing_left: c.missing_left,
                left: l,
                right: l + 1,
            });
            gains.push((c.feature, c.gain));
            child_slot[s] = Some((next.len() as u32, next.len() as u32 + 1));
            next.push((l, Stats::ZERO));
            next.push((l + 1, Stats::ZERO));
        }
        for (s, cand) in best.iter().enumerate() {
            if cand.is_none() {
                let (tree_idx, st) = &active[s];
                nodes[*tree_idx] = Some(leaf(st, k, l2, hp.learning_rate));
            }
        }
        for i in 0..n {
            let s = node_of[i];
            if s == NO_NODE {
                continue;
            }
            match (&best[s as usize], child_slot[s as usize]) {
                (Some(c), Some((ls, rs))) => {
                    let v = x.get(i, c.feature);
                    let go_left = if v.is_nan() { c.missing_left } else { v <= c.threshold };
                    let ns = if go_left { ls } else { rs };
                    next[ns as usize].1.add(&resid[i], w[i]);
                    node_of[i] = ns;
                }
                _ => node_of[i] = NO_NODE,
            }
        }
        active = next;
    }
    for (tree_idx, st) in &active {
        nodes[*tree_idx] = Some(leaf(st, k, l2, hp.learning_rate));
    }
    let tree = Tree {
        nodes: nodes.into_iter().map(|n| n.expect("every node resolved")).collect(),
    };
    (tree, gains)
}

fn leaf(st: &Stats, k: usize, l2: f64, lr: f64) -> Node {
    let d = st.w + l2;
    Node::Leaf {
        value: st.g[..k].iter().map(|g| if d > 0.0 { lr * g / d } else { 0.0 }).collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn best_splits_for_column(
    x: &FeatureMatrix,
    pre: &Presorted,
    j: usize,
    resid: &[Vec<f64>],
    w: &[f64],
    node_of: &[u32],
    active: &[(usize, Stats)],
    l2: f64,
    msl: usize,
) -> Vec<Option<Candidate>> {
    let m = active.len();
    let mut miss: Vec<Stats> = vec![Stats::ZERO; m];
    for &i in &pre.missing[j] {
        let s = node_of[i as usize];
        if s != NO_NODE {
            miss[s as usize].add(&resid[i as usize], w[i as usize]);
        }
    }
    let parent_score: Vec<f64> = active.iter().map(|(_, st)| st.score(l2)).collect();
    let mut left: Vec<Stats> = vec![Stats::ZERO; m];
    let mut last: Vec<f64> = vec![f64::NAN; m];
    let mut best: Vec<Option<Candidate>> = vec![None; m];

    for &i in &pre.sorted[j] {
        let i = i as usize;
        let s = node_of[i];
        if s == NO_NODE {
            continue;
        }
        let s = s as usize;
        let v = x.get(i, j);
        if left[s].n > 0 && v > last[s] {
            let total = &active[s].1;
            let lft = &left[s];
            let rgt = total.minus(lft).minus(&miss[s]);
            let thr = midpoint(last[s], v);
            // Missing rows to the right first so right wins ties.
            for missing_left in [false, true] {
                if miss[s].n == 0 && missing_left {
                    break;
                }
                let (l, r) = if missing_left {
                    (lft.plus(&miss[s]), rgt)
                } else {
                    (*lft, rgt.plus(&miss[s]))
                };
                if l.n < msl || r.n < msl {
                    continue;
                }
                let gain = l.score(l2) + r.score(l2) - parent_score[s];
                if gain <= 1e-12 * (1.0 + parent_score[s]) {
                    continue;
                }
                let ml = if miss[s].n == 0 { l.w > r.w } else { missing_left };
                let c = Candidate {
                    gain,
                    feature: j,
                    threshold: thr,
                    missing_left: ml,
                };
                if better(&c, &best[s]) {
                    best[s] = Some(c);
                }
            }
        }
        left[s].add(&resid[i], w[i]);
        last[s] = v;
    }
    best
}
