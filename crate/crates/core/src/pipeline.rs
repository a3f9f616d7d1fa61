//! Training protocol: recency selection, stratified splitting, class
//! balancing weights, cross-validated random search and repeated runs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, EvalMetrics, Normalizer};
use crate::features::{self, FeatureConfig, FeatureError, FeatureMatrix};
use crate::gbrt::{GbrtError, Hyperparams, TargetMode, WealthModel};
use crate::groundtruth::{self, discretize_equal_width, GroundTruthError, IwiStats, RelocationMode};
use crate::ingest::{DatasetBundle, Settlement};

pub const N_WEALTH_BINS: usize = 10;
pub const CARD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("year {0} not present in the bundle")]
    MissingYear(i32),
    #[error("every search candidate failed")]
    AllCandidatesFailed,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    GroundTruth(#[from] GroundTruthError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] GbrtError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Mixes `parts` into `base` (SplitMix64 finalizer per step).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

// ---------------------------------------------------------------------------
// Recency and weighting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecencyMode {
    #[serde(rename = "OO")]
    OldOld,
    #[serde(rename = "NN")]
    NewNew,
    /// Train on every oldest-year cluster, test on every newest-year one.
    #[serde(rename = "O-N")]
    TrainOldTestNew,
    /// Both years pooled, stratified split.
    #[serde(rename = "ON")]
    Combined,
}

impl RecencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RecencyMode::OldOld => "OO",
            RecencyMode::NewNew => "NN",
            RecencyMode::TrainOldTestNew => "O-N",
            RecencyMode::Combined => "ON",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "OO" | "O-O" => Some(RecencyMode::OldOld),
            "NN" | "N-N" => Some(RecencyMode::NewNew),
            "O-N" => Some(RecencyMode::TrainOldTestNew),
            "ON" => Some(RecencyMode::Combined),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecencyConfig {
    pub mode: RecencyMode,
    pub oldest_year: i32,
    pub newest_year: i32,
}

impl RecencyConfig {
    /// Oldest and newest survey years of the bundle's clusters.
    pub fn for_bundle(mode: RecencyMode, bundle: &DatasetBundle) -> Result<Self, PipelineError> {
        let years = bundle.years();
        let (Some(&lo), Some(&hi)) = (years.first(), years.last()) else {
            return Err(PipelineError::TooFewSamples { need: 1, got: 0 });
        };
        Ok(Self {
            mode,
            oldest_year: lo,
            newest_year: hi,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    None,
    Ens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub scheme: WeightScheme,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
}

fn default_beta() -> f64 {
    0.9
}

fn default_bins() -> usize {
    N_WEALTH_BINS
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::None,
            beta: 0.9,
            n_bins: N_WEALTH_BINS,
        }
    }
}

/// `(1 - β) / (1 - β^n)`; 1 for β = 0.
pub fn ens_raw_weight(n: usize, beta: f64) -> f64 {
    if beta == 0.0 {
        return 1.0;
    }
    (1.0 - beta) / (1.0 - beta.powi(n as i32))
}

/// Per-sample weights over equal-width bins of `mu`, normalized to mean 1.
pub fn ens_weights(mu: &[f64], cfg: &WeightConfig) -> Result<Vec<f64>, PipelineError> {
    if mu.is_empty() {
        return Err(PipelineError::TooFewSamples { need: 1, got: 0 });
    }
    if cfg.scheme == WeightScheme::None {
        return Ok(vec![1.0; mu.len()]);
    }
    if !(0.0..1.0).contains(&cfg.beta) {
        return Err(PipelineError::Config(format!("beta must lie in [0, 1), got {}", cfg.beta)));
    }
    let bins = discretize_equal_width(mu, cfg.n_bins)?;
    let mut counts = vec![0usize; cfg.n_bins];
    for &b in &bins {
        counts[b] += 1;
    }
    let raw: Vec<f64> = bins.iter().map(|&b| ens_raw_weight(counts[b], cfg.beta)).collect();
    let m = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / m).collect())
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Row positions into the stats slice the split was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per equal-width wealth bin, `floor(test_frac * n_bin)` members go to
/// test; the rest train. Depends only on μ and the seed.
pub fn stratified_split(mu: &[f64], test_frac: f64, seed: u64) -> Result<Split, PipelineError> {
    if mu.len() < N_WEALTH_BINS {
        return Err(PipelineError::TooFewSamples {
            need: N_WEALTH_BINS,
            got: mu.len(),
        });
    }
    let bins = discretize_equal_width(mu, N_WEALTH_BINS)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); N_WEALTH_BINS];
    for (i, &b) in bins.iter().enumerate() {
        members[b].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (b, mut m) in members.into_iter().enumerate() {
        if m.len() == 1 {
            log::warn!("wealth bin {b} has a single member; kept in train");
        }
        m.shuffle(&mut rng);
        let n_test = (test_frac * m.len() as f64 + 1e-9).floor() as usize;
        split.test.extend_from_slice(&m[..n_test]);
        split.train.extend_from_slice(&m[n_test..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Fold index per row. Members of each bin are shuffled and dealt round
/// robin, the dealer continuing across bins, so fold sizes and per-fold
/// bin counts both differ by at most one.
pub fn stratified_folds(bins: &[usize], n_folds: usize, seed: u64) -> Vec<usize> {
    let n_bins = bins.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &b) in bins.iter().enumerate() {
        members[b].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; bins.len()];
    let mut dealer = 0;
    for mut m in members {
        m.shuffle(&mut rng);
        for i in m {
            fold[i] = dealer % n_folds;
            dealer += 1;
        }
    }
    fold
}

// ---------------------------------------------------------------------------
// Random search
// ---------------------------------------------------------------------------

/// Closed ranges for each sampled hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_trees: (usize, usize),
    pub max_depth: (usize, usize),
    pub learning_rate: (f64, f64),
    pub min_samples_leaf: (usize, usize),
    pub l2_leaf_reg: (f64, f64),
    pub subsample_rows: (f64, f64),
    pub subsample_cols: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            n_trees: (50, 500),
            max_depth: (3, 10),
            learning_rate: (0.01, 0.3),
            min_samples_leaf: (1, 20),
            l2_leaf_reg: (0.0, 10.0),
            subsample_rows: (0.6, 1.0),
            subsample_cols: (0.6, 1.0),
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    (rng.random_range(lo.ln()..=hi.ln())).exp().clamp(lo, hi)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

impl SearchSpace {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Hyperparams {
        let int = |rng: &mut R, (lo, hi): (usize, usize)| if lo >= hi { lo } else { rng.random_range(lo..=hi) };
        Hyperparams {
            n_trees: log_uniform(rng, self.n_trees.0 as f64, self.n_trees.1 as f64).round() as usize,
            max_depth: int(rng, self.max_depth),
            learning_rate: log_uniform(rng, self.learning_rate.0, self.learning_rate.1),
            min_samples_leaf: int(rng, self.min_samples_leaf),
            l2_leaf_reg: uniform(rng, self.l2_leaf_reg.0, self.l2_leaf_reg.1),
            subsample_rows: uniform(rng, self.subsample_rows.0, self.subsample_rows.1),
            subsample_cols: uniform(rng, self.subsample_cols.0, self.subsample_cols.1),
            random_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpec {
    pub n_candidates: usize,
    pub n_folds: usize,
    pub n_runs: usize,
    #[serde(default)]
    pub space: SearchSpace,
}

impl SearchSpec {
    /// 20 candidates, 2 folds, 1 run.
    pub fn ci() -> Self {
        Self {
            n_candidates: 20,
            n_folds: 2,
            n_runs: 1,
            space: SearchSpace::default(),
        }
    }

    /// 200 candidates, 4 folds, 3 runs.
    pub fn full() -> Self {
        Self {
            n_candidates: 200,
            n_folds: 4,
            n_runs: 3,
            space: SearchSpace::default(),
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "ci" => Some(Self::ci()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub index: usize,
    pub hyperparams: Hyperparams,
    pub fold_losses: Vec<f64>,
    pub mean_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_index: usize,
    pub best: Hyperparams,
    pub table: Vec<CandidateResult>,
}

/// Mean over targets of MSE divided by the target's variance in `scale`.
pub fn selection_loss(truth: &[[f64; 2]], pred: &[[f64; 2]], scale: [f64; 2]) -> f64 {
    let n = truth.len() as f64;
    (0..2)
        .map(|t| truth.iter().zip(pred).map(|(a, b)| (a[t] - b[t]).powi(2)).sum::<f64>() / n / scale[t])
        .sum::<f64>()
        / 2.0
}

fn target_variances(y: &[[f64; 2]]) -> [f64; 2] {
    [0, 1].map(|t| {
        let v: Vec<f64> = y.iter().map(|r| r[t]).collect();
        eval::pop_std(&v).powi(2).max(1e-12)
    })
}

/// Labelled training data for one search.
pub struct TrainSet<'a> {
    pub x: &'a FeatureMatrix,
    pub y: &'a [[f64; 2]],
    pub w: &'a [f64],
}

/// Cross-validated evaluation of explicit candidates. Fold seeds derive from
/// `(seed, candidate, fold)`; the best candidate has the lowest mean loss,
/// ties going to the earlier one.
pub fn evaluate_candidates(
    data: &TrainSet<'_>,
    candidates: &[Hyperparams],
    n_folds: usize,
    mode: TargetMode,
    seed: u64,
) -> Result<SearchResult, PipelineError> {
    let n = data.x.n_rows();
    if n < 2 * n_folds || n_folds < 2 {
        return Err(PipelineError::TooFewSamples {
            need: 2 * n_folds.max(2),
            got: n,
        });
    }
    let mu: Vec<f64> = data.y.iter().map(|r| r[0]).collect();
    let bins = discretize_equal_width(&mu, N_WEALTH_BINS)?;
    let folds = stratified_folds(&bins, n_folds, derive_seed(seed, &[0xF01D]));
    let scale = target_variances(data.y);
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> = (0..n_folds)
        .map(|f| {
            let (val, tr): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| folds[i] == f);
            (tr, val)
        })
        .collect();
    let fold_data: Vec<(FeatureMatrix, Vec<[f64; 2]>, Vec<f64>, FeatureMatrix, Vec<[f64; 2]>)> = fold_rows
        .iter()
        .map(|(tr, val)| {
            (
                data.x.select_rows(tr),
                tr.iter().map(|&i| data.y[i]).collect(),
                tr.iter().map(|&i| data.w[i]).collect(),
                data.x.select_rows(val),
                val.iter().map(|&i| data.y[i]).collect(),
            )
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|c| (0..n_folds).map(move |f| (c, f))).collect();
    let losses: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let hp = Hyperparams {
                random_seed: derive_seed(seed, &[c as u64, f as u64]),
                ..candidates[c].clone()
            };
            let (xt, yt, wt, xv, yv) = &fold_data[f];
            let m = WealthModel::fit(xt, yt, wt, &hp, mode).map_err(|e| e.to_string())?;
            let p = m.predict_raw(xv).map_err(|e| e.to_string())?;
            Ok(selection_loss(yv, &p, scale))
        })
        .collect();

    let mut table = Vec::with_capacity(candidates.len());
    for (c, hp) in candidates.iter().enumerate() {
        let mut fold_losses = Vec::new();
        let mut error = None;
        for r in &losses[c * n_folds..(c + 1) * n_folds] {
            match r {
                Ok(l) => fold_losses.push(*l),
                Err(e) => error = Some(e.clone()),
            }
        }
        if let Some(e) = &error {
            log::warn!("candidate {c} failed: {e}");
        }
        let mean_loss = error.is_none().then(|| fold_losses.iter().sum::<f64>() / n_folds as f64);
        table.push(CandidateResult {
            index: c,
            hyperparams: hp.clone(),
            fold_losses,
            mean_loss,
            error,
        });
    }
    let best_index = table
        .iter()
        .filter_map(|c| c.mean_loss.map(|l| (c.index, l)))
        .fold(None, |acc: Option<(usize, f64)>, (i, l)| match acc {
            Some((_, bl)) if bl <= l => acc,
            _ => Some((i, l)),
        })
        .ok_or(PipelineError::AllCandidatesFailed)?
        .0;
    Ok(SearchResult {
        best_index,
        best: candidates[best_index].clone(),
        table,
    })
}

/// Samples `spec.n_candidates` candidates from the space and
/// cross-validates them.
pub fn random_search_cv(
    data: &TrainSet<'_>,
    spec: &SearchSpec,
    mode: TargetMode,
    seed: u64,
) -> Result<SearchResult, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xCA7D]));
    let candidates: Vec<Hyperparams> = (0..spec.n_candidates).map(|_| spec.space.sample(&mut rng)).collect();
    evaluate_candidates(data, &candidates, spec.n_folds, mode, seed)
}

// ---------------------------------------------------------------------------
// Full protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub recency: RecencyMode,
    pub relocation: RelocationMode,
    #[serde(default)]
    pub weights: WeightConfig,
    /// `ci` or `full`; expanded into `search`.
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub search: Option<SearchSpec>,
    #[serde(default)]
    pub target_mode: TargetMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    #[serde(default)]
    pub normalizer: Normalizer,
    #[serde(default)]
    pub features: FeatureConfig,
}

fn default_profile() -> String {
    "ci".into()
}

fn default_test_frac() -> f64 {
    0.2
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            recency: RecencyMode::Combined,
            relocation: RelocationMode::None,
            weights: WeightConfig::default(),
            profile: default_profile(),
            search: None,
            target_mode: TargetMode::Joint,
            seed: 0,
            test_frac: default_test_frac(),
            normalizer: Normalizer::EvalSet,
            features: FeatureConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn search_spec(&self) -> Result<SearchSpec, PipelineError> {
        match &self.search {
            Some(s) => Ok(s.clone()),
            None => SearchSpec::profile(&self.profile)
                .ok_or_else(|| PipelineError::Config(format!("unknown search profile `{}`", self.profile))),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }
}

/// What the card pins down about the data and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub bundle_sha256: String,
    pub country_code: String,
    pub years: Vec<i32>,
    pub recency: RecencyMode,
    pub relocation: RelocationMode,
    pub weights: WeightConfig,
    pub target_mode: TargetMode,
    pub search: SearchSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub best_index: usize,
    pub hyperparams: Hyperparams,
    pub cv_fold_losses: Vec<f64>,
    pub cv_mean_loss: f64,
    pub test_metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub card_version: u32,
    pub seed: u64,
    pub fingerprint: Fingerprint,
    pub runs: Vec<RunRecord>,
    pub mean_metrics: EvalMetrics,
}

impl ModelCard {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Held-out prediction of one cluster in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPrediction {
    pub run: usize,
    pub cluster_id: String,
    pub settlement: Settlement,
    pub year: i32,
    pub mu_true: f64,
    pub sigma_true: f64,
    pub mu_pred: f64,
    pub sigma_pred: f64,
}

pub struct TrainOutput {
    pub card: ModelCard,
    /// Refit of the final run.
    pub model: WealthModel,
    pub test_predictions: Vec<TestPrediction>,
    /// Search tables, one per run.
    pub searches: Vec<SearchResult>,
}

/// Train/test positions for a recency mode. Rows of `stats` outside the
/// selected years are ignored.
pub fn recency_split(stats: &[IwiStats], recency: &RecencyConfig, test_frac: f64, seed: u64) -> Result<Split, PipelineError> {
    let pick = |pred: &dyn Fn(&IwiStats) -> bool| -> Vec<usize> { (0..stats.len()).filter(|&i| pred(&stats[i])).collect() };
    let stratified_on = |rows: Vec<usize>| -> Result<Split, PipelineError> {
        let mu: Vec<f64> = rows.iter().map(|&i| stats[i].mu).collect();
        let s = stratified_split(&mu, test_frac, seed)?;
        Ok(Split {
            train: s.train.iter().map(|&k| rows[k]).collect(),
            test: s.test.iter().map(|&k| rows[k]).collect(),
        })
    };
    let (old, new) = (recency.oldest_year, recency.newest_year);
    for y in [old, new] {
        if !stats.iter().any(|s| s.year == y) {
            return Err(PipelineError::MissingYear(y));
        }
    }
    match recency.mode {
        RecencyMode::OldOld => stratified_on(pick(&|s| s.year == old)),
        RecencyMode::NewNew => stratified_on(pick(&|s| s.year == new)),
        RecencyMode::Combined => stratified_on(pick(&|s| s.year == old || s.year == new)),
        RecencyMode::TrainOldTestNew => {
            if old == new {
                return Err(PipelineError::Config("O-N needs two distinct survey years".into()));
            }
            Ok(Split {
                train: pick(&|s| s.year == old),
                test: pick(&|s| s.year == new),
            })
        }
    }
}

/// Runs the protocol on precomputed cluster features (rows aligned with
/// `stats`).
pub fn train_with_features(
    stats: &[IwiStats],
    x: &FeatureMatrix,
    recency: &RecencyConfig,
    cfg: &ExperimentConfig,
    bundle_sha256: &str,
    country_code: &str,
) -> Result<TrainOutput, PipelineError> {
    if x.n_rows() != stats.len() {
        return Err(PipelineError::Config("feature rows must align with cluster stats".into()));
    }
    let spec = cfg.search_spec()?;
    if spec.n_runs == 0 {
        return Err(PipelineError::Config("n_runs must be at least 1".into()));
    }
    let y_all: Vec<[f64; 2]> = stats.iter().map(|s| [s.mu, s.sigma]).collect();
    let mut runs = Vec::new();
    let mut preds = Vec::new();
    let mut searches = Vec::new();
    let mut model = None;
    for run in 0..spec.n_runs {
        let run_seed = derive_seed(cfg.seed, &[run as u64]);
        let split = recency_split(stats, recency, cfg.test_frac, derive_seed(run_seed, &[0x5B17]))?;
        let xt = x.select_rows(&split.train);
        let yt: Vec<[f64; 2]> = split.train.iter().map(|&i| y_all[i]).collect();
        let mu_t: Vec<f64> = yt.iter().map(|r| r[0]).collect();
        let wt = ens_weights(&mu_t, &cfg.weights)?;
        let data = TrainSet { x: &xt, y: &yt, w: &wt };
        let search = random_search_cv(&data, &spec, cfg.target_mode, derive_seed(run_seed, &[0x5EA4]))?;
        let hp = Hyperparams {
            random_seed: derive_seed(run_seed, &[0xF17]),
            ..search.best.clone()
        };
        let m = WealthModel::fit(&xt, &yt, &wt, &hp, cfg.target_mode)?;
        let xv = x.select_rows(&split.test);
        let yv: Vec<[f64; 2]> = split.test.iter().map(|&i| y_all[i]).collect();
        let pv = eval::predict_pairs(&m, &xv)?;
        let metrics = eval::evaluate_with(&yv, &pv, cfg.normalizer)?;
        log::info!(
            "run {run}: eps_mu {:.4} eps_sigma {:.4} (n_test {})",
            metrics.eps_mu,
            metrics.eps_sigma,
            metrics.n_test
        );
        for (k, &i) in split.test.iter().enumerate() {
            preds.push(TestPrediction {
                run,
                cluster_id: stats[i].cluster_id.clone(),
                settlement: stats[i].settlement,
                year: stats[i].year,
                mu_true: yv[k][0],
                sigma_true: yv[k][1],
                mu_pred: pv[k][0],
                sigma_pred: pv[k][1],
            });
        }
        let best = &search.table[search.best_index];
        runs.push(RunRecord {
            run,
            seed: run_seed,
            n_train: split.train.len(),
            n_test: split.test.len(),
            best_index: search.best_index,
            hyperparams: hp,
            cv_fold_losses: best.fold_losses.clone(),
            cv_mean_loss: best.mean_loss.expect("best candidate succeeded"),
            test_metrics: metrics,
        });
        searches.push(search);
        model = Some(m);
    }
    let mean = eval::mean_metrics(&runs.iter().map(|r| r.test_metrics.clone()).collect::<Vec<_>>()).expect("at least one run");
    let mut years: Vec<i32> = stats.iter().map(|s| s.year).collect();
    years.sort_unstable();
    years.dedup();
    let card = ModelCard {
        card_version: CARD_VERSION,
        seed: cfg.seed,
        fingerprint: Fingerprint {
            bundle_sha256: bundle_sha256.to_string(),
            country_code: country_code.to_string(),
            years,
            recency: recency.mode,
            relocation: cfg.relocation,
            weights: cfg.weights,
            target_mode: cfg.target_mode,
            search: spec,
        },
        runs,
        mean_metrics: mean,
    };
    Ok(TrainOutput {
        card,
        model: model.expect("at least one run"),
        test_predictions: preds,
        searches,
    })
}

/// Cluster features at the (possibly relocated) cluster coordinates.
pub fn cluster_features(bundle: &DatasetBundle, relocation: RelocationMode, cfg: &FeatureConfig) -> Result<FeatureMatrix, PipelineError> {
    let plan = groundtruth::relocate(&bundle.clusters, &bundle.places, relocation);
    let points = plan.apply(&bundle.clusters, &bundle.places);
    let locs = features::cluster_locations(bundle, &points);
    Ok(features::assemble(&locs, bundle, cfg)?)
}

/// Ground truth, features and the repeated protocol on a bundle.
pub fn train_final(bundle: &DatasetBundle, cfg: &ExperimentConfig) -> Result<TrainOutput, PipelineError> {
    let (_, stats) = groundtruth::bundle_stats(bundle)?;
    let x = cluster_features(bundle, cfg.relocation, &cfg.features)?;
    let recency = RecencyConfig::for_bundle(cfg.recency, bundle)?;
    train_with_features(&stats, &x, &recency, cfg, &bundle.fingerprint(), &bundle.country_code)
}

/// Counts of each value, used by fold and split diagnostics.
pub fn bin_counts(bins: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &b in bins {
        *m.entry(b).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ens_closed_form() {
        assert_eq!(ens_raw_weight(1, 0.9), 1.0);
        assert!((ens_raw_weight(10, 0.9) - 0.153_533_993_278_763).abs() < 1e-12);
        assert_eq!(ens_raw_weight(7, 0.0), 1.0);
        let mu: Vec<f64> = (0..50).map(|i| if i < 40 { i as f64 * 0.1 } else { 90.0 + i as f64 * 0.1 }).collect();
        let w = ens_weights(&mu, &WeightConfig { scheme: WeightScheme::Ens, ..WeightConfig::default() }).unwrap();
        assert!((w.iter().sum::<f64>() / 50.0 - 1.0).abs() < 1e-12);
        assert!(w[45] > w[0]);
    }

    #[test]
    fn split_ten_per_bin() {
        let mu: Vec<f64> = (0..100).map(|i| (i / 10) as f64 * 10.0 + (i % 10) as f64 * 0.5).collect();
        let s = stratified_split(&mu, 0.2, 3).unwrap();
        assert_eq!(s.test.len(), 20);
        let bins = discretize_equal_width(&mu, 10).unwrap();
        let c = bin_counts(&s.test.iter().map(|&i| bins[i]).collect::<Vec<_>>());
        assert!(c.values().all(|&v| v == 2));
        assert_eq!(s, stratified_split(&mu, 0.2, 3).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_bin_stays_in_train() {
        let mut mu: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        mu.push(100.0);
        let s = stratified_split(&mu, 0.2, 1).unwrap();
        assert!(s.train.contains(&20));
        assert!(matches!(stratified_split(&mu[..5], 0.2, 1), Err(PipelineError::TooFewSamples { .. })));
    }

    #[test]
    fn folds_are_balanced() {
        let bins: Vec<usize> = (0..103).map(|i| (i * 7) % 10).collect();
        let f = stratified_folds(&bins, 4, 9);
        let sizes = bin_counts(&f);
        let (lo, hi) = (sizes.values().min().unwrap(), sizes.values().max().unwrap());
        assert!(hi - lo <= 1);
        for b in 0..10 {
            let in_bin: Vec<usize> = (0..103).filter(|&i| bins[i] == b).map(|i| f[i]).collect();
            let c = bin_counts(&in_bin);
            let share = in_bin.len() as f64 / 4.0;
            for k in 0..4 {
                let got = *c.get(&k).unwrap_or(&0) as f64;
                assert!((got - share).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn recency_parse_round_trip() {
        for m in [RecencyMode::OldOld, RecencyMode::NewNew, RecencyMode::TrainOldTestNew, RecencyMode::Combined] {
            assert_eq!(RecencyMode::parse(m.as_str()), Some(m));
        }
        assert_eq!(RecencyMode::parse("XX"), None);
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[2]), derive_seed(5, &[2]));
    }

    #[test]
    fn config_toml_round_trip() {
        let c = ExperimentConfig {
            recency: RecencyMode::TrainOldTestNew,
            relocation: RelocationMode::Ruc,
            seed: 11,
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let minimal = ExperimentConfig::from_toml("recency = \"ON\"\nrelocation = \"none\"\n").unwrap();
        assert_eq!(minimal.search_spec().unwrap(), SearchSpec::ci());
    }
}
