use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use povmap::eval::{self, CountryEval, EvalMetrics, IntersectionTable};
use povmap::features::{self, FeatureMatrix};
use povmap::gbrt::WealthModel;
use povmap::groundtruth::{self, IwiStats};
use povmap::ingest::{self, DatasetBundle, Settlement};
use povmap::mapgen::{self, ScatterPoint};
use povmap::pipeline::{self, ExperimentConfig, ModelCard, RecencyConfig, SearchResult, TestPrediction};
use povmap::synth::{self, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::config::{resolve_bundle, RunConfig};
use crate::output::RunDir;
use crate::{Command, SynthArgs, TrainArgs};

pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const CARD_FILE: &str = "model_card.json";
pub const MODEL_FILE: &str = "model.json";
pub const PREDICTIONS_FILE: &str = "test_predictions.csv";
pub const TEST_FEATURES_FILE: &str = "test_features.csv";
pub const TEST_FEATURES_SIDECAR: &str = "test_features.columns.json";
pub const TEST_TARGETS_FILE: &str = "test_targets.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Locations {
    Clusters,
    Places,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Validate { bundle, out } => validate(&bundle, out.as_deref()),
        Command::Iwi { bundle, out } => iwi(&bundle, &out),
        Command::Relocate { bundle, mode, out } => relocate(&bundle, mode, &out),
        Command::Features {
            bundle,
            locations,
            relocation,
            embeddings,
            out,
        } => extract(&bundle, locations, relocation, embeddings, &out),
        Command::Train(args) => train(args),
        Command::Evaluate { run, bundle, out } => evaluate(&run, &bundle, &out),
        Command::Infer { run, bundle, out } => infer(&run, &bundle, &out),
        Command::Transfer { runs, out } => transfer(&runs, &out),
        Command::Synth(args) => synthesize(args),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn load(bundle: &Path) -> Result<DatasetBundle> {
    let manifest = resolve_bundle(bundle)?;
    let b = ingest::load_bundle(&manifest).with_context(|| format!("loading bundle {}", manifest.display()))?;
    Ok(b)
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>().with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

fn validate(bundle: &Path, out: Option<&Path>) -> Result<()> {
    let b = load(bundle)?;
    let report = ingest::validate_bundle(&b).context("bundle failed validation")?;
    println!("country {}", report.country_code);
    for (year, n) in &report.clusters_per_year {
        println!("  {year}: {n} clusters");
    }
    println!(
        "  urban share {:.3} ({} urban, {} rural)",
        report.urban_share, report.urban_clusters, report.rural_clusters
    );
    for (layer, n) in &report.layer_counts {
        println!("  {layer}: {n}");
    }
    for w in &report.warnings {
        println!("  warning: {w}");
    }
    if let Some(out) = out {
        let mut dir = RunDir::create(out)?;
        dir.write("validation.json", json(&report)?)?;
        dir.finish("validate")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ClusterRow {
    cluster_id: String,
    year: i32,
    settlement: Settlement,
    n_households: usize,
    mu: f64,
    sigma: f64,
}

impl From<&IwiStats> for ClusterRow {
    fn from(s: &IwiStats) -> Self {
        Self {
            cluster_id: s.cluster_id.clone(),
            year: s.year,
            settlement: s.settlement,
            n_households: s.n_households,
            mu: s.mu,
            sigma: s.sigma,
        }
    }
}

fn iwi(bundle: &Path, out: &Path) -> Result<()> {
    let b = load(bundle)?;
    let (weights, stats) = groundtruth::bundle_stats(&b)?;
    let mut dir = RunDir::create(out)?;
    dir.write("iwi_weights.json", json(&weights)?)?;
    let rows: Vec<ClusterRow> = stats.iter().map(ClusterRow::from).collect();
    dir.write("cluster_iwi.csv", csv_string(&rows)?)?;
    let mu: Vec<f64> = stats.iter().map(|s| s.mu).collect();
    let sigma: Vec<f64> = stats.iter().map(|s| s.sigma).collect();
    println!(
        "{} clusters: mean mu {:.2} (sd {:.2}), mean sigma {:.2}",
        stats.len(),
        eval::mean(&mu),
        eval::pop_std(&mu),
        eval::mean(&sigma)
    );
    dir.finish("iwi")?;
    Ok(())
}

fn relocate(bundle: &Path, mode: groundtruth::RelocationMode, out: &Path) -> Result<()> {
    let b = load(bundle)?;
    let plan = groundtruth::relocate(&b.clusters, &b.places, mode);
    let mut dir = RunDir::create(out)?;
    dir.write("relocation.csv", plan.to_csv())?;
    println!(
        "{} of {} clusters relocated ({})",
        plan.relocated_count(),
        b.clusters.len(),
        mode.as_str()
    );
    dir.finish("relocate")?;
    Ok(())
}

fn extract(
    bundle: &Path,
    locations: Locations,
    relocation: groundtruth::RelocationMode,
    embeddings: bool,
    out: &Path,
) -> Result<()> {
    let b = load(bundle)?;
    let cfg = features::FeatureConfig {
        include_embeddings: embeddings,
        ..features::FeatureConfig::default()
    };
    let x = match locations {
        Locations::Clusters => pipeline::cluster_features(&b, relocation, &cfg)?,
        Locations::Places => {
            let year = b.current_year().context("bundle has no nightlight year for populated places")?;
            features::assemble(&features::place_locations(&b, year), &b, &cfg)?
        }
    };
    let mut dir = RunDir::create(out)?;
    x.write_csv(&dir.path("features.csv"))?;
    dir.record("features.csv");
    dir.record("features.columns.json");
    println!("{} rows x {} columns", x.n_rows(), x.n_cols());
    for (src, n) in x.source_counts() {
        println!("  {src:?}: {n}");
    }
    dir.finish("features")?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TargetRow {
    cluster_id: String,
    year: i32,
    mu: f64,
    sigma: f64,
}

#[derive(Serialize)]
struct CandidateRow {
    index: usize,
    n_trees: usize,
    max_depth: usize,
    learning_rate: f64,
    min_samples_leaf: usize,
    l2_leaf_reg: f64,
    subsample_rows: f64,
    subsample_cols: f64,
    random_seed: u64,
    mean_loss: Option<f64>,
    fold_losses: String,
    error: Option<String>,
}

fn search_rows(s: &SearchResult) -> Vec<CandidateRow> {
    s.table
        .iter()
        .map(|c| CandidateRow {
            index: c.index,
            n_trees: c.hyperparams.n_trees,
            max_depth: c.hyperparams.max_depth,
            learning_rate: c.hyperparams.learning_rate,
            min_samples_leaf: c.hyperparams.min_samples_leaf,
            l2_leaf_reg: c.hyperparams.l2_leaf_reg,
            subsample_rows: c.hyperparams.subsample_rows,
            subsample_cols: c.hyperparams.subsample_cols,
            random_seed: c.hyperparams.random_seed,
            mean_loss: c.mean_loss,
            fold_losses: c.fold_losses.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
            error: c.error.clone(),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ImportanceRow {
    rank: usize,
    column: String,
    gain: f64,
}

fn importance_rows(model: &WealthModel) -> Vec<ImportanceRow> {
    let imp = model.importance();
    imp.ranking()
        .into_iter()
        .enumerate()
        .map(|(r, i)| ImportanceRow {
            rank: r + 1,
            column: imp.columns[i].clone(),
            gain: imp.gain[i],
        })
        .collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        bundle: args.bundle,
        out: args.out,
        recency: args.recency,
        relocation: args.relocation,
        weights: args.weights,
        ens_beta: args.ens_beta,
        profile: args.profile,
        seed: args.seed,
        target_mode: args.target_mode,
        test_frac: args.test_frac,
        embeddings: args.embeddings,
        search: None,
    };
    let rc = file.merge(flags);
    let manifest = rc.bundle_manifest()?;
    let out = rc.out_dir()?;
    let cfg = rc.experiment()?;

    let bundle = ingest::load_bundle(&manifest).with_context(|| format!("loading bundle {}", manifest.display()))?;
    let (_, stats) = groundtruth::bundle_stats(&bundle)?;
    let x = pipeline::cluster_features(&bundle, cfg.relocation, &cfg.features)?;
    let recency = RecencyConfig::for_bundle(cfg.recency, &bundle)?;
    let result = pipeline::train_with_features(&stats, &x, &recency, &cfg, &bundle.fingerprint(), &bundle.country_code)?;

    let mut dir = RunDir::create(&out)?;
    dir.write(EXPERIMENT_FILE, cfg.to_toml())?;
    dir.write(CARD_FILE, result.card.to_json())?;
    dir.write(MODEL_FILE, serde_json::to_string(&result.model)?)?;
    dir.write(PREDICTIONS_FILE, csv_string(&result.test_predictions)?)?;
    for (r, s) in result.searches.iter().enumerate() {
        dir.write(&format!("search_run{r}.csv"), csv_string(&search_rows(s))?)?;
    }
    dir.write("importance.csv", csv_string(&importance_rows(&result.model))?)?;
    dir.write("metrics.csv", metrics_table(&[(bundle.country_code.clone(), &result.card)]))?;

    // Held-out rows of the final run, for later cross-country transfer.
    let last = result.card.runs.len() - 1;
    let rows: HashMap<(&str, i32), usize> = x
        .location_ids
        .iter()
        .zip(&x.years)
        .enumerate()
        .map(|(i, (id, y))| ((id.as_str(), *y), i))
        .collect();
    let test: Vec<&TestPrediction> = result.test_predictions.iter().filter(|t| t.run == last).collect();
    let idx: Vec<usize> = test.iter().map(|t| rows[&(t.cluster_id.as_str(), t.year)]).collect();
    x.select_rows(&idx).write_csv(&dir.path(TEST_FEATURES_FILE))?;
    dir.record(TEST_FEATURES_FILE);
    dir.record(TEST_FEATURES_SIDECAR);
    let targets: Vec<TargetRow> = test
        .iter()
        .map(|t| TargetRow {
            cluster_id: t.cluster_id.clone(),
            year: t.year,
            mu: t.mu_true,
            sigma: t.sigma_true,
        })
        .collect();
    dir.write(TEST_TARGETS_FILE, csv_string(&targets)?)?;

    let m = &result.card.mean_metrics;
    println!(
        "{} ({} / {} / {}): eps_mu {:.3}, eps_sigma {:.3} over {} run(s)",
        bundle.country_code,
        cfg.recency.as_str(),
        cfg.relocation.as_str(),
        match cfg.weights.scheme {
            pipeline::WeightScheme::None => "unweighted",
            pipeline::WeightScheme::Ens => "ens",
        },
        m.eps_mu,
        m.eps_sigma,
        result.card.runs.len()
    );
    let manifest = dir.finish("train")?;
    println!("artifacts listed in {}", manifest.display());
    Ok(())
}

struct TrainedRun {
    cfg: ExperimentConfig,
    model: WealthModel,
}

fn load_run(run: &Path) -> Result<TrainedRun> {
    let cfg_path = run.join(EXPERIMENT_FILE);
    let text = fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let model = WealthModel::load(&run.join(MODEL_FILE)).with_context(|| format!("loading model from {}", run.display()))?;
    Ok(TrainedRun { cfg, model })
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    cluster_id: String,
    year: i32,
    settlement: Settlement,
    mu_true: f64,
    sigma_true: f64,
    mu_pred: f64,
    sigma_pred: f64,
}

fn evaluate(run: &Path, bundle: &Path, out: &Path) -> Result<()> {
    let tr = load_run(run)?;
    let b = load(bundle)?;
    let (_, stats) = groundtruth::bundle_stats(&b)?;
    let x = pipeline::cluster_features(&b, tr.cfg.relocation, &tr.cfg.features)?;
    let pred = eval::predict_pairs(&tr.model, &x)?;
    let truth: Vec<[f64; 2]> = stats.iter().map(|s| [s.mu, s.sigma]).collect();
    let metrics = eval::evaluate_with(&truth, &pred, tr.cfg.normalizer)?;
    let settle: Vec<Settlement> = stats.iter().map(|s| s.settlement).collect();
    let mu_true: Vec<f64> = truth.iter().map(|t| t[0]).collect();
    let mu_pred: Vec<f64> = pred.iter().map(|p| p[0]).collect();
    let table = eval::intersection_table(&settle, &mu_true, &mu_pred)?;
    let var = eval::variability(&settle, &pred, Some(&truth));

    let mut dir = RunDir::create(out)?;
    dir.write("metrics.json", json(&metrics)?)?;
    dir.write("intersection.csv", table.to_csv())?;
    dir.write("variability.json", json(&var)?)?;
    let rows: Vec<PredictionRow> = stats
        .iter()
        .zip(&pred)
        .map(|(s, p)| PredictionRow {
            cluster_id: s.cluster_id.clone(),
            year: s.year,
            settlement: s.settlement,
            mu_true: s.mu,
            sigma_true: s.sigma,
            mu_pred: p[0],
            sigma_pred: p[1],
        })
        .collect();
    dir.write("predictions.csv", csv_string(&rows)?)?;
    println!(
        "{} clusters: eps_mu {:.3}, eps_sigma {:.3}, rmse_mu {:.2}",
        metrics.n_test, metrics.eps_mu, metrics.eps_sigma, metrics.rmse_mu
    );
    dir.finish("evaluate")?;
    Ok(())
}

fn infer(run: &Path, bundle: &Path, out: &Path) -> Result<()> {
    let tr = load_run(run)?;
    let b = load(bundle)?;
    let map = mapgen::infer_places(&tr.model, &b, &tr.cfg.features)?;
    let mut dir = RunDir::create(out)?;
    dir.write("map.geojson", map.to_geojson_string())?;
    dir.write("map.csv", map.to_csv())?;
    dir.write("scatter.svg", mapgen::render_scatter(&map.scatter_points()))?;
    println!("{} places mapped", map.entries.len());
    dir.finish("infer")?;
    Ok(())
}

fn split_named(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
        _ => bail!("--run expects NAME=DIR, got `{spec}`"),
    }
}

fn transfer(runs: &[String], out: &Path) -> Result<()> {
    if runs.len() < 2 {
        bail!("transfer needs at least two --run NAME=DIR entries");
    }
    struct Loaded {
        name: String,
        model: WealthModel,
        x: FeatureMatrix,
        y: Vec<[f64; 2]>,
    }
    let mut loaded = Vec::new();
    for spec in runs {
        let (name, dir) = split_named(spec)?;
        let tr = load_run(&dir)?;
        let x = FeatureMatrix::read_csv(&dir.join(TEST_FEATURES_FILE))?;
        let targets: Vec<TargetRow> = read_csv_rows(&dir.join(TEST_TARGETS_FILE))?;
        let y = targets.iter().map(|t| [t.mu, t.sigma]).collect();
        loaded.push(Loaded {
            name,
            model: tr.model,
            x,
            y,
        });
    }
    let countries: Vec<CountryEval<'_>> = loaded
        .iter()
        .map(|l| CountryEval {
            name: &l.name,
            model: &l.model,
            test_x: &l.x,
            test_y: &l.y,
        })
        .collect();
    let m = eval::transfer(&countries)?;
    let mut dir = RunDir::create(out)?;
    dir.write("transfer.csv", m.to_csv())?;
    dir.write("transfer.json", json(&m)?)?;
    for (i, src) in m.countries.iter().enumerate() {
        for (j, dst) in m.countries.iter().enumerate() {
            println!(
                "{src} -> {dst}: eps_mu {:.3}, eps_sigma {:.3}",
                m.entries[i][j].eps_mu, m.entries[i][j].eps_sigma
            );
        }
    }
    dir.finish("transfer")?;
    Ok(())
}

fn synthesize(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        country_code: a.country,
        n_clusters: a.n_clusters,
        n_places: a.n_places,
        urban_share: a.urban_share,
        include_embeddings: a.embeddings,
        seed: a.seed,
        ..SynthSpec::default()
    };
    spec.wealth.bayes_nrmse_mu = Some(a.bayes_nrmse);
    let (bundle, record) = synth::generate(&spec)?;
    let mut dir = RunDir::create(&a.out)?;
    let manifest = ingest::write_bundle(&bundle, dir.root())?;
    let m = ingest::Manifest::from_file(&manifest)?;
    dir.record("manifest.toml");
    for f in m.layers.values().chain(m.nightlights.values()) {
        dir.record(f);
    }
    dir.write("synth_record.json", record.to_json())?;
    let bayes = synth::bayes_nrmse(&record);
    println!(
        "{}: {} clusters, {} places; optimal eps_mu {:.3}, eps_sigma {:.3}",
        bundle.country_code,
        bundle.clusters.len(),
        bundle.places.len(),
        bayes.mu,
        bayes.sigma
    );
    dir.finish("synth")?;
    Ok(())
}

fn dir_label(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

/// One row per run label with recency, relocation and weighting, then one
/// row per repetition.
fn metrics_table(cards: &[(String, &ModelCard)]) -> String {
    let mut rows: Vec<(String, EvalMetrics)> = Vec::new();
    for (label, card) in cards {
        let f = &card.fingerprint;
        let scheme = match f.weights.scheme {
            pipeline::WeightScheme::None => "none",
            pipeline::WeightScheme::Ens => "ens",
        };
        let base = format!("{label}:{}:{}:{scheme}", f.recency.as_str(), f.relocation.as_str());
        rows.push((base.clone(), card.mean_metrics.clone()));
        if card.runs.len() > 1 {
            for r in &card.runs {
                rows.push((format!("{base}:run{}", r.run), r.test_metrics.clone()));
            }
        }
    }
    eval::metrics_csv(&rows)
}

/// Cell-wise RMS over runs: pooled squared error divided by pooled count.
fn pooled_table(tables: &[IntersectionTable]) -> IntersectionTable {
    let mut cells = [[None; 5]; 2];
    for (r, row) in cells.iter_mut().enumerate() {
        for (q, cell) in row.iter_mut().enumerate() {
            let (mut sse, mut n) = (0.0, 0usize);
            for t in tables {
                if let Some(c) = t.cells[r][q] {
                    sse += c.rmse * c.rmse * c.n as f64;
                    n += c.n;
                }
            }
            if n > 0 {
                *cell = Some(eval::Cell {
                    rmse: (sse / n as f64).sqrt(),
                    n,
                });
            }
        }
    }
    IntersectionTable { cells }
}

#[derive(Serialize)]
struct ReportSummary {
    runs: BTreeMap<String, RunSummary>,
}

#[derive(Serialize)]
struct RunSummary {
    country_code: String,
    mean_metrics: EvalMetrics,
    per_run_intersection_rmse: Vec<f64>,
    variability: eval::VariabilityReport,
    top_features: Vec<String>,
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut dir = RunDir::create(out)?;
    let mut cards = Vec::new();
    let mut summary = ReportSummary { runs: BTreeMap::new() };
    for run in runs {
        let label = dir_label(run);
        if summary.runs.contains_key(&label) {
            bail!("two runs share the directory name `{label}`");
        }
        let card_path = run.join(CARD_FILE);
        let card = ModelCard::from_json(
            &fs::read_to_string(&card_path).with_context(|| format!("reading {}", card_path.display()))?,
        )?;
        let preds: Vec<TestPrediction> = read_csv_rows(&run.join(PREDICTIONS_FILE))?;
        let model = WealthModel::load(&run.join(MODEL_FILE)).with_context(|| format!("loading model from {}", run.display()))?;

        let mut tables = Vec::new();
        for r in 0..card.runs.len() {
            let rows: Vec<&TestPrediction> = preds.iter().filter(|p| p.run == r).collect();
            let settle: Vec<Settlement> = rows.iter().map(|p| p.settlement).collect();
            let t: Vec<f64> = rows.iter().map(|p| p.mu_true).collect();
            let p: Vec<f64> = rows.iter().map(|p| p.mu_pred).collect();
            let table = eval::intersection_table(&settle, &t, &p)?;
            dir.write(&format!("intersection_{label}_run{r}.csv"), table.to_csv())?;
            tables.push(table);
        }
        let pooled = pooled_table(&tables);
        dir.write(&format!("intersection_{label}.csv"), pooled.to_csv())?;

        let settle: Vec<Settlement> = preds.iter().map(|p| p.settlement).collect();
        let pred: Vec<[f64; 2]> = preds.iter().map(|p| [p.mu_pred, p.sigma_pred]).collect();
        let truth: Vec<[f64; 2]> = preds.iter().map(|p| [p.mu_true, p.sigma_true]).collect();
        let var = eval::variability(&settle, &pred, Some(&truth));
        dir.write(&format!("variability_{label}.json"), json(&var)?)?;
        let points: Vec<ScatterPoint> = preds
            .iter()
            .map(|p| ScatterPoint {
                mu: p.mu_pred,
                sigma: p.sigma_pred,
                settlement: p.settlement,
            })
            .collect();
        dir.write(&format!("scatter_{label}.svg"), mapgen::render_scatter(&points))?;
        let imp = importance_rows(&model);
        dir.write(&format!("importance_{label}.csv"), csv_string(&imp)?)?;

        summary.runs.insert(
            label.clone(),
            RunSummary {
                country_code: card.fingerprint.country_code.clone(),
                mean_metrics: card.mean_metrics.clone(),
                per_run_intersection_rmse: tables.iter().map(|t| t.overall_rmse()).collect(),
                variability: var,
                top_features: imp.iter().take(10).map(|r| r.column.clone()).collect(),
            },
        );
        cards.push((label, card));
    }
    let refs: Vec<(String, &ModelCard)> = cards.iter().map(|(l, c)| (l.clone(), c)).collect();
    dir.write("metrics.csv", metrics_table(&refs))?;
    dir.write("summary.json", json(&summary)?)?;
    print!("{}", metrics_table(&refs));
    dir.finish("report")?;
    Ok(())
}
