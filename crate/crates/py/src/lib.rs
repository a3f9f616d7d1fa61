//! Python bindings for `povmap`. Structured results cross the boundary as
//! JSON documents decoded into plain dicts and lists.

use std::fmt::Display;
use std::path::PathBuf;

use povmap::eval;
use povmap::features::{self, FeatureConfig};
use povmap::gbrt::{Hyperparams, TargetMode};
use povmap::groundtruth::{self, RelocationMode};
use povmap::ingest::{self, DatasetBundle, Settlement};
use povmap::mapgen;
use povmap::pipeline::{self, ExperimentConfig, RecencyMode, SearchSpec, WeightScheme};
use povmap::synth::{self, SynthSpec};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err<E: Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_json<'py>(py: Python<'py>, doc: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (doc,))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    from_json(py, &serde_json::to_string(v).map_err(err)?)
}

fn relocation_mode(s: &str) -> PyResult<RelocationMode> {
    RelocationMode::parse(s).ok_or_else(|| err(format!("unknown relocation `{s}` (expected none, rc or ruc)")))
}

fn feature_config(embeddings: bool) -> FeatureConfig {
    FeatureConfig {
        include_embeddings: embeddings,
        ..FeatureConfig::default()
    }
}

fn pairs(v: &[(f64, f64)]) -> Vec<[f64; 2]> {
    v.iter().map(|&(a, b)| [a, b]).collect()
}

/// A loaded or generated country bundle.
#[pyclass(module = "povmap_py", frozen)]
pub struct Bundle {
    inner: DatasetBundle,
    synth_record: Option<String>,
}

#[pymethods]
impl Bundle {
    /// Reads a manifest file or a directory holding `manifest.toml`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let manifest = if path.is_dir() { path.join("manifest.toml") } else { path };
        let inner = ingest::load_bundle(&manifest).map_err(err)?;
        Ok(Self { inner, synth_record: None })
    }

    /// Synthetic country with a known wealth process.
    #[staticmethod]
    #[pyo3(signature = (seed=7, country="SYN", n_clusters=1000, n_places=300, urban_share=0.3, bayes_nrmse=0.4, embeddings=false))]
    fn synth(
        seed: u64,
        country: &str,
        n_clusters: usize,
        n_places: usize,
        urban_share: f64,
        bayes_nrmse: f64,
        embeddings: bool,
    ) -> PyResult<Self> {
        let mut spec = SynthSpec {
            country_code: country.to_string(),
            n_clusters,
            n_places,
            urban_share,
            include_embeddings: embeddings,
            seed,
            ..SynthSpec::default()
        };
        spec.wealth.bayes_nrmse_mu = Some(bayes_nrmse);
        let (inner, record) = synth::generate(&spec).map_err(err)?;
        Ok(Self {
            inner,
            synth_record: Some(record.to_json()),
        })
    }

    #[getter]
    fn country_code(&self) -> &str {
        &self.inner.country_code
    }

    #[getter]
    fn n_clusters(&self) -> usize {
        self.inner.clusters.len()
    }

    #[getter]
    fn n_places(&self) -> usize {
        self.inner.places.len()
    }

    #[getter]
    fn years(&self) -> Vec<i32> {
        self.inner.years().into_iter().collect()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Planted parameters and per-cluster truth; `None` for loaded bundles.
    fn synth_record<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.synth_record.as_deref().map(|s| from_json(py, s)).transpose()
    }

    /// Optimal NRMSE of (mu, sigma) for a synthetic bundle.
    fn bayes_nrmse(&self) -> PyResult<Option<(f64, f64)>> {
        let Some(s) = &self.synth_record else { return Ok(None) };
        let record = synth::SynthRecord::from_json(s).map_err(err)?;
        let b = synth::bayes_nrmse(&record);
        Ok(Some((b.mu, b.sigma)))
    }

    fn write(&self, dir: PathBuf) -> PyResult<PathBuf> {
        ingest::write_bundle(&self.inner, &dir).map_err(err)
    }

    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ingest::validate_bundle(&self.inner).map_err(err)?)
    }

    /// Per-cluster wealth mean and spread, in cluster-table order.
    fn iwi_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (_, stats) = groundtruth::bundle_stats(&self.inner).map_err(err)?;
        to_py(py, &stats)
    }

    /// Cluster id to `(place_id, distance_km)`, or `None` when kept in place.
    #[pyo3(signature = (mode="ruc"))]
    fn relocate(&self, mode: &str) -> PyResult<Vec<(String, Option<(String, f64)>)>> {
        let plan = groundtruth::relocate(&self.inner.clusters, &self.inner.places, relocation_mode(mode)?);
        Ok(plan
            .assignments
            .into_iter()
            .map(|(cid, a)| {
                let target = match a {
                    groundtruth::Assignment::Place { place_id, distance_km } => Some((place_id, distance_km)),
                    groundtruth::Assignment::KeepNoisy => None,
                };
                (cid, target)
            })
            .collect())
    }

    #[pyo3(signature = (relocation="none", embeddings=false))]
    fn cluster_features(&self, py: Python<'_>, relocation: &str, embeddings: bool) -> PyResult<FeatureMatrix> {
        let mode = relocation_mode(relocation)?;
        let cfg = feature_config(embeddings);
        let inner = py
            .detach(|| pipeline::cluster_features(&self.inner, mode, &cfg))
            .map_err(err)?;
        Ok(FeatureMatrix { inner })
    }

    #[pyo3(signature = (embeddings=false))]
    fn place_features(&self, py: Python<'_>, embeddings: bool) -> PyResult<FeatureMatrix> {
        let year = self
            .inner
            .current_year()
            .ok_or_else(|| err("bundle has no nightlight year for populated places"))?;
        let cfg = feature_config(embeddings);
        let inner = py
            .detach(|| features::assemble(&features::place_locations(&self.inner, year), &self.inner, &cfg))
            .map_err(err)?;
        Ok(FeatureMatrix { inner })
    }
}

/// Row-major feature values; NaN marks a missing entry.
#[pyclass(module = "povmap_py", frozen)]
pub struct FeatureMatrix {
    inner: features::FeatureMatrix,
}

#[pymethods]
impl FeatureMatrix {
    /// Plain numeric matrix without geodata provenance.
    #[new]
    #[pyo3(signature = (rows, columns=None))]
    fn new(rows: Vec<Vec<f64>>, columns: Option<Vec<String>>) -> PyResult<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(err("rows must all have the same length"));
        }
        let names = match columns {
            Some(c) if c.len() != width => return Err(err("column count does not match row width")),
            Some(c) => c,
            None => (0..width).map(|j| format!("x{j}")).collect(),
        };
        Ok(Self {
            inner: features::FeatureMatrix::from_rows(names, &rows),
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n_rows(), self.inner.n_cols())
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.column_names()
    }

    #[getter]
    fn location_ids(&self) -> Vec<String> {
        self.inner.location_ids.clone()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_rows() {
            return Err(pyo3::exceptions::PyIndexError::new_err("row out of range"));
        }
        Ok(self.inner.row(i).to_vec())
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_rows()).map(|i| self.inner.row(i).to_vec()).collect()
    }

    /// Column counts per feature source.
    fn source_counts(&self) -> Vec<(String, usize)> {
        self.inner
            .source_counts()
            .into_iter()
            .map(|(s, n)| (format!("{s:?}"), n))
            .collect()
    }

    fn select_rows(&self, rows: Vec<usize>) -> PyResult<Self> {
        if rows.iter().any(|&r| r >= self.inner.n_rows()) {
            return Err(pyo3::exceptions::PyIndexError::new_err("row out of range"));
        }
        Ok(Self {
            inner: self.inner.select_rows(&rows),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }
}

/// Boosted trees predicting cluster wealth mean and spread.
#[pyclass(module = "povmap_py", frozen)]
pub struct WealthModel {
    inner: povmap::gbrt::WealthModel,
}

#[pymethods]
impl WealthModel {
    #[staticmethod]
    #[pyo3(signature = (
        x, y, weights=None, n_trees=200, max_depth=6, learning_rate=0.1, min_samples_leaf=5,
        l2_leaf_reg=3.0, subsample_rows=1.0, subsample_cols=1.0, seed=0, mode="joint"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        x: &FeatureMatrix,
        y: Vec<(f64, f64)>,
        weights: Option<Vec<f64>>,
        n_trees: usize,
        max_depth: usize,
        learning_rate: f64,
        min_samples_leaf: usize,
        l2_leaf_reg: f64,
        subsample_rows: f64,
        subsample_cols: f64,
        seed: u64,
        mode: &str,
    ) -> PyResult<Self> {
        let mode = match mode {
            "joint" => TargetMode::Joint,
            "independent" => TargetMode::Independent,
            _ => return Err(err(format!("unknown target mode `{mode}` (expected joint or independent)"))),
        };
        let hp = Hyperparams {
            n_trees,
            max_depth,
            learning_rate,
            min_samples_leaf,
            l2_leaf_reg,
            subsample_rows,
            subsample_cols,
            random_seed: seed,
        };
        let y = pairs(&y);
        let w = weights.unwrap_or_else(|| vec![1.0; y.len()]);
        let inner = py
            .detach(|| povmap::gbrt::WealthModel::fit(&x.inner, &y, &w, &hp, mode))
            .map_err(err)?;
        Ok(Self { inner })
    }

    /// Clipped `(mu, sigma)` per row.
    fn predict(&self, x: &FeatureMatrix) -> PyResult<Vec<(f64, f64)>> {
        self.inner.predict(&x.inner).map_err(err)
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.columns().to_vec()
    }

    fn importance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.importance())
    }

    fn fingerprint(&self) -> String {
        mapgen::model_fingerprint(&self.inner)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[staticmethod]
    fn from_json(doc: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(doc).map_err(err)?;
        Ok(Self { inner })
    }

    /// Predicts every populated place; returns a GeoJSON FeatureCollection.
    #[pyo3(signature = (bundle, embeddings=false))]
    fn infer_places<'py>(&self, py: Python<'py>, bundle: &Bundle, embeddings: bool) -> PyResult<Bound<'py, PyAny>> {
        let cfg = feature_config(embeddings);
        let map = py
            .detach(|| mapgen::infer_places(&self.inner, &bundle.inner, &cfg))
            .map_err(err)?;
        from_json(py, &map.to_geojson_string())
    }
}

/// Search, held-out evaluation and refit. Returns the model card as a dict
/// and the final run's model.
#[pyfunction]
#[pyo3(signature = (
    bundle, recency="ON", relocation="none", weights="none", profile="ci", seed=0,
    n_candidates=None, n_folds=None, n_runs=None, test_frac=0.2, embeddings=false
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    bundle: &Bundle,
    recency: &str,
    relocation: &str,
    weights: &str,
    profile: &str,
    seed: u64,
    n_candidates: Option<usize>,
    n_folds: Option<usize>,
    n_runs: Option<usize>,
    test_frac: f64,
    embeddings: bool,
) -> PyResult<(Bound<'py, PyAny>, WealthModel)> {
    let mut cfg = ExperimentConfig {
        recency: RecencyMode::parse(recency).ok_or_else(|| err(format!("unknown recency `{recency}`")))?,
        relocation: relocation_mode(relocation)?,
        profile: profile.to_string(),
        seed,
        test_frac,
        features: feature_config(embeddings),
        ..ExperimentConfig::default()
    };
    cfg.weights.scheme = match weights {
        "none" => WeightScheme::None,
        "ens" => WeightScheme::Ens,
        _ => return Err(err(format!("unknown weight scheme `{weights}` (expected none or ens)"))),
    };
    if n_candidates.is_some() || n_folds.is_some() || n_runs.is_some() {
        let base: SearchSpec = cfg.search_spec().map_err(err)?;
        cfg.search = Some(SearchSpec {
            n_candidates: n_candidates.unwrap_or(base.n_candidates),
            n_folds: n_folds.unwrap_or(base.n_folds),
            n_runs: n_runs.unwrap_or(base.n_runs),
            space: base.space,
        });
    }
    let out = py.detach(|| pipeline::train_final(&bundle.inner, &cfg)).map_err(err)?;
    Ok((from_json(py, &out.card.to_json())?, WealthModel { inner: out.model }))
}

/// NRMSE with the population standard deviation of `y_true`.
#[pyfunction]
fn nrmse(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    eval::nrmse(&y_true, &y_pred).map_err(err)
}

/// NRMSE and RMSE of both targets.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, truth: Vec<(f64, f64)>, pred: Vec<(f64, f64)>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &eval::evaluate(&pairs(&truth), &pairs(&pred)).map_err(err)?)
}

/// RMSE of mu per settlement and true-mu quintile; `None` marks an empty cell.
#[pyfunction]
fn intersection_table<'py>(
    py: Python<'py>,
    settlements: Vec<String>,
    mu_true: Vec<f64>,
    mu_pred: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = settlements
        .iter()
        .map(|s| Settlement::parse(s).ok_or_else(|| err(format!("unknown settlement `{s}` (expected rural or urban)"))))
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &eval::intersection_table(&s, &mu_true, &mu_pred).map_err(err)?)
}

#[pyfunction]
fn gini(values: Vec<f64>) -> PyResult<f64> {
    groundtruth::gini(&values).map_err(err)
}

#[pymodule]
fn povmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Bundle>()?;
    m.add_class::<FeatureMatrix>()?;
    m.add_class::<WealthModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(intersection_table, m)?)?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    Ok(())
}
