//! Typed dataset bundle, its on-disk layout and validation.
//!
//! A bundle is a directory of UTF-8 CSV files (header row, `.` decimal
//! separator) described by a TOML manifest:
//!
//! ```toml
//! country_code = "SL"
//! demographics_columns = ["dau_smartphone", ...]   # exactly 37 names
//! poi_categories = ["atm", "bank", ...]            # exactly 24 names
//!
//! [[assets]]
//! name = "television"
//! levels = 2          # answers are integers in 0..levels
//!
//! [layers]
//! households = "households.csv"
//! clusters = "clusters.csv"
//! places = "places.csv"
//! population_tiles = "population_tiles.csv"       # optional layers below
//! movement_tiles = "movement_tiles.csv"
//! movement_edges = "movement_edges.csv"
//! demographics = "demographics.csv"
//! poi_points = "poi_points.csv"
//! road_segments = "road_segments.csv"
//! building_points = "building_points.csv"
//! cells = "cells.csv"
//! embeddings = "embeddings.csv"
//!
//! [nightlights]
//! 2016 = "nightlight_2016.csv"
//!
//! [iwi]              # optional fixed weight table, bypasses PCA
//! weights = [...]    # one per asset
//! constant = 0.0
//! ```
//!
//! Layer schemas (column order is free, names are not):
//!
//! | layer | columns |
//! |---|---|
//! | households | `household_id, cluster_id, <asset names...>` |
//! | clusters | `cluster_id, lat, lon, year, settlement` (`urban`/`rural`) |
//! | places | `place_id, lat, lon, kind` (`city`, `town`, `neighborhood`, `village`, `hamlet`, `isolated_dwelling`) |
//! | population_tiles | `lat, lon, population` |
//! | movement_tiles | `tile_id, lat, lon` |
//! | movement_edges | `tile_from, tile_to, count` |
//! | demographics | `location_id, <37 manifest columns>` |
//! | poi_points | `lat, lon, category` |
//! | road_segments | `lat1, lon1, lat2, lon2` |
//! | building_points | `lat, lon` |
//! | cells | `lat, lon, tower_id` |
//! | nightlight | `lat, lon, radiance, year` |
//! | embeddings | `location_id, e000 .. e783` |

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::GeoPoint;

pub const N_DEMOGRAPHIC_COLUMNS: usize = 37;
pub const N_POI_CATEGORIES: usize = 24;
pub const N_ASSETS: usize = 10;
pub const EMBEDDING_DIM: usize = 784;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub file: PathBuf,
    pub row: usize,
    pub reason: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file.display(), self.row, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("missing required layer `{0}`")]
    MissingRequiredLayer(&'static str),
    #[error("{} schema error(s), first: {}", .0.len(), .0[0])]
    Schema(Vec<SchemaError>),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Settlement {
    Rural,
    Urban,
}

impl Settlement {
    pub fn as_str(self) -> &'static str {
        match self {
            Settlement::Urban => "urban",
            Settlement::Rural => "rural",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "urban" => Some(Settlement::Urban),
            "rural" => Some(Settlement::Rural),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceKind {
    City,
    Town,
    Neighborhood,
    Village,
    Hamlet,
    IsolatedDwelling,
}

impl PlaceKind {
    pub const ALL: [PlaceKind; 6] = [
        PlaceKind::City,
        PlaceKind::Town,
        PlaceKind::Neighborhood,
        PlaceKind::Village,
        PlaceKind::Hamlet,
        PlaceKind::IsolatedDwelling,
    ];

    pub fn settlement(self) -> Settlement {
        match self {
            PlaceKind::City | PlaceKind::Town | PlaceKind::Neighborhood => Settlement::Urban,
            _ => Settlement::Rural,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PlaceKind::City => "city",
            PlaceKind::Town => "town",
            PlaceKind::Neighborhood => "neighborhood",
            PlaceKind::Village => "village",
            PlaceKind::Hamlet => "hamlet",
            PlaceKind::IsolatedDwelling => "isolated_dwelling",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSpec {
    pub name: String,
    pub levels: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Household {
    pub household_id: String,
    pub cluster_id: String,
    pub assets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub cluster_id: String,
    pub point: GeoPoint,
    pub year: i32,
    pub settlement: Settlement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Place {
    pub place_id: String,
    pub point: GeoPoint,
    pub kind: PlaceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTile {
    pub point: GeoPoint,
    pub population: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovementTile {
    pub tile_id: String,
    pub point: GeoPoint,
}

/// Pre-aggregated baseline movement count between two tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct MovementEdge {
    pub tile_from: String,
    pub tile_to: String,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiPoint {
    pub point: GeoPoint,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSegment {
    pub a: GeoPoint,
    pub b: GeoPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub point: GeoPoint,
    pub tower_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NightlightPixel {
    pub point: GeoPoint,
    pub radiance: f64,
}

/// Per-location numeric rows keyed by location id (demographics, embeddings).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyedTable {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

/// Fixed IWI weight table: `iwi = constant + Σ weights[j] * answer[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedIwiWeights {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetBundle {
    pub country_code: String,
    pub assets: Vec<AssetSpec>,
    pub poi_categories: Vec<String>,
    pub iwi_weights: Option<FixedIwiWeights>,
    pub households: Vec<Household>,
    pub clusters: Vec<Cluster>,
    pub places: Vec<Place>,
    pub population_tiles: Option<Vec<PopulationTile>>,
    pub movement_tiles: Option<Vec<MovementTile>>,
    pub movement_edges: Option<Vec<MovementEdge>>,
    pub demographics: Option<KeyedTable>,
    pub poi_points: Option<Vec<PoiPoint>>,
    pub road_segments: Option<Vec<RoadSegment>>,
    pub building_points: Option<Vec<GeoPoint>>,
    pub cells: Option<Vec<Cell>>,
    pub nightlights: Option<BTreeMap<i32, Vec<NightlightPixel>>>,
    pub embeddings: Option<KeyedTable>,
}

impl DatasetBundle {
    /// Survey years present in the cluster table.
    pub fn years(&self) -> BTreeSet<i32> {
        self.clusters.iter().map(|c| c.year).collect()
    }

    /// Latest year with nightlight pixels, used for populated places.
    pub fn current_year(&self) -> Option<i32> {
        self.nightlights
            .as_ref()
            .and_then(|n| n.keys().next_back().copied())
            .or_else(|| self.years().into_iter().next_back())
    }

    pub fn demographics_columns(&self) -> Vec<String> {
        match &self.demographics {
            Some(t) => t.columns.clone(),
            None => (0..N_DEMOGRAPHIC_COLUMNS)
                .map(|i| format!("demographic_{i:02}"))
                .collect(),
        }
    }

    /// Which of the seven feature sources carry data.
    pub fn source_presence(&self) -> BTreeMap<&'static str, bool> {
        let mut m = BTreeMap::new();
        m.insert("population", self.population_tiles.is_some());
        m.insert("mobility", self.movement_tiles.is_some());
        m.insert("demographics", self.demographics.is_some());
        m.insert(
            "infrastructure",
            self.poi_points.is_some() || self.road_segments.is_some() || self.building_points.is_some(),
        );
        m.insert("connectivity", self.cells.is_some());
        m.insert("nightlight", self.nightlights.is_some());
        m.insert("images", self.embeddings.is_some());
        m
    }

    /// SHA-256 over the canonical CSV rendering of every layer.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, content) in self.render_layers() {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(content.as_bytes());
            h.update([0u8]);
        }
        h.update(self.render_manifest(&BTreeMap::new()).as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Layers as `(file name, csv text)` pairs, in a fixed order.
    fn render_layers(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut hh = vec![{
            let mut h = vec!["household_id".to_string(), "cluster_id".to_string()];
            h.extend(self.assets.iter().map(|a| a.name.clone()));
            h
        }];
        for r in &self.households {
            let mut row = vec![r.household_id.clone(), r.cluster_id.clone()];
            row.extend(r.assets.iter().map(u32::to_string));
            hh.push(row);
        }
        out.push(("households.csv".into(), csv_text(hh)));

        let mut cl = vec![svec(&["cluster_id", "lat", "lon", "year", "settlement"])];
        for c in &self.clusters {
            cl.push(vec![
                c.cluster_id.clone(),
                c.point.lat.to_string(),
                c.point.lon.to_string(),
                c.year.to_string(),
                c.settlement.as_str().into(),
            ]);
        }
        out.push(("clusters.csv".into(), csv_text(cl)));

        let mut pl = vec![svec(&["place_id", "lat", "lon", "kind"])];
        for p in &self.places {
            pl.push(vec![
                p.place_id.clone(),
                p.point.lat.to_string(),
                p.point.lon.to_string(),
                p.kind.as_str().into(),
            ]);
        }
        out.push(("places.csv".into(), csv_text(pl)));

        if let Some(tiles) = &self.population_tiles {
            let mut t = vec![svec(&["lat", "lon", "population"])];
            t.extend(tiles.iter().map(|x| {
                vec![x.point.lat.to_string(), x.point.lon.to_string(), x.population.to_string()]
            }));
            out.push(("population_tiles.csv".into(), csv_text(t)));
        }
        if let Some(tiles) = &self.movement_tiles {
            let mut t = vec![svec(&["tile_id", "lat", "lon"])];
            t.extend(tiles.iter().map(|x| {
                vec![x.tile_id.clone(), x.point.lat.to_string(), x.point.lon.to_string()]
            }));
            out.push(("movement_tiles.csv".into(), csv_text(t)));
        }
        if let Some(edges) = &self.movement_edges {
            let mut t = vec![svec(&["tile_from", "tile_to", "count"])];
            t.extend(
                edges
                    .iter()
                    .map(|e| vec![e.tile_from.clone(), e.tile_to.clone(), e.count.to_string()]),
            );
            out.push(("movement_edges.csv".into(), csv_text(t)));
        }
        if let Some(d) = &self.demographics {
            out.push(("demographics.csv".into(), keyed_text(d)));
        }
        if let Some(pois) = &self.poi_points {
            let mut t = vec![svec(&["lat", "lon", "category"])];
            t.extend(pois.iter().map(|x| {
                vec![x.point.lat.to_string(), x.point.lon.to_string(), x.category.clone()]
            }));
            out.push(("poi_points.csv".into(), csv_text(t)));
        }
        if let Some(roads) = &self.road_segments {
            let mut t = vec![svec(&["lat1", "lon1", "lat2", "lon2"])];
            t.extend(roads.iter().map(|r| {
                vec![
                    r.a.lat.to_string(),
                    r.a.lon.to_string(),
                    r.b.lat.to_string(),
                    r.b.lon.to_string(),
                ]
            }));
            out.push(("road_segments.csv".into(), csv_text(t)));
        }
        if let Some(b) = &self.building_points {
            let mut t = vec![svec(&["lat", "lon"])];
            t.extend(b.iter().map(|p| vec![p.lat.to_string(), p.lon.to_string()]));
            out.push(("building_points.csv".into(), csv_text(t)));
        }
        if let Some(cells) = &self.cells {
            let mut t = vec![svec(&["lat", "lon", "tower_id"])];
            t.extend(cells.iter().map(|c| {
                vec![c.point.lat.to_string(), c.point.lon.to_string(), c.tower_id.clone()]
            }));
            out.push(("cells.csv".into(), csv_text(t)));
        }
        if let Some(n) = &self.nightlights {
            for (year, pixels) in n {
                let mut t = vec![svec(&["lat", "lon", "radiance", "year"])];
                t.extend(pixels.iter().map(|p| {
                    vec![
                        p.point.lat.to_string(),
                        p.point.lon.to_string(),
                        p.radiance.to_string(),
                        year.to_string(),
                    ]
                }));
                out.push((format!("nightlight_{year}.csv"), csv_text(t)));
            }
        }
        if let Some(e) = &self.embeddings {
            out.push(("embeddings.csv".into(), keyed_text(e)));
        }
        out
    }

    fn render_manifest(&self, layer_files: &BTreeMap<String, String>) -> String {
        let mut layers = toml::Table::new();
        let mut nightlights = toml::Table::new();
        for (file, _) in layer_files {
            let key = file.trim_end_matches(".csv");
            if let Some(year) = key.strip_prefix("nightlight_") {
                nightlights.insert(year.to_string(), toml::Value::String(file.clone()));
            } else {
                layers.insert(key.to_string(), toml::Value::String(file.clone()));
            }
        }
        let manifest = Manifest {
            country_code: self.country_code.clone(),
            demographics_columns: self.demographics.as_ref().map(|d| d.columns.clone()),
            poi_categories: self.poi_categories.clone(),
            assets: self.assets.clone(),
            layers: layers
                .into_iter()
                .map(|(k, v)| (k, v.as_str().unwrap_or_default().to_string()))
                .collect(),
            nightlights: nightlights
                .into_iter()
                .map(|(k, v)| (k, v.as_str().unwrap_or_default().to_string()))
                .collect(),
            iwi: self.iwi_weights.clone(),
        };
        toml::to_string(&manifest).expect("manifest serializes")
    }
}

fn svec(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn csv_text(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn keyed_text(t: &KeyedTable) -> String {
    let mut rows = vec![{
        let mut h = vec!["location_id".to_string()];
        h.extend(t.columns.iter().cloned());
        h
    }];
    for (id, vals) in &t.rows {
        let mut r = vec![id.clone()];
        r.extend(vals.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
        rows.push(r);
    }
    csv_text(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub country_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics_columns: Option<Vec<String>>,
    #[serde(default)]
    pub poi_categories: Vec<String>,
    pub assets: Vec<AssetSpec>,
    pub layers: BTreeMap<String, String>,
    #[serde(default)]
    pub nightlights: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iwi: Option<FixedIwiWeights>,
}

impl Manifest {
    pub fn from_file(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| IngestError::Manifest(e.to_string()))
    }
}

/// Writes every layer plus `manifest.toml` into `dir`.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf, IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let layers = bundle.render_layers();
    let mut files = BTreeMap::new();
    for (name, content) in layers {
        let path = dir.join(&name);
        fs::write(&path, content).map_err(io_err(&path))?;
        files.insert(name.clone(), name);
    }
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, bundle.render_manifest(&files)).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

struct CsvLayer {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl CsvLayer {
    fn open(path: PathBuf) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(|e| IngestError::Io {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
        let header = rdr
            .headers()
            .map_err(|e| IngestError::Manifest(format!("{}: {e}", path.display())))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| {
                IngestError::Schema(vec![SchemaError {
                    file: path.clone(),
                    row: i + 1,
                    reason: e.to_string(),
                }])
            })?;
            rows.push(rec);
        }
        Ok(Self { path, header, rows })
    }

    fn col(&self, name: &str, errs: &mut Vec<SchemaError>) -> Option<usize> {
        let pos = self.header.iter().position(|h| h == name);
        if pos.is_none() {
            errs.push(SchemaError {
                file: self.path.clone(),
                row: 0,
                reason: format!("missing column `{name}`"),
            });
        }
        pos
    }

    fn err(&self, row: usize, reason: impl Into<String>) -> SchemaError {
        SchemaError {
            file: self.path.clone(),
            row: row + 1,
            reason: reason.into(),
        }
    }

    fn f64_at(&self, row: usize, col: usize, errs: &mut Vec<SchemaError>) -> Option<f64> {
        let raw = self.rows[row].get(col).unwrap_or("").trim();
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Some(v),
            _ => {
                errs.push(self.err(row, format!("column `{}`: not a finite number: `{raw}`", self.header[col])));
                None
            }
        }
    }

    /// Empty cell is missing (NaN); anything else must be a finite number.
    fn opt_f64_at(&self, row: usize, col: usize, errs: &mut Vec<SchemaError>) -> Option<f64> {
        let raw = self.rows[row].get(col).unwrap_or("").trim();
        if raw.is_empty() {
            return Some(f64::NAN);
        }
        self.f64_at(row, col, errs)
    }

    fn str_at(&self, row: usize, col: usize) -> String {
        self.rows[row].get(col).unwrap_or("").trim().to_string()
    }

    fn point_at(&self, row: usize, lat: usize, lon: usize, errs: &mut Vec<SchemaError>) -> Option<GeoPoint> {
        let la = self.f64_at(row, lat, errs)?;
        let lo = self.f64_at(row, lon, errs)?;
        match GeoPoint::new(la, lo) {
            Ok(p) => Some(p),
            Err(e) => {
                errs.push(self.err(row, e.to_string()));
                None
            }
        }
    }
}

fn parse_points(layer: &CsvLayer, errs: &mut Vec<SchemaError>) -> Vec<(usize, GeoPoint)> {
    let (Some(lat), Some(lon)) = (layer.col("lat", errs), layer.col("lon", errs)) else {
        return Vec::new();
    };
    (0..layer.rows.len())
        .filter_map(|i| layer.point_at(i, lat, lon, errs).map(|p| (i, p)))
        .collect()
}

fn parse_keyed(layer: &CsvLayer, expected: Option<&[String]>, errs: &mut Vec<SchemaError>) -> KeyedTable {
    let Some(id_col) = layer.col("location_id", errs) else {
        return KeyedTable::default();
    };
    let columns: Vec<String> = match expected {
        Some(names) => names.to_vec(),
        None => layer.header.iter().filter(|h| *h != "location_id").cloned().collect(),
    };
    let positions: Vec<Option<usize>> = columns.iter().map(|c| layer.col(c, errs)).collect();
    let mut rows = BTreeMap::new();
    for i in 0..layer.rows.len() {
        let id = layer.str_at(i, id_col);
        let mut vals = Vec::with_capacity(columns.len());
        for p in positions.iter().flatten() {
            vals.push(layer.opt_f64_at(i, *p, errs).unwrap_or(f64::NAN));
        }
        if rows.insert(id.clone(), vals).is_some() {
            errs.push(layer.err(i, format!("duplicate location_id `{id}`")));
        }
    }
    KeyedTable { columns, rows }
}

/// Loads and validates the bundle described by `manifest_path`. Relative
/// layer paths resolve against the manifest's directory.
pub fn load_bundle(manifest_path: &Path) -> Result<DatasetBundle, IngestError> {
    let manifest = Manifest::from_file(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    load_bundle_with(root, &manifest)
}

pub fn load_bundle_with(root: &Path, manifest: &Manifest) -> Result<DatasetBundle, IngestError> {
    if manifest.assets.len() != N_ASSETS {
        return Err(IngestError::Manifest(format!(
            "expected {N_ASSETS} asset columns, got {}",
            manifest.assets.len()
        )));
    }
    if manifest.assets.iter().any(|a| a.levels < 2) {
        return Err(IngestError::Manifest("asset levels must be >= 2".into()));
    }
    if let Some(cols) = &manifest.demographics_columns {
        if cols.len() != N_DEMOGRAPHIC_COLUMNS {
            return Err(IngestError::Manifest(format!(
                "expected {N_DEMOGRAPHIC_COLUMNS} demographics columns, got {}",
                cols.len()
            )));
        }
    }
    if manifest.layers.contains_key("poi_points") && manifest.poi_categories.len() != N_POI_CATEGORIES {
        return Err(IngestError::Manifest(format!(
            "expected {N_POI_CATEGORIES} POI categories, got {}",
            manifest.poi_categories.len()
        )));
    }
    if let Some(w) = &manifest.iwi {
        if w.weights.len() != N_ASSETS {
            return Err(IngestError::Manifest("iwi.weights must list one weight per asset".into()));
        }
    }

    let open = |key: &'static str| -> Result<Option<CsvLayer>, IngestError> {
        match manifest.layers.get(key) {
            Some(rel) => CsvLayer::open(root.join(rel)).map(Some),
            None => Ok(None),
        }
    };
    let require = |key: &'static str| -> Result<CsvLayer, IngestError> {
        open(key)?.ok_or(IngestError::MissingRequiredLayer(key))
    };

    let mut errs = Vec::new();
    let mut bundle = DatasetBundle {
        country_code: manifest.country_code.clone(),
        assets: manifest.assets.clone(),
        poi_categories: manifest.poi_categories.clone(),
        iwi_weights: manifest.iwi.clone(),
        ..Default::default()
    };

    // households
    let hh = require("households")?;
    let (hid, cid) = (hh.col("household_id", &mut errs), hh.col("cluster_id", &mut errs));
    let asset_cols: Vec<Option<usize>> = manifest.assets.iter().map(|a| hh.col(&a.name, &mut errs)).collect();
    if let (Some(hid), Some(cid)) = (hid, cid) {
        for i in 0..hh.rows.len() {
            let mut assets = Vec::with_capacity(N_ASSETS);
            let mut ok = true;
            for (spec, col) in manifest.assets.iter().zip(&asset_cols) {
                let Some(col) = col else {
                    ok = false;
                    continue;
                };
                let raw = hh.str_at(i, *col);
                match raw.parse::<u32>() {
                    Ok(v) if v < spec.levels => assets.push(v),
                    _ => {
                        ok = false;
                        errs.push(hh.err(
                            i,
                            format!("asset `{}` answer `{raw}` outside 0..{}", spec.name, spec.levels),
                        ));
                    }
                }
            }
            if ok {
                bundle.households.push(Household {
                    household_id: hh.str_at(i, hid),
                    cluster_id: hh.str_at(i, cid),
                    assets,
                });
            }
        }
    }

    // clusters
    let cl = require("clusters")?;
    let cols = ["cluster_id", "lat", "lon", "year", "settlement"].map(|c| cl.col(c, &mut errs));
    if let [Some(id), Some(lat), Some(lon), Some(year), Some(set)] = cols {
        for i in 0..cl.rows.len() {
            let point = cl.point_at(i, lat, lon, &mut errs);
            let y = cl.str_at(i, year).parse::<i32>();
            if y.is_err() {
                errs.push(cl.err(i, "year is not an integer"));
            }
            let s = Settlement::parse(&cl.str_at(i, set));
            if s.is_none() {
                errs.push(cl.err(i, format!("settlement `{}` not urban/rural", cl.str_at(i, set))));
            }
            if let (Some(point), Ok(year), Some(settlement)) = (point, y, s) {
                bundle.clusters.push(Cluster {
                    cluster_id: cl.str_at(i, id),
                    point,
                    year,
                    settlement,
                });
            }
        }
    }

    // places
    let pl = require("places")?;
    let cols = ["place_id", "lat", "lon", "kind"].map(|c| pl.col(c, &mut errs));
    if let [Some(id), Some(lat), Some(lon), Some(kind)] = cols {
        for i in 0..pl.rows.len() {
            let point = pl.point_at(i, lat, lon, &mut errs);
            let k = PlaceKind::parse(&pl.str_at(i, kind));
            if k.is_none() {
                errs.push(pl.err(i, format!("unknown place kind `{}`", pl.str_at(i, kind))));
            }
            if let (Some(point), Some(kind)) = (point, k) {
                bundle.places.push(Place {
                    place_id: pl.str_at(i, id),
                    point,
                    kind,
                });
            }
        }
    }

    if let Some(layer) = open("population_tiles")? {
        let pts = parse_points(&layer, &mut errs);
        let pop = layer.col("population", &mut errs);
        let mut tiles = Vec::new();
        if let Some(pc) = pop {
            for (i, point) in pts {
                if let Some(population) = layer.f64_at(i, pc, &mut errs) {
                    if population < 0.0 {
                        errs.push(layer.err(i, "negative population"));
                    }
                    tiles.push(PopulationTile { point, population });
                }
            }
        }
        bundle.population_tiles = Some(tiles);
    }

    if let Some(layer) = open("movement_tiles")? {
        let pts = parse_points(&layer, &mut errs);
        let mut tiles = Vec::new();
        if let Some(id) = layer.col("tile_id", &mut errs) {
            for (i, point) in pts {
                tiles.push(MovementTile {
                    tile_id: layer.str_at(i, id),
                    point,
                });
            }
        }
        bundle.movement_tiles = Some(tiles);
    }

    if let Some(layer) = open("movement_edges")? {
        let cols = ["tile_from", "tile_to", "count"].map(|c| layer.col(c, &mut errs));
        let mut edges = Vec::new();
        if let [Some(f), Some(t), Some(c)] = cols {
            for i in 0..layer.rows.len() {
                if let Some(count) = layer.f64_at(i, c, &mut errs) {
                    if count <= 0.0 {
                        errs.push(layer.err(i, "movement count must be positive"));
                        continue;
                    }
                    edges.push(MovementEdge {
                        tile_from: layer.str_at(i, f),
                        tile_to: layer.str_at(i, t),
                        count,
                    });
                }
            }
        }
        bundle.movement_edges = Some(edges);
    }

    if let Some(layer) = open("demographics")? {
        bundle.demographics = Some(parse_keyed(&layer, manifest.demographics_columns.as_deref(), &mut errs));
        if let Some(d) = &bundle.demographics {
            if d.columns.len() != N_DEMOGRAPHIC_COLUMNS {
                errs.push(layer.err(
                    0,
                    format!("expected {N_DEMOGRAPHIC_COLUMNS} demographics columns, got {}", d.columns.len()),
                ));
            }
        }
    }

    if let Some(layer) = open("poi_points")? {
        let pts = parse_points(&layer, &mut errs);
        let cats: HashSet<&str> = manifest.poi_categories.iter().map(String::as_str).collect();
        let mut pois = Vec::new();
        if let Some(cc) = layer.col("category", &mut errs) {
            for (i, point) in pts {
                let category = layer.str_at(i, cc);
                if !cats.contains(category.as_str()) {
                    errs.push(layer.err(i, format!("POI category `{category}` not in manifest")));
                    continue;
                }
                pois.push(PoiPoint { point, category });
            }
        }
        bundle.poi_points = Some(pois);
    }

    if let Some(layer) = open("road_segments")? {
        let cols = ["lat1", "lon1", "lat2", "lon2"].map(|c| layer.col(c, &mut errs));
        let mut roads = Vec::new();
        if let [Some(a1), Some(o1), Some(a2), Some(o2)] = cols {
            for i in 0..layer.rows.len() {
                let a = layer.point_at(i, a1, o1, &mut errs);
                let b = layer.point_at(i, a2, o2, &mut errs);
                if let (Some(a), Some(b)) = (a, b) {
                    roads.push(RoadSegment { a, b });
                }
            }
        }
        bundle.road_segments = Some(roads);
    }

    if let Some(layer) = open("building_points")? {
        bundle.building_points = Some(parse_points(&layer, &mut errs).into_iter().map(|(_, p)| p).collect());
    }

    if let Some(layer) = open("cells")? {
        let pts = parse_points(&layer, &mut errs);
        let mut cells = Vec::new();
        if let Some(t) = layer.col("tower_id", &mut errs) {
            for (i, point) in pts {
                cells.push(Cell {
                    point,
                    tower_id: layer.str_at(i, t),
                });
            }
        }
        bundle.cells = Some(cells);
    }

    if !manifest.nightlights.is_empty() {
        let mut by_year = BTreeMap::new();
        for (year_key, rel) in &manifest.nightlights {
            let year: i32 = year_key
                .parse()
                .map_err(|_| IngestError::Manifest(format!("nightlight key `{year_key}` is not a year")))?;
            let layer = CsvLayer::open(root.join(rel))?;
            let pts = parse_points(&layer, &mut errs);
            let rad = layer.col("radiance", &mut errs);
            let ycol = layer.col("year", &mut errs);
            let mut pixels = Vec::new();
            if let (Some(rc), Some(yc)) = (rad, ycol) {
                for (i, point) in pts {
                    if layer.str_at(i, yc).parse::<i32>() != Ok(year) {
                        errs.push(layer.err(i, format!("pixel year does not match partition {year}")));
                        continue;
                    }
                    if let Some(radiance) = layer.f64_at(i, rc, &mut errs) {
                        pixels.push(NightlightPixel { point, radiance });
                    }
                }
            }
            by_year.insert(year, pixels);
        }
        bundle.nightlights = Some(by_year);
    }

    if let Some(layer) = open("embeddings")? {
        let t = parse_keyed(&layer, None, &mut errs);
        if t.columns.len() != EMBEDDING_DIM {
            errs.push(layer.err(
                0,
                format!("expected {EMBEDDING_DIM} embedding columns, got {}", t.columns.len()),
            ));
        }
        bundle.embeddings = Some(t);
    }

    if !errs.is_empty() {
        return Err(IngestError::Schema(errs));
    }
    validate_bundle(&bundle)?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationReport {
    pub country_code: String,
    pub layer_counts: BTreeMap<String, usize>,
    pub clusters_per_year: BTreeMap<i32, usize>,
    pub urban_clusters: usize,
    pub rural_clusters: usize,
    pub urban_share: f64,
    pub urban_places: usize,
    pub rural_places: usize,
    pub sources_present: BTreeMap<String, bool>,
    pub warnings: Vec<String>,
}

/// Checks referential integrity and summarizes the bundle. Never mutates it.
pub fn validate_bundle(b: &DatasetBundle) -> Result<ValidationReport, IngestError> {
    let mut warnings = Vec::new();
    if b.clusters.is_empty() {
        return Err(IngestError::DanglingReference("bundle has no clusters (years empty)".into()));
    }
    let mut cluster_ids = HashSet::new();
    for c in &b.clusters {
        if !cluster_ids.insert(c.cluster_id.as_str()) {
            return Err(IngestError::DanglingReference(format!("duplicate cluster_id `{}`", c.cluster_id)));
        }
    }
    let mut place_ids = HashSet::new();
    for p in &b.places {
        if !place_ids.insert(p.place_id.as_str()) {
            return Err(IngestError::DanglingReference(format!("duplicate place_id `{}`", p.place_id)));
        }
    }
    let mut hh_ids = HashSet::new();
    let mut with_households = HashSet::new();
    for h in &b.households {
        if !hh_ids.insert(h.household_id.as_str()) {
            return Err(IngestError::DanglingReference(format!("duplicate household_id `{}`", h.household_id)));
        }
        if !cluster_ids.contains(h.cluster_id.as_str()) {
            return Err(IngestError::DanglingReference(format!(
                "household `{}` references unknown cluster `{}`",
                h.household_id, h.cluster_id
            )));
        }
        with_households.insert(h.cluster_id.as_str());
    }
    for c in &b.clusters {
        if !with_households.contains(c.cluster_id.as_str()) {
            return Err(IngestError::DanglingReference(format!(
                "cluster `{}` has no households",
                c.cluster_id
            )));
        }
    }
    for keyed in [&b.demographics, &b.embeddings].into_iter().flatten() {
        for id in keyed.rows.keys() {
            if !cluster_ids.contains(id.as_str()) && !place_ids.contains(id.as_str()) {
                return Err(IngestError::DanglingReference(format!("location `{id}` is neither a cluster nor a place")));
            }
        }
    }
    if let Some(edges) = &b.movement_edges {
        let tiles: HashSet<&str> = b
            .movement_tiles
            .iter()
            .flatten()
            .map(|t| t.tile_id.as_str())
            .collect();
        for e in edges {
            for t in [&e.tile_from, &e.tile_to] {
                if !tiles.contains(t.as_str()) {
                    return Err(IngestError::DanglingReference(format!("movement edge references unknown tile `{t}`")));
                }
            }
        }
        if edges.is_empty() {
            warnings.push("mobility features will be distance-only/missing: movement table is empty".into());
        }
    } else if b.movement_tiles.is_some() {
        warnings.push("mobility features will be distance-only/missing: no movement table".into());
    }
    if let Some(n) = &b.nightlights {
        for y in b.years() {
            if !n.contains_key(&y) {
                warnings.push(format!("no nightlight pixels for survey year {y}"));
            }
        }
    }

    let mut layer_counts = BTreeMap::new();
    layer_counts.insert("households".into(), b.households.len());
    layer_counts.insert("clusters".into(), b.clusters.len());
    layer_counts.insert("places".into(), b.places.len());
    let opt = |name: &str, n: Option<usize>, m: &mut BTreeMap<String, usize>| {
        if let Some(n) = n {
            m.insert(name.to_string(), n);
        }
    };
    opt("population_tiles", b.population_tiles.as_ref().map(Vec::len), &mut layer_counts);
    opt("movement_tiles", b.movement_tiles.as_ref().map(Vec::len), &mut layer_counts);
    opt("movement_edges", b.movement_edges.as_ref().map(Vec::len), &mut layer_counts);
    opt("demographics", b.demographics.as_ref().map(|d| d.rows.len()), &mut layer_counts);
    opt("poi_points", b.poi_points.as_ref().map(Vec::len), &mut layer_counts);
    opt("road_segments", b.road_segments.as_ref().map(Vec::len), &mut layer_counts);
    opt("building_points", b.building_points.as_ref().map(Vec::len), &mut layer_counts);
    opt("cells", b.cells.as_ref().map(Vec::len), &mut layer_counts);
    opt(
        "nightlight_pixels",
        b.nightlights.as_ref().map(|n| n.values().map(Vec::len).sum()),
        &mut layer_counts,
    );
    opt("embeddings", b.embeddings.as_ref().map(|d| d.rows.len()), &mut layer_counts);

    let mut clusters_per_year = BTreeMap::new();
    for c in &b.clusters {
        *clusters_per_year.entry(c.year).or_insert(0) += 1;
    }
    let urban_clusters = b.clusters.iter().filter(|c| c.settlement == Settlement::Urban).count();
    let urban_places = b.places.iter().filter(|p| p.kind.settlement() == Settlement::Urban).count();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ValidationReport {
        country_code: b.country_code.clone(),
        layer_counts,
        clusters_per_year,
        urban_clusters,
        rural_clusters: b.clusters.len() - urban_clusters,
        urban_share: urban_clusters as f64 / b.clusters.len() as f64,
        urban_places,
        rural_places: b.places.len() - urban_places,
        sources_present: b
            .source_presence()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_bundle() -> DatasetBundle {
        let assets = (0..N_ASSETS)
            .map(|i| AssetSpec {
                name: format!("asset_{i}"),
                levels: if i < 5 { 2 } else { 3 },
            })
            .collect();
        let p = |a, b| GeoPoint::new(a, b).unwrap();
        DatasetBundle {
            country_code: "XX".into(),
            assets,
            households: vec![
                Household {
                    household_id: "h1".into(),
                    cluster_id: "c1".into(),
                    assets: vec![0, 1, 0, 1, 0, 1, 2, 0, 1, 2],
                },
                Household {
                    household_id: "h2".into(),
                    cluster_id: "c2".into(),
                    assets: vec![1; 10],
                },
            ],
            clusters: vec![
                Cluster {
                    cluster_id: "c1".into(),
                    point: p(8.0, -12.0),
                    year: 2016,
                    settlement: Settlement::Urban,
                },
                Cluster {
                    cluster_id: "c2".into(),
                    point: p(8.1, -12.1),
                    year: 2019,
                    settlement: Settlement::Rural,
                },
            ],
            places: vec![Place {
                place_id: "p1".into(),
                point: p(8.0, -12.01),
                kind: PlaceKind::Town,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.cells = Some(vec![Cell {
            point: GeoPoint::new(8.0, -12.0).unwrap(),
            tower_id: "t1".into(),
        }]);
        let manifest = write_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(&manifest).unwrap();
        assert_eq!(back, b);
        assert!(back.embeddings.is_none());
        assert_eq!(back.fingerprint(), b.fingerprint());
    }

    #[test]
    fn out_of_domain_asset_is_reported_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        let manifest = write_bundle(&b, dir.path()).unwrap();
        let hh = dir.path().join("households.csv");
        let text = fs::read_to_string(&hh).unwrap().replace("h2,c2,1,1,1,1,1,1", "h2,c2,7,1,1,1,1,1");
        fs::write(&hh, text).unwrap();
        match load_bundle(&manifest) {
            Err(IngestError::Schema(errs)) => {
                assert_eq!(errs.len(), 1);
                assert_eq!(errs[0].row, 2);
                assert!(errs[0].reason.contains("asset_0"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_layer() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_bundle(&tiny_bundle(), dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap().replace("places = \"places.csv\"\n", "");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(load_bundle(&manifest), Err(IngestError::MissingRequiredLayer("places"))));
    }

    #[test]
    fn dangling_household_reference() {
        let mut b = tiny_bundle();
        b.households[1].cluster_id = "nope".into();
        assert!(matches!(validate_bundle(&b), Err(IngestError::DanglingReference(_))));
    }

    #[test]
    fn empty_movements_warn() {
        let mut b = tiny_bundle();
        b.movement_tiles = Some(vec![]);
        b.movement_edges = Some(vec![]);
        let r = validate_bundle(&b).unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("mobility features will be distance-only/missing")));
        assert_eq!(r.clusters_per_year[&2016], 1);
        assert_eq!(r.urban_clusters, 1);
    }
}
