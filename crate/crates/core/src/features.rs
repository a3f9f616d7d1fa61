//! Per-location metadata features from the seven geodata sources.
//!
//! Column layout is fixed: 9 population, 27 mobility, 37 demographics,
//! 54 infrastructure, 9 connectivity, 36 nightlight and 1 settlement flag
//! (173 metadata columns), optionally followed by the image embedding.
//! Missing values are NaN and never silently zero.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_km, BBox, GeoPoint, SpatialIndex, KM_PER_DEG};
use crate::ingest::{
    DatasetBundle, KeyedTable, MovementEdge, MovementTile, Settlement, N_DEMOGRAPHIC_COLUMNS, N_POI_CATEGORIES,
};

pub const N_METADATA: usize = 173;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("movement edge references unknown tile `{0}`")]
    UnknownTile(String),
    #[error("expected {expected} demographic columns, got {got}")]
    ColumnCountMismatch { expected: usize, got: usize },
    #[error("feature matrix io: {0}")]
    Io(String),
    #[error("malformed feature matrix: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Population,
    Mobility,
    Demographics,
    Infrastructure,
    Connectivity,
    Nightlight,
    Settlement,
    Embedding,
}

impl FeatureSource {
    pub const METADATA: [FeatureSource; 7] = [
        FeatureSource::Population,
        FeatureSource::Mobility,
        FeatureSource::Demographics,
        FeatureSource::Infrastructure,
        FeatureSource::Connectivity,
        FeatureSource::Nightlight,
        FeatureSource::Settlement,
    ];

    pub fn expected_width(self) -> usize {
        match self {
            FeatureSource::Population => 9,
            FeatureSource::Mobility => 27,
            FeatureSource::Demographics => 37,
            FeatureSource::Infrastructure => 54,
            FeatureSource::Connectivity => 9,
            FeatureSource::Nightlight => 36,
            FeatureSource::Settlement => 1,
            FeatureSource::Embedding => crate::ingest::EMBEDDING_DIM,
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub radii_km: Vec<f64>,
    pub beta_pop: Vec<f64>,
    /// Exponents for the gravitational mobility variants; the raw metric is
    /// always emitted first.
    pub beta_mob: Vec<f64>,
    pub bbox_width_km: f64,
    pub nightlight_threshold: f64,
    pub pagerank_damping: f64,
    pub pagerank_tol: f64,
    pub include_embeddings: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            radii_km: vec![1.6, 2.0, 5.0, 10.0],
            beta_pop: vec![1.0, 1.5, 2.0],
            beta_mob: vec![1.0, 1.5, 2.0],
            bbox_width_km: 1.6,
            nightlight_threshold: 10.0,
            pagerank_damping: 0.85,
            pagerank_tol: 1e-10,
            include_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub source: FeatureSource,
}

/// Row-major matrix of feature values; NaN marks a missing entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub location_ids: Vec<String>,
    pub years: Vec<i32>,
    pub columns: Vec<ColumnSpec>,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    /// Plain numeric matrix with generic column names, for modelling code
    /// that has no geodata behind it.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let columns: Vec<ColumnSpec> = names
            .into_iter()
            .map(|name| ColumnSpec {
                name,
                source: FeatureSource::Population,
            })
            .collect();
        let mut values = Vec::with_capacity(rows.len() * columns.len());
        for r in rows {
            assert_eq!(r.len(), columns.len(), "ragged rows");
            values.extend_from_slice(r);
        }
        Self {
            location_ids: (0..rows.len()).map(|i| format!("row{i}")).collect(),
            years: vec![0; rows.len()],
            columns,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.location_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[row * p..(row + 1) * p]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_nan()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn source_counts(&self) -> BTreeMap<FeatureSource, usize> {
        let mut m = BTreeMap::new();
        for c in &self.columns {
            *m.entry(c.source).or_insert(0) += 1;
        }
        m
    }

    pub fn metadata_width(&self) -> usize {
        self.columns.iter().filter(|c| c.source != FeatureSource::Embedding).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            location_ids: rows.iter().map(|&r| self.location_ids[r].clone()).collect(),
            years: rows.iter().map(|&r| self.years[r]).collect(),
            columns: self.columns.clone(),
            values,
        }
    }

    /// Keeps only columns from the given sources.
    pub fn select_sources(&self, keep: &BTreeSet<FeatureSource>) -> FeatureMatrix {
        let cols: Vec<usize> = (0..self.n_cols()).filter(|&j| keep.contains(&self.columns[j].source)).collect();
        let mut values = Vec::with_capacity(self.n_rows() * cols.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            values.extend(cols.iter().map(|&j| row[j]));
        }
        FeatureMatrix {
            location_ids: self.location_ids.clone(),
            years: self.years.clone(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            values,
        }
    }

    /// Writes `<stem>.csv` (empty cell = missing) and `<stem>.columns.json`.
    pub fn write_csv(&self, csv_path: &Path) -> Result<(), FeatureError> {
        let io = |e: &dyn fmt::Display| FeatureError::Io(e.to_string());
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| io(&e))?;
        let mut header = vec!["location_id".to_string(), "year".to_string()];
        header.extend(self.column_names());
        w.write_record(&header).map_err(|e| io(&e))?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.location_ids[i].clone(), self.years[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            w.write_record(&rec).map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))?;
        let sidecar = ColumnManifest {
            missing: "empty cell".into(),
            nightlight_standardized_per_year: true,
            columns: self.columns.clone(),
        };
        std::fs::write(
            sidecar_path(csv_path),
            serde_json::to_string_pretty(&sidecar).expect("serializable"),
        )
        .map_err(|e| io(&e))
    }

    pub fn read_csv(csv_path: &Path) -> Result<FeatureMatrix, FeatureError> {
        let io = |e: &dyn fmt::Display| FeatureError::Io(e.to_string());
        let sidecar: ColumnManifest = serde_json::from_str(
            &std::fs::read_to_string(sidecar_path(csv_path)).map_err(|e| io(&e))?,
        )
        .map_err(|e| FeatureError::Malformed(e.to_string()))?;
        let mut r = csv::Reader::from_path(csv_path).map_err(|e| io(&e))?;
        let header: Vec<String> = r.headers().map_err(|e| io(&e))?.iter().map(String::from).collect();
        let names: Vec<String> = sidecar.columns.iter().map(|c| c.name.clone()).collect();
        if header.len() != names.len() + 2 || header[2..] != names[..] {
            return Err(FeatureError::Malformed("csv header does not match column manifest".into()));
        }
        let mut m = FeatureMatrix {
            location_ids: Vec::new(),
            years: Vec::new(),
            columns: sidecar.columns,
            values: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| io(&e))?;
            m.location_ids.push(rec[0].to_string());
            m.years.push(rec[1].parse().map_err(|_| FeatureError::Malformed("bad year".into()))?);
            for cell in rec.iter().skip(2) {
                m.values.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse().map_err(|_| FeatureError::Malformed(format!("bad number `{cell}`")))?
                });
            }
        }
        Ok(m)
    }
}

fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("columns.json")
}

#[derive(Debug, Serialize, Deserialize)]
struct ColumnManifest {
    missing: String,
    nightlight_standardized_per_year: bool,
    columns: Vec<ColumnSpec>,
}

/// A point at which features are extracted: a survey cluster or a
/// populated place.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub id: String,
    pub point: GeoPoint,
    pub year: i32,
    pub settlement: Settlement,
}

fn radius_tag(r: f64) -> String {
    format!("{r:.1}")
}

/// Canonical ordered metadata columns.
pub fn metadata_columns(cfg: &FeatureConfig, demographics: &[String], poi_categories: &[String]) -> Vec<ColumnSpec> {
    let mut cols = Vec::with_capacity(N_METADATA);
    let mut push = |name: String, source| cols.push(ColumnSpec { name, source });
    use FeatureSource as S;

    push("pop_distance_to_closest_tile".into(), S::Population);
    push("pop_population_in_closest_tile".into(), S::Population);
    for r in &cfg.radii_km {
        push(format!("pop_total_population_within_{}", radius_tag(*r)), S::Population);
    }
    for b in &cfg.beta_pop {
        push(format!("pop_gravitational_closest_tile_b{}", radius_tag(*b)), S::Population);
    }

    push("mob_distance_to_closest_tile".into(), S::Mobility);
    push("mob_average_distance_in".into(), S::Mobility);
    push("mob_average_distance_out".into(), S::Mobility);
    for m in MOBILITY_METRICS {
        push(format!("mob_{m}"), S::Mobility);
        for b in &cfg.beta_mob {
            push(format!("mob_{m}_b{}", radius_tag(*b)), S::Mobility);
        }
    }

    for d in demographics {
        push(format!("dem_{d}"), S::Demographics);
    }

    push("inf_road_distance_to_closest".into(), S::Infrastructure);
    push("inf_road_segments_in_bbox".into(), S::Infrastructure);
    push("inf_road_length_km_in_bbox".into(), S::Infrastructure);
    push("inf_road_intersections_in_bbox".into(), S::Infrastructure);
    push("inf_buildings_in_bbox".into(), S::Infrastructure);
    push("inf_building_distance_to_closest".into(), S::Infrastructure);
    for c in poi_categories {
        push(format!("inf_poi_{c}_count"), S::Infrastructure);
    }
    for c in poi_categories {
        push(format!("inf_poi_{c}_distance"), S::Infrastructure);
    }

    push("con_distance_to_closest_cell".into(), S::Connectivity);
    for r in &cfg.radii_km {
        push(format!("con_cells_within_{}", radius_tag(*r)), S::Connectivity);
    }
    for r in &cfg.radii_km {
        push(format!("con_towers_within_{}", radius_tag(*r)), S::Connectivity);
    }

    for r in &cfg.radii_km {
        for s in NIGHTLIGHT_STATS {
            push(format!("ntl_{s}_{}", radius_tag(*r)), S::Nightlight);
        }
    }

    push("settlement_urban".into(), S::Settlement);
    cols
}

const MOBILITY_METRICS: [&str; 6] = [
    "people_flow_in",
    "people_flow_out",
    "in_degree",
    "out_degree",
    "pagerank",
    "weighted_pagerank",
];

const NIGHTLIGHT_STATS: [&str; 9] = [
    "min",
    "max",
    "mean",
    "median",
    "frac_pixels",
    "frac_area",
    "frac_sum_rad",
    "t30_mean",
    "l30_mean",
];

/// `metric / distance^beta` with the distance in meters, floored at 1 m.
pub fn gravitational(metric: f64, distance_km: f64, beta: f64) -> f64 {
    metric / (distance_km * 1000.0).max(1.0).powf(beta)
}

// ---------------------------------------------------------------------------
// Population
// ---------------------------------------------------------------------------

pub struct PopulationLayer {
    index: SpatialIndex<usize>,
    population: Vec<f64>,
}

impl PopulationLayer {
    pub fn new(tiles: &[crate::ingest::PopulationTile]) -> Self {
        Self {
            index: SpatialIndex::build(tiles.iter().enumerate().map(|(i, t)| (i, t.point)).collect()),
            population: tiles.iter().map(|t| t.population).collect(),
        }
    }
}

/// Nine population features; all missing when the layer is absent or empty.
pub fn population_features(loc: &GeoPoint, layer: Option<&PopulationLayer>, cfg: &FeatureConfig) -> Vec<f64> {
    let width = 2 + cfg.radii_km.len() + cfg.beta_pop.len();
    let Some(layer) = layer.filter(|l| !l.index.is_empty()) else {
        return vec![f64::NAN; width];
    };
    let hit = layer.index.nearest(loc).expect("non-empty");
    let pop = layer.population[hit.slot];
    let mut out = vec![hit.distance_km, pop];
    for &r in &cfg.radii_km {
        let total: f64 = layer
            .index
            .within_radius(loc, r)
            .expect("positive radius")
            .into_iter()
            .map(|s| layer.population[s])
            .sum();
        out.push(total);
    }
    for &b in &cfg.beta_pop {
        out.push(gravitational(pop, hit.distance_km, b));
    }
    out
}

// ---------------------------------------------------------------------------
// Mobility
// ---------------------------------------------------------------------------

/// Directed tile graph with summed baseline movement counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityGraph {
    pub nodes: Vec<MovementTile>,
    /// `(from, to) -> weight`, node indices into `nodes`.
    pub edges: BTreeMap<(usize, usize), f64>,
}

impl MobilityGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

pub fn build_mobility_graph(edges: &[MovementEdge], tiles: &[MovementTile]) -> Result<MobilityGraph, FeatureError> {
    let pos: HashMap<&str, usize> = tiles.iter().enumerate().map(|(i, t)| (t.tile_id.as_str(), i)).collect();
    let mut agg = BTreeMap::new();
    for e in edges {
        let f = *pos.get(e.tile_from.as_str()).ok_or_else(|| FeatureError::UnknownTile(e.tile_from.clone()))?;
        let t = *pos.get(e.tile_to.as_str()).ok_or_else(|| FeatureError::UnknownTile(e.tile_to.clone()))?;
        *agg.entry((f, t)).or_insert(0.0) += e.count;
    }
    Ok(MobilityGraph {
        nodes: tiles.to_vec(),
        edges: agg,
    })
}

/// PageRank by power iteration. Dangling mass is spread uniformly; the
/// unweighted variant gives every edge weight 1.
pub fn pagerank(g: &MobilityGraph, weighted: bool, damping: f64, tol: f64) -> Vec<f64> {
    let n = g.n_nodes();
    if n == 0 {
        return Vec::new();
    }
    let mut out_total = vec![0.0; n];
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (&(f, t), &w) in &g.edges {
        let w = if weighted { w } else { 1.0 };
        out_total[f] += w;
        adj[f].push((t, w));
    }
    let nf = n as f64;
    let mut x = vec![1.0 / nf; n];
    for _ in 0..100_000 {
        let dangling: f64 = (0..n).filter(|&i| out_total[i] == 0.0).map(|i| x[i]).sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        let mut next = vec![base; n];
        for (f, edges) in adj.iter().enumerate() {
            if out_total[f] == 0.0 {
                continue;
            }
            let share = damping * x[f] / out_total[f];
            for &(t, w) in edges {
                next[t] += share * w;
            }
        }
        let s: f64 = next.iter().sum();
        for v in &mut next {
            *v /= s;
        }
        let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if delta < tol {
            break;
        }
    }
    x
}

/// Per-node mobility metrics, computed once per bundle.
pub struct MobilityLayer {
    index: SpatialIndex<usize>,
    flow_in: Vec<f64>,
    flow_out: Vec<f64>,
    deg_in: Vec<f64>,
    deg_out: Vec<f64>,
    pr: Vec<f64>,
    wpr: Vec<f64>,
    avg_in: Vec<f64>,
    avg_out: Vec<f64>,
}

impl MobilityLayer {
    pub fn new(g: &MobilityGraph, cfg: &FeatureConfig) -> Self {
        let n = g.n_nodes();
        let mut flow_in = vec![0.0; n];
        let mut flow_out = vec![0.0; n];
        let mut deg_in = vec![0.0; n];
        let mut deg_out = vec![0.0; n];
        let mut dist_in = vec![(0.0, 0usize); n];
        let mut dist_out = vec![(0.0, 0usize); n];
        for (&(f, t), &w) in &g.edges {
            flow_out[f] += w;
            flow_in[t] += w;
            deg_out[f] += 1.0;
            deg_in[t] += 1.0;
            if f != t {
                let d = haversine_km(&g.nodes[f].point, &g.nodes[t].point);
                dist_out[f].0 += d;
                dist_out[f].1 += 1;
                dist_in[t].0 += d;
                dist_in[t].1 += 1;
            }
        }
        let avg = |v: Vec<(f64, usize)>| -> Vec<f64> {
            v.into_iter()
                .map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 })
                .collect()
        };
        Self {
            index: SpatialIndex::build(g.nodes.iter().enumerate().map(|(i, t)| (i, t.point)).collect()),
            flow_in,
            flow_out,
            deg_in,
            deg_out,
            pr: pagerank(g, false, cfg.pagerank_damping, cfg.pagerank_tol),
            wpr: pagerank(g, true, cfg.pagerank_damping, cfg.pagerank_tol),
            avg_in: avg(dist_in),
            avg_out: avg(dist_out),
        }
    }
}

/// Twenty-seven mobility features of the closest tile.
pub fn mobility_features(loc: &GeoPoint, layer: Option<&MobilityLayer>, cfg: &FeatureConfig) -> Vec<f64> {
    let width = 3 + MOBILITY_METRICS.len() * (1 + cfg.beta_mob.len());
    let Some(layer) = layer.filter(|l| !l.index.is_empty()) else {
        return vec![f64::NAN; width];
    };
    let hit = layer.index.nearest(loc).expect("non-empty");
    let s = hit.slot;
    let mut out = vec![hit.distance_km, layer.avg_in[s], layer.avg_out[s]];
    let metrics = [
        layer.flow_in[s],
        layer.flow_out[s],
        layer.deg_in[s],
        layer.deg_out[s],
        layer.pr[s],
        layer.wpr[s],
    ];
    for m in metrics {
        out.push(m);
        for &b in &cfg.beta_mob {
            out.push(gravitational(m, hit.distance_km, b));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Demographics
// ---------------------------------------------------------------------------

pub fn demographics_features(location_id: &str, table: Option<&KeyedTable>) -> Result<Vec<f64>, FeatureError> {
    let Some(t) = table else {
        return Ok(vec![f64::NAN; N_DEMOGRAPHIC_COLUMNS]);
    };
    if t.columns.len() != N_DEMOGRAPHIC_COLUMNS {
        return Err(FeatureError::ColumnCountMismatch {
            expected: N_DEMOGRAPHIC_COLUMNS,
            got: t.columns.len(),
        });
    }
    Ok(t.rows
        .get(location_id)
        .cloned()
        .unwrap_or_else(|| vec![f64::NAN; N_DEMOGRAPHIC_COLUMNS]))
}

// ---------------------------------------------------------------------------
// Infrastructure
// ---------------------------------------------------------------------------

pub struct RoadLayer {
    segments: Vec<(GeoPoint, GeoPoint, f64)>,
    midpoints: SpatialIndex<usize>,
    max_half_km: f64,
    intersections: SpatialIndex<usize>,
}

impl RoadLayer {
    pub fn new(roads: &[crate::ingest::RoadSegment]) -> Self {
        let segments: Vec<(GeoPoint, GeoPoint, f64)> =
            roads.iter().map(|r| (r.a, r.b, haversine_km(&r.a, &r.b))).collect();
        let midpoints = SpatialIndex::build(
            segments
                .iter()
                .enumerate()
                .map(|(i, (a, b, _))| {
                    (
                        i,
                        GeoPoint {
                            lat: (a.lat + b.lat) / 2.0,
                            lon: (a.lon + b.lon) / 2.0,
                        },
                    )
                })
                .collect(),
        );
        let max_half_km = segments.iter().map(|s| s.2 / 2.0).fold(0.0, f64::max);
        // Network nodes where three or more segment ends meet.
        let key = |p: &GeoPoint| ((p.lat * 1e6).round() as i64, (p.lon * 1e6).round() as i64);
        let mut degree: BTreeMap<(i64, i64), (usize, GeoPoint)> = BTreeMap::new();
        for (a, b, _) in &segments {
            for p in [a, b] {
                degree.entry(key(p)).or_insert((0, *p)).0 += 1;
            }
        }
        let nodes: Vec<(usize, GeoPoint)> = degree
            .into_values()
            .filter(|(d, _)| *d >= 3)
            .enumerate()
            .map(|(i, (_, p))| (i, p))
            .collect();
        Self {
            segments,
            midpoints,
            max_half_km,
            intersections: SpatialIndex::build(nodes),
        }
    }
}

/// Point-to-segment distance in a local tangent plane at `q`.
pub fn point_segment_km(q: &GeoPoint, a: &GeoPoint, b: &GeoPoint) -> f64 {
    let cos = q.lat.to_radians().cos();
    let proj = |p: &GeoPoint| ((p.lon - q.lon) * KM_PER_DEG * cos, (p.lat - q.lat) * KM_PER_DEG);
    let (ax, ay) = proj(a);
    let (bx, by) = proj(b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (px, py) = (ax + t * dx, ay + t * dy);
    (px * px + py * py).sqrt()
}

pub struct InfrastructureLayers {
    roads: Option<RoadLayer>,
    buildings: Option<SpatialIndex<usize>>,
    pois: Option<Vec<SpatialIndex<usize>>>,
}

impl InfrastructureLayers {
    pub fn new(bundle: &DatasetBundle) -> Self {
        let pois = bundle.poi_points.as_ref().map(|pois| {
            bundle
                .poi_categories
                .iter()
                .map(|cat| {
                    SpatialIndex::build(
                        pois.iter()
                            .enumerate()
                            .filter(|(_, p)| &p.category == cat)
                            .map(|(i, p)| (i, p.point))
                            .collect(),
                    )
                })
                .collect()
        });
        Self {
            roads: bundle.road_segments.as_deref().map(RoadLayer::new),
            buildings: bundle
                .building_points
                .as_ref()
                .map(|b| SpatialIndex::build(b.iter().copied().enumerate().collect())),
            pois,
        }
    }
}

/// Fifty-four infrastructure features: 4 road, 2 building, 24 POI counts and
/// 24 POI distances. Absent layers are missing; empty layers give zero
/// counts and missing distances.
pub fn infrastructure_features(loc: &GeoPoint, layers: &InfrastructureLayers, cfg: &FeatureConfig) -> Vec<f64> {
    let bbox = BBox::new(*loc, cfg.bbox_width_km).expect("positive width");
    let mut out = Vec::with_capacity(54);
    match &layers.roads {
        None => out.extend([f64::NAN; 4]),
        Some(r) if r.segments.is_empty() => out.extend([f64::NAN, 0.0, 0.0, 0.0]),
        Some(r) => {
            let near = r.midpoints.nearest(loc).expect("non-empty");
            let reach = near.distance_km + r.max_half_km + 1e-6;
            let closest = r
                .midpoints
                .within_radius(loc, reach)
                .expect("positive radius")
                .into_iter()
                .map(|s| {
                    let (a, b, _) = &r.segments[s];
                    point_segment_km(loc, a, b)
                })
                .fold(f64::INFINITY, f64::min);
            let inside = r.midpoints.within_bbox(&bbox);
            let length: f64 = inside.iter().map(|&s| r.segments[s].2).sum();
            out.push(closest);
            out.push(inside.len() as f64);
            out.push(length);
            out.push(r.intersections.within_bbox(&bbox).len() as f64);
        }
    }
    match &layers.buildings {
        None => out.extend([f64::NAN; 2]),
        Some(b) => {
            out.push(b.within_bbox(&bbox).len() as f64);
            out.push(b.nearest(loc).map(|h| h.distance_km).unwrap_or(f64::NAN));
        }
    }
    match &layers.pois {
        None => out.extend([f64::NAN; 2 * N_POI_CATEGORIES]),
        Some(per_cat) => {
            for idx in per_cat {
                out.push(idx.within_bbox(&bbox).len() as f64);
            }
            for idx in per_cat {
                out.push(idx.nearest(loc).map(|h| h.distance_km).unwrap_or(f64::NAN));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Connectivity
// ---------------------------------------------------------------------------

pub struct CellLayer {
    index: SpatialIndex<usize>,
    towers: Vec<String>,
}

impl CellLayer {
    pub fn new(cells: &[crate::ingest::Cell]) -> Self {
        Self {
            index: SpatialIndex::build(cells.iter().enumerate().map(|(i, c)| (i, c.point)).collect()),
            towers: cells.iter().map(|c| c.tower_id.clone()).collect(),
        }
    }
}

pub fn connectivity_features(loc: &GeoPoint, layer: Option<&CellLayer>, cfg: &FeatureConfig) -> Vec<f64> {
    let width = 1 + 2 * cfg.radii_km.len();
    let Some(layer) = layer else {
        return vec![f64::NAN; width];
    };
    let mut out = vec![layer.index.nearest(loc).map(|h| h.distance_km).unwrap_or(f64::NAN)];
    let within: Vec<Vec<usize>> = cfg
        .radii_km
        .iter()
        .map(|&r| layer.index.within_radius(loc, r).expect("positive radius"))
        .collect();
    for w in &within {
        out.push(w.len() as f64);
    }
    for w in &within {
        let distinct: BTreeSet<&str> = w.iter().map(|&s| layer.towers[s].as_str()).collect();
        out.push(distinct.len() as f64);
    }
    out
}

// ---------------------------------------------------------------------------
// Nightlight
// ---------------------------------------------------------------------------

/// The nine radiance statistics of one buffer: min, max, mean, median,
/// frac_pixels, frac_area, frac_sum_rad, t30_mean, l30_mean. All missing
/// when there are no pixels.
pub fn nightlight_stats(radiance: &[f64], threshold: f64) -> [f64; 9] {
    if radiance.is_empty() {
        return [f64::NAN; 9];
    }
    let mut v = radiance.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let sum: f64 = v.iter().sum();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    let lit = v.iter().filter(|&&r| r >= threshold).count();
    let lit_sum: f64 = v.iter().filter(|&&r| r >= threshold).sum();
    let frac_pixels = lit as f64 / n as f64;
    let frac_sum = if sum > 0.0 { lit_sum / sum } else { 0.0 };
    // ceil(0.3 n) in exact integer arithmetic
    let k = (3 * n).div_ceil(10).max(1);
    let t30 = v[n - k..].iter().sum::<f64>() / k as f64;
    let l30 = v[..k].iter().sum::<f64>() / k as f64;
    [v[0], v[n - 1], sum / n as f64, median, frac_pixels, frac_pixels, frac_sum, t30, l30]
}

pub struct NightlightLayer {
    by_year: BTreeMap<i32, (SpatialIndex<usize>, Vec<f64>)>,
}

impl NightlightLayer {
    pub fn new(pixels: &BTreeMap<i32, Vec<crate::ingest::NightlightPixel>>) -> Self {
        Self {
            by_year: pixels
                .iter()
                .map(|(y, px)| {
                    (
                        *y,
                        (
                            SpatialIndex::build(px.iter().enumerate().map(|(i, p)| (i, p.point)).collect()),
                            px.iter().map(|p| p.radiance).collect(),
                        ),
                    )
                })
                .collect(),
        }
    }
}

/// Raw (unstandardized) nightlight features for the location's year.
pub fn nightlight_features(loc: &GeoPoint, year: i32, layer: Option<&NightlightLayer>, cfg: &FeatureConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * cfg.radii_km.len());
    let year_layer = layer.and_then(|l| l.by_year.get(&year));
    for &r in &cfg.radii_km {
        match year_layer {
            None => out.extend([f64::NAN; 9]),
            Some((idx, rad)) => {
                let vals: Vec<f64> = idx
                    .within_radius(loc, r)
                    .expect("positive radius")
                    .into_iter()
                    .map(|s| rad[s])
                    .collect();
                out.extend(nightlight_stats(&vals, cfg.nightlight_threshold));
            }
        }
    }
    out
}

/// Z-scores every nightlight column within each year group (population
/// standard deviation). Missing entries stay missing; zero-variance groups
/// map to 0.
pub fn standardize_per_year(m: &mut FeatureMatrix) {
    let p = m.n_cols();
    let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, y) in m.years.iter().enumerate() {
        groups.entry(*y).or_default().push(i);
    }
    for j in 0..p {
        if m.columns[j].source != FeatureSource::Nightlight {
            continue;
        }
        for rows in groups.values() {
            let vals: Vec<f64> = rows.iter().map(|&i| m.values[i * p + j]).filter(|v| !v.is_nan()).collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            for &i in rows {
                let v = &mut m.values[i * p + j];
                if v.is_nan() {
                    continue;
                }
                *v = if sd > 1e-12 * mean.abs().max(1.0) { (*v - mean) / sd } else { 0.0 };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Layer indices and graph metrics shared by all locations of a bundle.
pub struct ExtractionContext<'a> {
    bundle: &'a DatasetBundle,
    cfg: FeatureConfig,
    population: Option<PopulationLayer>,
    mobility: Option<MobilityLayer>,
    infrastructure: InfrastructureLayers,
    cells: Option<CellLayer>,
    nightlight: Option<NightlightLayer>,
    columns: Vec<ColumnSpec>,
}

impl<'a> ExtractionContext<'a> {
    pub fn new(bundle: &'a DatasetBundle, cfg: &FeatureConfig) -> Result<Self, FeatureError> {
        let mobility = match &bundle.movement_tiles {
            Some(tiles) => {
                let edges = bundle.movement_edges.as_deref().unwrap_or(&[]);
                let g = build_mobility_graph(edges, tiles)?;
                Some(MobilityLayer::new(&g, cfg))
            }
            None => None,
        };
        if let Some(d) = &bundle.demographics {
            if d.columns.len() != N_DEMOGRAPHIC_COLUMNS {
                return Err(FeatureError::ColumnCountMismatch {
                    expected: N_DEMOGRAPHIC_COLUMNS,
                    got: d.columns.len(),
                });
            }
        }
        let poi_names: Vec<String> = if bundle.poi_categories.len() == N_POI_CATEGORIES {
            bundle.poi_categories.clone()
        } else {
            (0..N_POI_CATEGORIES).map(|i| format!("category_{i:02}")).collect()
        };
        let mut columns = metadata_columns(cfg, &bundle.demographics_columns(), &poi_names);
        if cfg.include_embeddings {
            if let Some(e) = &bundle.embeddings {
                columns.extend(e.columns.iter().map(|c| ColumnSpec {
                    name: format!("emb_{c}"),
                    source: FeatureSource::Embedding,
                }));
            }
        }
        Ok(Self {
            bundle,
            cfg: cfg.clone(),
            population: bundle.population_tiles.as_deref().map(PopulationLayer::new),
            mobility,
            infrastructure: InfrastructureLayers::new(bundle),
            cells: bundle.cells.as_deref().map(CellLayer::new),
            nightlight: bundle.nightlights.as_ref().map(NightlightLayer::new),
            columns,
        })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    /// Raw feature row for one location (nightlights not yet standardized).
    pub fn extract(&self, loc: &Location) -> Result<Vec<f64>, FeatureError> {
        let cfg = &self.cfg;
        let mut row = Vec::with_capacity(self.columns.len());
        row.extend(population_features(&loc.point, self.population.as_ref(), cfg));
        row.extend(mobility_features(&loc.point, self.mobility.as_ref(), cfg));
        row.extend(demographics_features(&loc.id, self.bundle.demographics.as_ref())?);
        row.extend(infrastructure_features(&loc.point, &self.infrastructure, cfg));
        row.extend(connectivity_features(&loc.point, self.cells.as_ref(), cfg));
        row.extend(nightlight_features(&loc.point, loc.year, self.nightlight.as_ref(), cfg));
        row.push(if loc.settlement == Settlement::Urban { 1.0 } else { 0.0 });
        if cfg.include_embeddings {
            if let Some(e) = &self.bundle.embeddings {
                match e.rows.get(&loc.id) {
                    Some(v) => row.extend_from_slice(v),
                    None => row.extend(std::iter::repeat_n(f64::NAN, e.columns.len())),
                }
            }
        }
        debug_assert_eq!(row.len(), self.columns.len());
        Ok(row)
    }

    /// Full matrix for `locations`, rows in input order, nightlight columns
    /// standardized per year over this location set.
    pub fn assemble(&self, locations: &[Location]) -> Result<FeatureMatrix, FeatureError> {
        let rows: Vec<Vec<f64>> = locations
            .par_iter()
            .map(|l| self.extract(l))
            .collect::<Result<_, _>>()?;
        let mut m = FeatureMatrix {
            location_ids: locations.iter().map(|l| l.id.clone()).collect(),
            years: locations.iter().map(|l| l.year).collect(),
            columns: self.columns.clone(),
            values: rows.concat(),
        };
        standardize_per_year(&mut m);
        Ok(m)
    }
}

pub fn assemble(locations: &[Location], bundle: &DatasetBundle, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    ExtractionContext::new(bundle, cfg)?.assemble(locations)
}

/// Locations of every cluster at the given coordinates.
pub fn cluster_locations(bundle: &DatasetBundle, points: &[GeoPoint]) -> Vec<Location> {
    bundle
        .clusters
        .iter()
        .zip(points)
        .map(|(c, p)| Location {
            id: c.cluster_id.clone(),
            point: *p,
            year: c.year,
            settlement: c.settlement,
        })
        .collect()
}

/// Locations of every populated place, queried at `year`.
pub fn place_locations(bundle: &DatasetBundle, year: i32) -> Vec<Location> {
    bundle
        .places
        .iter()
        .map(|p| Location {
            id: p.place_id.clone(),
            point: p.point,
            year,
            settlement: p.kind.settlement(),
        })
        .collect()
}
