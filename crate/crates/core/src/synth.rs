//! Synthetic countries with a known wealth process.
//!
//! A latent development field drives every geodata layer. Cluster wealth is
//! then planted on top of six extracted features (one per metadata source),
//! so the optimal predictor is a known function of the feature matrix:
//!
//! `S = α + β Σ_k w_k tanh((φ_k(x_k) - c_k) / d_k) + bonus · urban`,
//! `m = S + η_μ ε`, `s = max(0.5, g(m) + η_σ ν)` with `g(m) = 25 (1 - e^{-m/30})`.
//!
//! Household latent wealth is `m + s u` with `u` standardized within the
//! cluster; the household score is `floor(clamp(·, 0, 100))`, encoded in ten
//! 0..=10 assets whose plain sum recovers it exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::eval;
use crate::features::{self, FeatureConfig, FeatureError, Location};
use crate::geo::GeoPoint;
use crate::ingest::{
    AssetSpec, Cell, Cluster, DatasetBundle, FixedIwiWeights, Household, KeyedTable, MovementEdge, MovementTile,
    NightlightPixel, Place, PlaceKind, PoiPoint, PopulationTile, RoadSegment, Settlement, EMBEDDING_DIM, N_ASSETS,
    N_DEMOGRAPHIC_COLUMNS,
};
use crate::pipeline::derive_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("planted feature `{0}` is missing for some cluster")]
    MissingPlanted(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
}

pub const POI_CATEGORIES: [&str; 24] = [
    "school",
    "clinic",
    "hospital",
    "pharmacy",
    "bank",
    "atm",
    "market",
    "supermarket",
    "restaurant",
    "cafe",
    "bar",
    "fuel",
    "place_of_worship",
    "police",
    "post_office",
    "library",
    "bus_station",
    "hotel",
    "fast_food",
    "marketplace",
    "community_centre",
    "townhall",
    "university",
    "cinema",
];

/// The six planted columns, in weight order.
pub const PLANTED_COLUMNS: [&str; 6] = [
    "pop_total_population_within_2.0",
    "mob_people_flow_out",
    "dem_demographic_00",
    "inf_road_distance_to_closest",
    "con_cells_within_5.0",
    "ntl_mean_5.0",
];

/// Per-column transform applied before centring.
fn planted_transform(k: usize, v: f64) -> f64 {
    match k {
        0 | 1 => v.ln_1p(),
        3 => -v.ln_1p(),
        4 => v.sqrt(),
        _ => v,
    }
}

/// Dispersion curve `g`.
pub fn sigma_curve(m: f64) -> f64 {
    25.0 * (1.0 - (-m / 30.0).exp())
}

/// Shared map from planted features to the wealth signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub centers: [f64; 6],
    pub scales: [f64; 6],
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CalibrationMode {
    /// Fit centres/scales and (α, β) so the noise-free signal has this mean
    /// and standard deviation over the generated clusters.
    Auto { center: f64, spread: f64 },
    /// Reuse another country's map unchanged.
    Fixed(Calibration),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthSpec {
    /// Target optimal NRMSE of μ; sets `eta_mu` when present.
    pub bayes_nrmse_mu: Option<f64>,
    pub eta_mu: f64,
    pub eta_sigma: f64,
    pub urban_bonus: f64,
    pub weights: [f64; 6],
    pub calibration: CalibrationMode,
}

impl Default for WealthSpec {
    fn default() -> Self {
        Self {
            bayes_nrmse_mu: Some(0.4),
            eta_mu: 0.0,
            eta_sigma: 2.0,
            urban_bonus: 4.0,
            weights: [1.0, 0.8, 0.6, 0.5, 0.4, 0.3],
            calibration: CalibrationMode::Auto {
                center: 40.0,
                spread: 15.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Densities {
    pub population_tile_km: f64,
    pub movement_tile_km: f64,
    pub nightlight_pixel_km: f64,
    pub poi_points: usize,
    pub buildings: usize,
    pub towers: usize,
    pub rural_tracks: usize,
}

impl Default for Densities {
    fn default() -> Self {
        Self {
            population_tile_km: 2.5,
            movement_tile_km: 10.0,
            nightlight_pixel_km: 2.0,
            poi_points: 4000,
            buildings: 15000,
            towers: 400,
            rural_tracks: 800,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub country_code: String,
    pub n_clusters: usize,
    pub n_places: usize,
    pub years: Vec<i32>,
    pub urban_share: f64,
    pub households_per_cluster: (usize, usize),
    pub center: GeoPoint,
    pub extent_km: f64,
    pub n_cities: usize,
    /// Range of the latent development field.
    pub development: (f64, f64),
    pub wealth: WealthSpec,
    pub densities: Densities,
    pub include_embeddings: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            country_code: "SYN".into(),
            n_clusters: 1000,
            n_places: 300,
            years: vec![2016, 2019],
            urban_share: 0.3,
            households_per_cluster: (20, 30),
            center: GeoPoint { lat: 8.5, lon: -11.8 },
            extent_km: 200.0,
            n_cities: 10,
            development: (0.0, 1.0),
            wealth: WealthSpec::default(),
            densities: Densities::default(),
            include_embeddings: false,
            seed: 7,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_clusters < 10 {
            return bad("need at least 10 clusters");
        }
        if self.years.is_empty() {
            return bad("need at least one survey year");
        }
        if !(0.0..=1.0).contains(&self.urban_share) {
            return bad("urban_share must lie in [0, 1]");
        }
        let (lo, hi) = self.households_per_cluster;
        if lo < 2 || hi < lo {
            return bad("households_per_cluster must be an increasing range starting at 2 or more");
        }
        if !(self.development.0 >= 0.0 && self.development.1 > self.development.0 && self.development.1 <= 1.0) {
            return bad("development range must be increasing within [0, 1]");
        }
        if self.n_cities == 0 || self.extent_km <= 0.0 {
            return bad("need a positive extent and at least one city");
        }
        if self.wealth.eta_mu < 0.0 || self.wealth.eta_sigma < 0.0 {
            return bad("noise levels must be nonnegative");
        }
        if let Some(b) = self.wealth.bayes_nrmse_mu {
            if !(0.0..1.0).contains(&b) {
                return bad("bayes_nrmse_mu must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// Ground-truth parameters and per-cluster latent values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub spec: SynthSpec,
    pub feature_config: FeatureConfig,
    pub planted_columns: Vec<String>,
    pub calibration: Calibration,
    pub eta_mu: f64,
    pub eta_sigma: f64,
    pub clusters: Vec<ClusterTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTruth {
    pub cluster_id: String,
    /// Noise-free signal `S`.
    pub signal: f64,
    pub m: f64,
    pub s: f64,
    /// Realized cluster mean and standard deviation of household scores.
    pub mu: f64,
    pub sigma: f64,
    /// `E[μ | x]` and `E[σ | x]`.
    pub oracle_mu: f64,
    pub oracle_sigma: f64,
}

struct City {
    x: f64,
    y: f64,
    weight: f64,
    radius: f64,
}

/// Latent development over local (east, north) km coordinates.
struct Field {
    cities: Vec<City>,
    waves: Vec<(f64, f64, f64)>,
    lo: f64,
    hi: f64,
}

impl Field {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let half = spec.extent_km / 2.0;
        let cities = (0..spec.n_cities)
            .map(|_| City {
                x: rng.random_range(-0.8 * half..0.8 * half),
                y: rng.random_range(-0.8 * half..0.8 * half),
                weight: rng.random_range(0.6..1.6),
                radius: rng.random_range(6.0..18.0),
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..2.0 * PI);
                let k = 2.0 * PI / rng.random_range(60.0..160.0);
                (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self {
            cities,
            waves,
            lo: spec.development.0,
            hi: spec.development.1,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let bumps: f64 = self
            .cities
            .iter()
            .map(|c| c.weight * (-((x - c.x).powi(2) + (y - c.y).powi(2)) / (2.0 * c.radius * c.radius)).exp())
            .sum();
        let wave: f64 = self.waves.iter().map(|(kx, ky, ph)| (kx * x + ky * y + ph).cos()).sum::<f64>() / 3.0;
        let b = 1.5 * bumps + 0.25 * (1.0 + wave);
        self.lo + (self.hi - self.lo) * (1.0 - (-b).exp())
    }

    fn pick_city(&self, rng: &mut ChaCha8Rng) -> &City {
        let total: f64 = self.cities.iter().map(|c| c.weight).sum();
        let mut t = rng.random_range(0.0..total);
        for c in &self.cities {
            if t < c.weight {
                return c;
            }
            t -= c.weight;
        }
        self.cities.last().expect("at least one city")
    }
}

struct Frame {
    center: GeoPoint,
    half: f64,
}

impl Frame {
    fn point(&self, x: f64, y: f64) -> GeoPoint {
        self.center.offset_km(y, x)
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(-self.half + 0.5, self.half - 0.5)
    }

    fn grid(&self, step: f64) -> Vec<(f64, f64)> {
        let n = (2.0 * self.half / step).floor() as usize;
        let start = -self.half + step / 2.0;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push((start + j as f64 * step, start + i as f64 * step));
            }
        }
        out
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn near_city(field: &Field, frame: &Frame, rng: &mut ChaCha8Rng, spread: f64) -> (f64, f64) {
    let c = field.pick_city(rng);
    (
        frame.clamp(c.x + spread * c.radius * normal(rng)),
        frame.clamp(c.y + spread * c.radius * normal(rng)),
    )
}

/// Uniform proposals accepted with probability `accept(development)`.
fn sample_by_field(
    field: &Field,
    frame: &Frame,
    rng: &mut ChaCha8Rng,
    n: usize,
    accept: impl Fn(f64) -> f64,
) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = rng.random_range(-frame.half..frame.half);
        let y = rng.random_range(-frame.half..frame.half);
        if rng.random::<f64>() < accept(field.at(x, y)) {
            out.push((x, y));
        }
    }
    out
}

fn roads(field: &Field, frame: &Frame, rng: &mut ChaCha8Rng, n_tracks: usize) -> Vec<RoadSegment> {
    let mut segs = Vec::new();
    let polyline = |pts: &[(f64, f64)], segs: &mut Vec<RoadSegment>| {
        for w in pts.windows(2) {
            segs.push(RoadSegment {
                a: frame.point(w[0].0, w[0].1),
                b: frame.point(w[1].0, w[1].1),
            });
        }
    };
    // Trunk roads from each city to its two nearest neighbours.
    let cities = &field.cities;
    let pairs: std::collections::BTreeSet<(usize, usize)> = (0..cities.len())
        .flat_map(|i| nearest_two(cities, i).into_iter().map(move |j| (i.min(j), i.max(j))))
        .collect();
    for (i, j) in pairs {
        let (a, b) = (&cities[i], &cities[j]);
        let steps = ((a.x - b.x).hypot(a.y - b.y) / 2.0).ceil().max(1.0) as usize;
        let pts: Vec<(f64, f64)> = (0..=steps)
            .map(|s| {
                let t = s as f64 / steps as f64;
                (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
            })
            .collect();
        polyline(&pts, &mut segs);
    }
    // Street grids with four-way intersections.
    for c in cities {
        let reach = (c.radius * 0.5).round().max(2.0) as i32;
        for a in -reach..=reach {
            let row: Vec<(f64, f64)> = (-reach..=reach).map(|b| (frame.clamp(c.x + b as f64), frame.clamp(c.y + a as f64))).collect();
            let col: Vec<(f64, f64)> = (-reach..=reach).map(|b| (frame.clamp(c.x + a as f64), frame.clamp(c.y + b as f64))).collect();
            polyline(&row, &mut segs);
            polyline(&col, &mut segs);
        }
    }
    for (x, y) in sample_by_field(field, frame, rng, n_tracks, |_| 1.0) {
        let angle: f64 = rng.random_range(0.0..2.0 * PI);
        let len = rng.random_range(0.5..3.0);
        polyline(&[(x, y), (frame.clamp(x + len * angle.cos()), frame.clamp(y + len * angle.sin()))], &mut segs);
    }
    segs.retain(|s| s.a != s.b);
    segs
}

fn nearest_two(cities: &[City], i: usize) -> Vec<usize> {
    let c = &cities[i];
    let mut others: Vec<(f64, usize)> = cities
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, o)| ((o.x - c.x).hypot(o.y - c.y), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(2).map(|(_, j)| j).collect()
}

/// Quantile nodes of the standard normal (midpoint rule, equal weights).
fn normal_nodes(k: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("valid");
    (0..k).map(|i| n.inverse_cdf((i as f64 + 0.5) / k as f64)).collect()
}

fn household_scores(m: f64, s: f64, u: &[f64]) -> Vec<f64> {
    u.iter().map(|v| (m + s * v).clamp(0.0, 100.0).floor()).collect()
}

/// Generates a bundle and its ground-truth record; deterministic in the spec.
pub fn generate(spec: &SynthSpec) -> Result<(DatasetBundle, SynthRecord), SynthError> {
    spec.validate()?;
    let seed = |tag: u64| ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[tag]));
    let frame = Frame {
        center: spec.center,
        half: spec.extent_km / 2.0,
    };
    let field = Field::new(spec, &mut seed(1));
    let dens = &spec.densities;

    // Survey clusters and populated places.
    let mut rng = seed(2);
    let n_urban = (spec.urban_share * spec.n_clusters as f64).round() as usize;
    let mut clusters = Vec::with_capacity(spec.n_clusters);
    for i in 0..spec.n_clusters {
        let urban = i < n_urban;
        let (x, y) = if urban {
            near_city(&field, &frame, &mut rng, 0.4)
        } else {
            (rng.random_range(-frame.half..frame.half) * 0.97, rng.random_range(-frame.half..frame.half) * 0.97)
        };
        clusters.push(Cluster {
            cluster_id: format!("C{i:05}"),
            point: frame.point(x, y),
            year: spec.years[i % spec.years.len()],
            settlement: if urban { Settlement::Urban } else { Settlement::Rural },
        });
    }
    let mut places = Vec::with_capacity(spec.n_places);
    let n_urban_places = (0.3 * spec.n_places as f64).round() as usize;
    for i in 0..spec.n_places {
        let urban = i < n_urban_places;
        let (x, y) = if urban {
            near_city(&field, &frame, &mut rng, 0.5)
        } else {
            (rng.random_range(-frame.half..frame.half) * 0.97, rng.random_range(-frame.half..frame.half) * 0.97)
        };
        let kinds: &[PlaceKind] = if urban {
            &[PlaceKind::City, PlaceKind::Town, PlaceKind::Neighborhood]
        } else {
            &[PlaceKind::Village, PlaceKind::Hamlet, PlaceKind::IsolatedDwelling]
        };
        places.push(Place {
            place_id: format!("P{i:05}"),
            point: frame.point(x, y),
            kind: kinds[rng.random_range(0..kinds.len())],
        });
    }

    // Layers.
    let mut rng = seed(3);
    let population_tiles: Vec<PopulationTile> = frame
        .grid(dens.population_tile_km)
        .into_iter()
        .map(|(x, y)| PopulationTile {
            point: frame.point(x, y),
            population: (3.0 + 5.0 * field.at(x, y) + 0.3 * normal(&mut rng)).exp().round(),
        })
        .collect();

    let mut rng = seed(4);
    let mgrid = frame.grid(dens.movement_tile_km);
    let side = (2.0 * frame.half / dens.movement_tile_km).floor() as usize;
    let movement_tiles: Vec<MovementTile> = mgrid
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| MovementTile {
            tile_id: format!("T{i:04}"),
            point: frame.point(x, y),
        })
        .collect();
    let mut movement_edges = Vec::new();
    let activity: Vec<f64> = mgrid.iter().map(|&(x, y)| (4.0 * field.at(x, y)).exp()).collect();
    for i in 0..mgrid.len() {
        let (r, c) = (i / side, i % side);
        let mut push = |j: usize, scale: f64, rng: &mut ChaCha8Rng| {
            movement_edges.push(MovementEdge {
                tile_from: movement_tiles[i].tile_id.clone(),
                tile_to: movement_tiles[j].tile_id.clone(),
                count: (scale * (activity[i] + activity[j]) * rng.random_range(0.5..1.5)).round(),
            });
        };
        push(i, 2.0, &mut rng);
        if c + 1 < side {
            push(i + 1, 5.0, &mut rng);
        }
        if c > 0 {
            push(i - 1, 5.0, &mut rng);
        }
        if r + 1 < side {
            push(i + side, 5.0, &mut rng);
        }
        if r > 0 {
            push(i - side, 5.0, &mut rng);
        }
    }

    let mut rng = seed(5);
    let poi_points: Vec<PoiPoint> = sample_by_field(&field, &frame, &mut rng, dens.poi_points, |d| d * d)
        .into_iter()
        .map(|(x, y)| {
            // Rarer categories sit later in the list.
            let k = ((rng.random::<f64>().powf(1.6)) * POI_CATEGORIES.len() as f64) as usize;
            PoiPoint {
                point: frame.point(x, y),
                category: POI_CATEGORIES[k.min(POI_CATEGORIES.len() - 1)].to_string(),
            }
        })
        .collect();

    let road_segments = roads(&field, &frame, &mut seed(6), dens.rural_tracks);

    let mut rng = seed(7);
    let building_points: Vec<GeoPoint> = (0..dens.buildings)
        .map(|_| {
            if rng.random::<f64>() < 0.7 {
                let (x, y) = near_city(&field, &frame, &mut rng, 0.5);
                frame.point(x, y)
            } else {
                let (x, y) = sample_by_field(&field, &frame, &mut rng, 1, |d| 0.1 + d)[0];
                frame.point(x, y)
            }
        })
        .collect();

    let mut rng = seed(8);
    let mut cells = Vec::new();
    for (t, (x, y)) in sample_by_field(&field, &frame, &mut rng, dens.towers, |d| 0.15 + 0.85 * d)
        .into_iter()
        .enumerate()
    {
        for _ in 0..rng.random_range(1..=3) {
            cells.push(Cell {
                point: frame.point(x, y),
                tower_id: format!("W{t:04}"),
            });
        }
    }

    let mut rng = seed(9);
    let mut years_sorted = spec.years.clone();
    years_sorted.sort_unstable();
    years_sorted.dedup();
    let ngrid = frame.grid(dens.nightlight_pixel_km);
    let mut nightlights = BTreeMap::new();
    for (yi, &year) in years_sorted.iter().enumerate() {
        let growth = 1.0 + 0.05 * yi as f64;
        let px: Vec<NightlightPixel> = ngrid
            .iter()
            .map(|&(x, y)| {
                let d = field.at(x, y);
                NightlightPixel {
                    point: frame.point(x, y),
                    radiance: (40.0 * d * d * growth + 1.5 * normal(&mut rng)).max(0.0),
                }
            })
            .collect();
        nightlights.insert(year, px);
    }

    // Demographics and embeddings for every cluster and place.
    let dev_of = |p: &GeoPoint| {
        let y = (p.lat - spec.center.lat) * crate::geo::KM_PER_DEG;
        let x = (p.lon - spec.center.lon) * crate::geo::KM_PER_DEG * spec.center.lat.to_radians().cos();
        field.at(x, y)
    };
    let locations: Vec<(String, GeoPoint)> = clusters
        .iter()
        .map(|c| (c.cluster_id.clone(), c.point))
        .chain(places.iter().map(|p| (p.place_id.clone(), p.point)))
        .collect();
    let mut rng = seed(10);
    let dem_loadings: Vec<f64> = (0..N_DEMOGRAPHIC_COLUMNS).map(|j| if j == 0 { 5.0 } else { rng.random_range(-2.0..2.0) }).collect();
    let mut dem_rows = BTreeMap::new();
    for (id, p) in &locations {
        let d = dev_of(p);
        let row: Vec<f64> = dem_loadings
            .iter()
            .enumerate()
            .map(|(j, a)| a * d + if j == 0 { 0.5 } else { 1.0 } * normal(&mut rng))
            .collect();
        dem_rows.insert(id.clone(), row);
    }
    let demographics = KeyedTable {
        columns: (0..N_DEMOGRAPHIC_COLUMNS).map(|i| format!("demographic_{i:02}")).collect(),
        rows: dem_rows,
    };
    let embeddings = spec.include_embeddings.then(|| {
        let mut rng = seed(11);
        let load: Vec<f64> = (0..EMBEDDING_DIM).map(|_| normal(&mut rng)).collect();
        let rows = locations
            .iter()
            .map(|(id, p)| {
                let d = dev_of(p);
                (id.clone(), load.iter().map(|a| a * d + 0.5 * normal(&mut rng)).collect())
            })
            .collect();
        KeyedTable {
            columns: (0..EMBEDDING_DIM).map(|i| format!("e{i:03}")).collect(),
            rows,
        }
    });

    let mut bundle = DatasetBundle {
        country_code: spec.country_code.clone(),
        assets: (0..N_ASSETS)
            .map(|j| AssetSpec {
                name: format!("asset_{j:02}"),
                levels: 11,
            })
            .collect(),
        poi_categories: POI_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        iwi_weights: Some(FixedIwiWeights {
            weights: vec![1.0; N_ASSETS],
            constant: 0.0,
        }),
        households: Vec::new(),
        clusters,
        places,
        population_tiles: Some(population_tiles),
        movement_tiles: Some(movement_tiles),
        movement_edges: Some(movement_edges),
        demographics: Some(demographics),
        poi_points: Some(poi_points),
        road_segments: Some(road_segments),
        building_points: Some(building_points),
        cells: Some(cells),
        nightlights: Some(nightlights),
        embeddings,
    };

    // Plant wealth on the extracted features.
    let fcfg = FeatureConfig {
        include_embeddings: false,
        ..FeatureConfig::default()
    };
    let locs: Vec<Location> = bundle
        .clusters
        .iter()
        .map(|c| Location {
            id: c.cluster_id.clone(),
            point: c.point,
            year: c.year,
            settlement: c.settlement,
        })
        .collect();
    let x = features::assemble(&locs, &bundle, &fcfg)?;
    let n = locs.len();
    let mut phi = vec![[0.0; 6]; n];
    for (k, name) in PLANTED_COLUMNS.iter().enumerate() {
        let j = x.column_index(name).ok_or_else(|| SynthError::MissingPlanted(name.to_string()))?;
        for (i, row) in phi.iter_mut().enumerate() {
            let v = x.get(i, j);
            if v.is_nan() {
                return Err(SynthError::MissingPlanted(name.to_string()));
            }
            row[k] = planted_transform(k, v);
        }
    }
    let w = spec.wealth.weights;
    let raw = |cal_c: &[f64; 6], cal_d: &[f64; 6], p: &[f64; 6]| -> f64 {
        (0..6).map(|k| w[k] * ((p[k] - cal_c[k]) / cal_d[k]).tanh()).sum()
    };
    let urban: Vec<f64> = bundle.clusters.iter().map(|c| if c.settlement == Settlement::Urban { 1.0 } else { 0.0 }).collect();
    let calibration = match &spec.wealth.calibration {
        CalibrationMode::Fixed(c) => c.clone(),
        CalibrationMode::Auto { center, spread } => {
            let mut centers = [0.0; 6];
            let mut scales = [1.0; 6];
            for k in 0..6 {
                let col: Vec<f64> = phi.iter().map(|r| r[k]).collect();
                centers[k] = eval::mean(&col);
                scales[k] = eval::pop_std(&col).max(1e-9);
            }
            let r: Vec<f64> = phi.iter().map(|p| raw(&centers, &scales, p)).collect();
            let sd = eval::pop_std(&r).max(1e-9);
            let beta = spread / sd;
            Calibration {
                centers,
                scales,
                alpha: center - beta * eval::mean(&r),
                beta,
            }
        }
    };
    let signal: Vec<f64> = phi
        .iter()
        .zip(&urban)
        .map(|(p, u)| calibration.alpha + calibration.beta * raw(&calibration.centers, &calibration.scales, p) + spec.wealth.urban_bonus * u)
        .collect();
    let eta_mu = match spec.wealth.bayes_nrmse_mu {
        Some(b) => b * eval::pop_std(&signal) / (1.0 - b * b).sqrt(),
        None => spec.wealth.eta_mu,
    };
    let eta_sigma = spec.wealth.eta_sigma;

    let mut rng = seed(12);
    let (hmin, hmax) = spec.households_per_cluster;
    let eps_nodes = normal_nodes(48);
    let nu_nodes = normal_nodes(16);
    let mut truths = Vec::with_capacity(n);
    let mut households = Vec::new();
    for (i, c) in bundle.clusters.iter().enumerate() {
        let m = signal[i] + eta_mu * normal(&mut rng);
        let s = (sigma_curve(m) + eta_sigma * normal(&mut rng)).max(0.5);
        let nh = rng.random_range(hmin..=hmax);
        let mut u: Vec<f64> = (0..nh).map(|_| normal(&mut rng)).collect();
        let mu_u = eval::mean(&u);
        let sd_u = eval::pop_std(&u).max(1e-12);
        for v in &mut u {
            *v = (*v - mu_u) / sd_u;
        }
        let scores = household_scores(m, s, &u);
        for (h, &score) in scores.iter().enumerate() {
            let l = score as u32;
            households.push(Household {
                household_id: format!("{}-{h:02}", c.cluster_id),
                cluster_id: c.cluster_id.clone(),
                assets: (0..N_ASSETS as u32).map(|j| (l + j) / 10).collect(),
            });
        }
        // E[· | x] over the model noise, holding the realized u.
        let (mut om, mut os) = (0.0, 0.0);
        for e in &eps_nodes {
            let mm = signal[i] + eta_mu * e;
            for v in &nu_nodes {
                let ss = (sigma_curve(mm) + eta_sigma * v).max(0.5);
                let sc = household_scores(mm, ss, &u);
                om += eval::mean(&sc);
                os += eval::pop_std(&sc);
            }
        }
        let nq = (eps_nodes.len() * nu_nodes.len()) as f64;
        truths.push(ClusterTruth {
            cluster_id: c.cluster_id.clone(),
            signal: signal[i],
            m,
            s,
            mu: eval::mean(&scores),
            sigma: eval::pop_std(&scores),
            oracle_mu: om / nq,
            oracle_sigma: os / nq,
        });
    }
    bundle.households = households;

    let record = SynthRecord {
        spec: spec.clone(),
        feature_config: fcfg,
        planted_columns: PLANTED_COLUMNS.iter().map(|s| s.to_string()).collect(),
        calibration,
        eta_mu,
        eta_sigma,
        clusters: truths,
    };
    Ok((bundle, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesNrmse {
    /// `η_μ / sd(μ)` over the generated clusters.
    pub closed_form_mu: f64,
    /// NRMSE of the conditional-expectation predictor.
    pub mu: f64,
    pub sigma: f64,
}

pub fn bayes_nrmse(record: &SynthRecord) -> BayesNrmse {
    let col = |f: fn(&ClusterTruth) -> f64| -> Vec<f64> { record.clusters.iter().map(f).collect() };
    let (mu, sigma) = (col(|c| c.mu), col(|c| c.sigma));
    let sd_mu = eval::pop_std(&mu);
    let nr = |t: &[f64], p: &[f64]| eval::rmse(t, p).unwrap_or(f64::NAN) / eval::pop_std(t);
    BayesNrmse {
        closed_form_mu: if sd_mu > 0.0 { record.eta_mu / sd_mu } else { 0.0 },
        mu: nr(&mu, &col(|c| c.oracle_mu)),
        sigma: nr(&sigma, &col(|c| c.oracle_sigma)),
    }
}

impl SynthRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, SynthError> {
        serde_json::from_str(s).map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::bundle_stats;
    use crate::ingest::validate_bundle;

    fn small() -> SynthSpec {
        SynthSpec {
            n_clusters: 120,
            n_places: 40,
            extent_km: 80.0,
            n_cities: 4,
            densities: Densities {
                poi_points: 600,
                buildings: 2000,
                towers: 80,
                rural_tracks: 100,
                ..Densities::default()
            },
            ..SynthSpec::default()
        }
    }

    #[test]
    fn hermite_asset_encoding() {
        for l in 0u32..=100 {
            let s: u32 = (0..10).map(|j| (l + j) / 10).sum();
            assert_eq!(s, l);
            assert!((0..10).all(|j| (l + j) / 10 <= 10));
        }
    }

    #[test]
    fn generated_bundle_is_valid_and_consistent() {
        let (b, rec) = generate(&small()).unwrap();
        let report = validate_bundle(&b).unwrap();
        assert_eq!(report.clusters_per_year.len(), 2);
        let (_, stats) = bundle_stats(&b).unwrap();
        for (s, t) in stats.iter().zip(&rec.clusters) {
            assert!((s.mu - t.mu).abs() < 1e-9);
            assert!((s.sigma - t.sigma).abs() < 1e-9);
        }
        let mu: Vec<f64> = stats.iter().map(|s| s.mu).collect();
        let sigma: Vec<f64> = stats.iter().map(|s| s.sigma).collect();
        assert!(eval::pearson(&mu, &sigma).unwrap() > 0.0);
    }

    #[test]
    fn deterministic_and_noise_free() {
        let spec = SynthSpec {
            wealth: WealthSpec {
                bayes_nrmse_mu: None,
                eta_mu: 0.0,
                ..WealthSpec::default()
            },
            ..small()
        };
        let (b1, r1) = generate(&spec).unwrap();
        let (b2, r2) = generate(&spec).unwrap();
        assert_eq!(b1.fingerprint(), b2.fingerprint());
        assert_eq!(r1, r2);
        assert_eq!(bayes_nrmse(&r1).closed_form_mu, 0.0);
        for t in &r1.clusters {
            assert_eq!(t.m, t.signal);
        }
    }

    #[test]
    fn urban_share_zero() {
        let (b, _) = generate(&SynthSpec { urban_share: 0.0, ..small() }).unwrap();
        assert!(b.clusters.iter().all(|c| c.settlement == Settlement::Rural));
    }

    #[test]
    fn bayes_monotone_in_eta() {
        let mut last = -1.0;
        for eta in [0.0, 2.0, 5.0, 10.0] {
            let spec = SynthSpec {
                wealth: WealthSpec {
                    bayes_nrmse_mu: None,
                    eta_mu: eta,
                    ..WealthSpec::default()
                },
                ..small()
            };
            let b = bayes_nrmse(&generate(&spec).unwrap().1);
            assert!(b.mu > last);
            last = b.mu;
        }
    }
}
