//! Poverty map over populated places: inference, GeoJSON/CSV export and an
//! SVG scatter of predicted mean against dispersion.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval;
use crate::features::{self, FeatureConfig, FeatureError};
use crate::gbrt::{GbrtError, WealthModel};
use crate::geo::GeoPoint;
use crate::ingest::{DatasetBundle, Settlement};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("place `{0}` appears more than once")]
    DuplicatePlace(String),
    #[error("bundle has no survey or nightlight year to query")]
    NoYear,
    #[error("invalid GeoJSON: {0}")]
    InvalidGeoJson(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] GbrtError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub place_id: String,
    pub point: GeoPoint,
    pub settlement: Settlement,
    pub mu: f64,
    pub sigma: f64,
    /// Total population within 1.6 km; `None` without a population layer.
    pub population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovertyMap {
    pub model_fingerprint: String,
    /// Only metadata field allowed to vary between identical runs.
    pub timestamp: Option<String>,
    pub entries: Vec<MapEntry>,
}

pub fn model_fingerprint(model: &WealthModel) -> String {
    let digest = Sha256::digest(serde_json::to_vec(model).expect("serializable"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const POPULATION_COLUMN: &str = "pop_total_population_within_1.6";

/// Predicts every populated place at the bundle's current year.
pub fn infer_places(model: &WealthModel, bundle: &DatasetBundle, cfg: &FeatureConfig) -> Result<PovertyMap, MapError> {
    let mut seen = BTreeSet::new();
    for p in &bundle.places {
        if !seen.insert(p.place_id.as_str()) {
            return Err(MapError::DuplicatePlace(p.place_id.clone()));
        }
    }
    let year = bundle.current_year().ok_or(MapError::NoYear)?;
    let locs = features::place_locations(bundle, year);
    let x = features::assemble(&locs, bundle, cfg)?;
    let pred = model.predict(&x)?;
    let pop_col = x.column_index(POPULATION_COLUMN);
    let entries = locs
        .iter()
        .zip(pred)
        .enumerate()
        .map(|(i, (l, (mu, sigma)))| MapEntry {
            place_id: l.id.clone(),
            point: l.point,
            settlement: l.settlement,
            mu,
            sigma,
            population: pop_col.map(|j| x.get(i, j)).filter(|v| !v.is_nan()),
        })
        .collect();
    Ok(PovertyMap {
        model_fingerprint: model_fingerprint(model),
        timestamp: None,
        entries,
    })
}

impl PovertyMap {
    /// FeatureCollection of Point features, coordinates `[lon, lat]`.
    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .entries
            .iter()
            .map(|e| {
                json!({
                    "type": "Feature",
                    "id": e.place_id,
                    "geometry": {"type": "Point", "coordinates": [e.point.lon, e.point.lat]},
                    "properties": {
                        "mu": e.mu,
                        "sigma": e.sigma,
                        "settlement": e.settlement.as_str(),
                        "population": e.population,
                    }
                })
            })
            .collect();
        json!({
            "type": "FeatureCollection",
            "model_fingerprint": self.model_fingerprint,
            "timestamp": self.timestamp,
            "features": features,
        })
    }

    pub fn to_geojson_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_geojson()).expect("serializable")
    }

    pub fn from_geojson(doc: &Value) -> Result<Self, MapError> {
        let bad = |m: &str| MapError::InvalidGeoJson(m.to_string());
        if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(bad("top-level type must be FeatureCollection"));
        }
        let feats = doc.get("features").and_then(Value::as_array).ok_or_else(|| bad("missing features array"))?;
        let mut entries = Vec::with_capacity(feats.len());
        for f in feats {
            if f.get("type").and_then(Value::as_str) != Some("Feature") {
                return Err(bad("member of features is not a Feature"));
            }
            let geom = f.get("geometry").ok_or_else(|| bad("feature without geometry"))?;
            if geom.get("type").and_then(Value::as_str) != Some("Point") {
                return Err(bad("geometry must be a Point"));
            }
            let c = geom
                .get("coordinates")
                .and_then(Value::as_array)
                .filter(|c| c.len() == 2)
                .ok_or_else(|| bad("Point needs two coordinates"))?;
            let (lon, lat) = (
                c[0].as_f64().ok_or_else(|| bad("non-numeric longitude"))?,
                c[1].as_f64().ok_or_else(|| bad("non-numeric latitude"))?,
            );
            let point = GeoPoint::new(lat, lon).map_err(|e| MapError::InvalidGeoJson(e.to_string()))?;
            let props = f.get("properties").and_then(Value::as_object).ok_or_else(|| bad("missing properties"))?;
            let num = |k: &str| props.get(k).and_then(Value::as_f64).ok_or_else(|| bad(&format!("property `{k}` must be a number")));
            let settlement = props
                .get("settlement")
                .and_then(Value::as_str)
                .and_then(Settlement::parse)
                .ok_or_else(|| bad("property `settlement` must be rural or urban"))?;
            let population = match props.get("population") {
                None | Some(Value::Null) => None,
                Some(v) => Some(v.as_f64().ok_or_else(|| bad("population must be a number or null"))?),
            };
            entries.push(MapEntry {
                place_id: f
                    .get("id")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad("feature id must be a string"))?
                    .to_string(),
                point,
                settlement,
                mu: num("mu")?,
                sigma: num("sigma")?,
                population,
            });
        }
        Ok(PovertyMap {
            model_fingerprint: doc.get("model_fingerprint").and_then(Value::as_str).unwrap_or_default().to_string(),
            timestamp: doc.get("timestamp").and_then(Value::as_str).map(String::from),
            entries,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("place_id,lat,lon,settlement,mu,sigma,population\n");
        for e in &self.entries {
            let pop = e.population.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.place_id,
                e.point.lat,
                e.point.lon,
                e.settlement.as_str(),
                e.mu,
                e.sigma,
                pop
            );
        }
        s
    }

    pub fn scatter_points(&self) -> Vec<ScatterPoint> {
        self.entries
            .iter()
            .map(|e| ScatterPoint {
                mu: e.mu,
                sigma: e.sigma,
                settlement: e.settlement,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub mu: f64,
    pub sigma: f64,
    pub settlement: Settlement,
}

/// Data extent widened by 5% of the span on each side; a degenerate
/// extent is widened by 1 instead.
pub fn axis_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        (lo - 0.05 * span, hi + 0.05 * span)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

/// Quadratic least squares, dropping to the highest degree the distinct
/// x values support.
fn group_fit(x: &[f64], y: &[f64]) -> [f64; 3] {
    if let Ok(c) = eval::poly2_fit(x, y) {
        return c;
    }
    let my = eval::mean(y);
    let mx = eval::mean(x);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx > 0.0 {
        let slope = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
        [my - slope * mx, slope, 0.0]
    } else {
        [my, 0.0, 0.0]
    }
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 60.0;
const CURVE_STEPS: usize = 64;

/// Self-contained SVG: one circle per point coloured by settlement and one
/// fitted curve per non-empty settlement group.
pub fn render_scatter(points: &[ScatterPoint]) -> String {
    let mus: Vec<f64> = points.iter().map(|p| p.mu).collect();
    let sigmas: Vec<f64> = points.iter().map(|p| p.sigma).collect();
    let (x0, x1) = axis_range(&mus);
    let (y0, y1) = axis_range(&sigmas);
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" data-x-range="{x0} {x1}" data-y-range="{y0} {y1}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<line class="axis" x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">predicted mean IWI</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">predicted IWI standard deviation</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, label) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(s, r#"<text class="tick" x="{:.3}" y="{}" text-anchor="middle">{label:.1}</text>"#, sx(v), H - PAD + 18.0);
    }
    for (v, label) in [(y0, y0), (y1, y1)] {
        let _ = writeln!(s, r#"<text class="tick" x="{}" y="{:.3}" text-anchor="end">{label:.1}</text>"#, PAD - 6.0, sy(v));
    }

    for (settlement, colour) in [(Settlement::Rural, "#d95f02"), (Settlement::Urban, "#1b9e77")] {
        let group: Vec<&ScatterPoint> = points.iter().filter(|p| p.settlement == settlement).collect();
        for p in &group {
            let _ = writeln!(
                s,
                r#"<circle class="point {}" cx="{:.3}" cy="{:.3}" r="2.5" fill="{colour}" fill-opacity="0.6"/>"#,
                settlement.as_str(),
                sx(p.mu),
                sy(p.sigma)
            );
        }
        if group.is_empty() {
            continue;
        }
        let gx: Vec<f64> = group.iter().map(|p| p.mu).collect();
        let gy: Vec<f64> = group.iter().map(|p| p.sigma).collect();
        let c = group_fit(&gx, &gy);
        let (lo, hi) = (gx.iter().copied().fold(f64::INFINITY, f64::min), gx.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let mut d = String::new();
        for k in 0..=CURVE_STEPS {
            let x = lo + (hi - lo) * k as f64 / CURVE_STEPS as f64;
            let y = c[0] + c[1] * x + c[2] * x * x;
            let _ = write!(d, "{}{:.3},{:.3} ", if k == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let _ = writeln!(
            s,
            r#"<path class="fit {}" d="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            settlement.as_str(),
            d.trim_end()
        );
    }
    s.push_str("</svg>\n");
    s
}
