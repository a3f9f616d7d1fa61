//! Household wealth scores, cluster aggregation and cluster relocation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_km, GeoPoint, SpatialIndex};
use crate::ingest::{Cluster, DatasetBundle, FixedIwiWeights, Household, Place, Settlement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundTruthError {
    #[error("asset matrix is degenerate: {0}")]
    DegenerateMatrix(String),
    #[error("weight vector has {got} entries, matrix has {expected} columns")]
    WeightDimensionMismatch { expected: usize, got: usize },
    #[error("cluster `{0}` has no households")]
    EmptyCluster(String),
    #[error("household references unknown cluster `{0}`")]
    UnknownCluster(String),
    #[error("all values are zero")]
    AllZero,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Household-by-asset answers, numeric.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AssetMatrix {
    pub fn from_households(names: Vec<String>, households: &[Household]) -> Self {
        let rows = households
            .iter()
            .map(|h| h.assets.iter().map(|&a| a as f64).collect())
            .collect();
        Self { names, rows }
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }
}

/// Linear scoring rule: `iwi = 100 * (Σ loading_j (x_j - center_j) / scale_j - offset) / span`,
/// clipped to `[0, 100]`. Columns with zero scale contribute nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetWeights {
    pub loadings: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub offset: f64,
    pub span: f64,
}

impl AssetWeights {
    /// Fixed published-style table: `iwi = constant + Σ w_j x_j`.
    pub fn fixed(table: &FixedIwiWeights) -> Self {
        let n = table.weights.len();
        Self {
            loadings: table.weights.clone(),
            center: vec![0.0; n],
            scale: vec![1.0; n],
            offset: -table.constant,
            span: 100.0,
        }
    }

    fn raw_score(&self, row: &[f64]) -> f64 {
        row.iter()
            .enumerate()
            .map(|(j, &x)| {
                if self.scale[j] > 0.0 {
                    self.loadings[j] * (x - self.center[j]) / self.scale[j]
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// First principal component of the column-standardized asset matrix, with
/// a min-max rescale over the same households.
pub fn compute_asset_weights(m: &AssetMatrix) -> Result<AssetWeights, GroundTruthError> {
    let n = m.rows.len();
    let p = m.n_cols();
    if n < 2 {
        return Err(GroundTruthError::DegenerateMatrix("need at least 2 households".into()));
    }
    let mut center = vec![0.0; p];
    let mut scale = vec![0.0; p];
    for j in 0..p {
        let mean = m.rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = m.rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        center[j] = mean;
        scale[j] = if var > 1e-24 { var.sqrt() } else { 0.0 };
    }
    let kept: Vec<usize> = (0..p).filter(|&j| scale[j] > 0.0).collect();
    if kept.is_empty() {
        return Err(GroundTruthError::DegenerateMatrix("all columns are constant".into()));
    }
    let k = kept.len();
    let mut corr = vec![vec![0.0; k]; k];
    for (a, &ja) in kept.iter().enumerate() {
        for (b, &jb) in kept.iter().enumerate().skip(a) {
            let c = m
                .rows
                .iter()
                .map(|r| (r[ja] - center[ja]) / scale[ja] * (r[jb] - center[jb]) / scale[jb])
                .sum::<f64>()
                / n as f64;
            corr[a][b] = c;
            corr[b][a] = c;
        }
    }
    let (values, vectors) = jacobi_eigen(corr);
    let top = (0..k)
        .max_by(|&a, &b| values[a].total_cmp(&values[b]).then(b.cmp(&a)))
        .expect("k > 0");
    let mut loadings = vec![0.0; p];
    for (a, &j) in kept.iter().enumerate() {
        loadings[j] = vectors[a][top];
    }
    let norm = loadings.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if loadings.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    for l in &mut loadings {
        *l *= sign / norm;
    }
    let mut w = AssetWeights {
        loadings,
        center,
        scale,
        offset: 0.0,
        span: 1.0,
    };
    let scores: Vec<f64> = m.rows.iter().map(|r| w.raw_score(r)).collect();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return Err(GroundTruthError::DegenerateMatrix("scores have zero range".into()));
    }
    w.offset = lo;
    w.span = hi - lo;
    Ok(w)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues and a matrix whose columns are the eigenvectors.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Per-household IWI in `[0, 100]`.
pub fn compute_iwi(m: &AssetMatrix, w: &AssetWeights) -> Result<Vec<f64>, GroundTruthError> {
    for len in [w.loadings.len(), w.center.len(), w.scale.len()] {
        if len != m.n_cols() {
            return Err(GroundTruthError::WeightDimensionMismatch {
                expected: m.n_cols(),
                got: len,
            });
        }
    }
    Ok(m.rows
        .iter()
        .map(|r| (100.0 * (w.raw_score(r) - w.offset) / w.span).clamp(0.0, 100.0))
        .collect())
}

/// Aggregated wealth statistics of one survey cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IwiStats {
    pub cluster_id: String,
    pub mu: f64,
    pub sigma: f64,
    pub n_households: usize,
    pub settlement: Settlement,
    pub year: i32,
}

/// Mean and population standard deviation of household scores per cluster,
/// in cluster-table order.
pub fn aggregate_clusters(
    households: &[Household],
    scores: &[f64],
    clusters: &[Cluster],
) -> Result<Vec<IwiStats>, GroundTruthError> {
    if households.len() != scores.len() {
        return Err(GroundTruthError::Invalid("one score per household required".into()));
    }
    let pos: HashMap<&str, usize> = clusters
        .iter()
        .enumerate()
        .map(|(i, c)| (c.cluster_id.as_str(), i))
        .collect();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); clusters.len()];
    for (h, &s) in households.iter().zip(scores) {
        let i = *pos
            .get(h.cluster_id.as_str())
            .ok_or_else(|| GroundTruthError::UnknownCluster(h.cluster_id.clone()))?;
        members[i].push(s);
    }
    clusters
        .iter()
        .zip(members)
        .map(|(c, mut vals)| {
            if vals.is_empty() {
                return Err(GroundTruthError::EmptyCluster(c.cluster_id.clone()));
            }
            if vals.len() == 1 {
                log::warn!("cluster {} has a single household; sigma = 0", c.cluster_id);
            }
            // Sorting makes the sums independent of household order.
            vals.sort_by(f64::total_cmp);
            let n = vals.len() as f64;
            let mu = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            Ok(IwiStats {
                cluster_id: c.cluster_id.clone(),
                mu,
                sigma: var.sqrt(),
                n_households: vals.len(),
                settlement: c.settlement,
                year: c.year,
            })
        })
        .collect()
}

/// Scores every household of the bundle (PCA weights unless the bundle
/// carries a fixed table) and aggregates per cluster.
pub fn bundle_stats(bundle: &DatasetBundle) -> Result<(AssetWeights, Vec<IwiStats>), GroundTruthError> {
    let m = AssetMatrix::from_households(
        bundle.assets.iter().map(|a| a.name.clone()).collect(),
        &bundle.households,
    );
    let w = match &bundle.iwi_weights {
        Some(t) => AssetWeights::fixed(t),
        None => compute_asset_weights(&m)?,
    };
    let scores = compute_iwi(&m, &w)?;
    let stats = aggregate_clusters(&bundle.households, &scores, &bundle.clusters)?;
    Ok((w, stats))
}

/// Gini coefficient via the mean absolute pairwise difference.
pub fn gini(values: &[f64]) -> Result<f64, GroundTruthError> {
    if values.is_empty() || values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(GroundTruthError::Invalid("gini needs non-negative finite values".into()));
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let total: f64 = x.iter().sum();
    if total == 0.0 {
        return Err(GroundTruthError::AllZero);
    }
    // Σ_ij |x_i - x_j| = 2 Σ_i (2i - n + 1) x_(i) over sorted values.
    let pairwise: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v)
        .sum::<f64>()
        * 2.0;
    Ok(pairwise / (2.0 * n * total))
}

/// Equal-width binning over `[min, max]`; the last bin is right-closed.
/// Constant input maps every value to bin 0.
pub fn discretize_equal_width(values: &[f64], k: usize) -> Result<Vec<usize>, GroundTruthError> {
    if k < 2 {
        return Err(GroundTruthError::Invalid("need k >= 2 bins".into()));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        log::warn!("discretize_equal_width: constant values, single bin");
        return Ok(vec![0; values.len()]);
    }
    let width = (hi - lo) / k as f64;
    Ok(values
        .iter()
        .map(|v| (((v - lo) / width).floor() as usize).min(k - 1))
        .collect())
}

// ---------------------------------------------------------------------------
// Relocation
// ---------------------------------------------------------------------------

pub const URBAN_RADIUS_KM: f64 = 2.0;
pub const RURAL_RADIUS_KM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelocationMode {
    /// Keep every noisy location.
    None,
    /// Relocate rural clusters only.
    Rc,
    /// Relocate rural and urban clusters.
    Ruc,
}

impl RelocationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RelocationMode::None => "none",
            RelocationMode::Rc => "rc",
            RelocationMode::Ruc => "ruc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(Self::None),
            "rc" => Some(Self::Rc),
            "ruc" => Some(Self::Ruc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Assignment {
    Place { place_id: String, distance_km: f64 },
    KeepNoisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocationPlan {
    pub mode: RelocationMode,
    pub assignments: BTreeMap<String, Assignment>,
}

impl RelocationPlan {
    pub fn relocated_count(&self) -> usize {
        self.assignments
            .values()
            .filter(|a| matches!(a, Assignment::Place { .. }))
            .count()
    }

    /// Cluster coordinates after applying the plan.
    pub fn apply(&self, clusters: &[Cluster], places: &[Place]) -> Vec<GeoPoint> {
        let by_id: HashMap<&str, GeoPoint> = places.iter().map(|p| (p.place_id.as_str(), p.point)).collect();
        clusters
            .iter()
            .map(|c| match self.assignments.get(&c.cluster_id) {
                Some(Assignment::Place { place_id, .. }) => by_id[place_id.as_str()],
                _ => c.point,
            })
            .collect()
    }

    /// CSV rows `cluster_id,place_id|keep_noisy,distance_km`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster_id,place_id,distance_km\n");
        for (cid, a) in &self.assignments {
            match a {
                Assignment::Place { place_id, distance_km } => {
                    out.push_str(&format!("{cid},{place_id},{distance_km}\n"))
                }
                Assignment::KeepNoisy => out.push_str(&format!("{cid},keep_noisy,\n")),
            }
        }
        out
    }
}

pub fn relocation_radius_km(s: Settlement) -> f64 {
    match s {
        Settlement::Urban => URBAN_RADIUS_KM,
        Settlement::Rural => RURAL_RADIUS_KM,
    }
}

/// Greedy matching of clusters to same-settlement populated places.
///
/// Each cluster's candidates are the same-settlement places within its
/// displacement radius. The unassigned cluster with the fewest remaining
/// candidates (ties: smaller cluster id) takes its nearest remaining
/// candidate (ties: smaller place id); that place is then withdrawn from all
/// other candidate sets. Clusters left without candidates keep their noisy
/// location.
pub fn relocate(clusters: &[Cluster], places: &[Place], mode: RelocationMode) -> RelocationPlan {
    let mut assignments: BTreeMap<String, Assignment> = clusters
        .iter()
        .map(|c| (c.cluster_id.clone(), Assignment::KeepNoisy))
        .collect();
    if mode == RelocationMode::None || places.is_empty() {
        return RelocationPlan { mode, assignments };
    }
    let index = SpatialIndex::build(places.iter().enumerate().map(|(i, p)| (i, p.point)).collect());

    // candidate lists: (distance, place_id, place slot)
    let mut candidates: Vec<(usize, Vec<(f64, usize)>)> = Vec::new();
    for (ci, c) in clusters.iter().enumerate() {
        if mode == RelocationMode::Rc && c.settlement == Settlement::Urban {
            continue;
        }
        let r = relocation_radius_km(c.settlement);
        let mut cand: Vec<(f64, usize)> = index
            .within_radius(&c.point, r)
            .expect("positive radius")
            .into_iter()
            .filter(|&s| places[s].kind.settlement() == c.settlement)
            .map(|s| (haversine_km(&c.point, &places[s].point), s))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| places[a.1].place_id.cmp(&places[b.1].place_id)));
        if !cand.is_empty() {
            candidates.push((ci, cand));
        }
    }

    let mut taken = vec![false; places.len()];
    let mut done = vec![false; candidates.len()];
    loop {
        let mut pick: Option<(usize, usize)> = None; // (remaining count, candidate entry)
        for (e, (ci, cand)) in candidates.iter().enumerate() {
            if done[e] {
                continue;
            }
            let remaining = cand.iter().filter(|(_, s)| !taken[*s]).count();
            if remaining == 0 {
                continue;
            }
            let better = match pick {
                None => true,
                Some((best_n, best_e)) => {
                    remaining < best_n
                        || (remaining == best_n
                            && clusters[*ci].cluster_id < clusters[candidates[best_e].0].cluster_id)
                }
            };
            if better {
                pick = Some((remaining, e));
            }
        }
        let Some((_, e)) = pick else { break };
        let (ci, cand) = &candidates[e];
        let &(d, slot) = cand.iter().find(|(_, s)| !taken[*s]).expect("remaining > 0");
        taken[slot] = true;
        done[e] = true;
        assignments.insert(
            clusters[*ci].cluster_id.clone(),
            Assignment::Place {
                place_id: places[slot].place_id.clone(),
                distance_km: d,
            },
        );
    }
    RelocationPlan { mode, assignments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PlaceKind;

    fn cluster(id: &str, lat: f64, lon: f64, s: Settlement) -> Cluster {
        Cluster {
            cluster_id: id.into(),
            point: GeoPoint::new(lat, lon).unwrap(),
            year: 2016,
            settlement: s,
        }
    }

    fn place(id: &str, lat: f64, lon: f64, kind: PlaceKind) -> Place {
        Place {
            place_id: id.into(),
            point: GeoPoint::new(lat, lon).unwrap(),
            kind,
        }
    }

    #[test]
    fn correlated_pair_loads_equally() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let a = (i % 5) as f64;
                vec![a, 2.0 * a + 1.0, ((i * 7) % 3) as f64 * 0.0]
            })
            .collect();
        let m = AssetMatrix {
            names: vec!["a".into(), "b".into(), "c".into()],
            rows,
        };
        let w = compute_asset_weights(&m).unwrap();
        assert!((w.loadings[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((w.loadings[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert_eq!(w.loadings[2], 0.0);
    }

    #[test]
    fn constant_matrix_is_degenerate() {
        let m = AssetMatrix {
            names: vec!["a".into(), "b".into()],
            rows: vec![vec![1.0, 0.0]; 4],
        };
        assert!(matches!(compute_asset_weights(&m), Err(GroundTruthError::DegenerateMatrix(_))));
    }

    #[test]
    fn iwi_endpoints_and_mismatch() {
        let rows = vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 2.0, 1.0],
        ];
        let m = AssetMatrix {
            names: vec!["a".into(), "b".into(), "c".into()],
            rows,
        };
        let w = compute_asset_weights(&m).unwrap();
        let iwi = compute_iwi(&m, &w).unwrap();
        assert!(iwi[0].abs() < 1e-9);
        assert!((iwi[1] - 100.0).abs() < 1e-9);
        assert_eq!(iwi[1], iwi[4]);

        let mut bad = w.clone();
        bad.loadings.pop();
        assert!(matches!(
            compute_iwi(&m, &bad),
            Err(GroundTruthError::WeightDimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn aggregation_uses_population_sigma() {
        let clusters = vec![
            cluster("a", 0.0, 0.0, Settlement::Rural),
            cluster("b", 0.0, 0.0, Settlement::Rural),
            cluster("c", 0.0, 0.0, Settlement::Rural),
        ];
        let hh = |id: &str, c: &str| Household {
            household_id: id.into(),
            cluster_id: c.into(),
            assets: vec![],
        };
        let households = vec![hh("1", "a"), hh("2", "a"), hh("3", "b"), hh("4", "b"), hh("5", "c")];
        let stats = aggregate_clusters(&households, &[10.0, 10.0, 0.0, 100.0, 42.0], &clusters).unwrap();
        assert_eq!((stats[0].mu, stats[0].sigma), (10.0, 0.0));
        assert_eq!((stats[1].mu, stats[1].sigma), (50.0, 50.0));
        assert_eq!((stats[2].mu, stats[2].sigma, stats[2].n_households), (42.0, 0.0, 1));

        let err = aggregate_clusters(&households[..2], &[1.0, 2.0], &clusters).unwrap_err();
        assert_eq!(err, GroundTruthError::EmptyCluster("b".into()));
    }

    #[test]
    fn gini_cases() {
        assert_eq!(gini(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((gini(&[0.0, 100.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(gini(&[0.0, 0.0]), Err(GroundTruthError::AllZero));
        let x: [f64; 5] = [1.0, 5.0, 2.0, 9.0, 0.5];
        let brute: f64 = x.iter().flat_map(|a| x.iter().map(move |b| (a - b).abs())).sum::<f64>()
            / (2.0 * 25.0 * (x.iter().sum::<f64>() / 5.0));
        assert!((gini(&x).unwrap() - brute).abs() < 1e-12);
        let scaled: Vec<f64> = x.iter().map(|v| v * 3.7).collect();
        assert!((gini(&scaled).unwrap() - gini(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn equal_width_bins() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let b = discretize_equal_width(&v, 10).unwrap();
        assert_eq!(b[50], 5);
        assert_eq!(b[100], 9);
        assert_eq!(b[0], 0);
        assert_eq!(discretize_equal_width(&[4.0; 3], 10).unwrap(), vec![0, 0, 0]);
        assert!(discretize_equal_width(&v, 1).is_err());
    }

    #[test]
    fn contested_place_goes_to_cluster_with_fewer_candidates() {
        // B sits between P1 and P2, A only reaches P1; B is nearer to P1.
        let p1 = place("P1", 0.0, 0.0, PlaceKind::Village);
        let p2 = place("P2", 0.0, 0.1, PlaceKind::Village);
        let a = cluster("A", 0.0, -0.05, Settlement::Rural);
        let b = cluster("B", 0.0, 0.03, Settlement::Rural);
        let plan = relocate(&[b.clone(), a.clone()], &[p1, p2], RelocationMode::Ruc);
        let target = |id: &str| match &plan.assignments[id] {
            Assignment::Place { place_id, .. } => place_id.clone(),
            Assignment::KeepNoisy => "noisy".into(),
        };
        assert_eq!(target("A"), "P1");
        assert_eq!(target("B"), "P2");
    }

    #[test]
    fn relocation_modes() {
        let places = vec![
            place("U", 1.0, 1.0, PlaceKind::City),
            place("R", 0.0, 0.0, PlaceKind::Hamlet),
        ];
        let clusters = vec![
            cluster("u1", 1.0, 1.005, Settlement::Urban),
            cluster("r1", 0.0, 0.05, Settlement::Rural),
            cluster("r2", 0.5, 0.5, Settlement::Rural),
        ];
        let none = relocate(&clusters, &places, RelocationMode::None);
        assert!(none.assignments.values().all(|a| *a == Assignment::KeepNoisy));

        let rc = relocate(&clusters, &places, RelocationMode::Rc);
        assert_eq!(rc.assignments["u1"], Assignment::KeepNoisy);
        assert!(matches!(rc.assignments["r1"], Assignment::Place { .. }));
        // far beyond 10 km of any rural place
        assert_eq!(rc.assignments["r2"], Assignment::KeepNoisy);

        let ruc = relocate(&clusters, &places, RelocationMode::Ruc);
        assert!(matches!(&ruc.assignments["u1"], Assignment::Place { place_id, .. } if place_id == "U"));
        assert_eq!(ruc.relocated_count(), 2);
        assert!(ruc.to_csv().contains("r2,keep_noisy,"));
    }
}
