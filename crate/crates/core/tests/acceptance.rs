//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! and then asserts, so a failing criterion is visible in the output even
//! when the assertion stops the test.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use povmap::eval::{self, CountryEval};
use povmap::features::{self, FeatureConfig, FeatureMatrix, FeatureSource, MobilityGraph};
use povmap::gbrt::{self, Hyperparams, TargetMode, WealthModel};
use povmap::geo::{haversine_km, BBox, GeoPoint, SpatialIndex};
use povmap::groundtruth::{self, relocate, Assignment, RelocationMode};
use povmap::ingest::{Cluster, MovementTile, Place, PlaceKind, Settlement};
use povmap::mapgen::{self, PovertyMap};
use povmap::pipeline::{self, ExperimentConfig, TrainOutput, WeightConfig, WeightScheme};
use povmap::synth::{self, CalibrationMode, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written to the process stdout directly so the line survives the test
/// harness's output capture.
fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2} {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn random_point(rng: &mut ChaCha8Rng, lat: (f64, f64), lon: (f64, f64)) -> GeoPoint {
    GeoPoint::new(rng.random_range(lat.0..lat.1), rng.random_range(lon.0..lon.1)).unwrap()
}

#[test]
fn c01_spatial_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    let mut queries = 0usize;
    for f in 0..50 {
        let n = rng.random_range(1..=10_000usize);
        // Mix a regional fixture with a few global and high-latitude ones.
        let (lat, lon) = match f % 5 {
            0 => ((-89.0, 89.0), (-180.0, 180.0)),
            1 => ((60.0, 85.0), (170.0, 180.0)),
            _ => ((7.0, 10.0), (-13.0, -10.5)),
        };
        let mut pts: Vec<GeoPoint> = (0..n).map(|_| random_point(&mut rng, lat, lon)).collect();
        // Exact duplicates exercise the smallest-id tie rule.
        for i in 0..n / 20 {
            pts[n - 1 - i] = pts[i];
        }
        // Ids deliberately not in insertion order.
        let ids: Vec<u64> = (0..n as u64).map(|i| (i * 7919) % (n as u64 * 7919 + 1)).collect();
        let index = SpatialIndex::build(ids.iter().copied().zip(pts.iter().copied()).collect());
        for _ in 0..100 {
            queries += 1;
            let q = if rng.random_bool(0.2) {
                pts[rng.random_range(0..n)]
            } else {
                random_point(&mut rng, lat, lon)
            };
            let d: Vec<f64> = pts.iter().map(|p| haversine_km(&q, p)).collect();
            let best = (0..n)
                .min_by(|&a, &b| d[a].total_cmp(&d[b]).then(ids[a].cmp(&ids[b])))
                .unwrap();
            let hit = index.nearest(&q).unwrap();
            if ids[hit.slot] != ids[best] || hit.distance_km != d[best] {
                mismatches += 1;
            }
            let r = rng.random_range(0.5..50.0);
            let brute: Vec<usize> = (0..n).filter(|&i| d[i] <= r).collect();
            if index.within_radius(&q, r).unwrap() != brute {
                mismatches += 1;
            }
            let bbox = BBox::new(q, rng.random_range(0.5..80.0)).unwrap();
            let brute: Vec<usize> = (0..n).filter(|&i| bbox.contains(&pts[i])).collect();
            if index.within_bbox(&bbox) != brute {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = mismatches == 0 && secs < 30.0;
    report(1, "spatial oracle", ok, &format!("{queries} queries, {mismatches} mismatches, {secs:.1}s"));
    assert!(ok);
}

#[test]
fn c02_feature_count_contract() {
    let spec = SynthSpec {
        n_clusters: 60,
        n_places: 20,
        include_embeddings: true,
        ..SynthSpec::default()
    };
    let (bundle, _) = synth::generate(&spec).unwrap();
    let locs = features::cluster_locations(&bundle, &bundle.clusters.iter().map(|c| c.point).collect::<Vec<_>>());
    let with = features::assemble(&locs, &bundle, &FeatureConfig::default()).unwrap();
    let cfg = FeatureConfig {
        include_embeddings: false,
        ..FeatureConfig::default()
    };
    let without = features::assemble(&locs, &bundle, &cfg).unwrap();
    let counts = without.source_counts();
    let partition: Vec<usize> = FeatureSource::METADATA.iter().map(|s| counts.get(s).copied().unwrap_or(0)).collect();
    let ok = without.n_cols() == 173
        && partition == [9, 27, 37, 54, 9, 36, 1]
        && with.n_cols() == 957
        && with.metadata_width() == 173;
    report(
        2,
        "feature-count contract",
        ok,
        &format!("metadata {} partition {:?}, with embeddings {}", without.n_cols(), partition, with.n_cols()),
    );
    assert!(ok);
}

/// Stationary distribution from `(I - d Pᵀ) x = (1 - d)/n · 1`, where
/// dangling rows of `P` are uniform.
fn pagerank_dense(n: usize, edges: &[(usize, usize, f64)], damping: f64) -> Vec<f64> {
    let mut p = DMatrix::<f64>::zeros(n, n);
    for &(f, t, w) in edges {
        p[(f, t)] += w;
    }
    for i in 0..n {
        let s: f64 = p.row(i).sum();
        for j in 0..n {
            p[(i, j)] = if s > 0.0 { p[(i, j)] / s } else { 1.0 / n as f64 };
        }
    }
    let a = DMatrix::<f64>::identity(n, n) - p.transpose() * damping;
    let b = DVector::<f64>::from_element(n, (1.0 - damping) / n as f64);
    a.lu().solve(&b).unwrap().iter().copied().collect()
}

#[test]
fn c03_pagerank() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_sum, mut worst_val) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..=10usize);
        let density = rng.random_range(0.0..0.6);
        let mut edges = Vec::new();
        for f in 0..n {
            for t in 0..n {
                if rng.random_bool(density) {
                    edges.push((f, t, rng.random_range(0.1..100.0)));
                }
            }
        }
        let g = MobilityGraph {
            nodes: (0..n)
                .map(|i| MovementTile {
                    tile_id: format!("t{i}"),
                    point: GeoPoint::new(0.0, i as f64 * 0.1).unwrap(),
                })
                .collect(),
            edges: edges.iter().map(|&(f, t, w)| ((f, t), w)).collect(),
        };
        for weighted in [false, true] {
            let got = features::pagerank(&g, weighted, 0.85, 1e-12);
            let oracle_edges: Vec<(usize, usize, f64)> =
                edges.iter().map(|&(f, t, w)| (f, t, if weighted { w } else { 1.0 })).collect();
            let want = pagerank_dense(n, &oracle_edges, 0.85);
            worst_sum = worst_sum.max((got.iter().sum::<f64>() - 1.0).abs());
            for (a, b) in got.iter().zip(&want) {
                worst_val = worst_val.max((a - b).abs());
            }
        }
    }
    let ok = worst_sum <= 1e-8 && worst_val <= 1e-8;
    report(3, "pagerank", ok, &format!("max |sum-1| {worst_sum:.2e}, max |x-oracle| {worst_val:.2e}"));
    assert!(ok);
}

fn matrix(values: &[Vec<f64>]) -> FeatureMatrix {
    let p = values[0].len();
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    FeatureMatrix::from_rows(names, values)
}

struct Stump {
    threshold: f64,
    feature: usize,
    left: [f64; 2],
    right: [f64; 2],
}

/// Exhaustive best stump on residuals from the weighted mean, with weights
/// rescaled to mean 1 and leaf values `lr · G / (W + λ)`.
fn stump_oracle(x: &[Vec<f64>], y: &[[f64; 2]], w: &[f64], hp: &Hyperparams) -> Option<Stump> {
    let n = x.len();
    let mean_w = w.iter().sum::<f64>() / n as f64;
    let w: Vec<f64> = w.iter().map(|v| v / mean_w).collect();
    let wt: f64 = w.iter().sum();
    let base: Vec<f64> = (0..2).map(|t| (0..n).map(|i| w[i] * y[i][t]).sum::<f64>() / wt).collect();
    let r: Vec<[f64; 2]> = y.iter().map(|v| [v[0] - base[0], v[1] - base[1]]).collect();
    let l2 = hp.l2_leaf_reg;
    let side = |rows: &[usize]| -> ([f64; 2], f64) {
        let mut g = [0.0; 2];
        let mut wsum = 0.0;
        for &i in rows {
            g[0] += w[i] * r[i][0];
            g[1] += w[i] * r[i][1];
            wsum += w[i];
        }
        (g, wsum)
    };
    let score = |(g, ws): ([f64; 2], f64)| (g[0] * g[0] + g[1] * g[1]) / (ws + l2);
    let all: Vec<usize> = (0..n).collect();
    let parent = score(side(&all));
    let mut best: Option<(f64, Stump)> = None;
    for j in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|row| row[j]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let thr = pair[0] + (pair[1] - pair[0]) / 2.0;
            let (l, rr): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[i][j] <= thr);
            if l.len() < hp.min_samples_leaf || rr.len() < hp.min_samples_leaf {
                continue;
            }
            let (sl, sr) = (side(&l), side(&rr));
            let gain = score(sl) + score(sr) - parent;
            if gain <= 1e-12 * (1.0 + parent) {
                continue;
            }
            if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                let leaf = |(g, ws): ([f64; 2], f64)| [hp.learning_rate * g[0] / (ws + l2), hp.learning_rate * g[1] / (ws + l2)];
                best = Some((
                    gain,
                    Stump {
                        threshold: thr,
                        feature: j,
                        left: leaf(sl),
                        right: leaf(sr),
                    },
                ));
            }
        }
    }
    best.map(|(_, s)| s)
}

fn weighted_loss(y: &[[f64; 2]], pred: &[Vec<f64>], w: &[f64]) -> f64 {
    y.iter()
        .zip(pred)
        .zip(w)
        .map(|((t, p), wi)| wi * ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2)))
        .sum()
}

#[test]
fn c04_gbrt_stump_and_monotone_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut stump_ok, mut mono_ok) = (0, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(10..=200usize);
        let p = rng.random_range(1..=5usize);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let y: Vec<[f64; 2]> = x
            .iter()
            .map(|r| {
                let s = r.iter().sum::<f64>();
                [50.0 + 8.0 * s.tanh() + rng.random_range(-3.0..3.0), 10.0 + r[0].abs() + rng.random_range(0.0..2.0)]
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let fm = matrix(&x);
        let hp = Hyperparams {
            n_trees: 1,
            max_depth: 1,
            learning_rate: rng.random_range(0.05..1.0),
            min_samples_leaf: rng.random_range(1..=5),
            l2_leaf_reg: rng.random_range(0.0..5.0),
            ..Hyperparams::default()
        };
        let model = gbrt::fit(&fm, &y, &w, &hp).unwrap();
        let oracle = stump_oracle(&x, &y, &w, &hp);
        let matched = match (&oracle, model.trees.first()) {
            (Some(o), Some(t)) => match (&t.nodes[0], &t.nodes.get(1), &t.nodes.get(2)) {
                (
                    gbrt::Node::Split { feature, threshold, .. },
                    Some(gbrt::Node::Leaf { value: l }),
                    Some(gbrt::Node::Leaf { value: r }),
                ) => {
                    let err = (threshold - o.threshold)
                        .abs()
                        .max((l[0] - o.left[0]).abs())
                        .max((l[1] - o.left[1]).abs())
                        .max((r[0] - o.right[0]).abs())
                        .max((r[1] - o.right[1]).abs());
                    worst = worst.max(err);
                    *feature == o.feature && err <= 1e-10
                }
                _ => false,
            },
            (None, None) => true,
            _ => false,
        };
        if matched {
            stump_ok += 1;
        }

        let hp = Hyperparams {
            n_trees: 30,
            max_depth: rng.random_range(1..=4),
            ..hp
        };
        let model = gbrt::fit(&fm, &y, &w, &hp).unwrap();
        let losses: Vec<f64> = (0..=model.trees.len())
            .map(|k| weighted_loss(&y, &model.predict_raw_upto(&fm, k).unwrap(), &w))
            .collect();
        if losses.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)) {
            mono_ok += 1;
        }
    }
    let ok = stump_ok == 50 && mono_ok == 50;
    report(
        4,
        "gbrt stump equivalence",
        ok,
        &format!("{stump_ok}/50 stumps match (max err {worst:.1e}), {mono_ok}/50 monotone losses"),
    );
    assert!(ok);
}

#[test]
fn c05_ens_weights() {
    let mut worst = 0.0f64;
    for beta in [0.0, 0.5, 0.9, 0.999] {
        for n in 1..=1000usize {
            // Effective-number form: 1 / Σ_{k<n} β^k.
            let oracle = 1.0 / (0..n).map(|k| beta_pow(beta, k)).sum::<f64>();
            let got = pipeline::ens_raw_weight(n, beta);
            worst = worst.max(((got - oracle) / oracle).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_mean = 0.0f64;
    for beta in [0.0, 0.5, 0.9, 0.999] {
        let mu: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0f64..1.0).powi(3) * 100.0).collect();
        let w = pipeline::ens_weights(
            &mu,
            &WeightConfig {
                scheme: WeightScheme::Ens,
                beta,
                ..WeightConfig::default()
            },
        )
        .unwrap();
        worst_mean = worst_mean.max((w.iter().sum::<f64>() / w.len() as f64 - 1.0).abs());
    }
    let ok = worst <= 1e-12 && worst_mean <= 1e-12;
    report(5, "ens weights", ok, &format!("max rel err {worst:.1e}, max |mean-1| {worst_mean:.1e}"));
    assert!(ok);
}

fn beta_pow(beta: f64, k: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        beta.powi(k as i32)
    }
}

fn model_json(m: &WealthModel) -> String {
    serde_json::to_string(m).unwrap()
}

#[test]
fn c06_c07_determinism_and_recoverability() {
    let (bundle, record) = synth::generate(&SynthSpec::default()).unwrap();
    let cfg = ExperimentConfig {
        features: FeatureConfig {
            include_embeddings: false,
            ..FeatureConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let a = pipeline::train_final(&bundle, &cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let b = pipeline::train_final(&bundle, &cfg).unwrap();
    let same = a.card.to_json() == b.card.to_json() && model_json(&a.model) == model_json(&b.model);
    report(6, "protocol determinism", same, "two runs, card and model json compared bytewise");

    let bayes = synth::bayes_nrmse(&record);
    let m = &a.card.mean_metrics;
    let ok = m.eps_mu <= 0.50 && m.eps_mu <= bayes.mu + 0.10 && m.eps_sigma <= 1.0 && secs < 600.0;
    report(
        7,
        "end-to-end recoverability",
        ok,
        &format!(
            "eps_mu {:.3} (bayes {:.3}), eps_sigma {:.3} (bayes {:.3}), train {secs:.0}s",
            m.eps_mu, bayes.mu, m.eps_sigma, bayes.sigma
        ),
    );
    assert!(same);
    assert!(ok);
}

fn cluster(id: &str, p: GeoPoint, s: Settlement) -> Cluster {
    Cluster {
        cluster_id: id.into(),
        point: p,
        year: 2019,
        settlement: s,
    }
}

fn place(id: &str, p: GeoPoint, kind: PlaceKind) -> Place {
    Place {
        place_id: id.into(),
        point: p,
        kind,
    }
}

#[test]
fn c08_relocation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let origin = GeoPoint::new(1.0, 32.0).unwrap();
    let mut failures = Vec::new();
    for f in 0..40 {
        let nc = rng.random_range(1..80);
        let np = rng.random_range(0..120);
        let clusters: Vec<Cluster> = (0..nc)
            .map(|i| {
                let s = if rng.random_bool(0.3) { Settlement::Urban } else { Settlement::Rural };
                let p = origin.offset_km(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
                cluster(&format!("c{i:03}"), p, s)
            })
            .collect();
        let places: Vec<Place> = (0..np)
            .map(|i| {
                let kind = [PlaceKind::City, PlaceKind::Town, PlaceKind::Village, PlaceKind::Hamlet][rng.random_range(0..4)];
                let p = origin.offset_km(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
                place(&format!("p{i:03}"), p, kind)
            })
            .collect();
        let by_id: HashMap<&str, &Place> = places.iter().map(|p| (p.place_id.as_str(), p)).collect();
        for mode in [RelocationMode::Rc, RelocationMode::Ruc] {
            let plan = relocate(&clusters, &places, mode);
            if plan != relocate(&clusters, &places, mode) {
                failures.push(format!("fixture {f} {mode:?}: nondeterministic"));
            }
            let mut used = BTreeSet::new();
            for c in &clusters {
                if let Assignment::Place { place_id, distance_km } = &plan.assignments[&c.cluster_id] {
                    if !used.insert(place_id.clone()) {
                        failures.push(format!("fixture {f}: {place_id} assigned twice"));
                    }
                    let p = by_id[place_id.as_str()];
                    let d = haversine_km(&c.point, &p.point);
                    if d > groundtruth::relocation_radius_km(c.settlement) || (d - distance_km).abs() > 1e-9 {
                        failures.push(format!("fixture {f}: {} moved {d:.3} km", c.cluster_id));
                    }
                    if p.kind.settlement() != c.settlement {
                        failures.push(format!("fixture {f}: settlement mismatch for {}", c.cluster_id));
                    }
                    if mode == RelocationMode::Rc && c.settlement == Settlement::Urban {
                        failures.push(format!("fixture {f}: rc moved urban {}", c.cluster_id));
                    }
                }
            }
        }
    }
    // Contested place: B is nearer to P but A has no other candidate.
    let p = origin;
    let q = origin.offset_km(0.0, 12.0);
    let a = cluster("a", origin.offset_km(0.0, -6.0), Settlement::Rural);
    let b = cluster("b", origin.offset_km(0.0, 5.0), Settlement::Rural);
    let plan = relocate(&[a, b], &[place("p", p, PlaceKind::Village), place("q", q, PlaceKind::Village)], RelocationMode::Ruc);
    let won = |cid: &str, pid: &str| matches!(&plan.assignments[cid], Assignment::Place { place_id, .. } if place_id == pid);
    if !(won("a", "p") && won("b", "q")) {
        failures.push(format!("contested example: {:?}", plan.assignments));
    }
    let ok = failures.is_empty();
    report(8, "relocation", ok, &format!("{} violations", failures.len()));
    for f in &failures {
        println!("  {f}");
    }
    assert!(ok);
}

#[test]
fn c09_evaluation_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_nrmse = 0.0f64;
    let mut worst_recombine = 0.0f64;
    let mut worst_spread = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(5..500usize);
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let m = eval::mean(&truth);
        worst_nrmse = worst_nrmse.max((eval::nrmse(&truth, &vec![m; n]).unwrap() - 1.0).abs());

        let pred: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-20.0..20.0)).collect();
        let settle: Vec<Settlement> = (0..n)
            .map(|_| if rng.random_bool(0.4) { Settlement::Urban } else { Settlement::Rural })
            .collect();
        let table = eval::intersection_table(&settle, &truth, &pred).unwrap();
        worst_recombine = worst_recombine.max((table.overall_rmse() - eval::rmse(&truth, &pred).unwrap()).abs());

        let bins = eval::quintile_bins(&truth).unwrap();
        let mut sizes = [0usize; 5];
        for b in bins {
            sizes[b] += 1;
        }
        worst_spread = worst_spread.max(sizes.iter().max().unwrap() - sizes.iter().min().unwrap());
    }
    // Urban clusters all richer than any rural one: urban Q1 is empty.
    let truth: Vec<f64> = (0..50).map(|i| i as f64).collect();
    let settle: Vec<Settlement> = (0..50)
        .map(|i| if i >= 25 { Settlement::Urban } else { Settlement::Rural })
        .collect();
    let pred: Vec<f64> = truth.iter().map(|t| t + 1.0).collect();
    let table = eval::intersection_table(&settle, &truth, &pred).unwrap();
    let csv = table.to_csv();
    let urban_q1_absent = table.cells[1][0].is_none() && csv.lines().nth(2).is_some_and(|l| l.starts_with("urban,-,"));

    let ok = worst_nrmse <= 1e-9 && worst_recombine <= 1e-9 && worst_spread <= 1 && urban_q1_absent;
    report(
        9,
        "evaluation identities",
        ok,
        &format!(
            "|nrmse(mean)-1| {worst_nrmse:.1e}, recombine err {worst_recombine:.1e}, bin spread {worst_spread}, urban Q1 absent {urban_q1_absent}"
        ),
    );
    assert!(ok);
}

struct Country {
    name: &'static str,
    x: FeatureMatrix,
    y: Vec<[f64; 2]>,
    mu_range: (f64, f64),
    out: TrainOutput,
}

/// Train on a bundle and keep the held-out rows of the final run.
fn train_country(name: &'static str, spec: &SynthSpec) -> Country {
    let (bundle, record) = synth::generate(spec).unwrap();
    let cfg = ExperimentConfig {
        features: FeatureConfig {
            include_embeddings: false,
            ..FeatureConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let out = pipeline::train_final(&bundle, &cfg).unwrap();
    let all = pipeline::cluster_features(&bundle, RelocationMode::None, &cfg.features).unwrap();
    let last = out.card.runs.len() - 1;
    let rows: HashMap<(&str, i32), usize> = all
        .location_ids
        .iter()
        .zip(&all.years)
        .enumerate()
        .map(|(i, (id, y))| ((id.as_str(), *y), i))
        .collect();
    let test: Vec<_> = out.test_predictions.iter().filter(|t| t.run == last).collect();
    let x = all.select_rows(&test.iter().map(|t| rows[&(t.cluster_id.as_str(), t.year)]).collect::<Vec<_>>());
    let y = test.iter().map(|t| [t.mu_true, t.sigma_true]).collect();
    let mu = record.clusters.iter().map(|c| c.mu);
    let mu_range = (mu.clone().fold(f64::INFINITY, f64::min), mu.fold(f64::NEG_INFINITY, f64::max));
    Country {
        name,
        x,
        y,
        mu_range,
        out,
    }
}

/// A has a wealthy urban segment; B shares A's wealth map but is rural only
/// and spans a narrower development range, so its μ range nests inside A's.
#[test]
fn c10_transfer_asymmetry() {
    let mut spec_a = SynthSpec {
        country_code: "AAA".into(),
        n_clusters: 800,
        seed: 101,
        ..SynthSpec::default()
    };
    spec_a.wealth.urban_bonus = 25.0;
    let (_, rec_a) = synth::generate(&spec_a).unwrap();
    let mut spec_b = SynthSpec {
        country_code: "BBB".into(),
        n_clusters: 800,
        seed: 202,
        urban_share: 0.0,
        development: (0.1, 0.9),
        center: GeoPoint::new(1.3, 32.3).unwrap(),
        ..SynthSpec::default()
    };
    spec_b.wealth.urban_bonus = 25.0;
    spec_b.wealth.calibration = CalibrationMode::Fixed(rec_a.calibration.clone());

    let a = train_country("A", &spec_a);
    let b = train_country("B", &spec_b);
    let (ra, rb) = (a.mu_range, b.mu_range);
    let nested = rb.0 > ra.0 && rb.1 < ra.1;

    let m = eval::transfer(&[
        CountryEval {
            name: a.name,
            model: &a.out.model,
            test_x: &a.x,
            test_y: &a.y,
        },
        CountryEval {
            name: b.name,
            model: &b.out.model,
            test_x: &b.x,
            test_y: &b.y,
        },
    ])
    .unwrap();
    let a_to_b = m.entries[0][1].eps_mu;
    let b_to_a = m.entries[1][0].eps_mu;
    let ok = nested && b_to_a > a_to_b;
    report(
        10,
        "transfer asymmetry",
        ok,
        &format!(
            "mu range A [{:.1}, {:.1}] B [{:.1}, {:.1}], nrmse A->B {a_to_b:.3}, B->A {b_to_a:.3}",
            ra.0, ra.1, rb.0, rb.1
        ),
    );
    print!("{}", m.to_csv());
    assert!(ok);
}

#[test]
fn c11_map_artifacts() {
    let spec = SynthSpec {
        n_clusters: 200,
        n_places: 150,
        ..SynthSpec::default()
    };
    let (bundle, _) = synth::generate(&spec).unwrap();
    let cfg = FeatureConfig {
        include_embeddings: false,
        ..FeatureConfig::default()
    };
    let x = pipeline::cluster_features(&bundle, RelocationMode::None, &cfg).unwrap();
    let (_, stats) = groundtruth::bundle_stats(&bundle).unwrap();
    let y: Vec<[f64; 2]> = stats.iter().map(|s| [s.mu, s.sigma]).collect();
    let hp = Hyperparams {
        n_trees: 40,
        max_depth: 3,
        ..Hyperparams::default()
    };
    let model = WealthModel::fit(&x, &y, &vec![1.0; y.len()], &hp, TargetMode::Joint).unwrap();
    let map = mapgen::infer_places(&model, &bundle, &cfg).unwrap();

    let text = map.to_geojson_string();
    let back = PovertyMap::from_geojson(&serde_json::from_str(&text).unwrap()).unwrap();
    let mut worst = 0.0f64;
    let mut ids_match = back.entries.len() == map.entries.len();
    for (a, b) in map.entries.iter().zip(&back.entries) {
        ids_match &= a.place_id == b.place_id && a.settlement == b.settlement;
        for (u, v) in [
            (a.mu, b.mu),
            (a.sigma, b.sigma),
            (a.point.lat, b.point.lat),
            (a.point.lon, b.point.lon),
            (a.population.unwrap_or(0.0), b.population.unwrap_or(0.0)),
        ] {
            worst = worst.max((u - v).abs());
        }
    }
    let bounded = map.entries.iter().all(|e| (0.0..=100.0).contains(&e.mu) && e.sigma >= 0.0);
    let ok = ids_match && worst <= 1e-9 && bounded && map.entries.len() == bundle.places.len();
    report(
        11,
        "map artifacts",
        ok,
        &format!("{} places, round-trip err {worst:.1e}, outputs in range {bounded}", map.entries.len()),
    );
    assert!(ok);
}
