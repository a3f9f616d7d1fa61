use std::collections::BTreeSet;

use povmap::eval;
use povmap::features::{self, FeatureMatrix};
use povmap::gbrt::{self, GBRTEnsemble, Hyperparams};
use povmap::geo::{haversine_km, GeoPoint, SpatialIndex};
use povmap::groundtruth::{self, relocate, Assignment, AssetMatrix, RelocationMode};
use povmap::ingest::{Cluster, Place, PlaceKind, Settlement};
use povmap::pipeline::{self, WeightConfig, WeightScheme};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = GeoPoint> {
    (-89.0..89.0f64, -180.0..180.0f64).prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

fn regional_point() -> impl Strategy<Value = GeoPoint> {
    (0.0..0.6f64, 30.0..30.6f64).prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn haversine_is_a_metric(a in point(), b in point(), c in point()) {
        let ab = haversine_km(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - haversine_km(&b, &a)).abs() < 1e-9);
        prop_assert!(haversine_km(&a, &a) == 0.0);
        prop_assert!(haversine_km(&a, &c) <= ab + haversine_km(&b, &c) + 1e-9);
    }

    #[test]
    fn nearest_is_minimal(pts in prop::collection::vec(regional_point(), 1..200), q in regional_point()) {
        let index = SpatialIndex::build(pts.iter().copied().enumerate().collect());
        let hit = index.nearest(&q).unwrap();
        let best = pts.iter().map(|p| haversine_km(&q, p)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(hit.distance_km, best);
    }

    #[test]
    fn radius_results_grow_with_radius(pts in prop::collection::vec(regional_point(), 1..200), q in regional_point(), r in 0.1..30.0f64) {
        let index = SpatialIndex::build(pts.iter().copied().enumerate().collect());
        let small: BTreeSet<usize> = index.within_radius(&q, r).unwrap().into_iter().collect();
        let big: BTreeSet<usize> = index.within_radius(&q, 2.0 * r).unwrap().into_iter().collect();
        prop_assert!(small.is_subset(&big));
    }

    #[test]
    fn offset_moves_by_the_requested_distance(p in regional_point(), n in -20.0..20.0f64, e in -20.0..20.0f64) {
        let d = haversine_km(&p, &p.offset_km(n, e));
        let want = (n * n + e * e).sqrt();
        prop_assert!((d - want).abs() <= 0.01 * want + 1e-6);
    }

    #[test]
    fn iwi_scores_stay_in_range(rows in prop::collection::vec(prop::collection::vec(0u32..4, 4), 3..60)) {
        let m = AssetMatrix {
            names: (0..4).map(|j| format!("a{j}")).collect(),
            rows: rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
        };
        if let Ok(w) = groundtruth::compute_asset_weights(&m) {
            let iwi = groundtruth::compute_iwi(&m, &w).unwrap();
            prop_assert!(iwi.iter().all(|v| (0.0..=100.0).contains(v)));
            let lo = iwi.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = iwi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo.abs() < 1e-9 && (hi - 100.0).abs() < 1e-9 || hi == lo);
        }
    }

    #[test]
    fn gini_lies_in_unit_interval(v in prop::collection::vec(0.0..100.0f64, 1..100)) {
        if let Ok(g) = groundtruth::gini(&v) {
            prop_assert!((0.0..1.0).contains(&g));
        }
    }

    #[test]
    fn equal_width_bins_are_in_range_and_monotone(v in prop::collection::vec(-50.0..50.0f64, 1..100), k in 2usize..12) {
        let bins = groundtruth::discretize_equal_width(&v, k).unwrap();
        prop_assert!(bins.iter().all(|&b| b < k));
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(bins[i] <= bins[j]);
                }
            }
        }
    }

    #[test]
    fn quintiles_are_balanced_and_ordered(v in prop::collection::vec(0.0..100.0f64, 5..300)) {
        let bins = eval::quintile_bins(&v).unwrap();
        let mut sizes = [0usize; 5];
        for &b in &bins {
            sizes[b] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(bins[i] <= bins[j]);
                }
            }
        }
    }

    #[test]
    fn nrmse_is_scale_invariant(t in prop::collection::vec(0.0..100.0f64, 3..50), noise in prop::collection::vec(-5.0..5.0f64, 50), k in 0.1..10.0f64) {
        let p: Vec<f64> = t.iter().zip(&noise).map(|(a, b)| a + b).collect();
        if let Ok(e) = eval::nrmse(&t, &p) {
            let ts: Vec<f64> = t.iter().map(|v| v * k).collect();
            let ps: Vec<f64> = p.iter().map(|v| v * k).collect();
            prop_assert!((eval::nrmse(&ts, &ps).unwrap() - e).abs() < 1e-9 * (1.0 + e));
        }
    }

    #[test]
    fn intersection_cells_recombine(t in prop::collection::vec(0.0..100.0f64, 5..200), seed in any::<u64>()) {
        let settle: Vec<Settlement> = (0..t.len())
            .map(|i| if (seed >> (i % 64)) & 1 == 1 { Settlement::Urban } else { Settlement::Rural })
            .collect();
        let p: Vec<f64> = t.iter().enumerate().map(|(i, v)| v + (i % 7) as f64 - 3.0).collect();
        let table = eval::intersection_table(&settle, &t, &p).unwrap();
        prop_assert!((table.overall_rmse() - eval::rmse(&t, &p).unwrap()).abs() < 1e-9);
        let n: usize = table.cells.iter().flatten().flatten().map(|c| c.n).sum();
        prop_assert_eq!(n, t.len());
    }

    #[test]
    fn ens_weights_have_unit_mean_and_favor_rare_bins(mu in prop::collection::vec(0.0..100.0f64, 2..300), beta in 0.0..0.999f64) {
        let cfg = WeightConfig { scheme: WeightScheme::Ens, beta, ..WeightConfig::default() };
        let w = pipeline::ens_weights(&mu, &cfg).unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        let bins = groundtruth::discretize_equal_width(&mu, cfg.n_bins).unwrap();
        let counts = pipeline::bin_counts(&bins);
        for i in 0..mu.len() {
            for j in 0..mu.len() {
                if counts[&bins[i]] < counts[&bins[j]] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn stratified_split_partitions(mu in prop::collection::vec(0.0..100.0f64, 10..300), frac in 0.05..0.5f64, seed in any::<u64>()) {
        let s = pipeline::stratified_split(&mu, frac, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..mu.len()).collect::<Vec<_>>());
        prop_assert_eq!(s.clone(), pipeline::stratified_split(&mu, frac, seed).unwrap());
    }

    #[test]
    fn folds_are_balanced_per_bin(bins in prop::collection::vec(0usize..10, 4..300), k in 2usize..6, seed in any::<u64>()) {
        let folds = pipeline::stratified_folds(&bins, k, seed);
        prop_assert_eq!(folds.len(), bins.len());
        prop_assert!(folds.iter().all(|&f| f < k));
        let mut sizes = vec![0usize; k];
        for &f in &folds {
            sizes[f] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn derived_seeds_depend_on_every_part(base in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        prop_assert_ne!(pipeline::derive_seed(base, &[a]), pipeline::derive_seed(base, &[b]));
        prop_assert_eq!(pipeline::derive_seed(base, &[a, b]), pipeline::derive_seed(base, &[a, b]));
    }
}

fn gbrt_data() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<[f64; 2]>, Vec<f64>)> {
    (5usize..80, 1usize..4).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(prop::collection::vec(prop_oneof![9 => -10.0..10.0f64, 1 => Just(f64::NAN)], p), n),
            prop::collection::vec((0.0..100.0f64, 0.0..30.0f64).prop_map(|(a, b)| [a, b]), n),
            prop::collection::vec(0.1..5.0f64, n),
        )
    })
}

fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
    FeatureMatrix::from_rows((0..rows[0].len()).map(|j| format!("x{j}")).collect(), rows)
}

fn loss(m: &GBRTEnsemble, x: &FeatureMatrix, y: &[[f64; 2]], w: &[f64], k: usize) -> f64 {
    m.predict_raw_upto(x, k)
        .unwrap()
        .iter()
        .zip(y)
        .zip(w)
        .map(|((p, t), wi)| wi * ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn boosting_never_increases_training_loss((x, y, w) in gbrt_data(), depth in 1usize..5, lr in 0.01..1.0f64) {
        let fm = matrix(&x);
        let hp = Hyperparams { n_trees: 15, max_depth: depth, learning_rate: lr, min_samples_leaf: 1, ..Hyperparams::default() };
        let m = gbrt::fit(&fm, &y, &w, &hp).unwrap();
        let losses: Vec<f64> = (0..=m.trees.len()).map(|k| loss(&m, &fm, &y, &w, k)).collect();
        for pair in losses.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn scaling_weights_changes_nothing((x, y, w) in gbrt_data(), scale in prop_oneof![Just(2.0f64), Just(0.5), Just(8.0)]) {
        let fm = matrix(&x);
        let hp = Hyperparams { n_trees: 5, max_depth: 3, ..Hyperparams::default() };
        let a = gbrt::fit(&fm, &y, &w, &hp).unwrap();
        let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let b = gbrt::fit(&fm, &y, &ws, &hp).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn model_json_round_trips((x, y, w) in gbrt_data(), seed in any::<u64>()) {
        let fm = matrix(&x);
        let hp = Hyperparams { n_trees: 5, max_depth: 3, subsample_rows: 0.7, subsample_cols: 0.7, random_seed: seed, ..Hyperparams::default() };
        let m = gbrt::fit(&fm, &y, &w, &hp).unwrap();
        let back = GBRTEnsemble::from_json(&m.to_json()).unwrap();
        prop_assert_eq!(back.predict_raw(&fm).unwrap(), m.predict_raw(&fm).unwrap());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn standardized_nightlight_columns_are_z_scores(vals in prop::collection::vec(0.0..60.0f64, 2..40)) {
        let mut m = FeatureMatrix::from_rows(vec!["ntl_mean_1.6".into()], &vals.iter().map(|v| vec![*v]).collect::<Vec<_>>());
        m.columns[0].source = features::FeatureSource::Nightlight;
        features::standardize_per_year(&mut m);
        let col: Vec<f64> = (0..m.n_rows()).map(|i| m.get(i, 0)).collect();
        prop_assert!(eval::mean(&col).abs() < 1e-9);
        let sd = eval::pop_std(&col);
        prop_assert!((sd - 1.0).abs() < 1e-9 || sd == 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relocation_is_injective_and_bounded(
        cs in prop::collection::vec((regional_point(), any::<bool>()), 1..40),
        ps in prop::collection::vec((regional_point(), 0usize..4), 0..60),
        ruc in any::<bool>(),
    ) {
        let clusters: Vec<Cluster> = cs.iter().enumerate().map(|(i, (p, u))| Cluster {
            cluster_id: format!("c{i:02}"),
            point: *p,
            year: 2019,
            settlement: if *u { Settlement::Urban } else { Settlement::Rural },
        }).collect();
        let kinds = [PlaceKind::City, PlaceKind::Town, PlaceKind::Village, PlaceKind::Hamlet];
        let places: Vec<Place> = ps.iter().enumerate().map(|(i, (p, k))| Place {
            place_id: format!("p{i:02}"),
            point: *p,
            kind: kinds[*k],
        }).collect();
        let mode = if ruc { RelocationMode::Ruc } else { RelocationMode::Rc };
        let plan = relocate(&clusters, &places, mode);
        prop_assert_eq!(&plan, &relocate(&clusters, &places, mode));
        let mut used = BTreeSet::new();
        for c in &clusters {
            if let Assignment::Place { place_id, .. } = &plan.assignments[&c.cluster_id] {
                prop_assert!(used.insert(place_id.clone()));
                let p = places.iter().find(|p| &p.place_id == place_id).unwrap();
                prop_assert!(haversine_km(&c.point, &p.point) <= groundtruth::relocation_radius_km(c.settlement));
                prop_assert_eq!(p.kind.settlement(), c.settlement);
                prop_assert!(!(mode == RelocationMode::Rc && c.settlement == Settlement::Urban));
            }
        }
    }
}
