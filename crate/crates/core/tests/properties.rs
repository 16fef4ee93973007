use std::path::PathBuf;

use ndarray::{Array1, Array4};
use proptest::prelude::*;

use conceptfaith::catalog::SetKey;
use conceptfaith::cav::{self, Cav, CavProvenance, Pooling};
use conceptfaith::extract::{
    ActivationKey, ActivationSet, AttributionMap, GradientSet, TargetScalar,
};
use conceptfaith::importance::{self, ImportanceRecord, Inputs, Method};
use conceptfaith::stats::{self, BootstrapSpec, LogisticInit};

fn set(n: usize, h: usize, w: usize, c: usize, values: &[f64]) -> ActivationSet {
    let tensors = Array4::from_shape_fn((n, h, w, c), |(i, y, x, k)| {
        values[(((i * h + y) * w + x) * c + k) % values.len()]
    });
    ActivationSet {
        key: ActivationKey {
            set: SetKey::class("p"),
            model_id: "m".into(),
            layer: "l".into(),
        },
        tensors,
        image_order: (0..n).map(|i| PathBuf::from(format!("{i}.png"))).collect(),
    }
}

fn cav_of(v: Vec<f64>, pooling: Pooling) -> Cav {
    Cav {
        vector: Array1::from(v),
        pooling,
        provenance: CavProvenance {
            concept: "c".into(),
            source: "real".into(),
            model_id: "m".into(),
            layer: "l".into(),
            subset: "all".into(),
            seed: None,
        },
    }
}

fn record(score: f64, inputs: Inputs) -> ImportanceRecord {
    ImportanceRecord {
        concept: "c".into(),
        class: "k".into(),
        model_id: "m".into(),
        layer: "l".into(),
        cav_source: "real".into(),
        inputs,
        method: Method::Tcav,
        score,
        replicate: None,
    }
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #[test]
    fn alignment_is_scale_invariant(
        pos in values(24), neg in values(18), lambda in 1e-3f64..1e3,
    ) {
        let (p, n) = (set(3, 2, 2, 2, &pos), set(2, 2, 2, 2, &neg));
        let ref_cav = cav_of(vec![1.0, -0.5], Pooling::Gap);
        let (Ok(a), Ok(_)) = (cav::compute_cav_dom(&p, &n, Pooling::Gap), cav::compute_cav_dom(&n, &p, Pooling::Gap)) else {
            return Ok(());
        };
        let mut ps = p.clone();
        ps.tensors *= lambda;
        let mut ns = n.clone();
        ns.tensors *= lambda;
        let b = cav::compute_cav_dom(&ps, &ns, Pooling::Gap).unwrap();
        let (ca, cb) = (cav::cosine_similarity(&a, &ref_cav).unwrap(), cav::cosine_similarity(&b, &ref_cav).unwrap());
        prop_assert!((ca - cb).abs() < 1e-9);
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in values(6), b in values(6)) {
        let (x, y) = (cav_of(a, Pooling::Flatten), cav_of(b, Pooling::Flatten));
        if let (Ok(xy), Ok(yx)) = (cav::cosine_similarity(&x, &y), cav::cosine_similarity(&y, &x)) {
            prop_assert_eq!(xy.to_bits(), yx.to_bits());
            prop_assert!((-1.0..=1.0).contains(&xy));
        }
    }

    #[test]
    fn gap_and_flatten_agree_on_1x1_maps(pos in values(15), neg in values(10)) {
        let (p, n) = (set(3, 1, 1, 5, &pos), set(2, 1, 1, 5, &neg));
        if let (Ok(g), Ok(f)) = (cav::compute_cav_dom(&p, &n, Pooling::Gap), cav::compute_cav_dom(&p, &n, Pooling::Flatten)) {
            prop_assert_eq!(g.vector, f.vector);
        }
    }

    #[test]
    fn intra_similarity_halves_are_disjoint(seed in any::<u64>(), n in 4usize..40) {
        let data: Vec<f64> = (0..n * 3).map(|i| ((i * 7919 + seed as usize % 101) % 23) as f64 - 11.0).collect();
        let acts = set(n, 1, 1, 3, &data);
        let neg = set(5, 1, 1, 3, &[0.5, -0.25, 0.1]);
        let sizes = cav::default_sizes(n);
        prop_assert!(sizes.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sizes.iter().all(|&u| u <= n / 2));
        let _ = cav::intra_similarity_curve_with(&acts, &neg, &sizes, 3, seed, Pooling::Gap, |u, a, b| {
            assert_eq!(a.len(), u);
            assert_eq!(b.len(), u);
            assert!(a.iter().all(|i| !b.contains(i)));
        });
    }

    #[test]
    fn tcav_score_ignores_cav_scale(g in values(32), v in values(4), lambda in 1e-3f64..1e3) {
        let grads = GradientSet {
            key: ActivationKey { set: SetKey::class("k"), model_id: "m".into(), layer: "l".into() },
            class_id: 0,
            target: TargetScalar::Logit,
            tensors: Array4::from_shape_vec((8, 1, 1, 4), g).unwrap(),
        };
        let scaled: Vec<f64> = v.iter().map(|x| x * lambda).collect();
        let (a, b) = (importance::tcav_score(&cav_of(v, Pooling::Gap), &grads), importance::tcav_score(&cav_of(scaled, Pooling::Gap), &grads));
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn visual_tcav_scores_and_maps_are_bounded(act in values(18), attr in values(18), v in values(2)) {
        let act = ndarray::Array3::from_shape_vec((3, 3, 2), act).unwrap();
        let ig = AttributionMap {
            attributions: ndarray::Array3::from_shape_vec((3, 3, 2), attr).unwrap(),
            target_delta: 0.0,
            completeness_residual: 0.0,
        };
        let cav = cav_of(v, Pooling::Gap);
        if let Ok(map) = importance::concept_map(&cav, &act) {
            prop_assert!(map.values.iter().all(|m| (0.0..=1.0).contains(m)));
        }
        if let Ok(s) = importance::visual_tcav_attribution(&cav, &ig, &act) {
            prop_assert!(s <= 1.0 + 1e-12);
        }
        let acts = ActivationSet {
            key: ActivationKey { set: SetKey::class("k"), model_id: "m".into(), layer: "l".into() },
            tensors: act.clone().insert_axis(ndarray::Axis(0)),
            image_order: vec![PathBuf::from("a.png")],
        };
        if let Ok(s) = importance::visual_tcav_set_score(&cav, &[ig], &acts) {
            prop_assert!((0.0..=1.0).contains(&s.score));
        }
    }

    #[test]
    fn deltas_have_the_right_symmetry(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (x, y) = (record(a, Inputs::Original), record(b, Inputs::Original));
        prop_assert_eq!(importance::importance_delta(&x, &y).unwrap(), importance::importance_delta(&y, &x).unwrap());
        let (o, r) = (record(a, Inputs::Original), record(b, Inputs::Removed));
        prop_assert_eq!(importance::removal_delta(&o, &r).unwrap(), -importance::removal_delta(&r, &o).unwrap());
    }

    #[test]
    fn ks_is_symmetric_and_bounded(x in prop::collection::vec(-5.0f64..5.0, 1..30), y in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let d = stats::ks_statistic(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, stats::ks_statistic(&y, &x).unwrap());
        let t = stats::ks_two_sample(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.p_value));
    }

    #[test]
    fn spearman_is_rank_invariant(x in prop::collection::vec(-5.0f64..5.0, 3..30), seed in any::<u64>()) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() + ((i as u64 ^ seed) % 7) as f64).collect();
        let Ok(r) = stats::spearman(&x, &y) else { return Ok(()) };
        prop_assert!((-1.0..=1.0).contains(&r.statistic));
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        let xt: Vec<f64> = x.iter().map(|v| (v / 3.0).exp()).collect();
        let yt: Vec<f64> = y.iter().map(|v| v * v * v - 4.0).collect();
        let rt = stats::spearman(&xt, &yt).unwrap();
        prop_assert!((r.statistic - rt.statistic).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_replicates_have_source_size(n in 1usize..60, b in 1usize..8, seed in any::<u64>()) {
        let spec = BootstrapSpec { replicates: b, seed, ..BootstrapSpec::default() };
        let reps = stats::bootstrap_indices(n, &spec).unwrap();
        prop_assert_eq!(reps.len(), b);
        prop_assert!(reps.iter().all(|r| r.len() == n && r.iter().all(|&i| i < n)));
    }
}

#[test]
fn bootstrap_mean_of_a_linear_statistic_converges() {
    let data: Vec<f64> = (0..80).map(|i| ((i * 37) % 29) as f64 / 7.0).collect();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let spec = BootstrapSpec {
        replicates: 1000,
        seed: 5,
        ..BootstrapSpec::default()
    };
    let out = stats::bootstrap::<_, stats::StatsError>(data.len(), &spec, |_, idx| {
        Ok(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64)
    })
    .unwrap();
    let se = sd / n.sqrt() / 1000f64.sqrt();
    assert!(
        (out.summary.mean - mean).abs() < 3.0 * se,
        "{} vs {mean}",
        out.summary.mean
    );
}

#[test]
fn fitted_logistic_is_monotone() {
    let x: Vec<f64> = (0..40).map(|i| i as f64 / 39.0 - 0.5).collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| 0.8 / (1.0 + (-9.0 * v).exp()) + 0.02 * ((i % 3) as f64 - 1.0))
        .collect();
    let fit = stats::fit_logistic(&x, &y, LogisticInit::default()).unwrap();
    assert!(fit.params.k > 0.0);
    let curve: Vec<f64> = (0..200)
        .map(|i| fit.params.eval(-1.0 + i as f64 / 100.0))
        .collect();
    assert!(curve.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn curves_with_different_seeds_agree_within_noise() {
    let data: Vec<f64> = (0..64 * 4)
        .map(|i| ((i * 7919) % 97) as f64 / 10.0 + if i % 4 == 0 { 3.0 } else { 0.0 })
        .collect();
    let acts = set(64, 1, 1, 4, &data);
    let neg = set(9, 1, 1, 4, &[0.1, 0.3, -0.2, 0.0]);
    let sizes = cav::default_sizes(64);
    let a = cav::intra_similarity_curve(&acts, &neg, &sizes, 20, 1, Pooling::Gap).unwrap();
    let b = cav::intra_similarity_curve(&acts, &neg, &sizes, 20, 2, Pooling::Gap).unwrap();
    for (p, q) in a.points.iter().zip(&b.points) {
        let tol = 3.0 * (p.std.max(q.std) / 20f64.sqrt()) + 1e-12;
        assert!(
            (p.mean - q.mean).abs() <= tol,
            "u={}: {} vs {}",
            p.u,
            p.mean,
            q.mean
        );
    }
}
