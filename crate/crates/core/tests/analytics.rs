mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use d2ae_core::analytics::{
    channel_correlation, cosine_similarity, embed_2d, entropy, gaussian_adj_r2, train_probe, verification_roc, ProbeConfig,
    SoftmaxProbe, SoftmaxProbeConfig,
};
use d2ae_core::rng;

use common::brute_roc;

#[test]
fn roc_equals_brute_force_on_a_thousand_lists() {
    let mut r = rng::stream(1, &[0x20C]);
    let fprs = [0.0, 0.001, 0.01, 0.1, 0.25, 0.5, 1.0];
    for case in 0..1000 {
        let ns = r.gen_range(1..40);
        let nd = r.gen_range(1..40);
        // coarse scores force ties in a good share of the lists
        let coarse = case % 3 == 0;
        let mut draw = |shift: f64| -> f64 {
            let v: f64 = r.gen_range(-1.0..1.0) + shift;
            if coarse {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let same: Vec<f64> = (0..ns).map(|_| draw(0.3)).collect();
        let diff: Vec<f64> = (0..nd).map(|_| draw(0.0)).collect();
        let rep = verification_roc(&same, &diff, &fprs).unwrap();
        let oracle = brute_roc(&same, &diff);
        let got: Vec<(f64, f64, f64)> = rep.roc.iter().map(|p| (p.threshold, p.fpr, p.tpr)).collect();
        assert_eq!(got, oracle.points, "case {case}");
        assert_eq!(rep.accuracy, oracle.accuracy, "case {case}");
        assert_eq!(rep.best_threshold, oracle.best_threshold, "case {case}");
        for t in &rep.tpr_at_fpr {
            let best = oracle
                .points
                .iter()
                .filter(|p| p.1 <= t.target_fpr)
                .map(|p| p.2)
                .fold(0.0, f64::max);
            assert_eq!(t.tpr, best, "case {case} target {}", t.target_fpr);
            let at = oracle.points.iter().find(|p| p.1 <= t.target_fpr && p.2 == best).unwrap();
            if best > 0.0 {
                assert_eq!(t.threshold, at.0, "case {case}");
            }
        }
    }
}

#[test]
fn roc_rejects_degenerate_input() {
    assert!(verification_roc(&[], &[0.1], &[0.1]).is_err());
    assert!(verification_roc(&[0.1], &[f64::NAN], &[0.1]).is_err());
}

#[test]
fn adj_r2_separates_gaussian_from_uniform() {
    let mut r = rng::stream(2, &[0xA2]);
    let gauss: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut r)).collect();
    let uniform: Vec<f64> = (0..10_000).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g = gaussian_adj_r2(&gauss).unwrap();
    let u = gaussian_adj_r2(&uniform).unwrap();
    assert!(g >= 0.95, "gaussian adj-R2 {g}");
    assert!(u < g, "uniform {u} vs gaussian {g}");
}

#[test]
fn independent_channels_are_uncorrelated() {
    let mut r = rng::stream(3, &[0xC0]);
    let mut row = |d: usize| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut r)).collect() };
    let ft: Vec<Vec<f64>> = (0..10_000).map(|_| row(4)).collect();
    let fp: Vec<Vec<f64>> = (0..10_000).map(|_| row(4)).collect();
    let rep = channel_correlation(&ft, &fp).unwrap();
    assert!(rep.max_abs_off_diagonal < 0.05, "{}", rep.max_abs_off_diagonal);
    assert!(rep.undefined.is_empty());
    assert_eq!(rep.histogram.iter().sum::<usize>(), 8 * 7);
    assert_eq!(rep.frac_below_0_3, 1.0);
}

#[test]
fn correlation_matches_a_direct_pearson_oracle() {
    let mut r = rng::stream(4, &[0xC1]);
    let n = 300;
    let a: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let noise: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let ft: Vec<Vec<f64>> = (0..n).map(|i| vec![a[i], 5.0]).collect();
    let fp: Vec<Vec<f64>> = (0..n).map(|i| vec![2.0 * a[i] + 0.5 * noise[i]]).collect();
    let rep = channel_correlation(&ft, &fp).unwrap();
    let pearson = |x: &[f64], y: &[f64]| {
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
        let sxx: f64 = x.iter().map(|u| (u - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    };
    let y: Vec<f64> = fp.iter().map(|r| r[0]).collect();
    let expected = pearson(&a, &y);
    assert!((rep.matrix[0][2].unwrap() - expected).abs() < 1e-12);
    assert_eq!(rep.matrix[0][2], rep.matrix[2][0]);
    // the constant channel is reported, not silently dropped
    assert_eq!(rep.undefined, vec![1]);
    assert_eq!(rep.matrix[1][1], None);
}

fn separable(n: usize, seed: u64, margin: f64) -> (Vec<Vec<f64>>, Vec<bool>, Vec<f64>) {
    let mut r = rng::stream(seed, &[0x5E]);
    let normal = [0.6, -0.8, 0.0, 0.0];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while xs.len() < n {
        let x: Vec<f64> = (0..4).map(|j| r.gen_range(-3.0..3.0) * (j + 1) as f64 + 10.0).collect();
        let s: f64 = x.iter().zip(normal).map(|(a, w)| (a - 10.0) * w).sum();
        if s.abs() < margin {
            continue;
        }
        xs.push(x);
        ys.push(s > 0.0);
    }
    (xs, ys, normal.to_vec())
}

#[test]
fn svm_probe_recovers_a_separating_direction() {
    let (xs, ys, normal) = separable(200, 5, 0.5);
    let p = train_probe(&xs, &ys, &ProbeConfig::default()).unwrap();
    assert_eq!(p.train_accuracy, 1.0);
    assert!(p.accuracy >= 0.97, "cv accuracy {}", p.accuracy);
    let norm = p.w.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    let cos: f64 = p.w.iter().zip(&normal).map(|(a, b)| a * b).sum();
    assert!(cos > 0.95, "cosine to true normal {cos}");
}

#[test]
fn svm_probe_is_at_chance_on_shuffled_labels() {
    let mut r = rng::stream(6, &[0x5F]);
    let xs: Vec<Vec<f64>> = (0..400).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<bool> = (0..400).map(|_| r.gen_bool(0.5)).collect();
    let p = train_probe(&xs, &ys, &ProbeConfig::default()).unwrap();
    assert!((p.accuracy - 0.5).abs() < 0.1, "cv accuracy {}", p.accuracy);
}

#[test]
fn svm_probe_needs_both_classes() {
    let xs = vec![vec![0.0], vec![1.0], vec![2.0]];
    assert!(train_probe(&xs, &[true, true, false], &ProbeConfig::default()).is_err());
}

#[test]
fn softmax_probe_separates_blobs_and_not_noise() {
    let mut r = rng::stream(7, &[0x50]);
    let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
    let mut blob = |c: usize| -> Vec<f64> {
        centers[c].iter().map(|m| m + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect()
    };
    let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
    let xs: Vec<Vec<f64>> = labels.iter().map(|&c| blob(c)).collect();
    let test_labels: Vec<usize> = (0..80).map(|i| i % 4).collect();
    let test: Vec<Vec<f64>> = test_labels.iter().map(|&c| blob(c)).collect();
    let cfg = SoftmaxProbeConfig::default();
    let p = SoftmaxProbe::fit(&xs, &labels, 4, &cfg).unwrap();
    assert!(p.accuracy(&test, &test_labels) >= 0.95);
    let proba = p.predict_proba(&test[0]);
    assert!((proba.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let noise: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let noise_test: Vec<Vec<f64>> = (0..400).map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let shuffled: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let q = SoftmaxProbe::fit(&noise, &labels, 4, &cfg).unwrap();
    let acc = q.accuracy(&noise_test, &shuffled);
    assert!(acc < 0.4, "accuracy on pure noise {acc}");
}

#[test]
fn entropy_examples() {
    assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
}

#[test]
fn embedding_recovers_dominant_axes() {
    let mut r = rng::stream(8, &[0xE2]);
    let u = [0.5, 0.5, 0.5, 0.5];
    let v = [0.5, -0.5, 0.5, -0.5];
    let params: Vec<(f64, f64)> = (0..200).map(|_| (r.gen_range(-10.0..10.0), r.gen_range(-1.0..1.0))).collect();
    let rows: Vec<Vec<f64>> = params
        .iter()
        .map(|&(t, s)| (0..4).map(|j| 3.0 + t * u[j] + s * v[j]).collect())
        .collect();
    let emb = embed_2d(&rows).unwrap();
    let corr = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        sab / (saa * sbb).sqrt()
    };
    let e0: Vec<f64> = emb.iter().map(|e| e[0]).collect();
    let e1: Vec<f64> = emb.iter().map(|e| e[1]).collect();
    let t: Vec<f64> = params.iter().map(|p| p.0).collect();
    let s: Vec<f64> = params.iter().map(|p| p.1).collect();
    assert!(corr(&e0, &t).abs() > 0.9999);
    assert!(corr(&e1, &s).abs() > 0.9999);
    // rank-one data leaves the second coordinate at zero
    let line: Vec<Vec<f64>> = t.iter().map(|&t| vec![t, 2.0 * t, -t]).collect();
    let emb = embed_2d(&line).unwrap();
    assert!(emb.iter().all(|e| e[1] == 0.0));
}

proptest! {
    #[test]
    fn cosine_is_symmetric_bounded_and_scale_free(
        a in prop::collection::vec(-10.0f64..10.0, 3),
        b in prop::collection::vec(-10.0f64..10.0, 3),
        k in 0.1f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((c - cosine_similarity(&scaled, &b).unwrap()).abs() < 1e-12);
    }
}
