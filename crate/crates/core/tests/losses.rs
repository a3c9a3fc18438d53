mod common;

use common::{ccc_two_pass, rng};
use damamba::autograd::{GradCheck, Negatives, Tape};
use damamba::losses::{ccc, ccc_loss, infonce_alignment_loss, total_loss, CCC_EPS, AlignmentConfig, LossWeights};
use damamba::Tensor;
use rand::Rng;

/// Symmetric InfoNCE from the definition, averaged over frames and both
/// directions; every other frame is a negative.
fn naive_infonce(a: &Tensor, v: &Tensor, tau: f64) -> f64 {
    let unit = |t: &Tensor, r: usize| -> Vec<f64> {
        let row = t.row(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter().map(|x| x / norm).collect()
    };
    let n = a.rows();
    let ua: Vec<Vec<f64>> = (0..n).map(|r| unit(a, r)).collect();
    let uv: Vec<Vec<f64>> = (0..n).map(|r| unit(v, r)).collect();
    let sim = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / tau;
    let mut total = 0.0;
    for r in 0..n {
        for (from, to) in [(&ua, &uv), (&uv, &ua)] {
            let z: f64 = (0..n).map(|j| sim(&from[r], &to[j]).exp()).sum();
            total -= (sim(&from[r], &to[r]).exp() / z).ln();
        }
    }
    total / (2.0 * n as f64)
}

fn alignment(pairs: &[(Tensor, Tensor)], cfg: &AlignmentConfig) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = pairs
        .iter()
        .map(|(a, v)| (tape.constant(a.clone()), tape.constant(v.clone())))
        .collect();
    let l = infonce_alignment_loss(&mut tape, &vars, cfg, None).unwrap();
    tape.value(l).item()
}

#[test]
fn ccc_of_a_shifted_copy() {
    // Population variance σ² and shift c give 2σ² / (2σ² + c²).
    let mut r = rng(1);
    for _ in 0..10 {
        let y: Vec<f64> = (0..50).map(|_| r.random_range(0.0..1.0)).collect();
        let c = r.random_range(-1.0..1.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        let m = y.iter().sum::<f64>() / 50.0;
        let var = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 50.0;
        let got = ccc(&shifted, &y).unwrap().value;
        assert!((got - 2.0 * var / (2.0 * var + c * c)).abs() < 1e-12);
        assert!((got - ccc_two_pass(&shifted, &y)).abs() < 1e-12);
    }
}

#[test]
fn ccc_is_symmetric_and_negates_for_mirrored_predictions() {
    let mut r = rng(2);
    let y: Vec<f64> = (0..40).map(|_| r.random_range(0.0..1.0)).collect();
    let p: Vec<f64> = (0..40).map(|_| r.random_range(0.0..1.0)).collect();
    assert!((ccc(&p, &y).unwrap().value - ccc(&y, &p).unwrap().value).abs() < 1e-15);
    let m = y.iter().sum::<f64>() / 40.0;
    let mirrored: Vec<f64> = y.iter().map(|v| 2.0 * m - v).collect();
    assert!((ccc(&mirrored, &y).unwrap().value + 1.0).abs() < 1e-12);
}

#[test]
fn ccc_loss_on_tape_matches_the_scalar_metric() {
    let mut r = rng(3);
    let y = Tensor::uniform([30, 1], 0.0, 1.0, &mut r);
    let p = Tensor::uniform([30, 1], 0.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let (pv, yv) = (tape.constant(p.clone()), tape.constant(y.clone()));
    let l = ccc_loss(&mut tape, pv, yv).unwrap();
    let got = tape.value(l).item();
    // Exactly the regularized form; within the regularizer of the metric.
    let (pd, yd) = (p.data(), y.data());
    let (mp, my) = (pd.iter().sum::<f64>() / 30.0, yd.iter().sum::<f64>() / 30.0);
    let var = |d: &[f64], m: f64| d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 30.0;
    let cov = pd.iter().zip(yd).map(|(a, b)| (a - mp) * (b - my)).sum::<f64>() / 30.0;
    let den = var(pd, mp) + var(yd, my) + (mp - my).powi(2) + CCC_EPS;
    assert!((got - (1.0 - 2.0 * cov / den)).abs() < 1e-12);
    assert!((got - (1.0 - ccc(pd, yd).unwrap().value)).abs() < 1e-6);
}

#[test]
fn infonce_matches_the_definition() {
    let mut r = rng(4);
    for tau in [0.07, 0.5, 1.0] {
        let a = Tensor::randn([9, 5], 1.0, &mut r);
        let v = Tensor::randn([9, 5], 1.0, &mut r);
        let cfg = AlignmentConfig::new(tau, None).unwrap();
        let got = alignment(&[(a.clone(), v.clone())], &cfg);
        assert!((got - naive_infonce(&a, &v, tau)).abs() < 1e-10, "tau {tau}");
    }
}

#[test]
fn uniform_similarities_give_log_of_candidate_count() {
    let row: &[f64] = &[0.3, -1.2, 0.8, 0.1];
    let same = Tensor::from_rows(&[row; 8]);
    let all = alignment(&[(same.clone(), same.clone())], &AlignmentConfig::default());
    assert!((all - 8f64.ln()).abs() < 1e-9, "{all}");
    for k in [1, 3, 5] {
        let sampled = alignment(
            &[(same.clone(), same.clone())],
            &AlignmentConfig::new(0.07, Some(k)).unwrap(),
        );
        assert!((sampled - (1.0 + k as f64).ln()).abs() < 1e-9, "k = {k}: {sampled}");
    }
}

/// Audio rows `e_r`, visual rows `cos θ·e_r + sin θ·e_n`: the positive
/// similarity is `cos θ`, every negative is 0.
fn tilted_pair(n: usize, theta: f64) -> (Tensor, Tensor) {
    let mut a = vec![0.0; n * (n + 1)];
    let mut v = vec![0.0; n * (n + 1)];
    for r in 0..n {
        a[r * (n + 1) + r] = 1.0;
        v[r * (n + 1) + r] = theta.cos();
        v[r * (n + 1) + n] = theta.sin();
    }
    (Tensor::new([n, n + 1], a).unwrap(), Tensor::new([n, n + 1], v).unwrap())
}

#[test]
fn aligned_orthogonal_embeddings_have_near_zero_loss() {
    let (a, v) = tilted_pair(8, 0.0);
    let l = alignment(&[(a, v)], &AlignmentConfig::default());
    assert!(l < 1e-4, "{l}");
}

#[test]
fn loss_grows_as_positives_drift_apart() {
    let tau = 0.2;
    let cfg = AlignmentConfig::new(tau, None).unwrap();
    let mut prev = -1.0;
    for step in 0..=10 {
        let theta = step as f64 * std::f64::consts::FRAC_PI_2 / 10.0;
        let (a, v) = tilted_pair(6, theta);
        let l = alignment(&[(a, v)], &cfg);
        let closed = (1.0 + 5.0 * (-theta.cos() / tau).exp()).ln();
        assert!((l - closed).abs() < 1e-10);
        assert!(l > prev);
        prev = l;
    }
}

#[test]
fn swapping_modalities_leaves_the_loss_unchanged() {
    let mut r = rng(5);
    let a = Tensor::randn([7, 4], 1.0, &mut r);
    let v = Tensor::randn([7, 4], 1.0, &mut r);
    let cfg = AlignmentConfig::default();
    let ab = alignment(&[(a.clone(), v.clone())], &cfg);
    let ba = alignment(&[(v, a)], &cfg);
    assert!((ab - ba).abs() < 1e-12);
}

#[test]
fn duplicating_participants_leaves_the_mean_unchanged() {
    let mut r = rng(6);
    let p1 = (Tensor::randn([6, 3], 1.0, &mut r), Tensor::randn([6, 3], 1.0, &mut r));
    let p2 = (Tensor::randn([6, 3], 1.0, &mut r), Tensor::randn([6, 3], 1.0, &mut r));
    let cfg = AlignmentConfig::new(0.3, None).unwrap();
    let once = alignment(&[p1.clone(), p2.clone()], &cfg);
    let twice = alignment(&[p1.clone(), p2.clone(), p1, p2], &cfg);
    assert!((once - twice).abs() < 1e-10);
}

#[test]
fn width_mismatch_without_projection_is_a_config_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([4, 3]));
    let v = tape.constant(Tensor::zeros([4, 5]));
    let err = infonce_alignment_loss(&mut tape, &[(a, v)], &AlignmentConfig::default(), None).unwrap_err();
    assert!(matches!(err, damamba::Error::Config(_)), "{err}");
}

#[test]
fn gradients_of_both_terms_match_finite_differences() {
    let check = GradCheck::default();
    let mut r = rng(7);
    for _ in 0..3 {
        let pred = Tensor::uniform([12, 1], 0.0, 1.0, &mut r);
        let label = Tensor::uniform([12, 1], 0.0, 1.0, &mut r);
        let rep = check
            .run(|t, x| ccc_loss(t, x[0], x[1]), &[pred, label])
            .unwrap();
        assert!(rep.max_rel_err < 1e-5, "ccc {rep:?}");

        let a = Tensor::randn([6, 4], 1.0, &mut r);
        let v = Tensor::randn([6, 4], 1.0, &mut r);
        let rep = check
            .run(|t, x| t.info_nce(x[0], x[1], 0.5, Negatives::All), &[a.clone(), v.clone()])
            .unwrap();
        assert!(rep.max_rel_err < 1e-5, "info_nce {rep:?}");

        let sets: Vec<Vec<usize>> = (0..6).map(|i| vec![(i + 1) % 6, (i + 3) % 6]).collect();
        let rep = check
            .run(
                |t, x| t.info_nce(x[0], x[1], 0.5, Negatives::Sampled(sets.clone())),
                &[a.clone(), v.clone()],
            )
            .unwrap();
        assert!(rep.max_rel_err < 1e-5, "sampled info_nce {rep:?}");

        let cfg = AlignmentConfig::new(0.3, None).unwrap();
        let rep = check
            .run(|t, x| infonce_alignment_loss(t, &[(x[0], x[1])], &cfg, None), &[a, v])
            .unwrap();
        assert!(rep.max_rel_err < 1e-5, "alignment {rep:?}");
    }
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let w = LossWeights::default();
    assert!((w.combine(0.3, 0.5) - 0.5).abs() < 1e-15);
    let mut tape = Tape::new();
    let mut r = rng(8);
    for _ in 0..20 {
        let (c, a) = (r.random_range(0.0..2.0), r.random_range(0.0..3.0));
        let w = LossWeights::new(r.random_range(0.1..2.0), r.random_range(0.1..2.0)).unwrap();
        let (cv, av) = (tape.constant(Tensor::scalar(c)), tape.constant(Tensor::scalar(a)));
        let t = total_loss(&mut tape, cv, av, &w).unwrap();
        assert!((tape.value(t).item() - (w.lambda_ccc * c + w.lambda_align * a)).abs() < 1e-14);
    }
}
