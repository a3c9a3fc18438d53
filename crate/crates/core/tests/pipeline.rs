mod common;

use common::{raw_frames, ridge_probe_ccc, ridge_score, rng, Ridge};
use damamba::pipeline::{
    build_modality_groups, generate_synthetic_session, load_sessions, resample_linear, write_synthetic_corpus, Cue,
    SessionBatch, SyntheticBenchmark, SyntheticOptions, TOTAL_CUE_WIDTH,
};
use damamba::{Error, Tensor};
use rand::Rng;

/// Resampling by explicit time mapping: output frame i sits at fraction
/// i/(n−1) of the session, which is source position fraction·(m−1).
fn resample_oracle(x: &Tensor, n: usize) -> Tensor {
    let (m, w) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * w);
    for i in 0..n {
        let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        let pos = frac * (m - 1) as f64;
        let j = (pos as usize).min(m.saturating_sub(2));
        let t = pos - j as f64;
        for c in 0..w {
            out.push(if m == 1 { x.at(0, c) } else { (1.0 - t) * x.at(j, c) + t * x.at(j + 1, c) });
        }
    }
    Tensor::new([n, w], out).unwrap()
}

#[test]
fn resampling_matches_the_interpolation_oracle() {
    let mut r = rng(11);
    for _ in 0..50 {
        let m = r.random_range(1..40);
        let n = r.random_range(1..160);
        let w = r.random_range(1..6);
        let x = Tensor::randn([m, w], 1.0, &mut r);
        let got = resample_linear(&x, n).unwrap();
        assert_eq!(got.shape(), &[n, w]);
        assert!(got.max_abs_diff(&resample_oracle(&x, n)) <= 1e-12, "m={m} n={n}");
        if m > 1 && n > 1 {
            assert_eq!(got.row(0), x.row(0));
            assert!(got.row(n - 1).iter().zip(x.row(m - 1)).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }
}

#[test]
fn resampling_a_linear_ramp_stays_on_the_ramp() {
    let x = Tensor::new([5, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = resample_linear(&x, 17).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - i as f64 * 0.25).abs() < 1e-12);
    }
    assert!(matches!(resample_linear(&x, 0), Err(Error::Data(_))));
}

#[test]
fn synthetic_sessions_have_the_documented_shapes() {
    let opts = SyntheticOptions::default();
    let s = generate_synthetic_session(3, 3, 64, &opts).unwrap();
    assert_eq!(s.participants(), 3);
    assert_eq!(s.labels.shape(), &[64, 3]);
    assert!(s.labels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    for p in &s.participants {
        for cue in Cue::ALL {
            let t = p.get(cue);
            assert_eq!(t.cols(), cue.width());
            assert_eq!(t.rows(), if cue.is_audio() { 64 } else { 16 });
        }
        let a = p.aligned().unwrap();
        assert_eq!(a.n, 64);
        assert_eq!(a.streams.iter().map(|t| t.cols()).sum::<usize>(), TOTAL_CUE_WIDTH);
    }
}

#[test]
fn generator_is_deterministic_in_its_seed() {
    let opts = SyntheticOptions::default();
    let a = generate_synthetic_session(5, 2, 48, &opts).unwrap();
    assert_eq!(a, generate_synthetic_session(5, 2, 48, &opts).unwrap());
    assert_ne!(a.labels, generate_synthetic_session(6, 2, 48, &opts).unwrap().labels);
    let (train, held) = SyntheticBenchmark::default().generate().unwrap();
    assert_eq!((train.len(), held.len()), (8, 2));
    assert_eq!(held[1], generate_synthetic_session(9, 2, 192, &opts).unwrap());
}

#[test]
fn sessions_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_synthetic_corpus(dir.path(), 40, 2, 40, 3, &SyntheticOptions::default()).unwrap();
    let read = load_sessions(dir.path()).unwrap();
    assert_eq!(read.len(), 3);
    for (w, r) in written.iter().zip(&read) {
        assert_eq!(w.labels, r.labels);
        assert_eq!(w.target, r.target);
        for (pw, pr) in w.participants.iter().zip(&r.participants) {
            for cue in Cue::ALL {
                assert_eq!(pw.get(cue), pr.get(cue), "{cue}");
            }
        }
    }
    let single = SessionBatch::load(dir.path().join("session_001")).unwrap();
    assert_eq!(single.labels, written[1].labels);
}

#[test]
fn loading_an_empty_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_sessions(dir.path()), Err(Error::Data(_))));
}

#[test]
fn modality_groups_concatenate_in_cue_order() {
    let mut r = rng(12);
    for d in [1, 3, 8] {
        let enc: Vec<Tensor> = (0..5).map(|_| Tensor::randn([10, d], 1.0, &mut r)).collect();
        let g = build_modality_groups(&enc).unwrap();
        assert_eq!(g.audio.shape(), &[10, 2 * d]);
        assert_eq!(g.visual.shape(), &[10, 3 * d]);
        for row in 0..10 {
            assert_eq!(&g.audio.row(row)[..d], enc[0].row(row));
            assert_eq!(&g.visual.row(row)[2 * d..], enc[4].row(row));
        }
    }
}

#[test]
fn noiseless_cues_are_linearly_decodable() {
    let opts = SyntheticOptions {
        noise: 0.0,
        ..SyntheticOptions::default()
    };
    let sessions: Vec<_> = (0..3)
        .map(|i| generate_synthetic_session(200 + i, 2, 64, &opts).unwrap())
        .collect();
    let (x, y) = raw_frames(&sessions[..2]);
    let probe = Ridge::fit(&x, &y, 1e-6);
    let score = ridge_score(&probe, &sessions[2..]);
    assert!(score > 0.99, "{score}");
}

#[test]
fn default_noise_leaves_a_linear_signal() {
    let bench = SyntheticBenchmark {
        sessions: 5,
        held_out: 1,
        ..SyntheticBenchmark::default()
    };
    let (train, held) = bench.generate().unwrap();
    let score = ridge_probe_ccc(&train, &held);
    assert!(score >= 0.6, "{score}");
}
