mod common;

use damamba::config::Config;
use damamba::losses::ccc;
use damamba::pipeline::{generate_synthetic_session, SessionBatch, SyntheticOptions};
use damamba::train::{
    evaluate, load_checkpoint, make_windows, make_windows_with, optimizer_step, predict_stitched, prepare,
    read_metrics, train, AdamConfig, AdamState, TrainOptions, METRICS_FILE,
};
use damamba::{Error, Tape, Tensor};

fn tiny_config() -> Config {
    let mut c = Config::default();
    c.model.d = 4;
    c.model.k_audio = 8;
    c.model.k_visual = 8;
    c.model.layers = 1;
    c.model.d_state = 4;
    c.model.chunk_size = 8;
    c.train.epochs = 2;
    c.train.batch_windows = 4;
    c.train.warmup_steps = 2;
    c
}

fn corpus(count: usize, frames: usize) -> Vec<SessionBatch> {
    (0..count)
        .map(|i| generate_synthetic_session(100 + i as u64, 2, frames, &SyntheticOptions::default()).unwrap())
        .collect()
}

#[test]
fn central_regions_cover_every_frame_once() {
    for n in 1..=300 {
        let mut hits = vec![0u32; n];
        for w in make_windows(n) {
            assert_eq!(w.len, 96);
            assert_eq!(w.central_offset, 32);
            assert!(w.central_valid >= 1 && w.central_valid <= 32);
            for f in w.central_frames() {
                hits[f] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1), "n = {n}: {hits:?}");
    }
    for (n, c, x) in [(50, 7, 3), (9, 10, 0), (64, 1, 5)] {
        let covered: usize = make_windows_with(n, c, x).iter().map(|w| w.central_valid).sum();
        assert_eq!(covered, n);
    }
}

#[test]
fn adamw_minimizes_a_quadratic() {
    // f(w) = ½‖w − t‖², gradient w − t.
    let target = [3.0, -1.0, 0.5];
    let mut p = vec![Tensor::zeros([3])];
    let mut st = AdamState::new(&p);
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    for _ in 0..3000 {
        let g: Vec<f64> = p[0].data().iter().zip(target).map(|(w, t)| w - t).collect();
        optimizer_step(&mut p, &[Tensor::vector(g)], &mut st, 1e-2, &cfg).unwrap();
    }
    for (w, t) in p[0].data().iter().zip(target) {
        assert!((w - t).abs() < 1e-3, "{w} vs {t}");
    }
}

#[test]
fn ema_halves_the_gap_every_693_steps() {
    let mut s = vec![Tensor::scalar(0.0)];
    let p = [Tensor::scalar(1.0)];
    let steps = (std::f64::consts::LN_2 / (1.0 - 0.999)).round() as usize;
    assert_eq!(steps, 693);
    for _ in 0..steps {
        damamba::train::ema_update(&mut s, &p, 0.999);
    }
    let gap = 1.0 - s[0].item();
    assert!((gap - 0.5).abs() < 2e-3, "gap {gap}");
}

#[test]
fn one_epoch_smoke_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.epochs = 1;
    let sessions = corpus(3, 64);
    let out = train(&cfg, &sessions[..2], &sessions[2..], dir.path(), &TrainOptions::default()).unwrap();
    assert_eq!(out.epochs_run, 1);
    let rows = read_metrics(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].loss_total.is_finite() && rows[0].val_ccc.is_finite());

    // The checkpoint reproduces the logged validation score bit for bit.
    let ck = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(ck.config, cfg);
    let report = evaluate(&ck.model, &ck.store, &prepare(&sessions[2..]).unwrap(), &cfg.train).unwrap();
    assert_eq!(report.macro_ccc, out.best_val_ccc);
    assert_eq!(report.macro_ccc, rows[0].val_ccc);
}

#[test]
fn same_seed_gives_identical_metrics_and_resume_continues_exactly() {
    let cfg = tiny_config();
    let sessions = corpus(3, 80);
    let run = |epochs: usize, dir: &std::path::Path, resume: bool| {
        let mut c = cfg.clone();
        c.train.epochs = epochs;
        train(&c, &sessions[..2], &sessions[2..], dir, &TrainOptions { resume, ..TrainOptions::default() }).unwrap();
        std::fs::read(dir.join(METRICS_FILE)).unwrap()
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(3, a.path(), false);
    assert_eq!(first, run(3, b.path(), false));

    // Stop after two of the three epochs, then resume.
    let mut c3 = cfg.clone();
    c3.train.epochs = 3;
    let partial = TrainOptions {
        stop_after: Some(2),
        ..TrainOptions::default()
    };
    let out = train(&c3, &sessions[..2], &sessions[2..], c.path(), &partial).unwrap();
    assert_eq!(out.epochs_run, 2);
    let resumed = run(3, c.path(), true);
    assert_eq!(resumed, first);
}

#[test]
fn alignment_off_changes_training() {
    let sessions = corpus(3, 64);
    let mut cfg = tiny_config();
    cfg.train.epochs = 2;
    let on = tempfile::tempdir().unwrap();
    let off = tempfile::tempdir().unwrap();
    train(&cfg, &sessions[..2], &sessions[2..], on.path(), &TrainOptions::default()).unwrap();
    cfg.loss.lambda_align = 0.0;
    train(&cfg, &sessions[..2], &sessions[2..], off.path(), &TrainOptions::default()).unwrap();
    let a = read_metrics(on.path().join(METRICS_FILE)).unwrap();
    let b = read_metrics(off.path().join(METRICS_FILE)).unwrap();
    assert!(a.iter().all(|r| r.loss_align > 0.0));
    assert!(b.iter().all(|r| r.loss_align == 0.0));
    // Same first step; the updates differ, so the second epoch does too.
    assert_eq!(a[0].loss_ccc, b[0].loss_ccc);
    assert_ne!(a[1].loss_ccc, b[1].loss_ccc);
    assert_ne!(a[1].val_ccc, b[1].val_ccc);
}

#[test]
fn stitched_predictions_match_direct_window_passes() {
    let cfg = tiny_config();
    let (store, model) = damamba::train::build_model(&cfg).unwrap();
    let s = generate_synthetic_session(7, 3, 100, &SyntheticOptions::default()).unwrap();
    let prepared = prepare(std::slice::from_ref(&s)).unwrap();
    for target in 0..3 {
        let stitched = predict_stitched(&model, &store, &prepared[0], target, &cfg.train).unwrap();
        assert_eq!(stitched.len(), 100);
        for w in make_windows(100) {
            let cues: Vec<_> = prepared[0].cues.iter().map(|c| c.window(w.start, w.len).unwrap()).collect();
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let (y, _) = model.forward_session(&mut tape, &p, &cues, target).unwrap();
            let direct = &tape.value(y).data()[w.central_rows()];
            assert_eq!(&stitched[w.central_frames()], direct);
        }
    }
}

#[test]
fn evaluation_edge_cases() {
    let y = [0.1, 0.4, 0.35, 0.8, 0.6];
    assert_eq!(ccc(&y, &y).unwrap().value, 1.0);
    assert_eq!(ccc(&[0.5; 5], &y).unwrap().value, 0.0);
    let cfg = tiny_config();
    let (store, model) = damamba::train::build_model(&cfg).unwrap();
    assert!(matches!(evaluate(&model, &store, &[], &cfg.train), Err(Error::Usage(_))));
}

#[test]
fn a_nan_label_aborts_as_divergence() {
    let mut sessions = corpus(2, 64);
    let mut labels = sessions[0].labels.clone();
    labels.data_mut()[10] = f64::NAN;
    sessions[0].labels = labels;
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.epochs = 1;
    let err = train(&cfg, &sessions[..1], &sessions[1..], dir.path(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
}

#[test]
fn early_training_loss_trends_down() {
    // One step per epoch, so the metrics log is the per-step loss.
    let sessions = corpus(3, 64);
    let mut cfg = tiny_config();
    cfg.train.epochs = 200;
    cfg.train.batch_windows = 4;
    cfg.train.warmup_steps = 10;
    cfg.train.lr = 5e-3;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &sessions[..2], &sessions[2..], dir.path(), &TrainOptions::default()).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss_total).collect();
    assert_eq!(losses.len(), 200);
    let ma: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    for k in (0..ma.len() - 50).step_by(50) {
        assert!(ma[k + 50] < ma[k], "moving average rose: {} -> {}", ma[k], ma[k + 50]);
    }
}
