//! Windowed training and stitched evaluation.
//!
//! Sessions are cut into windows of `context + central + context` frames
//! whose central regions tile the session with stride `central`. The loss
//! only sees the central frames (CCC) and the in-range frames (alignment);
//! evaluation keeps, for every frame, the prediction of the window in which
//! it is central.
//!
//! Optimization is AdamW with decoupled weight decay, linear warmup into a
//! cosine decay, global-norm clipping, and an EMA shadow of the weights that
//! is what gets validated and checkpointed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{CccScope, Config, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{ccc, ccc_loss, infonce_alignment_loss, AlignmentConfig};
use crate::model::ModelParams;
use crate::params::{Bound, ParamStore};
use crate::pipeline::{AlignedCues, SessionBatch};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Windows

/// One window of a session. Frame indices are session-relative; `start` may
/// be negative and `start + len` may pass the end (zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: isize,
    pub len: usize,
    /// First central frame.
    pub central_start: usize,
    /// Central frames inside the session (the valid-central mask).
    pub central_valid: usize,
    /// Offset of the central region inside the window.
    pub central_offset: usize,
}

impl Window {
    /// Session frames `[central_start, central_start + central_valid)`.
    pub fn central_frames(&self) -> std::ops::Range<usize> {
        self.central_start..self.central_start + self.central_valid
    }

    /// Window rows holding valid central frames.
    pub fn central_rows(&self) -> std::ops::Range<usize> {
        self.central_offset..self.central_offset + self.central_valid
    }

    /// Window rows that map to frames inside a session of `n` frames.
    pub fn valid_rows(&self, n: usize) -> std::ops::Range<usize> {
        let lo = (-self.start).max(0) as usize;
        let hi = ((n as isize - self.start).max(0) as usize).min(self.len);
        lo..hi.max(lo)
    }
}

/// Windows with the default 32 + 32 + 32 geometry.
pub fn make_windows(n: usize) -> Vec<Window> {
    make_windows_with(n, 32, 32)
}

/// Central regions `[c·i, c·i + c)` tile `[0, n)`; each window adds
/// `context` frames on both sides.
pub fn make_windows_with(n: usize, central: usize, context: usize) -> Vec<Window> {
    assert!(central > 0, "central region must be non-empty");
    (0..n.max(1))
        .step_by(central)
        .map(|c0| Window {
            start: c0 as isize - context as isize,
            len: central + 2 * context,
            central_start: c0,
            central_valid: central.min(n.saturating_sub(c0)).max(usize::from(n == 0)),
            central_offset: context,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Optimizer pieces

/// First and second moments of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// AdamW hyper-parameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::from(&TrainConfig::default())
    }
}

/// One AdamW step: decay the weights by `lr·wd`, then apply the
/// bias-corrected moment update. A non-finite gradient rejects the step
/// before anything is modified.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "optimizer got {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} is {} at element {j}; step rejected",
                g.data()[j]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= lr * cfg.weight_decay * p[i];
            p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then cosine decay to
/// `lr·min_ratio` at `total` steps (held there afterwards).
pub fn lr_schedule(step: u64, lr: f64, warmup: u64, total: u64, min_ratio: f64) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let lr_min = lr * min_ratio;
    if total <= warmup {
        return lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` in place so their global ℓ2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut [Tensor], params: &[Tensor], decay: f64) {
    for (s, p) in shadow.iter_mut().zip(params) {
        for (s, p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = decay * *s + (1.0 - decay) * p;
        }
    }
}

/// Effective EMA decay for update `k` (0-based).
pub fn ema_decay_at(cfg: &TrainConfig, k: u64) -> f64 {
    if cfg.ema_warmup {
        cfg.ema_decay.min((1.0 + k as f64) / (10.0 + k as f64))
    } else {
        cfg.ema_decay
    }
}

// ---------------------------------------------------------------------------
// Data preparation

/// A session with its cues resampled once, ready for windowing.
#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub id: String,
    pub cues: Vec<AlignedCues>,
    /// Per participant, the label track.
    pub labels: Vec<Vec<f64>>,
    pub n: usize,
    pub target: usize,
}

impl PreparedSession {
    pub fn new(s: &SessionBatch) -> Result<Self> {
        let cues = s
            .participants
            .iter()
            .map(|c| c.aligned())
            .collect::<Result<Vec<_>>>()?;
        let (n, m) = s.labels.dims2()?;
        if let Some(c) = cues.iter().find(|c| c.n != n) {
            return Err(Error::Alignment(format!(
                "session {}: cues span {} frames, labels {n}",
                s.id, c.n
            )));
        }
        let labels = (0..m).map(|p| (0..n).map(|r| s.labels.at(r, p)).collect()).collect();
        Ok(PreparedSession {
            id: s.id.clone(),
            cues,
            labels,
            n,
            target: s.target,
        })
    }

    fn window_cues(&self, w: &Window) -> Result<Vec<AlignedCues>> {
        self.cues.iter().map(|c| c.window(w.start, w.len)).collect()
    }

    fn targets(&self, all: bool) -> Vec<usize> {
        if all {
            (0..self.cues.len()).collect()
        } else {
            vec![self.target]
        }
    }
}

// ---------------------------------------------------------------------------
// Loss of one window

/// Loss-side settings resolved from the config.
#[derive(Debug, Clone)]
pub struct Objective {
    pub lambda_ccc: f64,
    /// `None` when alignment is disabled.
    pub align: Option<(f64, AlignmentConfig)>,
    pub scope: CccScope,
    pub all_targets: bool,
}

impl Objective {
    pub fn from_config(cfg: &Config, model: &ModelParams) -> Result<Self> {
        let align = if cfg.loss.lambda_align > 0.0 && model.has_alignment_pair() {
            Some((
                cfg.loss.lambda_align,
                AlignmentConfig::new(cfg.loss.tau, cfg.loss.negatives.resolve()?)?,
            ))
        } else {
            None
        };
        Ok(Objective {
            lambda_ccc: cfg.loss.lambda_ccc,
            align,
            scope: cfg.loss.ccc_scope,
            all_targets: cfg.train.all_targets,
        })
    }
}

struct WindowPieces {
    /// Per target: central predictions and labels.
    preds: Vec<(Var, Vec<f64>)>,
    align: Option<Var>,
}

fn window_pieces(
    model: &ModelParams,
    tape: &mut Tape<'_>,
    p: &Bound,
    sess: &PreparedSession,
    w: &Window,
    obj: &Objective,
    align_seed: u64,
) -> Result<WindowPieces> {
    let cues = sess.window_cues(w)?;
    let emb = model.embed_all(tape, p, &cues)?;
    let rows: Vec<usize> = w.central_rows().collect();
    let mut preds = Vec::new();
    for t in sess.targets(obj.all_targets) {
        let y = model.predict_target(tape, p, &emb, t)?;
        let y = tape.select_rows(y, &rows)?;
        let lab = sess.labels[t][w.central_frames()].to_vec();
        preds.push((y, lab));
    }
    let align = match &obj.align {
        Some((_, acfg)) => {
            let valid: Vec<usize> = w.valid_rows(sess.n).collect();
            if valid.len() < 2 {
                None
            } else {
                let mut pairs = Vec::with_capacity(emb.len());
                for g in &emb {
                    let (a, v) = (g.audio, g.visual.expect("alignment needs both groups"));
                    pairs.push((tape.select_rows(a, &valid)?, tape.select_rows(v, &valid)?));
                }
                let cfg = AlignmentConfig {
                    seed: align_seed,
                    ..acfg.clone()
                };
                let proj = model.contrastive.as_ref().map(|c| (c, p));
                Some(infonce_alignment_loss(tape, &pairs, &cfg, proj)?)
            }
        }
        None => None,
    };
    Ok(WindowPieces { preds, align })
}

/// Mean over the given `(pred, label)` groups of `1 − CCC`, skipping groups
/// with fewer than two frames. `None` when nothing qualifies.
fn mean_ccc_loss(tape: &mut Tape<'_>, groups: &[(Var, Vec<f64>)]) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for (y, lab) in groups.iter().filter(|(_, l)| l.len() >= 2) {
        let l = tape.constant(Tensor::new([lab.len(), 1], lab.clone())?);
        terms.push(ccc_loss(tape, *y, l)?);
    }
    mean_vars(tape, &terms)
}

fn mean_vars(tape: &mut Tape<'_>, terms: &[Var]) -> Result<Option<Var>> {
    let Some(&first) = terms.first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)?))
}

/// Scalar parts of a loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ccc: f64,
    pub align: f64,
    pub total: f64,
}

fn combine(
    tape: &mut Tape<'_>,
    obj: &Objective,
    ccc_l: Option<Var>,
    align_l: Option<Var>,
) -> Result<Option<(Var, LossParts)>> {
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    if let Some(c) = ccc_l {
        parts.ccc = tape.value(c).item();
        terms.push(tape.scale(c, obj.lambda_ccc)?);
    }
    if let (Some(a), Some((lambda, _))) = (align_l, &obj.align) {
        parts.align = tape.value(a).item();
        terms.push(tape.scale(a, *lambda)?);
    }
    let Some(&first) = terms.first() else {
        return Ok(None);
    };
    let total = if terms.len() == 2 {
        tape.add(first, terms[1])?
    } else {
        first
    };
    parts.total = tape.value(total).item();
    Ok(Some((total, parts)))
}

/// Gradients and loss parts of one batch, averaged over its windows.
fn batch_gradients(
    model: &ModelParams,
    store: &ParamStore,
    sessions: &[PreparedSession],
    batch: &[(usize, Window)],
    obj: &Objective,
    step_seed: u64,
) -> Result<(Vec<Tensor>, LossParts)> {
    let seed_of = |i: usize| step_seed ^ (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let run = |tape: &mut Tape<'_>, p: &Bound, idx: usize, (s, w): &(usize, Window)| {
        window_pieces(model, tape, p, &sessions[*s], w, obj, seed_of(idx))
    };
    let to_div = |e: Error| match e {
        Error::NonFinite(m) => Error::Divergence { step: 0, reason: m },
        other => other,
    };
    match obj.scope {
        CccScope::Window => {
            // Windows are independent: one tape each, reduced in batch order.
            let outs: Vec<Result<Option<(Vec<Tensor>, LossParts)>>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, item)| {
                    let mut tape = Tape::training(seed_of(i));
                    let p = store.bind(&mut tape);
                    let pieces = run(&mut tape, &p, i, item)?;
                    let c = mean_ccc_loss(&mut tape, &pieces.preds)?;
                    let Some((total, parts)) = combine(&mut tape, obj, c, pieces.align)? else {
                        return Ok(None);
                    };
                    let mut g = tape.backward(total)?;
                    Ok(Some((store.collect_grads(&p, &mut g), parts)))
                })
                .collect();
            let mut grads: Option<Vec<Tensor>> = None;
            let mut parts = LossParts::default();
            let mut count = 0usize;
            for out in outs {
                let Some((g, lp)) = out.map_err(to_div)? else {
                    continue;
                };
                count += 1;
                parts.ccc += lp.ccc;
                parts.align += lp.align;
                parts.total += lp.total;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.data_mut().iter_mut().zip(b.data()).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            let Some(mut grads) = grads else {
                return Ok((zero_grads(store), parts));
            };
            let s = 1.0 / count as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
            parts.ccc *= s;
            parts.align *= s;
            parts.total *= s;
            Ok((grads, parts))
        }
        CccScope::Batch => {
            let mut tape = Tape::training(step_seed);
            let p = store.bind(&mut tape);
            let mut preds: Vec<Var> = Vec::new();
            let mut labels: Vec<f64> = Vec::new();
            let mut aligns = Vec::new();
            for (i, item) in batch.iter().enumerate() {
                let pieces = run(&mut tape, &p, i, item).map_err(to_div)?;
                for (y, l) in pieces.preds {
                    preds.push(y);
                    labels.extend(l);
                }
                aligns.extend(pieces.align);
            }
            let y = tape.concat_rows(&preds)?;
            let c = mean_ccc_loss(&mut tape, &[(y, labels)])?;
            let a = mean_vars(&mut tape, &aligns)?;
            let Some((total, parts)) = combine(&mut tape, obj, c, a)? else {
                return Ok((zero_grads(store), LossParts::default()));
            };
            let mut g = tape.backward(total).map_err(to_div)?;
            Ok((store.collect_grads(&p, &mut g), parts))
        }
    }
}

fn zero_grads(store: &ParamStore) -> Vec<Tensor> {
    store
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation

/// Eval-mode predictions for `target` over a whole session, stitched from
/// the windows in which each frame is central.
pub fn predict_stitched(
    model: &ModelParams,
    store: &ParamStore,
    sess: &PreparedSession,
    target: usize,
    train: &TrainConfig,
) -> Result<Vec<f64>> {
    Ok(predict_all_stitched(model, store, sess, &[target], train)?.remove(0))
}

fn predict_all_stitched(
    model: &ModelParams,
    store: &ParamStore,
    sess: &PreparedSession,
    targets: &[usize],
    train: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    if let Some(&t) = targets.iter().find(|&&t| t >= sess.cues.len()) {
        return Err(Error::Usage(format!(
            "unknown target participant {t} in session {}",
            sess.id
        )));
    }
    let windows = make_windows_with(sess.n, train.central, train.context);
    let per_window: Vec<Vec<Vec<f64>>> = windows
        .par_iter()
        .map(|w| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let cues = sess.window_cues(w)?;
            let emb = model.embed_all(&mut tape, &p, &cues)?;
            targets
                .iter()
                .map(|&t| {
                    let y = model.predict_target(&mut tape, &p, &emb, t)?;
                    Ok(tape.value(y).data()[w.central_rows()].to_vec())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::with_capacity(sess.n); targets.len()];
    for preds in per_window {
        for (o, p) in out.iter_mut().zip(preds) {
            o.extend(p);
        }
    }
    Ok(out)
}

/// Per-session and macro CCC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: Vec<SessionScore>,
    pub macro_ccc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session: String,
    pub ccc: f64,
}

impl EvalReport {
    /// Builds the report from per-session scores; the macro score is their
    /// unweighted mean.
    pub fn from_scores(sessions: Vec<SessionScore>) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::Usage("evaluation needs at least one session".into()));
        }
        let macro_ccc = sessions.iter().map(|s| s.ccc).sum::<f64>() / sessions.len() as f64;
        Ok(EvalReport {
            sessions,
            macro_ccc,
        })
    }

    /// CSV with columns `session,ccc` and a final `macro` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.sessions {
            w.serialize(s).map_err(csv_err)?;
        }
        w.serialize(SessionScore {
            session: "macro".into(),
            ccc: self.macro_ccc,
        })
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<SessionScore> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
        let (last, rest) = rows
            .split_last()
            .ok_or_else(|| Error::Data("empty evaluation CSV".into()))?;
        if last.session != "macro" {
            return Err(Error::Data("evaluation CSV lacks the macro row".into()));
        }
        Ok(EvalReport {
            sessions: rest.to_vec(),
            macro_ccc: last.ccc,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// CCC of every session (mean over its scored targets) and the macro mean.
pub fn evaluate(
    model: &ModelParams,
    store: &ParamStore,
    sessions: &[PreparedSession],
    train: &TrainConfig,
) -> Result<EvalReport> {
    if sessions.is_empty() {
        return Err(Error::Usage("evaluation needs at least one session".into()));
    }
    let scores = sessions
        .iter()
        .map(|s| {
            let targets = s.targets(train.all_targets);
            let preds = predict_all_stitched(model, store, s, &targets, train)?;
            let mut total = 0.0;
            for (t, p) in targets.iter().zip(&preds) {
                total += ccc(p, &s.labels[*t])?.value;
            }
            Ok(SessionScore {
                session: s.id.clone(),
                ccc: total / targets.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(scores)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const STATE_DIR: &str = "state";
pub const METRICS_FILE: &str = "metrics.csv";
const CONFIG_FILE: &str = "config.toml";
const PROGRESS_FILE: &str = "progress";

/// A model plus its weights, as restored from disk.
pub struct Checkpoint {
    pub config: Config,
    pub model: ModelParams,
    pub store: ParamStore,
}

fn contrastive_width(cfg: &Config) -> Option<usize> {
    (cfg.model.k_audio != cfg.model.k_visual && cfg.loss.lambda_align > 0.0)
        .then_some(cfg.loss.contrastive_width)
}

/// Builds the network described by `cfg` with freshly initialized weights.
pub fn build_model(cfg: &Config) -> Result<(ParamStore, ModelParams)> {
    ModelParams::init(&cfg.model, contrastive_width(cfg))
}

/// Writes weights and the config they belong to.
pub fn save_checkpoint(dir: impl AsRef<Path>, cfg: &Config, store: &ParamStore) -> Result<()> {
    let dir = dir.as_ref();
    store.save(dir)?;
    cfg.save(dir.join(CONFIG_FILE))
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let config = Config::load(dir.join(CONFIG_FILE))?;
    let (mut store, model) = build_model(&config)?;
    store.load_into(dir)?;
    Ok(Checkpoint {
        config,
        model,
        store,
    })
}

/// Evaluates a saved checkpoint on `sessions`.
pub fn evaluate_checkpoint(dir: impl AsRef<Path>, sessions: &[SessionBatch]) -> Result<EvalReport> {
    let ck = load_checkpoint(dir)?;
    let prepared = prepare(sessions)?;
    evaluate(&ck.model, &ck.store, &prepared, &ck.config.train)
}

pub fn prepare(sessions: &[SessionBatch]) -> Result<Vec<PreparedSession>> {
    sessions.iter().map(PreparedSession::new).collect()
}

fn save_tensors(dir: &Path, like: &ParamStore, tensors: &[Tensor]) -> Result<()> {
    let mut s = like.clone();
    s.assign(tensors.to_vec())?;
    s.save(dir)
}

fn load_tensors(dir: &Path, like: &ParamStore) -> Result<Vec<Tensor>> {
    let mut s = like.clone();
    s.load_into(dir)?;
    Ok(s.tensors().to_vec())
}

// ---------------------------------------------------------------------------
// Training loop

/// One metrics row, written after every epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_ccc: f64,
    pub loss_align: f64,
    pub loss_total: f64,
    pub val_ccc: f64,
}

/// Reads a metrics CSV.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `<out>/state` if present.
    pub resume: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
    /// Return after this many epochs of this invocation; the schedule still
    /// spans `train.epochs`, so a later resume continues where this stopped.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_val_ccc: f64,
    pub final_step: u64,
    pub epochs_run: usize,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Holds out the last `val` sessions.
pub fn split_sessions(sessions: Vec<SessionBatch>, val: usize) -> Result<(Vec<SessionBatch>, Vec<SessionBatch>)> {
    if val == 0 || sessions.len() <= val {
        return Err(Error::Data(format!(
            "need more than {val} sessions to hold out {val} for validation, got {}",
            sessions.len()
        )));
    }
    let mut train = sessions;
    let held = train.split_off(train.len() - val);
    Ok((train, held))
}

struct Progress {
    epoch: usize,
    step: u64,
    best: f64,
}

impl Progress {
    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(PROGRESS_FILE);
        fs::write(
            &path,
            format!("epoch={}\nstep={}\nbest={:e}\n", self.epoch, self.step, self.best),
        )
        .map_err(|e| Error::io(&path, e))
    }

    fn load(dir: &Path) -> Result<Progress> {
        let path = dir.join(PROGRESS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let get = |k: &str| {
            text.lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Data(format!("{}: missing {k}", path.display())))
        };
        let bad = |k: &str| Error::Data(format!("{}: bad {k}", path.display()));
        Ok(Progress {
            epoch: get("epoch")?.parse().map_err(|_| bad("epoch"))?,
            step: get("step")?.parse().map_err(|_| bad("step"))?,
            best: get("best")?.parse().map_err(|_| bad("best"))?,
        })
    }
}

/// Trains on `train_sessions`, validating on `val_sessions` after every
/// epoch with the EMA weights. Writes `<out>/metrics.csv`, the best EMA
/// checkpoint in `<out>/checkpoint`, and resumable state in `<out>/state`.
pub fn train(
    cfg: &Config,
    train_sessions: &[SessionBatch],
    val_sessions: &[SessionBatch],
    out: impl AsRef<Path>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_sessions.is_empty() {
        return Err(Error::Data("training needs at least one session".into()));
    }
    if val_sessions.is_empty() {
        return Err(Error::Data("training needs at least one held-out session".into()));
    }
    if let Some(s) = train_sessions.iter().find(|s| val_sessions.iter().any(|v| v.id == s.id)) {
        return Err(Error::Data(format!("session {} is in both splits", s.id)));
    }
    let out = out.as_ref();
    let run = || train_inner(cfg, train_sessions, val_sessions, out, opts);
    if cfg.train.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.train.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    }
}

fn train_inner(
    cfg: &Config,
    train_sessions: &[SessionBatch],
    val_sessions: &[SessionBatch],
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    let (mut store, model) = build_model(cfg)?;
    let obj = Objective::from_config(cfg, &model)?;
    let adam = AdamConfig::from(tc);
    let train_p = prepare(train_sessions)?;
    let val_p = prepare(val_sessions)?;

    let samples: Vec<(usize, Window)> = train_p
        .iter()
        .enumerate()
        .flat_map(|(i, s)| make_windows_with(s.n, tc.central, tc.context).into_iter().map(move |w| (i, w)))
        .collect();
    let steps_per_epoch = samples.len().div_ceil(tc.batch_windows) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let state_dir = out.join(STATE_DIR);
    let ck_dir = out.join(CHECKPOINT_DIR);
    let metrics_path = out.join(METRICS_FILE);

    let mut adam_state = AdamState::new(store.tensors());
    let mut shadow = store.tensors().to_vec();
    let mut progress = Progress {
        epoch: 0,
        step: 0,
        best: f64::NEG_INFINITY,
    };
    let mut metrics = Vec::new();
    if opts.resume && state_dir.join(PROGRESS_FILE).is_file() {
        progress = Progress::load(&state_dir)?;
        store.load_into(state_dir.join("params"))?;
        shadow = load_tensors(&state_dir.join("ema"), &store)?;
        adam_state = AdamState {
            m: load_tensors(&state_dir.join("adam_m"), &store)?,
            v: load_tensors(&state_dir.join("adam_v"), &store)?,
            step: progress.step,
        };
        metrics = read_metrics(&metrics_path)?;
    } else if metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let mut ema_store = store.clone();
    let last = match opts.stop_after {
        Some(k) => (progress.epoch + k).min(tc.epochs),
        None => tc.epochs,
    };
    for epoch in progress.epoch..last {
        let mut order = samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D)));
        let mut sums = LossParts::default();
        let mut lr = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch_windows) {
            let step = progress.step;
            lr = lr_schedule(step + 1, tc.lr, tc.warmup_steps, total_steps, tc.lr_min_ratio);
            let step_seed = tc.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step;
            let (mut grads, parts) = batch_gradients(&model, &store, &train_p, batch, &obj, step_seed)
                .map_err(|e| with_step(e, step))?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss is {}", parts.total),
                });
            }
            clip_gradients(&mut grads, tc.max_grad_norm);
            optimizer_step(store.tensors_mut(), &grads, &mut adam_state, lr, &adam).map_err(|e| match e {
                Error::NonFinite(m) => Error::Divergence { step, reason: m },
                other => other,
            })?;
            ema_update(&mut shadow, store.tensors(), ema_decay_at(tc, step));
            progress.step += 1;
            sums.ccc += parts.ccc;
            sums.align += parts.align;
            sums.total += parts.total;
            batches += 1;
        }
        ema_store.assign(shadow.clone())?;
        let val = evaluate(&model, &ema_store, &val_p, tc)?.macro_ccc;
        let b = batches.max(1) as f64;
        let row = EpochMetrics {
            step: progress.step,
            lr,
            loss_ccc: sums.ccc / b,
            loss_align: sums.align / b,
            loss_total: sums.total / b,
            val_ccc: val,
        };
        metrics.push(row);
        write_metrics(&metrics_path, &metrics)?;
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  step {:>5}  lr {:.2e}  ccc {:.4}  align {:.4}  total {:.4}  val {:.4}",
                epoch + 1,
                row.step,
                row.lr,
                row.loss_ccc,
                row.loss_align,
                row.loss_total,
                row.val_ccc
            );
        }
        if val > progress.best || !ck_dir.join(CONFIG_FILE).exists() {
            progress.best = progress.best.max(val);
            save_checkpoint(&ck_dir, cfg, &ema_store)?;
        }
        progress.epoch = epoch + 1;
        store.save(state_dir.join("params"))?;
        save_tensors(&state_dir.join("ema"), &store, &shadow)?;
        save_tensors(&state_dir.join("adam_m"), &store, &adam_state.m)?;
        save_tensors(&state_dir.join("adam_v"), &store, &adam_state.v)?;
        progress.save(&state_dir)?;
    }
    Ok(TrainOutcome {
        best_val_ccc: progress.best,
        final_step: progress.step,
        epochs_run: metrics.len(),
        metrics,
        checkpoint: ck_dir,
    })
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence { step, reason },
        other => other,
    }
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ninety_six_frames_make_three_windows() {
        let w = make_windows(96);
        assert_eq!(w.len(), 3);
        let centrals: Vec<_> = w.iter().map(|w| w.central_frames()).collect();
        assert_eq!(centrals, vec![0..32, 32..64, 64..96]);
        assert_eq!(w[0].start, -32);
        assert_eq!(w[0].valid_rows(96), 32..96);
        assert_eq!(w[2].valid_rows(96), 0..64);
    }

    #[test]
    fn short_sessions() {
        let w = make_windows(40);
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].central_frames(), 32..40);
        assert_eq!(w[1].central_rows(), 32..40);
        let w = make_windows(1);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].central_valid, 1);
        assert_eq!(w[0].valid_rows(1), 32..33);
    }

    #[test]
    fn adamw_basics() {
        // f(w) = w², one step from 1.
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        optimizer_step(&mut p, &[Tensor::scalar(2.0)], &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert!(p[0].item().abs() < 1.0);

        // Zero gradient: pure decoupled decay.
        let mut p = vec![Tensor::vector(vec![2.0, -4.0])];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        optimizer_step(&mut p, &[Tensor::zeros([2])], &mut st, 0.5, &cfg).unwrap();
        assert_eq!(p[0].data(), &[2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);

        let bad = [Tensor::vector(vec![f64::NAN, 0.0])];
        let before = p.clone();
        assert!(matches!(
            optimizer_step(&mut p, &bad, &mut st, 0.5, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_landmarks() {
        let (lr, w, t, r) = (1e-3, 10, 110, 0.01);
        assert_eq!(lr_schedule(0, lr, w, t, r), 0.0);
        assert_eq!(lr_schedule(w, lr, w, t, r), lr);
        assert_abs_diff_eq!(lr_schedule(t, lr, w, t, r), lr * r, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_schedule(60, lr, w, t, r), (lr + lr * r) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![0.0, 2.0])];
        assert_eq!(clip_gradients(&mut g, 5.0), 2.0);
        assert_eq!(g[0].data(), &[0.0, 2.0]);
        let mut g = vec![Tensor::vector(vec![6.0]), Tensor::vector(vec![8.0])];
        assert_eq!(clip_gradients(&mut g, 5.0), 10.0);
        let norm: f64 = g.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 5.0, epsilon = 1e-12);
        assert_eq!(g[0].item(), 3.0);
    }

    #[test]
    fn ema_examples() {
        let mut s = vec![Tensor::scalar(0.0)];
        ema_update(&mut s, &[Tensor::scalar(1.0)], 0.999);
        assert_abs_diff_eq!(s[0].item(), 0.001, epsilon = 1e-15);
        let mut s = vec![Tensor::vector(vec![1.0, 2.0])];
        ema_update(&mut s, &[Tensor::vector(vec![1.0, 2.0])], 0.999);
        assert_eq!(s[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn report_csv_round_trip() {
        let r = EvalReport::from_scores(vec![
            SessionScore { session: "a".into(), ccc: 0.25 },
            SessionScore { session: "b".into(), ccc: 0.125 },
        ])
        .unwrap();
        assert_eq!(r.macro_ccc, 0.1875);
        assert_eq!(EvalReport::from_csv(&r.to_csv().unwrap()).unwrap(), r);
        assert!(matches!(EvalReport::from_scores(vec![]), Err(Error::Usage(_))));
    }
}

