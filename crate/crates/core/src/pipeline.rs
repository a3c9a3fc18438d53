//! From raw cue streams to frame-aligned modality groups.
//!
//! Every participant contributes five cue streams: two audio cues sampled at
//! the high rate and three visual cues at a quarter of it. The pipeline
//! resamples all of them to the high rate, projects each to a common width
//! `d`, runs a single-block encoder per cue, and concatenates the results
//! into an audio group (`n×2d`) and a visual group (`n×3d`).
//!
//! The synthetic generator at the bottom produces dialogue sessions whose
//! cues are affine in a smooth per-participant engagement trajectory, so a
//! linear probe can recover the labels and the model has real signal to fit.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::block::{MambaBlockParams, Projection};
use crate::error::{dim_err, Error, Result};
use crate::params::Bound;
use crate::tensor::Tensor;

/// The five behavioral cues, in the fixed order used everywhere
/// (audio group first, then visual group).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cue {
    Ege,
    W2v,
    Clip,
    Of,
    Of2,
}

impl Cue {
    pub const ALL: [Cue; 5] = [Cue::Ege, Cue::W2v, Cue::Clip, Cue::Of, Cue::Of2];
    pub const AUDIO: [Cue; 2] = [Cue::Ege, Cue::W2v];
    pub const VISUAL: [Cue; 3] = [Cue::Clip, Cue::Of, Cue::Of2];

    pub fn width(self) -> usize {
        match self {
            Cue::Ege => 88,
            Cue::W2v => 1024,
            Cue::Clip => 512,
            Cue::Of => 714,
            Cue::Of2 => 139,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cue::Ege => "ege",
            Cue::W2v => "w2v",
            Cue::Clip => "clip",
            Cue::Of => "of",
            Cue::Of2 => "of2",
        }
    }

    pub fn is_audio(self) -> bool {
        matches!(self, Cue::Ege | Cue::W2v)
    }

    /// Native rate of real recordings in Hz.
    pub fn native_rate(self) -> f64 {
        if self.is_audio() {
            100.0
        } else {
            25.0
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Cue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sum of all cue widths.
pub const TOTAL_CUE_WIDTH: usize = 88 + 1024 + 512 + 714 + 139;

/// Sampling rates of one session. Real data uses 100/25 Hz; synthetic
/// sessions keep the 4:1 ratio at reduced rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub audio: f64,
    pub visual: f64,
}

impl Rates {
    pub const NATIVE: Rates = Rates {
        audio: 100.0,
        visual: 25.0,
    };
    pub const SYNTHETIC: Rates = Rates {
        audio: 8.0,
        visual: 2.0,
    };

    pub fn of(&self, cue: Cue) -> f64 {
        if cue.is_audio() {
            self.audio
        } else {
            self.visual
        }
    }

    pub fn max(&self) -> f64 {
        self.audio.max(self.visual)
    }
}

/// One participant's five raw streams.
#[derive(Debug, Clone, PartialEq)]
pub struct CueSet {
    streams: Vec<Tensor>,
    rates: Rates,
    duration: f64,
}

impl CueSet {
    /// Checks widths and lengths. A stream may be one frame longer or
    /// shorter than `rate × duration`; a surplus trailing frame is dropped.
    pub fn new(streams: Vec<Tensor>, rates: Rates, duration: f64) -> Result<Self> {
        if streams.len() != 5 {
            return Err(Error::Data(format!("expected 5 cue streams, got {}", streams.len())));
        }
        if !(duration > 0.0) {
            return Err(Error::Data(format!("duration must be positive, got {duration}")));
        }
        let mut out = Vec::with_capacity(5);
        for (cue, s) in Cue::ALL.into_iter().zip(streams) {
            let (m, w) = s.dims2()?;
            if w != cue.width() {
                return Err(dim_err!("{cue} stream has width {w}, expected {}", cue.width()));
            }
            let expect = (rates.of(cue) * duration).round() as usize;
            let s = if m == expect + 1 {
                s.slice_rows(0, expect)?
            } else if m + 1 == expect || m == expect {
                s
            } else {
                return Err(Error::Data(format!(
                    "{cue} stream has {m} frames, expected {expect} ({} Hz × {duration} s)",
                    rates.of(cue)
                )));
            };
            out.push(s);
        }
        Ok(CueSet {
            streams: out,
            rates,
            duration,
        })
    }

    pub fn get(&self, cue: Cue) -> &Tensor {
        &self.streams[cue.index()]
    }

    pub fn rates(&self) -> Rates {
        self.rates
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Frame count at the highest rate.
    pub fn frames(&self) -> usize {
        (self.rates.max() * self.duration).round() as usize
    }

    pub fn total_width(&self) -> usize {
        self.streams.iter().map(Tensor::cols).sum()
    }

    /// All five streams resampled to [`CueSet::frames`] rows.
    pub fn aligned(&self) -> Result<AlignedCues> {
        let n = self.frames();
        let streams = self
            .streams
            .iter()
            .map(|s| resample_linear(s, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(AlignedCues { streams, n })
    }
}

/// Five streams sharing one frame count, in [`Cue::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCues {
    pub streams: Vec<Tensor>,
    pub n: usize,
}

impl AlignedCues {
    pub fn get(&self, cue: Cue) -> &Tensor {
        &self.streams[cue.index()]
    }

    /// Rows `[start, start + len)` of every stream, zero outside `[0, n)`.
    pub fn window(&self, start: isize, len: usize) -> Result<AlignedCues> {
        Ok(AlignedCues {
            streams: self
                .streams
                .iter()
                .map(|s| s.padded_rows(start, len))
                .collect::<Result<_>>()?,
            n: len,
        })
    }
}

/// Linear interpolation of `stream` (`m×w`) onto `n` frames with both
/// endpoints pinned: output frame `i` samples source position
/// `i·(m−1)/(n−1)`.
pub fn resample_linear(stream: &Tensor, n: usize) -> Result<Tensor> {
    let (m, w) = match stream.shape() {
        [m, w] => (*m, *w),
        other => return Err(Error::Data(format!("stream must be 2-D, got {other:?}"))),
    };
    if n == 0 {
        return Err(Error::Data("cannot resample to zero frames".into()));
    }
    if m == n {
        return Ok(stream.clone());
    }
    let mut out = vec![0.0; n * w];
    for (i, row) in out.chunks_exact_mut(w).enumerate() {
        if m == 1 || n == 1 {
            row.copy_from_slice(stream.row(0));
            continue;
        }
        let pos = i as f64 * (m - 1) as f64 / (n - 1) as f64;
        let lo = (pos.floor() as usize).min(m - 2);
        let frac = pos - lo as f64;
        let (a, b) = (stream.row(lo), stream.row(lo + 1));
        for c in 0..w {
            row[c] = a[c] + frac * (b[c] - a[c]);
        }
    }
    Tensor::new([n, w], out)
}

/// Per-frame affine map `stream·W + b`.
pub fn project_cue(stream: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(stream.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.linear(x, w, Some(b))?;
    Ok(tape.value(y).clone())
}

/// One encoder block over a projected cue; frame count and width are kept.
pub fn encode_cue(tape: &mut Tape<'_>, p: &Bound, x: Var, block: &MambaBlockParams) -> Result<Var> {
    block.forward(tape, p, x)
}

/// Audio (`n×2d`) and visual (`n×3d`) groups of one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGroups {
    pub audio: Tensor,
    pub visual: Tensor,
    pub n: usize,
    pub d: usize,
}

/// `[Ege ∥ W2v]` and `[CLIP ∥ OF ∥ OF2]` from five encoded `n×d` cues
/// given in [`Cue::ALL`] order.
pub fn build_modality_groups(encoded: &[Tensor]) -> Result<ModalityGroups> {
    if encoded.len() != 5 {
        return Err(dim_err!("expected 5 encoded cues, got {}", encoded.len()));
    }
    let (n, d) = encoded[0].dims2()?;
    for (cue, e) in Cue::ALL.iter().zip(encoded) {
        let (en, ed) = e.dims2()?;
        if en != n {
            return Err(Error::Alignment(format!(
                "{cue} has {en} frames, {} has {n}",
                Cue::Ege
            )));
        }
        if ed != d {
            return Err(dim_err!("{cue} has width {ed}, expected {d}"));
        }
    }
    let refs: Vec<&Tensor> = encoded.iter().collect();
    Ok(ModalityGroups {
        audio: Tensor::concat_cols(&refs[..2])?,
        visual: Tensor::concat_cols(&refs[2..])?,
        n,
        d,
    })
}

/// Tape version of [`build_modality_groups`].
pub fn build_modality_groups_var(tape: &mut Tape<'_>, encoded: &[Var]) -> Result<(Var, Var)> {
    if encoded.len() != 5 {
        return Err(dim_err!("expected 5 encoded cues, got {}", encoded.len()));
    }
    Ok((
        tape.concat_cols(&encoded[..2])?,
        tape.concat_cols(&encoded[2..])?,
    ))
}

/// Projection followed by the single-block encoder, for one cue.
#[derive(Debug, Clone)]
pub struct CueEncoder {
    pub cue: Cue,
    pub proj: Projection,
    pub block: MambaBlockParams,
}

impl CueEncoder {
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, stream: Var) -> Result<Var> {
        let x = self.proj.apply(tape, p, stream)?;
        encode_cue(tape, p, x, &self.block)
    }
}

// ---------------------------------------------------------------------------
// Sessions

/// One recorded (or generated) conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionBatch {
    pub id: String,
    pub participants: Vec<CueSet>,
    /// `n×M` engagement labels at the high rate.
    pub labels: Tensor,
    pub rates: Rates,
    pub seed: Option<u64>,
    /// Designated target participant.
    pub target: usize,
}

impl SessionBatch {
    pub fn participants(&self) -> usize {
        self.participants.len()
    }

    pub fn frames(&self) -> usize {
        self.labels.rows()
    }

    /// Labels of participant `p` as an `n×1` column.
    pub fn label_column(&self, p: usize) -> Result<Tensor> {
        let (n, m) = self.labels.dims2()?;
        if p >= m {
            return Err(Error::Usage(format!("participant {p} out of range (M = {m})")));
        }
        Tensor::new([n, 1], (0..n).map(|r| self.labels.at(r, p)).collect())
    }

    fn check(&self) -> Result<()> {
        let m = self.participants.len();
        if m < 2 {
            return Err(Error::Config(format!(
                "a dialogue needs at least 2 participants, got {m}"
            )));
        }
        let (n, lm) = self.labels.dims2()?;
        if lm != m {
            return Err(Error::Data(format!("labels have {lm} columns for {m} participants")));
        }
        if self.target >= m {
            return Err(Error::Data(format!("target {} out of range (M = {m})", self.target)));
        }
        for (i, p) in self.participants.iter().enumerate() {
            if p.frames() != n {
                return Err(Error::Alignment(format!(
                    "participant {i} spans {} frames, labels have {n}",
                    p.frames()
                )));
            }
        }
        Ok(())
    }

    /// Writes `<pid>/<cue>.tnsr`, `labels.tnsr` and `meta` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.check()?;
        for (i, p) in self.participants.iter().enumerate() {
            let pdir = dir.join(participant_dir(i));
            fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
            for cue in Cue::ALL {
                p.get(cue).save(pdir.join(format!("{cue}.tnsr")))?;
            }
        }
        self.labels.save(dir.join("labels.tnsr"))?;
        let mut meta = format!(
            "id={}\nparticipants={}\nframes={}\nduration={}\naudio_rate={}\nvisual_rate={}\n",
            self.id,
            self.participants(),
            self.frames(),
            self.participants[0].duration(),
            self.rates.audio,
            self.rates.visual
        );
        meta.push_str(&format!("target={}\n", self.target));
        if let Some(s) = self.seed {
            meta.push_str(&format!("seed={s}\n"));
        }
        let path = dir.join("meta");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    /// Reads a session written by [`SessionBatch::save`] (or by external
    /// feature extraction following the same layout).
    pub fn load(dir: impl AsRef<Path>) -> Result<SessionBatch> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = parse_meta(&text);
        let field = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("{}: missing key {k}", meta_path.display())))
        };
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad value for {k}", meta_path.display())))
        };
        let m = num("participants")? as usize;
        let rates = Rates {
            audio: num("audio_rate")?,
            visual: num("visual_rate")?,
        };
        let duration = num("duration")?;
        let id = field("id")
            .map(str::to_string)
            .unwrap_or_else(|_| dir.file_name().map_or("session".into(), |s| s.to_string_lossy().into()));
        let seed = field("seed").ok().and_then(|s| s.parse().ok());
        let target = match field("target") {
            Ok(t) => t
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad value for target", meta_path.display())))?,
            Err(_) => 0,
        };
        let participants = (0..m)
            .map(|i| {
                let pdir = dir.join(participant_dir(i));
                let streams = Cue::ALL
                    .iter()
                    .map(|cue| Tensor::load(pdir.join(format!("{cue}.tnsr"))))
                    .collect::<Result<Vec<_>>>()?;
                CueSet::new(streams, rates, duration)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = Tensor::load(dir.join("labels.tnsr"))?;
        let s = SessionBatch {
            id,
            participants,
            labels,
            rates,
            seed,
            target,
        };
        s.check()?;
        Ok(s)
    }
}

pub fn participant_dir(i: usize) -> String {
    format!("p{i}")
}

fn parse_meta(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Loads every session directory under `root` (sorted by name), or `root`
/// itself if it is a session.
pub fn load_sessions(root: impl AsRef<Path>) -> Result<Vec<SessionBatch>> {
    let root = root.as_ref();
    if root.join("meta").is_file() {
        return Ok(vec![SessionBatch::load(root)?]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sessions found under {}", root.display())));
    }
    dirs.iter().map(SessionBatch::load).collect()
}

// ---------------------------------------------------------------------------
// Synthetic dialogues

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub rates: Rates,
    /// Standard deviation of the i.i.d. feature noise.
    pub noise: f64,
    /// Share of each participant's trajectory driven by a session-wide
    /// component, so partners carry information about the target.
    pub coupling: f64,
    /// Seed of the cue loadings; fixed so every session lives in the same
    /// feature space.
    pub world_seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            rates: Rates::SYNTHETIC,
            noise: 1.0,
            coupling: 0.5,
            world_seed: 0x5eed,
        }
    }
}

/// Smooth zero-mean trajectory sampled at `n` frames of `rate` Hz.
fn trajectory(rng: &mut ChaCha8Rng, n: usize, rate: f64, amp: f64) -> Vec<f64> {
    // Three sinusoids with periods of 3–12 s. The steepest possible slope is
    // 2π·amp/3 per second, i.e. < 0.05 per 25 Hz frame for amp ≤ 0.5.
    let parts: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let period = rng.random_range(3.0..12.0) * rate;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp * rng.random_range(0.5..1.0) / 3.0, period, phase)
        })
        .collect();
    (0..n)
        .map(|t| {
            parts
                .iter()
                .map(|(a, p, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                .sum()
        })
        .collect()
}

/// Shared affine structure of the synthetic feature space.
struct World {
    /// Per cue: (engagement loading, nuisance loading, offset), each of the cue's width.
    loadings: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl World {
    fn new(seed: u64) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loadings = Cue::ALL
            .iter()
            .map(|cue| {
                let w = cue.width();
                let gen = |rng: &mut ChaCha8Rng, s: f64| -> Vec<f64> {
                    Tensor::randn([w], s, rng).into_data()
                };
                (gen(&mut rng, 1.0), gen(&mut rng, 1.0), gen(&mut rng, 0.5))
            })
            .collect();
        World { loadings }
    }
}

/// A deterministic synthetic dialogue of `participants` people over
/// `frames` high-rate frames.
///
/// Each participant's label is a smooth trajectory in [0, 1]: half a
/// session-wide component, half their own (with `coupling = 0.5`). Every cue
/// is `z·load + u·nuisance + offset + noise`, where `u` is an unrelated
/// smooth signal; visual cues sample the same trajectories at the lower rate.
pub fn generate_synthetic_session(
    seed: u64,
    participants: usize,
    frames: usize,
    opts: &SyntheticOptions,
) -> Result<SessionBatch> {
    if participants < 2 {
        return Err(Error::Config(format!(
            "a dialogue needs at least 2 participants (one target plus partners), got {participants}"
        )));
    }
    if frames == 0 {
        return Err(Error::Config("a session needs at least one frame".into()));
    }
    let ratio = opts.rates.audio / opts.rates.visual;
    if ratio.fract() != 0.0 || ratio < 1.0 {
        return Err(Error::Config(format!(
            "audio rate must be an integer multiple of the visual rate, got {:?}",
            opts.rates
        )));
    }
    let ratio = ratio as usize;
    let duration = frames as f64 / opts.rates.audio;
    let n_vis = (opts.rates.visual * duration).round() as usize;
    if n_vis == 0 {
        return Err(Error::Config(format!(
            "{frames} frames is shorter than one visual frame"
        )));
    }

    let world = World::new(opts.world_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = trajectory(&mut rng, frames, opts.rates.audio, 0.5);
    let mut labels = vec![0.0; frames * participants];
    let mut people = Vec::with_capacity(participants);
    for p in 0..participants {
        let own = trajectory(&mut rng, frames, opts.rates.audio, 0.5);
        let nuisance = trajectory(&mut rng, frames, opts.rates.audio, 1.0);
        let bias = rng.random_range(-0.1..0.1);
        let z: Vec<f64> = (0..frames)
            .map(|t| {
                (0.5 + bias + opts.coupling * shared[t] + (1.0 - opts.coupling) * own[t]).clamp(0.0, 1.0)
            })
            .collect();
        for t in 0..frames {
            labels[t * participants + p] = z[t];
        }
        let streams = Cue::ALL
            .iter()
            .map(|&cue| {
                let (load, nuis, off) = &world.loadings[cue.index()];
                let w = cue.width();
                let (len, step) = if cue.is_audio() {
                    (frames, 1)
                } else {
                    (n_vis, ratio)
                };
                let mut data = Vec::with_capacity(len * w);
                for i in 0..len {
                    let t = (i * step).min(frames - 1);
                    for c in 0..w {
                        let noise = if opts.noise > 0.0 {
                            opts.noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
                        } else {
                            0.0
                        };
                        data.push((z[t] - 0.5) * load[c] + nuisance[t] * nuis[c] + off[c] + noise);
                    }
                }
                Tensor::new([len, w], data)
            })
            .collect::<Result<Vec<_>>>()?;
        people.push(CueSet::new(streams, opts.rates, duration)?);
    }
    Ok(SessionBatch {
        id: format!("synthetic-{seed}"),
        participants: people,
        labels: Tensor::new([frames, participants], labels)?,
        rates: opts.rates,
        seed: Some(seed),
        target: 0,
    })
}

/// Writes `count` synthetic sessions as `session_000`, `session_001`, ...
/// under `out`, seeded `seed`, `seed + 1`, ...
pub fn write_synthetic_corpus(
    out: impl AsRef<Path>,
    seed: u64,
    participants: usize,
    frames: usize,
    count: usize,
    opts: &SyntheticOptions,
) -> Result<Vec<SessionBatch>> {
    let out = out.as_ref();
    (0..count)
        .map(|i| {
            let s = generate_synthetic_session(seed + i as u64, participants, frames, opts)?;
            s.save(out.join(format!("session_{i:03}")))?;
            Ok(s)
        })
        .collect()
}

/// The seeded synthetic corpus used for the learning-signal benchmark:
/// ten two-person sessions of 192 frames, the last two held out.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub seed: u64,
    pub sessions: usize,
    pub participants: usize,
    pub frames: usize,
    pub held_out: usize,
    pub options: SyntheticOptions,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        SyntheticBenchmark {
            seed: 0,
            sessions: 10,
            participants: 2,
            frames: 192,
            held_out: 2,
            options: SyntheticOptions::default(),
        }
    }
}

impl SyntheticBenchmark {
    /// `(train, held_out)` sessions; session `i` is seeded `seed + i`.
    pub fn generate(&self) -> Result<(Vec<SessionBatch>, Vec<SessionBatch>)> {
        if self.held_out == 0 || self.held_out >= self.sessions {
            return Err(Error::Config(format!(
                "cannot hold out {} of {} sessions",
                self.held_out, self.sessions
            )));
        }
        let mut all = (0..self.sessions)
            .map(|i| generate_synthetic_session(self.seed + i as u64, self.participants, self.frames, &self.options))
            .collect::<Result<Vec<_>>>()?;
        let held = all.split_off(self.sessions - self.held_out);
        Ok((all, held))
    }
}
