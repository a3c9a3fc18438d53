//! Time and peak-allocation scaling of the hybrid block against a
//! full-attention block, plus the partner-context path against the number of
//! partners.
//!
//! Peak memory comes from [`CountingAlloc`], a high-water-mark wrapper around
//! the system allocator. A library cannot install a global allocator on its
//! users' behalf, so binaries that want memory columns declare
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: damamba::bench::CountingAlloc = damamba::bench::CountingAlloc;
//! ```
//!
//! and everything here checks [`allocator_installed`] before trusting the
//! numbers.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::block::{full_attention_baseline, param_count, AttnWeights, BlockSpec, FfnWeights, MambaBlockParams};
use crate::config::{Backend, Config, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{assemble_partner_context, GroupEmbeddings, ModelParams};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Allocation counting

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn record(delta: isize) {
    // `try_with` keeps allocations during thread teardown from panicking.
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

/// System allocator that tracks, per thread, the bytes currently allocated
/// and their high-water mark.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Bytes allocated by this thread and not yet freed.
pub fn live_bytes() -> isize {
    LIVE.with(Cell::get)
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn allocator_installed() -> bool {
    let before = live_bytes();
    let probe = std::hint::black_box(vec![0u8; 4096]);
    let seen = live_bytes() - before >= 4096;
    drop(probe);
    seen
}

/// Runs `f` and returns its result with the largest number of bytes the
/// calling thread held above its starting level while `f` ran.
pub fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = live_bytes();
    PEAK.with(|p| p.set(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    (out, (peak - base).max(0) as usize)
}

// ---------------------------------------------------------------------------
// Results

/// One benchmark row. `time_ratio`/`peak_ratio` compare against the previous
/// row of the same variant (empty on the first row and on OOM rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: String,
    pub n: usize,
    pub time_ms: Option<f64>,
    pub peak_bytes: Option<u64>,
    pub params: usize,
    pub oom: bool,
    pub time_ratio: Option<f64>,
    pub peak_ratio: Option<f64>,
}

impl BenchResult {
    fn measured(variant: &str, n: usize, time_ms: f64, peak: usize, params: usize) -> Self {
        BenchResult {
            variant: variant.into(),
            n,
            time_ms: Some(time_ms),
            peak_bytes: Some(peak as u64),
            params,
            oom: false,
            time_ratio: None,
            peak_ratio: None,
        }
    }

    fn oom(variant: &str, n: usize, params: usize) -> Self {
        BenchResult {
            variant: variant.into(),
            n,
            time_ms: None,
            peak_bytes: None,
            params,
            oom: true,
            time_ratio: None,
            peak_ratio: None,
        }
    }
}

/// Fills the ratio columns: each measured row against the previous measured
/// row of the same variant.
pub fn fill_ratios(rows: &mut [BenchResult]) {
    for i in 0..rows.len() {
        let prev = rows[..i]
            .iter()
            .rev()
            .find(|r| r.variant == rows[i].variant && !r.oom)
            .cloned();
        let r = &mut rows[i];
        if let Some(p) = prev.filter(|_| !r.oom) {
            r.time_ratio = r.time_ms.zip(p.time_ms).map(|(a, b)| a / b);
            r.peak_ratio = r
                .peak_bytes
                .zip(p.peak_bytes)
                .filter(|(_, b)| *b > 0)
                .map(|(a, b)| a as f64 / b as f64);
        }
    }
}

pub fn to_csv(rows: &[BenchResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<BenchResult>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("csv: {e}")))
}

// ---------------------------------------------------------------------------
// Variants

pub const HYBRID: &str = "hybrid";
pub const FULL_ATTENTION: &str = "full-attention";

/// A pre-norm-free transformer block whose attention materializes the full
/// `n×n` score matrix: `U = X + Attn(X)`, `X' = U + FFN(LN(U))`.
#[derive(Debug, Clone)]
pub struct FullAttentionBlock {
    pub attn: AttnWeights,
    pub ffn: FfnWeights,
    pub heads: usize,
    pub ln_eps: f64,
}

impl FullAttentionBlock {
    pub fn standalone(spec: &BlockSpec, rng: &mut ChaCha8Rng) -> (ParamStore, Self) {
        let mut store = ParamStore::new();
        let attn = AttnWeights::init(&mut store, "fa.attn", spec.width, rng);
        let ffn = FfnWeights::init(&mut store, "fa.ffn", spec.width, spec.ffn_expansion, rng);
        (
            store,
            FullAttentionBlock {
                attn,
                ffn,
                heads: spec.heads,
                ln_eps: spec.ln_eps,
            },
        )
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.attn.ids();
        v.extend(self.ffn.ids());
        v
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(x.clone());
        let a = full_attention_baseline(&mut tape, &p, &self.attn, x, self.heads)?;
        let u = tape.add(x, a)?;
        let f = self.ffn.apply(&mut tape, &p, u, self.ln_eps)?;
        let y = tape.add(u, f)?;
        Ok(tape.value(y).clone())
    }
}

/// Settings of [`run_scaling_benchmark`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    pub lengths: Vec<usize>,
    pub variants: Vec<String>,
    pub width: usize,
    pub chunk_size: usize,
    pub d_state: usize,
    pub repeats: usize,
    pub warmups: usize,
    /// Rows whose predicted or measured peak exceeds this become OOM rows.
    pub cap_bytes: Option<u64>,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            lengths: vec![256, 512, 1024, 2048, 4096],
            variants: vec![HYBRID.into(), FULL_ATTENTION.into()],
            width: 32,
            chunk_size: 32,
            d_state: 16,
            repeats: 5,
            warmups: 2,
            cap_bytes: None,
            seed: 0,
        }
    }
}

/// Lower quartile, linearly interpolated. Interference from other processes
/// only ever adds time, so the fast end of the sample tracks the job's own
/// cost better than the median does on a shared core.
fn lower_quartile(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = 0.25 * (v.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] + f * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

const MIN_ROUNDS: usize = 21;

type Job<'a> = Box<dyn FnMut() -> Result<()> + 'a>;

/// One untimed call that reports its peak allocation and wall time.
fn probe(job: &mut Job<'_>) -> Result<(f64, usize)> {
    let t0 = Instant::now();
    let (r, peak) = peak_during(job);
    r?;
    Ok((t0.elapsed().as_secs_f64() * 1e3, peak))
}

/// Lower-quartile wall time (ms) and largest peak per job.
///
/// Every job runs once in every round, so a slow stretch of the machine lands
/// on all of them alike, and each call starts from the cache state the other
/// jobs left behind. Back-to-back repeats of one cheap job would run it warm
/// and skew the ratios against larger jobs.
fn time_interleaved(jobs: &mut [Job<'_>], warmups: usize, repeats: usize) -> Result<Vec<(f64, usize)>> {
    for _ in 0..warmups {
        for job in jobs.iter_mut() {
            job()?;
        }
    }
    let rounds = repeats.max(MIN_ROUNDS);
    let mut times = vec![Vec::with_capacity(rounds); jobs.len()];
    let mut peaks = vec![0usize; jobs.len()];
    for _ in 0..rounds {
        for (i, job) in jobs.iter_mut().enumerate() {
            let (ms, peak) = probe(job)?;
            times[i].push(ms);
            peaks[i] = peaks[i].max(peak);
        }
    }
    Ok(times.into_iter().map(lower_quartile).zip(peaks).collect())
}

/// Predicted peak of a run at `n`: a least-squares fit of `a·n + b·n²` to the
/// rows already measured (non-negative coefficients), never below `floor`.
fn predict_peak(history: &[(usize, u64)], n: usize, floor: u64) -> u64 {
    let fit = match history {
        [] => 0.0,
        [(n1, p1)] => *p1 as f64 * n as f64 / *n1 as f64,
        _ => {
            // Normal equations for [n, n²].
            let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(m, p) in history {
                let (x1, x2, y) = (m as f64, (m * m) as f64, p as f64);
                s11 += x1 * x1;
                s12 += x1 * x2;
                s22 += x2 * x2;
                t1 += x1 * y;
                t2 += x2 * y;
            }
            let det = s11 * s22 - s12 * s12;
            let (a, b) = if det.abs() > 0.0 {
                ((t1 * s22 - t2 * s12) / det, (s11 * t2 - s12 * t1) / det)
            } else {
                (t1 / s11, 0.0)
            };
            let (a, b) = if b < 0.0 { (t1 / s11, 0.0) } else if a < 0.0 { (0.0, t2 / s22) } else { (a, b) };
            a * n as f64 + b * (n * n) as f64
        }
    };
    (fit as u64).max(floor)
}

/// Bytes the full-attention forward cannot avoid: scores, scaled scores and
/// probabilities, `n×n` each, per head.
pub fn full_attention_floor_bytes(n: usize, heads: usize) -> u64 {
    (3 * n * n * heads * std::mem::size_of::<f64>()) as u64
}

/// Runs every variant at every length. Peak columns are `None` unless
/// [`CountingAlloc`] is installed; without it no OOM guard is possible
/// beyond the analytic floor.
pub fn run_scaling_benchmark(cfg: &ScalingConfig) -> Result<Vec<BenchResult>> {
    if cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("benchmark lengths must be strictly ascending".into()));
    }
    if cfg.repeats < 5 {
        return Err(Error::Usage(format!("need at least 5 timed repeats, got {}", cfg.repeats)));
    }
    if let Some(v) = cfg.variants.iter().find(|v| *v != HYBRID && *v != FULL_ATTENTION) {
        return Err(Error::Usage(format!("unknown benchmark variant {v:?}")));
    }
    let counting = allocator_installed();
    let spec = BlockSpec {
        width: cfg.width,
        d_state: cfg.d_state,
        chunk_size: cfg.chunk_size,
        heads: 1,
        conv_kernel: 4,
        ffn_expansion: 2,
        dropout: 0.0,
        ln_eps: 1e-5,
        selective: false,
        backend: Backend::Mamba,
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h_store, hybrid) = MambaBlockParams::standalone(spec, &mut rng)?;
    let (f_store, full) = FullAttentionBlock::standalone(&spec, &mut rng);

    let (h_store, hybrid, f_store, full) = (&h_store, &hybrid, &f_store, &full);
    let inputs: Vec<Tensor> = cfg
        .lengths
        .iter()
        .map(|&n| Tensor::randn([n, cfg.width], 1.0, &mut rng))
        .collect();
    let mut rows = Vec::new();
    for variant in &cfg.variants {
        let hybrid_variant = variant == HYBRID;
        let params = if hybrid_variant {
            param_count(h_store, &hybrid.ids())
        } else {
            param_count(f_store, &full.ids())
        };
        let job = |x: &Tensor| -> Job<'_> {
            let x = x.clone();
            if hybrid_variant {
                Box::new(move || hybrid.forward_eval(h_store, &x).map(drop))
            } else {
                Box::new(move || full.forward_eval(f_store, &x).map(drop))
            }
        };
        // Ascending pass: decide OOM rows from what smaller lengths used.
        let mut history: Vec<(usize, u64)> = Vec::new();
        let mut jobs = Vec::new();
        let mut slots: Vec<Option<usize>> = Vec::new();
        for (&n, x) in cfg.lengths.iter().zip(&inputs) {
            let floor = if hybrid_variant { 0 } else { full_attention_floor_bytes(n, spec.heads) };
            if cfg.cap_bytes.is_some_and(|cap| predict_peak(&history, n, floor) > cap) {
                slots.push(None);
                continue;
            }
            let mut j = job(x);
            let (_, peak) = probe(&mut j)?;
            if counting && cfg.cap_bytes.is_some_and(|cap| peak as u64 > cap) {
                slots.push(None);
                continue;
            }
            history.push((n, peak as u64));
            slots.push(Some(jobs.len()));
            jobs.push(j);
        }
        let measured = time_interleaved(&mut jobs, cfg.warmups, cfg.repeats)?;
        for (&n, slot) in cfg.lengths.iter().zip(slots) {
            rows.push(match slot {
                None => BenchResult::oom(variant, n, params),
                Some(i) => {
                    let (ms, peak) = measured[i];
                    let mut r = BenchResult::measured(variant, n, ms, peak, params);
                    if !counting {
                        r.peak_bytes = None;
                    }
                    r
                }
            });
        }
    }
    fill_ratios(&mut rows);
    Ok(rows)
}

/// Settings of [`partner_scaling_benchmark`].
#[derive(Debug, Clone, PartialEq)]
pub struct PartnerConfig {
    /// Dialogue sizes; each must be at least 2.
    pub participants: Vec<usize>,
    pub n: usize,
    pub model: ModelConfig,
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for PartnerConfig {
    fn default() -> Self {
        PartnerConfig {
            participants: vec![2, 3, 5],
            n: 256,
            model: ModelConfig {
                dropout: 0.0,
                ..ModelConfig::default()
            },
            repeats: 5,
            warmups: 2,
            seed: 0,
        }
    }
}

/// Wall time of the partner-context path (assembly, context stacks and
/// cross-attention for one target) per dialogue size. Rows are named
/// `context-m{M}`; ratio columns compare consecutive sizes.
pub fn partner_scaling_benchmark(cfg: &PartnerConfig) -> Result<Vec<BenchResult>> {
    if let Some(&m) = cfg.participants.iter().find(|&&m| m < 2) {
        return Err(Error::Config(format!(
            "a dialogue needs at least 2 participants, got {m}"
        )));
    }
    if cfg.repeats < 5 {
        return Err(Error::Usage(format!("need at least 5 timed repeats, got {}", cfg.repeats)));
    }
    let mut mc = cfg.model.clone();
    mc.partner_fusion = true;
    Config { model: mc.clone(), ..Config::default() }.validate()?;
    let (store, model) = ModelParams::init(&mc, None)?;
    let mut ids = Vec::new();
    for part in [&model.ctx_audio, &model.ctx_visual] {
        ids.extend(part.iter().flat_map(|s| s.ids()));
    }
    for part in [&model.xattn_audio, &model.xattn_visual] {
        ids.extend(part.iter().flat_map(|x| x.ids()));
    }
    let params = param_count(&store, &ids);
    let counting = allocator_installed();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups: Vec<(Vec<Tensor>, Vec<Tensor>)> = cfg
        .participants
        .iter()
        .map(|&m| {
            let a = (0..m).map(|_| Tensor::randn([cfg.n, mc.k_audio], 1.0, &mut rng)).collect();
            let v = (0..m).map(|_| Tensor::randn([cfg.n, mc.k_visual], 1.0, &mut rng)).collect();
            (a, v)
        })
        .collect();
    let (model, store) = (&model, &store);
    let mut jobs: Vec<Job<'_>> = groups
        .iter()
        .map(|(audio, visual)| -> Job<'_> { Box::new(move || context_path(model, store, audio, visual)) })
        .collect();
    let measured = time_interleaved(&mut jobs, cfg.warmups, cfg.repeats)?;
    let mut rows: Vec<BenchResult> = cfg
        .participants
        .iter()
        .zip(measured)
        .map(|(&m, (ms, peak))| {
            let mut r = BenchResult::measured(&format!("context-m{m}"), cfg.n, ms, peak, params);
            if !counting {
                r.peak_bytes = None;
            }
            r
        })
        .collect();
    // Consecutive sizes are one family here.
    for i in 1..rows.len() {
        let (a, b) = (&rows[i - 1], &rows[i]);
        let t = b.time_ms.zip(a.time_ms).map(|(x, y)| x / y);
        let p = b
            .peak_bytes
            .zip(a.peak_bytes)
            .filter(|(_, y)| *y > 0)
            .map(|(x, y)| x as f64 / y as f64);
        rows[i].time_ratio = t;
        rows[i].peak_ratio = p;
    }
    Ok(rows)
}

/// Assembles the partner context for participant 0, runs the context
/// stacks and both cross-attentions.
fn context_path(model: &ModelParams, store: &ParamStore, audio: &[Tensor], visual: &[Tensor]) -> Result<()> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let groups: Vec<GroupEmbeddings> = audio
        .iter()
        .zip(visual)
        .enumerate()
        .map(|(i, (a, v))| GroupEmbeddings {
            participant: i,
            audio: tape.constant(a.clone()),
            visual: Some(tape.constant(v.clone())),
        })
        .collect();
    let ctx = assemble_partner_context(&mut tape, &groups[1..], 0)?;
    let ca = match &model.ctx_audio {
        Some(s) => s.forward(&mut tape, &p, ctx.audio)?,
        None => ctx.audio,
    };
    if let Some(x) = &model.xattn_audio {
        x.forward(&mut tape, &p, groups[0].audio, ca)?;
    }
    if let (Some(cv), Some(x), Some(v)) = (ctx.visual, &model.xattn_visual, groups[0].visual) {
        let cv = match &model.ctx_visual {
            Some(s) => s.forward(&mut tape, &p, cv)?,
            None => cv,
        };
        x.forward(&mut tape, &p, v, cv)?;
    }
    Ok(())
}

/// Runs `f` on a dedicated single-thread pool, so kernels that would fan
/// out stay on one core and timings are comparable.
pub fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
