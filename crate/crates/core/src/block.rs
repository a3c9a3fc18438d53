//! The hybrid block: chunk-local self-attention in parallel with a linear
//! state-space branch, merged residually and followed by a pre-norm FFN.
//!
//! ```text
//! U  = X + Dropout(Y_local + Proj(Y_ssm))
//! X' = U + Dropout(FFN(LayerNorm(U)))
//! ```
//!
//! `Y_local` is scaled dot-product self-attention inside non-overlapping
//! chunks of `chunk_size` frames. `Y_ssm` is the diagonal recurrence of
//! [`crate::ssm`] applied after a short depthwise causal convolution. With
//! [`Backend::Attention`] the block drops the state-space branch and attends
//! over the whole sequence, giving a plain transformer block.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::{Backend, ModelConfig};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

/// Hyper-parameters of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub width: usize,
    pub d_state: usize,
    pub chunk_size: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub selective: bool,
    pub backend: Backend,
}

impl BlockSpec {
    pub fn from_model(cfg: &ModelConfig, width: usize) -> Self {
        BlockSpec {
            width,
            d_state: cfg.d_state,
            chunk_size: cfg.chunk_size,
            heads: cfg.heads,
            conv_kernel: cfg.conv_kernel,
            ffn_expansion: cfg.ffn_expansion,
            dropout: cfg.dropout,
            ln_eps: cfg.ln_eps,
            selective: cfg.selective,
            backend: cfg.backend,
        }
    }

    /// Desk-scale spec of the given width.
    pub fn with_width(width: usize) -> Self {
        BlockSpec::from_model(&ModelConfig::default(), width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        if self.width == 0 || self.d_state == 0 || self.conv_kernel == 0 {
            return Err(Error::Config(format!("degenerate block spec {self:?}")));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Query/key/value/output projections. The key projection has no bias: a
/// shift shared by every key cancels in the softmax, so such a bias would
/// never receive gradient.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnWeights {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let mut mat = |name: &str, s: f64, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Tensor::randn([width, width], s, rng))
        };
        let wq = mat("wq", std, rng);
        let wk = mat("wk", std, rng);
        let wv = mat("wv", std, rng);
        let wo = mat("wo", 0.5 * std, rng);
        let mut bias = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros([width]));
        AttnWeights {
            wq,
            bq: bias("bq"),
            wk,
            wv,
            bv: bias("bv"),
            wo,
            bo: bias("bo"),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo,
        ]
    }

    fn qkv(&self, tape: &mut Tape<'_>, p: &Bound, xq: Var, xkv: Var) -> Result<(Var, Var, Var)> {
        let q = tape.linear(xq, p[self.wq], Some(p[self.bq]))?;
        let k = tape.linear(xkv, p[self.wk], None)?;
        let v = tape.linear(xkv, p[self.wv], Some(p[self.bv]))?;
        Ok((q, k, v))
    }

    /// Self-attention restricted to chunks of `chunk` frames, then the output
    /// projection.
    pub fn chunked(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        x: Var,
        chunk: usize,
        heads: usize,
    ) -> Result<Var> {
        let (q, k, v) = self.qkv(tape, p, x, x)?;
        let y = tape.chunked_attention(q, k, v, chunk, heads)?;
        tape.linear(y, p[self.wo], Some(p[self.bo]))
    }

    /// Queries from `x`, keys and values from `ctx`, then the output projection.
    pub fn cross(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        x: Var,
        ctx: Var,
        heads: usize,
    ) -> Result<Var> {
        let (q, k, v) = self.qkv(tape, p, x, ctx)?;
        let y = tape.attention(q, k, v, heads)?;
        tape.linear(y, p[self.wo], Some(p[self.bo]))
    }
}

/// Full self-attention with the `n×n` score matrix materialized through
/// generic tape ops. This is the quadratic reference the chunked kernel is
/// measured against.
pub fn full_attention_baseline(
    tape: &mut Tape<'_>,
    p: &Bound,
    attn: &AttnWeights,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let (q, k, v) = attn.qkv(tape, p, x, x)?;
    let d = tape.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    let y = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.linear(y, p[attn.wo], Some(p[attn.bo]))
}

/// Weights of the state-space branch, including its causal convolution and
/// output projection. `b`/`c` are the constant input/readout maps, or the
/// projections producing per-frame `B_t`/`C_t` from the ℓ2-normalized
/// convolution output in selective mode; both have
/// shape `width×d_state`.
#[derive(Debug, Clone)]
pub struct SsmWeights {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub a_raw: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d_skip: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl SsmWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.conv_w,
            self.conv_b,
            self.a_raw,
            self.b,
            self.c,
            self.d_skip,
            self.proj_w,
            self.proj_b,
        ]
    }
}

/// Pre-norm position-wise feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnWeights {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        expansion: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = width * expansion;
        FfnWeights {
            ln_g: store.add(format!("{prefix}.ln_g"), Tensor::ones([width])),
            ln_b: store.add(format!("{prefix}.ln_b"), Tensor::zeros([width])),
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::randn([width, hidden], 1.0 / (width as f64).sqrt(), rng),
            ),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::randn([hidden, width], 0.5 / (hidden as f64).sqrt(), rng),
            ),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([width])),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.ln_g, self.ln_b, self.w1, self.b1, self.w2, self.b2]
    }

    /// `FFN(LayerNorm(u))` without the residual.
    pub fn apply(&self, tape: &mut Tape<'_>, p: &Bound, u: Var, eps: f64) -> Result<Var> {
        let h = tape.layer_norm(u, p[self.ln_g], p[self.ln_b], eps)?;
        let h = tape.linear(h, p[self.w1], Some(p[self.b1]))?;
        let h = tape.silu(h)?;
        tape.linear(h, p[self.w2], Some(p[self.b2]))
    }
}

/// One hybrid block.
#[derive(Debug, Clone)]
pub struct MambaBlockParams {
    pub spec: BlockSpec,
    pub attn: AttnWeights,
    /// Absent for [`Backend::Attention`].
    pub ssm: Option<SsmWeights>,
    pub ffn: FfnWeights,
}

impl MambaBlockParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let w = spec.width;
        let attn = AttnWeights::init(store, &format!("{prefix}.attn"), w, rng);
        let ssm = match spec.backend {
            Backend::Attention => None,
            Backend::Mamba => Some(init_ssm(store, &format!("{prefix}.ssm"), &spec, rng)),
        };
        let ffn = FfnWeights::init(store, &format!("{prefix}.ffn"), w, spec.ffn_expansion, rng);
        Ok(MambaBlockParams {
            spec,
            attn,
            ssm,
            ffn,
        })
    }

    /// A block in a fresh store of its own.
    pub fn standalone<R: Rng + ?Sized>(spec: BlockSpec, rng: &mut R) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let block = MambaBlockParams::init(&mut store, "block", spec, rng)?;
        Ok((store, block))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.attn.ids();
        if let Some(s) = &self.ssm {
            ids.extend(s.ids());
        }
        ids.extend(self.ffn.ids());
        ids
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    fn check_width(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        match tape.shape(x) {
            [_, w] if *w == self.spec.width => Ok(()),
            other => Err(dim_err!(
                "block of width {} got input of shape {other:?}",
                self.spec.width
            )),
        }
    }

    /// `Y_local`: chunked self-attention including the output projection.
    pub fn local_attention(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        self.check_width(tape, x)?;
        let chunk = match self.spec.backend {
            Backend::Mamba => self.spec.chunk_size,
            Backend::Attention => tape.shape(x)[0],
        };
        self.attn.chunked(tape, p, x, chunk, self.spec.heads)
    }

    /// `Y_ssm` before the branch projection.
    pub fn ssm_branch(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        self.check_width(tape, x)?;
        let s = self
            .ssm
            .as_ref()
            .ok_or_else(|| Error::Config("attention backend has no SSM branch".into()))?;
        let xc = tape.causal_conv(x, p[s.conv_w], p[s.conv_b])?;
        let a = tape.sigmoid(p[s.a_raw])?;
        let (b, c) = if self.spec.selective {
            // Gates read the direction of each frame, not its magnitude, so
            // the branch stays linear in x.
            let u = tape.l2_normalize_rows(xc)?;
            (
                tape.linear(u, p[s.b], None)?,
                tape.linear(u, p[s.c], None)?,
            )
        } else {
            (p[s.b], p[s.c])
        };
        tape.ssm_scan(xc, a, b, c, p[s.d_skip], self.spec.selective)
    }

    /// Full block forward.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let local = self.local_attention(tape, p, x)?;
        let mixed = match &self.ssm {
            Some(s) => {
                let y = self.ssm_branch(tape, p, x)?;
                let y = tape.linear(y, p[s.proj_w], Some(p[s.proj_b]))?;
                tape.add(local, y)?
            }
            None => local,
        };
        let mixed = tape.dropout(mixed, self.spec.dropout)?;
        let u = tape.add(x, mixed)?;
        let f = self.ffn.apply(tape, p, u, self.spec.ln_eps)?;
        let f = tape.dropout(f, self.spec.dropout)?;
        tape.add(u, f)
    }

    /// Eval-mode forward on a plain tensor.
    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Time-invariant SSM operands with the decay squashed into `(0, 1)`.
    pub fn ssm_params(&self, store: &ParamStore) -> Result<SsmParams> {
        let s = self
            .ssm
            .as_ref()
            .ok_or_else(|| Error::Config("attention backend has no SSM branch".into()))?;
        if self.spec.selective {
            return Err(Error::Config(
                "selective blocks have input-dependent B and C".into(),
            ));
        }
        SsmParams::from_raw(
            store.get(s.a_raw),
            store.get(s.b).clone(),
            store.get(s.c).clone(),
            store.get(s.d_skip).clone(),
        )
    }
}

fn init_ssm<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    spec: &BlockSpec,
    rng: &mut R,
) -> SsmWeights {
    let (w, ds, kw) = (spec.width, spec.d_state, spec.conv_kernel);
    // Near-identity causal filter.
    let mut conv = Tensor::randn([kw, w], 0.2 / (kw as f64).sqrt(), rng);
    for c in 0..w {
        conv.data_mut()[c] += 1.0;
    }
    // Decays spread over [0.6, 0.98]; input gains scaled by (1 − a) so every
    // state has unit steady-state gain at initialization.
    let decay: Vec<f64> = (0..ds)
        .map(|j| 0.6 + 0.38 * j as f64 / (ds.max(2) - 1) as f64)
        .collect();
    let a_raw: Vec<f64> = (0..w * ds)
        .map(|i| {
            let a = decay[i % ds];
            (a / (1.0 - a)).ln()
        })
        .collect();
    let mut b = Tensor::randn([w, ds], 1.0, rng);
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        *v *= 1.0 - decay[i % ds];
    }
    let c_std = 1.0 / (ds as f64).sqrt();
    SsmWeights {
        conv_w: store.add(format!("{prefix}.conv_w"), conv),
        conv_b: store.add(format!("{prefix}.conv_b"), Tensor::zeros([w])),
        a_raw: store.add(
            format!("{prefix}.a_raw"),
            Tensor::new([w, ds], a_raw).expect("shape"),
        ),
        b: store.add(format!("{prefix}.b"), b),
        c: store.add(format!("{prefix}.c"), Tensor::randn([w, ds], c_std, rng)),
        d_skip: store.add(format!("{prefix}.d"), Tensor::ones([w])),
        proj_w: store.add(
            format!("{prefix}.proj_w"),
            Tensor::randn([w, w], 0.5 / (w as f64).sqrt(), rng),
        ),
        proj_b: store.add(format!("{prefix}.proj_b"), Tensor::zeros([w])),
    }
}

/// A per-frame affine map between widths.
#[derive(Debug, Clone)]
pub struct Projection {
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl Projection {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Self {
        Projection {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::randn([in_width, out_width], 1.0 / (in_width as f64).sqrt(), rng),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros([out_width])),
            in_width,
            out_width,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn apply(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// `L` blocks of one width, optionally preceded by a width projection.
#[derive(Debug, Clone)]
pub struct MambaStack {
    pub input: Option<Projection>,
    pub blocks: Vec<MambaBlockParams>,
}

impl MambaStack {
    /// Checks that every block shares one width and that the projection
    /// (if any) lands on it.
    pub fn new(input: Option<Projection>, blocks: Vec<MambaBlockParams>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Config("a stack needs at least one block".into()))?;
        let w = first.width();
        if let Some(b) = blocks.iter().find(|b| b.width() != w) {
            return Err(Error::Config(format!(
                "stack mixes block widths {w} and {}",
                b.width()
            )));
        }
        if let Some(p) = &input {
            if p.out_width != w {
                return Err(Error::Config(format!(
                    "stack input projection yields width {}, blocks expect {w}",
                    p.out_width
                )));
            }
        }
        Ok(MambaStack { input, blocks })
    }

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_width: Option<usize>,
        layers: usize,
        spec: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let input = match in_width {
            Some(iw) => Some(Projection::init(
                store,
                &format!("{prefix}.in"),
                iw,
                spec.width,
                rng,
            )),
            None => None,
        };
        let blocks = (0..layers)
            .map(|l| MambaBlockParams::init(store, &format!("{prefix}.{l}"), spec, rng))
            .collect::<Result<Vec<_>>>()?;
        MambaStack::new(input, blocks)
    }

    pub fn in_width(&self) -> usize {
        self.input
            .as_ref()
            .map_or(self.blocks[0].width(), |p| p.in_width)
    }

    pub fn out_width(&self) -> usize {
        self.blocks[0].width()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.input.as_ref().map(Projection::ids).unwrap_or_default();
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let w = tape.shape(x).get(1).copied().unwrap_or(0);
        if w != self.in_width() {
            return Err(dim_err!(
                "stack expects width {}, got input of shape {:?}",
                self.in_width(),
                tape.shape(x)
            ));
        }
        let mut h = match &self.input {
            Some(proj) => proj.apply(tape, p, x)?,
            None => x,
        };
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

/// Exact scalar-parameter count of a set of parameters.
pub fn param_count(store: &ParamStore, ids: &[ParamId]) -> usize {
    store.numel_of(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(width: usize, seed: u64, f: impl FnOnce(&mut BlockSpec)) -> (ParamStore, MambaBlockParams) {
        let mut spec = BlockSpec::with_width(width);
        spec.d_state = 4;
        f(&mut spec);
        MambaBlockParams::standalone(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn block_preserves_shape() {
        let (store, b) = block(32, 0, |_| {});
        let x = Tensor::randn([96, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(b.forward_eval(&store, &x).unwrap().shape(), &[96, 32]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (store, b) = block(8, 0, |_| {});
        let x = Tensor::zeros([4, 6]);
        assert!(matches!(b.forward_eval(&store, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_chunk_is_a_config_error() {
        let mut spec = BlockSpec::with_width(4);
        spec.chunk_size = 0;
        assert!(matches!(
            MambaBlockParams::standalone(spec, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_zero_weights_leave_only_ffn_bias() {
        let (mut store, b) = block(6, 0, |_| {});
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6]);
        *store.get_mut(b.ffn.b2) = bias.clone();
        let x = Tensor::randn([8, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = b.forward_eval(&store, &x).unwrap();
        for r in 0..8 {
            for c in 0..6 {
                assert_eq!(y.at(r, c), x.at(r, c) + bias.data()[c]);
            }
        }
    }

    #[test]
    fn param_count_of_single_affine() {
        let mut store = ParamStore::new();
        let p = Projection::init(&mut store, "p", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(param_count(&store, &p.ids()), 8);
    }

    #[test]
    fn param_count_matches_hand_enumeration() {
        // width 4, d_state 2, kernel 4, expansion 2:
        //   attention   4 × 4·4 + 3 × 4        = 76
        //   conv        4·4 + 4                = 20
        //   A, B, C     3 × 4·2                = 24
        //   D                                  =  4
        //   proj        4·4 + 4                = 20
        //   layer norm  4 + 4                  =  8
        //   ffn         4·8 + 8 + 8·4 + 4      = 76
        let (store, b) = block(4, 0, |s| s.d_state = 2);
        assert_eq!(param_count(&store, &b.ids()), 76 + 20 + 24 + 4 + 20 + 8 + 76);
        assert_eq!(store.numel(), 228);
    }

    #[test]
    fn attention_backend_has_no_ssm_branch() {
        let (store, b) = block(4, 0, |s| s.backend = Backend::Attention);
        assert!(b.ssm.is_none());
        assert_eq!(param_count(&store, &b.ids()), 76 + 8 + 76);
        assert!(b.ssm_params(&store).is_err());
    }

    #[test]
    fn stack_rejects_mixed_widths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = MambaBlockParams::init(&mut store, "a", BlockSpec::with_width(4), &mut rng).unwrap();
        let b = MambaBlockParams::init(&mut store, "b", BlockSpec::with_width(8), &mut rng).unwrap();
        assert!(matches!(MambaStack::new(None, vec![a, b]), Err(Error::Config(_))));
    }
}
