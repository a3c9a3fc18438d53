//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because inputs
//! always precede outputs. Gradients of tensors with several consumers are
//! summed.
//!
//! Parameters are borrowed into the tape ([`Tape::param`]), so a parameter set
//! can be shared by many tapes on many threads. Each tape belongs to one
//! thread.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::ssm::{self, ScanInputs};
use crate::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row blocks of an attention op: each query range attends only to its
/// paired key/value range.
#[derive(Debug, Clone)]
struct AttnBlock {
    q: (usize, usize),
    kv: (usize, usize),
}

/// Negative sets for the contrastive op: `None` means every other frame.
#[derive(Debug, Clone)]
pub enum Negatives {
    All,
    Sampled(Vec<Vec<usize>>),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Silu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttnBlock>,
        probs: Vec<Vec<f64>>,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SsmScan {
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        selective: bool,
        d_state: usize,
        states: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    InfoNce {
        a: Var,
        v: Var,
        tau: f64,
        negatives: Negatives,
    },
    CccLoss {
        pred: Var,
        label: Var,
        eps: f64,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Eval,
    Train { seed: u64 },
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    mode: Mode,
    checked: bool,
    dropout_calls: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p> Tape<'p> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: Mode::Eval,
            checked: true,
            dropout_calls: 0,
        }
    }

    /// Training-mode tape; dropout masks derive from `seed` and call order.
    pub fn training(seed: u64) -> Self {
        Tape {
            mode: Mode::Train { seed },
            ..Tape::new()
        }
    }

    /// Disables the per-op finiteness check.
    pub fn unchecked(mut self) -> Self {
        self.checked = false;
        self
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked {
            value.check_finite("op output")?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; gradients are collected for it when `requires_grad`.
    pub fn var(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(t), requires_grad)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.var(t, false)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, p) = self.dims2(b)?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions disagree: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * p];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        self.push(Tensor::new([m, p], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2(x)?;
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), &[x])
    }

    /// Per-row affine map `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, a) = self.dims2(x)?;
        let (a2, p) = self.dims2(w)?;
        if a != a2 {
            return Err(dim_err!(
                "linear width mismatch: input {:?}, weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        let mut out = vec![0.0; n * p];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [p] {
                return Err(dim_err!(
                    "linear bias shape {:?} does not match output width {p}",
                    bias.shape()
                ));
            }
            for row in out.chunks_exact_mut(p) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, n, a, p);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new([n, p], out)?, Op::Linear { x, w, b }, &inputs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Row-wise standardization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if d == 0 {
            return Err(dim_err!("layer_norm over zero-width rows"));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err!(
                "layer_norm affine shapes {:?}/{:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mu) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + bv[c];
            }
        }
        self.push(
            Tensor::new([n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Softmax along each row, with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        self.push(Tensor::new([n, m], out)?, Op::SoftmaxRows(x), &[x])
    }

    /// Inverted dropout. Identity (no node) in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
        }
        let Mode::Train { seed } = self.mode else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ call.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat_cols(&tensors)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if start >= end || end > d {
            return Err(dim_err!("column range {start}..{end} out of bounds for width {d}"));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + end]);
        }
        self.push(Tensor::new([n, w], out)?, Op::SliceCols { x, start }, &[x])
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(dim_err!("select_rows with an empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err!("row index {bad} out of bounds for {n} rows"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        self.push(
            Tensor::new([rows.len(), d], out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Scaled dot-product self-attention restricted to non-overlapping
    /// chunks of `chunk` rows. The final chunk is short when `chunk` does not
    /// divide the row count.
    pub fn chunked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        chunk: usize,
        heads: usize,
    ) -> Result<Var> {
        if chunk == 0 {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        let (n, _) = self.dims2(q)?;
        if self.dims2(k)?.0 != n || self.dims2(v)?.0 != n {
            return Err(dim_err!(
                "self-attention needs equal row counts, got {:?}/{:?}/{:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        let blocks = (0..n)
            .step_by(chunk)
            .map(|s| AttnBlock {
                q: (s, (s + chunk).min(n)),
                kv: (s, (s + chunk).min(n)),
            })
            .collect();
        self.attention_blocks(q, k, v, heads, blocks)
    }

    /// Scaled dot-product attention of every query row over all key rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let nq = self.dims2(q)?.0;
        let nk = self.dims2(k)?.0;
        if self.dims2(v)?.0 != nk {
            return Err(dim_err!(
                "keys {:?} and values {:?} need equal row counts",
                self.shape(k),
                self.shape(v)
            ));
        }
        let blocks = vec![AttnBlock {
            q: (0, nq),
            kv: (0, nk),
        }];
        self.attention_blocks(q, k, v, heads, blocks)
    }

    fn attention_blocks(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttnBlock>,
    ) -> Result<Var> {
        let (nq, d) = self.dims2(q)?;
        if self.dims2(k)?.1 != d || self.dims2(v)?.1 != d {
            return Err(dim_err!(
                "attention widths disagree: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for blk in &blocks {
            let (q0, q1) = blk.q;
            let (k0, k1) = blk.kv;
            let lk = k1 - k0;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; (q1 - q0) * lk];
                for i in q0..q1 {
                    let qi = &qs[i * d + off..i * d + off + dh];
                    let prow = &mut p[(i - q0) * lk..(i - q0 + 1) * lk];
                    for j in k0..k1 {
                        prow[j - k0] = scale * dot(qi, &ks[j * d + off..j * d + off + dh]);
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[i * d + off..i * d + off + dh];
                    for j in k0..k1 {
                        let pj = prow[j - k0];
                        let vj = &vs[j * d + off..j * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            Tensor::new([nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Depthwise causal convolution: `y[t,c] = b[c] + Σ_k w[k,c]·x[t−k,c]`,
    /// zero-padded before the first frame.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        let (kw, d2) = self.dims2(w)?;
        if d2 != d || self.shape(b) != [d] {
            return Err(dim_err!(
                "causal_conv shapes: x {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            ));
        }
        let (xs, ws, bs) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            let orow = &mut out[t * d..(t + 1) * d];
            orow.copy_from_slice(bs);
            for k in 0..kw.min(t + 1) {
                let xrow = &xs[(t - k) * d..(t - k + 1) * d];
                let wrow = &ws[k * d..(k + 1) * d];
                for c in 0..d {
                    orow[c] += wrow[c] * xrow[c];
                }
            }
        }
        self.push(Tensor::new([n, d], out)?, Op::CausalConv { x, w, b }, &[x, w, b])
    }

    /// Diagonal state-space recurrence (blocked scan).
    ///
    /// `a` is `d×d_state` (already squashed into the stable range), `d` is the
    /// per-channel feedthrough of shape `[d]`. With `selective == false`, `b`
    /// and `c` are `d×d_state`; with `selective == true` they are
    /// `n×d_state` rows computed from the input, shared across channels.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        selective: bool,
    ) -> Result<Var> {
        let (n, width) = self.dims2(x)?;
        let (ad, ds) = self.dims2(a)?;
        let coeff_rows = if selective { n } else { width };
        if ad != width
            || self.shape(b) != [coeff_rows, ds]
            || self.shape(c) != [coeff_rows, ds]
            || self.shape(d) != [width]
        {
            return Err(dim_err!(
                "ssm_scan shapes: x {:?}, A {:?}, B {:?}, C {:?}, D {:?} (selective = {selective})",
                self.shape(x),
                self.shape(a),
                self.shape(b),
                self.shape(c),
                self.shape(d)
            ));
        }
        let inputs = ScanInputs {
            x: self.value(x).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
            n,
            width,
            d_state: ds,
            selective,
        };
        // States are only kept for the backward pass.
        let (y, states) = if [x, a, b, c, d].iter().any(|v| self.nodes[v.0].requires_grad) {
            ssm::scan_blocked(&inputs, ssm::SCAN_BLOCK)
        } else {
            (ssm::scan_output(&inputs), Vec::new())
        };
        self.push(
            Tensor::new([n, width], y)?,
            Op::SsmScan {
                x,
                a,
                b,
                c,
                d,
                selective,
                d_state: ds,
                states,
            },
            &[x, a, b, c, d],
        )
    }

    /// Scales each row to unit ℓ2 norm (norm smoothed by 1e-12 under the root).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_exact_mut(d) {
            let nr = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        self.push(Tensor::new([n, d], out)?, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Summed symmetric InfoNCE over the frames of one participant.
    ///
    /// Rows of `a` and `v` are frame embeddings (normally already
    /// ℓ2-normalized). For frame `r` the positive is the other modality at
    /// `r`; negatives are the other modality at the frames in `negatives`.
    /// Returns `Σ_r [ℓ_{A→V}(r) + ℓ_{V→A}(r)]` as a scalar.
    pub fn info_nce(&mut self, a: Var, v: Var, tau: f64, negatives: Negatives) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        let (n, k) = self.dims2(a)?;
        if self.dims2(v)? != (n, k) {
            return Err(dim_err!(
                "info_nce needs matching shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(v)
            ));
        }
        if let Negatives::Sampled(sets) = &negatives {
            if sets.len() != n || sets.iter().flatten().any(|&j| j >= n) {
                return Err(dim_err!("negative index sets do not match {n} frames"));
            }
        }
        let sim = similarity(self.value(a).data(), self.value(v).data(), n, k, tau);
        let mut total = 0.0;
        for r in 0..n {
            let cand = candidates(&negatives, r, n);
            // A→V uses row r of the similarity matrix, V→A uses column r.
            total += logsumexp(cand.iter().map(|&j| sim[r * n + j])) - sim[r * n + r];
            total += logsumexp(cand.iter().map(|&j| sim[j * n + r])) - sim[r * n + r];
        }
        self.push(
            Tensor::scalar(total),
            Op::InfoNce {
                a,
                v,
                tau,
                negatives,
            },
            &[a, v],
        )
    }

    /// `1 − CCC(pred, label)` with `eps` added to the denominator.
    /// Both inputs are flattened; population moments are used.
    pub fn ccc_loss(&mut self, pred: Var, label: Var, eps: f64) -> Result<Var> {
        let (p, l) = (self.value(pred), self.value(label));
        if p.numel() != l.numel() {
            return Err(Error::Alignment(format!(
                "ccc_loss length mismatch: {:?} vs {:?}",
                p.shape(),
                l.shape()
            )));
        }
        if p.numel() < 2 {
            return Err(dim_err!("ccc needs at least two frames"));
        }
        let m = CccMoments::new(p.data(), l.data());
        let loss = 1.0 - 2.0 * m.cov / (m.denominator() + eps);
        self.push(
            Tensor::scalar(loss),
            Op::CccLoss { pred, label, eps },
            &[pred, label],
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let p = val(*b).cols();
                acc(*a, &mut |ga| gemm_bt_acc(g, val(*b).data(), ga, m, p, k));
                acc(*b, &mut |gb| gemm_at_acc(val(*a).data(), g, gb, m, k, p));
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2().unwrap();
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, a) = val(*x).dims2().unwrap();
                let p = val(*w).cols();
                acc(*x, &mut |gx| gemm_bt_acc(g, val(*w).data(), gx, n, p, a));
                acc(*w, &mut |gw| gemm_at_acc(val(*x).data(), g, gw, n, a, p));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks_exact(p) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Silu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            gx[r * d + c] += is * (dh - inv_d * s1 - hr[c] * inv_d * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let m = out.cols();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for (r, (gr, yr)) in g.chunks_exact(m).zip(y.chunks_exact(m)).enumerate() {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            gx[r * m + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let (n, w) = val(*p).dims2().unwrap();
                    acc(*p, &mut |gp| {
                        for r in 0..n {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).numel();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = val(*x).dims2().unwrap();
                let w = out.cols();
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        add_into(
                            &mut gx[r * d + start..r * d + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let d = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let d = val(*q).cols();
                let (nq, nk) = (val(*q).rows(), val(*k).rows());
                let (dq, dk, dv) = attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    g,
                    (nq, nk, d, *heads),
                    blocks,
                    probs,
                );
                acc(*q, &mut |o| add_into(o, &dq));
                acc(*k, &mut |o| add_into(o, &dk));
                acc(*v, &mut |o| add_into(o, &dv));
            }
            Op::CausalConv { x, w, b } => {
                let (n, d) = val(*x).dims2().unwrap();
                let kw = val(*w).rows();
                let (xs, ws) = (val(*x).data(), val(*w).data());
                acc(*x, &mut |gx| {
                    for t in 0..n {
                        for k in 0..kw.min(t + 1) {
                            for c in 0..d {
                                gx[(t - k) * d + c] += g[t * d + c] * ws[k * d + c];
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for t in 0..n {
                        for k in 0..kw.min(t + 1) {
                            for c in 0..d {
                                gw[k * d + c] += g[t * d + c] * xs[(t - k) * d + c];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::SsmScan {
                x,
                a,
                b,
                c,
                d,
                selective,
                d_state,
                states,
            } => {
                let (n, width) = val(*x).dims2().unwrap();
                let inputs = ScanInputs {
                    x: val(*x).data(),
                    a: val(*a).data(),
                    b: val(*b).data(),
                    c: val(*c).data(),
                    d: val(*d).data(),
                    n,
                    width,
                    d_state: *d_state,
                    selective: *selective,
                };
                let sg = ssm::scan_backward(&inputs, states, g);
                acc(*x, &mut |o| add_into(o, &sg.dx));
                acc(*a, &mut |o| add_into(o, &sg.da));
                acc(*b, &mut |o| add_into(o, &sg.db));
                acc(*c, &mut |o| add_into(o, &sg.dc));
                acc(*d, &mut |o| add_into(o, &sg.dd));
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = out.cols();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for (r, nr) in norms.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let proj = dot(gr, yr);
                        for c in 0..d {
                            gx[r * d + c] += (gr[c] - yr[c] * proj) / nr;
                        }
                    }
                });
            }
            Op::InfoNce {
                a,
                v,
                tau,
                negatives,
            } => {
                let (n, k) = val(*a).dims2().unwrap();
                let (av, vv) = (val(*a).data(), val(*v).data());
                let sim = similarity(av, vv, n, k, *tau);
                // dsim[r][j] collects ∂loss/∂sim[r][j].
                let mut dsim = vec![0.0; n * n];
                for r in 0..n {
                    let cand = candidates(negatives, r, n);
                    let lse = logsumexp(cand.iter().map(|&j| sim[r * n + j]));
                    for &j in &cand {
                        dsim[r * n + j] += (sim[r * n + j] - lse).exp();
                    }
                    let lse = logsumexp(cand.iter().map(|&j| sim[j * n + r]));
                    for &j in &cand {
                        dsim[j * n + r] += (sim[j * n + r] - lse).exp();
                    }
                    dsim[r * n + r] -= 2.0;
                }
                let s = g[0] / tau;
                dsim.iter_mut().for_each(|x| *x *= s);
                acc(*a, &mut |ga| gemm_acc(&dsim, vv, ga, n, n, k));
                acc(*v, &mut |gv| gemm_at_acc(&dsim, av, gv, n, n, k));
            }
            Op::CccLoss { pred, label, eps } => {
                let (p, l) = (val(*pred).data(), val(*label).data());
                let m = CccMoments::new(p, l);
                let n = p.len() as f64;
                let den = m.denominator() + eps;
                let num = 2.0 * m.cov;
                // d(1 − num/den) = −(dnum·den − num·dden)/den²
                let grad = |xs: &[f64], other: &[f64], mx: f64, mo: f64| -> Vec<f64> {
                    xs.iter()
                        .zip(other)
                        .map(|(&xi, &oi)| {
                            let dnum = 2.0 * (oi - mo) / n;
                            let dden = 2.0 * (xi - mx) / n + 2.0 * (mx - mo) / n;
                            -g[0] * (dnum * den - num * dden) / (den * den)
                        })
                        .collect()
                };
                acc(*pred, &mut |gp| add_into(gp, &grad(p, l, m.mean_a, m.mean_b)));
                acc(*label, &mut |gl| add_into(gl, &grad(l, p, m.mean_b, m.mean_a)));
            }
        }
    }
}

/// Gradients of the leaves that requested them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of a leaf gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn similarity(a: &[f64], v: &[f64], n: usize, k: usize, tau: f64) -> Vec<f64> {
    let mut sim = vec![0.0; n * n];
    gemm_bt_acc(a, v, &mut sim, n, k, n);
    sim.iter_mut().for_each(|s| *s /= tau);
    sim
}

/// Positive frame `r` followed by its negatives.
fn candidates(neg: &Negatives, r: usize, n: usize) -> Vec<usize> {
    let mut c = vec![r];
    match neg {
        Negatives::All => c.extend((0..n).filter(|&j| j != r)),
        Negatives::Sampled(sets) => c.extend(sets[r].iter().copied().filter(|&j| j != r)),
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qs: &[f64],
    ks: &[f64],
    vs: &[f64],
    g: &[f64],
    (nq, nk, d, heads): (usize, usize, usize, usize),
    blocks: &[AttnBlock],
    probs: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut pi = 0;
    for blk in blocks {
        let (q0, q1) = blk.q;
        let (k0, k1) = blk.kv;
        let lk = k1 - k0;
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[pi];
            pi += 1;
            let mut ds = vec![0.0; lk];
            for i in q0..q1 {
                let prow = &p[(i - q0) * lk..(i - q0 + 1) * lk];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut rowdot = 0.0;
                for j in k0..k1 {
                    let dp = dot(gi, &vs[j * d + off..j * d + off + dh]);
                    ds[j - k0] = dp;
                    rowdot += prow[j - k0] * dp;
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    let pj = prow[j - k0];
                    for (o, &gv) in dvj.iter_mut().zip(gi) {
                        *o += pj * gv;
                    }
                }
                let qi = &qs[i * d + off..i * d + off + dh];
                for j in k0..k1 {
                    let s = scale * prow[j - k0] * (ds[j - k0] - rowdot);
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for (o, &kv) in dqi.iter_mut().zip(kj) {
                        *o += s * kv;
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for (o, &qv) in dkj.iter_mut().zip(qi) {
                        *o += s * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Population moments shared by the CCC metric and loss.
pub(crate) struct CccMoments {
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl CccMoments {
    pub fn new(a: &[f64], b: &[f64]) -> Self {
        let n = a.len() as f64;
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_b = b.iter().sum::<f64>() / n;
        let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x - mean_a, y - mean_b);
            var_a += dx * dx;
            var_b += dy * dy;
            cov += dx * dy;
        }
        CccMoments {
            mean_a,
            mean_b,
            var_a: var_a / n,
            var_b: var_b / n,
            cov: cov / n,
        }
    }

    pub fn denominator(&self) -> f64 {
        let dm = self.mean_a - self.mean_b;
        self.var_a + self.var_b + dm * dm
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Central-difference gradient checker (five-point stencil).
///
/// The relative error of a coordinate is
/// `|g_tape − g_fd| / max(|g_tape|, |g_fd|, floor)`. The floor sits at the
/// round-off level of a central difference, so coordinates whose true
/// gradient is structurally zero are judged by absolute error instead.
/// `max_coords` caps how many coordinates of each input are probed; the
/// probed subset is drawn from `seed`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    pub floor: f64,
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-3,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone(), true)).collect();
        let root = f(&mut tape, &vars)?;
        let grads = tape.backward(root)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: (0, 0),
            checked: 0,
        };
        let mut xs = inputs.to_vec();
        for (ii, var) in vars.iter().enumerate() {
            let numel = inputs[ii].numel();
            let analytic = grads
                .get(*var)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; numel]);
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < numel => rand::seq::index::sample(&mut rng, numel, k).into_vec(),
                _ => (0..numel).collect(),
            };
            for e in coords {
                let orig = xs[ii].data()[e];
                let mut at = |delta: f64| -> Result<f64> {
                    xs[ii].data_mut()[e] = orig + delta;
                    eval(&xs)
                };
                let h = self.h;
                let (f2p, f1p, f1m, f2m) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
                xs[ii].data_mut()[e] = orig;
                // Fourth-order central stencil.
                let numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h);
                let rel = (analytic[e] - numeric).abs()
                    / analytic[e].abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (ii, e);
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let check = GradCheck {
        h,
        ..GradCheck::default()
    };
    Ok(check
        .run(|t, v| f(t, v[0]), std::slice::from_ref(x))?
        .max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let b = t.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let y = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);
        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_matches_finite_differences() {
        let mut r = rng(1);
        let a = Tensor::randn([4, 3], 1.0, &mut r);
        let b = Tensor::randn([3, 2], 1.0, &mut r);
        let rep = GradCheck::default()
            .run(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    t.sum(y)
                },
                &[a, b],
            )
            .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn layer_norm_constant_row_and_two_point_row() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones([2]));
        let b = t.constant(Tensor::zeros([2]));
        let x = t.constant(Tensor::from_rows(&[&[4.0, 4.0], &[1.0, 3.0]]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert_abs_diff_eq!(v[2], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(v[3], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn layer_norm_rejects_bad_eps_and_affine() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones([3]));
        let b = t.constant(Tensor::zeros([3]));
        let x = t.constant(Tensor::zeros([2, 2]));
        assert!(matches!(t.layer_norm(x, g, b, 1e-5), Err(Error::Dimension(_))));
        let g2 = t.constant(Tensor::ones([2]));
        let b2 = t.constant(Tensor::zeros([2]));
        assert!(matches!(t.layer_norm(x, g2, b2, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_grad_check() {
        let mut r = rng(2);
        let x = Tensor::randn([3, 5], 1.0, &mut r);
        let g = Tensor::randn([5], 1.0, &mut r);
        let b = Tensor::randn([5], 1.0, &mut r);
        let w = Tensor::randn([3, 5], 1.0, &mut r);
        let rep = GradCheck::default()
            .run(
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    let y = t.mul(y, v[3])?;
                    t.sum(y)
                },
                &[x, g, b, w],
            )
            .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[
            &[0.3, 0.3, 0.3, 0.3],
            &[0.0, 2f64.ln(), 1000.0, 1000.0],
        ]));
        let a = t.slice_cols(x, 0, 4).unwrap();
        let s = t.softmax_rows(a).unwrap();
        for v in &t.value(s).data()[..4] {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
        let two = t.slice_cols(x, 0, 2).unwrap();
        let two = t.select_rows(two, &[1]).unwrap();
        let s = t.softmax_rows(two).unwrap();
        assert_abs_diff_eq!(t.value(s).data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(s).data()[1], 2.0 / 3.0, epsilon = 1e-15);
        let big = t.slice_cols(x, 2, 4).unwrap();
        let big = t.select_rows(big, &[1]).unwrap();
        let s = t.softmax_rows(big).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn linear_identity_and_shape() {
        let mut r = rng(3);
        let mut t = Tape::new();
        let xt = Tensor::randn([7, 88], 1.0, &mut r);
        let x = t.constant(xt.clone());
        let w = t.constant(Tensor::eye(88));
        let b = t.constant(Tensor::zeros([88]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &xt);
        let w = t.constant(Tensor::randn([88, 16], 0.1, &mut r));
        let y = t.linear(x, w, None).unwrap();
        assert_eq!(t.shape(y), &[7, 16]);
        let bad = t.constant(Tensor::zeros([16, 2]));
        assert!(matches!(t.linear(x, bad, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_trivial_roots() {
        let mut r = rng(4);
        let xt = Tensor::randn([2, 3], 1.0, &mut r);
        let yt = Tensor::randn([2, 3], 1.0, &mut r);
        let mut t = Tape::new();
        let x = t.var(xt.clone(), true);
        let y = t.constant(yt.clone());
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &Tensor::ones([2, 3]));
        let p = t.mul(x, y).unwrap();
        let s = t.sum(p).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &yt);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.var(Tensor::zeros([2]), true);
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.var(Tensor::vector(vec![1.0, 2.0]), true);
        let a = t.scale(x, 3.0).unwrap();
        let b = t.mul(x, x).unwrap();
        let c = t.add(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        // d/dx (3x + x²) = 3 + 2x
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn composite_linear_layer_norm_sum() {
        let mut r = rng(5);
        let x = Tensor::randn([4, 3], 1.0, &mut r);
        let w = Tensor::randn([3, 5], 1.0, &mut r);
        let b = Tensor::randn([5], 1.0, &mut r);
        let gain = Tensor::randn([5], 1.0, &mut r);
        let beta = Tensor::randn([5], 1.0, &mut r);
        let coef = Tensor::randn([4, 5], 1.0, &mut r);
        let rep = GradCheck::default()
            .run(
                |t, v| {
                    let h = t.linear(v[0], v[1], Some(v[2]))?;
                    let h = t.layer_norm(h, v[3], v[4], 1e-5)?;
                    let c = t.constant(coef.clone());
                    let h = t.mul(h, c)?;
                    t.sum(h)
                },
                &[x, w, b, gain, beta],
            )
            .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn quadratic_finite_difference_is_near_exact() {
        let err = finite_diff_check(|t, x| t.mul(x, x).and_then(|y| t.sum(y)), &Tensor::scalar(3.0), 1e-5)
            .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let x = Tensor::ones([4, 8]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        assert_eq!(t.dropout(v, 0.5).unwrap(), v);

        let run = |seed| {
            let mut t = Tape::training(seed);
            let v = t.constant(x.clone());
            let y = t.dropout(v, 0.5).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
        assert!(run(9).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn checked_mode_rejects_non_finite_outputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite(_))));
        let mut t = Tape::new().unchecked();
        let x = t.constant(Tensor::scalar(f64::MAX));
        assert!(t.scale(x, 10.0).is_ok());
    }
}

