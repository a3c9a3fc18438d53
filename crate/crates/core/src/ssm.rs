//! Linear state-space recurrence
//!
//! ```text
//! s_t = A s_{t-1} + B x_t
//! y_t = C s_t + D x_t,      s_0 = 0
//! ```
//!
//! with `A` diagonal per channel: every input channel `c` owns `d_state`
//! independent decaying states `s_t[c, j] = a[c, j]·s_{t-1}[c, j] + b·x_t[c]`.
//!
//! Two evaluators are provided. [`scan_naive`] is the direct sequential
//! recurrence and serves as the oracle. [`scan_blocked`] is the fast path: it
//! treats the recurrence as an associative scan over `(a, u)` pairs, runs a
//! local scan inside fixed-length blocks, propagates block carries, and then
//! fixes up each block with powers of `a`. Blocks are independent in the first
//! and last phase and are processed in parallel.

use rayon::prelude::*;

use crate::autograd::sigmoid;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Block length of the fast scan.
pub const SCAN_BLOCK: usize = 32;

/// Minimum work (`n·width·d_state`) before block phases fan out to rayon.
const PAR_THRESHOLD: usize = 1 << 18;

/// Borrowed operands of one scan. `b`/`c` are `width×d_state` for the
/// time-invariant form and `n×d_state` (shared by all channels) when
/// `selective` is set.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
    pub n: usize,
    pub width: usize,
    pub d_state: usize,
    pub selective: bool,
}

impl ScanInputs<'_> {
    #[inline]
    fn coeff<'s>(&self, m: &'s [f64], t: usize) -> CoeffRow<'s> {
        if self.selective {
            CoeffRow::Shared(&m[t * self.d_state..(t + 1) * self.d_state])
        } else {
            CoeffRow::PerChannel(m)
        }
    }
}

enum CoeffRow<'s> {
    PerChannel(&'s [f64]),
    Shared(&'s [f64]),
}

impl CoeffRow<'_> {
    #[inline]
    fn get(&self, ch: usize, j: usize, ds: usize) -> f64 {
        match self {
            CoeffRow::PerChannel(m) => m[ch * ds + j],
            CoeffRow::Shared(m) => m[j],
        }
    }
}

/// Sequential recurrence. Returns `(y, states)` with states laid out
/// `[t][channel][state]`.
pub fn scan_naive(p: &ScanInputs<'_>) -> (Vec<f64>, Vec<f64>) {
    let (n, w, ds) = (p.n, p.width, p.d_state);
    let m = w * ds;
    let mut states = vec![0.0; n * m];
    let mut y = vec![0.0; n * w];
    let mut s = vec![0.0; m];
    for t in 0..n {
        let (b, c) = (p.coeff(p.b, t), p.coeff(p.c, t));
        for ch in 0..w {
            let xt = p.x[t * w + ch];
            let mut acc = p.d[ch] * xt;
            for j in 0..ds {
                let i = ch * ds + j;
                s[i] = p.a[i] * s[i] + b.get(ch, j, ds) * xt;
                acc += c.get(ch, j, ds) * s[i];
            }
            y[t * w + ch] = acc;
        }
        states[t * m..(t + 1) * m].copy_from_slice(&s);
    }
    (y, states)
}

/// Outputs only: the recurrence with a single running state, for passes
/// that will never be differentiated.
pub fn scan_output(p: &ScanInputs<'_>) -> Vec<f64> {
    let (n, w, ds) = (p.n, p.width, p.d_state);
    let mut y = vec![0.0; n * w];
    let mut s = vec![0.0; w * ds];
    for t in 0..n {
        let (b, c) = (p.coeff(p.b, t), p.coeff(p.c, t));
        for ch in 0..w {
            let xt = p.x[t * w + ch];
            let mut acc = p.d[ch] * xt;
            for j in 0..ds {
                let i = ch * ds + j;
                s[i] = p.a[i] * s[i] + b.get(ch, j, ds) * xt;
                acc += c.get(ch, j, ds) * s[i];
            }
            y[t * w + ch] = acc;
        }
    }
    y
}

/// Blocked associative scan; same contract as [`scan_naive`].
pub fn scan_blocked(p: &ScanInputs<'_>, block: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, w, ds) = (p.n, p.width, p.d_state);
    let m = w * ds;
    let block = block.max(1);
    let parallel = n * m >= PAR_THRESHOLD && rayon::current_num_threads() > 1;

    // Phase 1: zero-initialized local scan inside each block.
    let mut states = vec![0.0; n * m];
    let local = |(bi, chunk): (usize, &mut [f64])| {
        let t0 = bi * block;
        let rows = chunk.len() / m;
        for i in 0..rows {
            let t = t0 + i;
            let b = p.coeff(p.b, t);
            let (head, tail) = chunk.split_at_mut(i * m);
            let row = &mut tail[..m];
            for ch in 0..w {
                let xt = p.x[t * w + ch];
                for j in 0..ds {
                    row[ch * ds + j] = b.get(ch, j, ds) * xt;
                }
            }
            if i > 0 {
                let prev = &head[(i - 1) * m..];
                for (k, v) in row.iter_mut().enumerate() {
                    *v += p.a[k] * prev[k];
                }
            }
        }
    };
    if parallel {
        states
            .par_chunks_mut(block * m)
            .enumerate()
            .for_each(local);
    } else {
        states.chunks_mut(block * m).enumerate().for_each(local);
    }

    // Phase 2: carry the state entering each block.
    let nblocks = n.div_ceil(block);
    let mut pow_full = vec![1.0; m];
    for _ in 0..block {
        for k in 0..m {
            pow_full[k] *= p.a[k];
        }
    }
    let mut carries = vec![0.0; nblocks * m];
    for bi in 1..nblocks {
        let last = (bi * block - 1) * m;
        let (done, rest) = carries.split_at_mut(bi * m);
        let prev = &done[(bi - 1) * m..];
        for k in 0..m {
            rest[k] = pow_full[k] * prev[k] + states[last + k];
        }
    }

    // Phase 3: add a^{i+1}·carry and read out y.
    let mut y = vec![0.0; n * w];
    let fixup = |(bi, (chunk, ychunk)): (usize, (&mut [f64], &mut [f64]))| {
        let carry = &carries[bi * m..(bi + 1) * m];
        let mut pw: Vec<f64> = p.a[..m].to_vec();
        let t0 = bi * block;
        for (i, (row, yrow)) in chunk
            .chunks_exact_mut(m)
            .zip(ychunk.chunks_exact_mut(w))
            .enumerate()
        {
            let t = t0 + i;
            if bi > 0 {
                for k in 0..m {
                    row[k] += pw[k] * carry[k];
                    pw[k] *= p.a[k];
                }
            }
            let c = p.coeff(p.c, t);
            for ch in 0..w {
                let mut acc = p.d[ch] * p.x[t * w + ch];
                for j in 0..ds {
                    acc += c.get(ch, j, ds) * row[ch * ds + j];
                }
                yrow[ch] = acc;
            }
        }
    };
    if parallel {
        states
            .par_chunks_mut(block * m)
            .zip(y.par_chunks_mut(block * w))
            .enumerate()
            .for_each(fixup);
    } else {
        states
            .chunks_mut(block * m)
            .zip(y.chunks_mut(block * w))
            .enumerate()
            .for_each(fixup);
    }
    (y, states)
}

/// Gradients of a scan with respect to each operand.
pub struct ScanGrads {
    pub dx: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd: Vec<f64>,
}

/// Adjoint recurrence `g_t = Cᵀ dy_t + A g_{t+1}` run backwards in time.
pub fn scan_backward(p: &ScanInputs<'_>, states: &[f64], dy: &[f64]) -> ScanGrads {
    let (n, w, ds) = (p.n, p.width, p.d_state);
    let m = w * ds;
    let mut gr = ScanGrads {
        dx: vec![0.0; n * w],
        da: vec![0.0; m],
        db: vec![0.0; p.b.len()],
        dc: vec![0.0; p.c.len()],
        dd: vec![0.0; w],
    };
    let mut g = vec![0.0; m];
    for t in (0..n).rev() {
        let (b, c) = (p.coeff(p.b, t), p.coeff(p.c, t));
        let s_t = &states[t * m..(t + 1) * m];
        for ch in 0..w {
            let dyt = dy[t * w + ch];
            let xt = p.x[t * w + ch];
            gr.dd[ch] += dyt * xt;
            let mut dx = p.d[ch] * dyt;
            for j in 0..ds {
                let i = ch * ds + j;
                g[i] = c.get(ch, j, ds) * dyt + p.a[i] * g[i];
                dx += b.get(ch, j, ds) * g[i];
                if t > 0 {
                    gr.da[i] += g[i] * states[(t - 1) * m + i];
                }
                let (bi, ci) = if p.selective {
                    (t * ds + j, t * ds + j)
                } else {
                    (i, i)
                };
                gr.db[bi] += g[i] * xt;
                gr.dc[ci] += dyt * s_t[i];
            }
            gr.dx[t * w + ch] = dx;
        }
    }
    gr
}

/// Time-invariant diagonal SSM operands as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `width×d_state` state decay.
    pub a: Tensor,
    /// `width×d_state` input map.
    pub b: Tensor,
    /// `width×d_state` readout.
    pub c: Tensor,
    /// `[width]` feedthrough.
    pub d: Tensor,
}

impl SsmParams {
    /// Builds parameters with `a = sigmoid(a_raw)`, which keeps every decay
    /// in `(0, 1)`.
    pub fn from_raw(a_raw: &Tensor, b: Tensor, c: Tensor, d: Tensor) -> Result<Self> {
        let p = SsmParams {
            a: a_raw.map(sigmoid),
            b,
            c,
            d,
        };
        p.check_shapes()?;
        p.validate()?;
        Ok(p)
    }

    /// Takes `a` verbatim; call [`SsmParams::validate`] for the stability check.
    pub fn new_unchecked(a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Result<Self> {
        let p = SsmParams { a, b, c, d };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a.shape()[1]
    }

    fn check_shapes(&self) -> Result<()> {
        let (w, ds) = self.a.dims2()?;
        if self.b.shape() != [w, ds] || self.c.shape() != [w, ds] || self.d.shape() != [w] {
            return Err(dim_err!(
                "SSM shapes disagree: A {:?}, B {:?}, C {:?}, D {:?}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.shape()
            ));
        }
        Ok(())
    }

    /// Stability: every diagonal entry of `A` must have magnitude below one.
    pub fn validate(&self) -> Result<()> {
        match self.a.data().iter().position(|v| !(v.abs() < 1.0)) {
            None => Ok(()),
            Some(i) => Err(Error::Validation(format!(
                "unstable SSM: |A| = {} at flat index {i}",
                self.a.data()[i].abs()
            ))),
        }
    }

    fn inputs<'a>(&'a self, x: &'a Tensor) -> Result<ScanInputs<'a>> {
        let (n, w) = x.dims2()?;
        if w != self.width() {
            return Err(dim_err!(
                "SSM width {} does not match input {:?}",
                self.width(),
                x.shape()
            ));
        }
        Ok(ScanInputs {
            x: x.data(),
            a: self.a.data(),
            b: self.b.data(),
            c: self.c.data(),
            d: self.d.data(),
            n,
            width: w,
            d_state: self.d_state(),
            selective: false,
        })
    }
}

/// Fast blocked scan of `x` (`n×width`); validates stability first.
pub fn ssm_scan(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    p.validate()?;
    ssm_scan_unchecked(x, p)
}

/// Fast blocked scan without the stability check.
pub fn ssm_scan_unchecked(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    let inputs = p.inputs(x)?;
    let (y, _) = scan_blocked(&inputs, SCAN_BLOCK);
    Tensor::new(x.shape().to_vec(), y)
}

/// Sequential recurrence oracle without the stability check.
pub fn ssm_scan_naive(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    let inputs = p.inputs(x)?;
    let (y, _) = scan_naive(&inputs);
    Tensor::new(x.shape().to_vec(), y)
}

/// Dense-matrix recurrence for tiny reference cases: `A` is `k×k`, `B` is
/// `k×w`, `C` is `w×k`, `D` is `w×w`, with column-vector states.
pub fn ssm_scan_dense(x: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (n, w) = x.dims2()?;
    let (k, k2) = a.dims2()?;
    if k != k2 || b.shape() != [k, w] || c.shape() != [w, k] || d.shape() != [w, w] {
        return Err(dim_err!(
            "dense SSM shapes: x {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            x.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        ));
    }
    let mut s = vec![0.0; k];
    let mut y = vec![0.0; n * w];
    for t in 0..n {
        let xt = x.row(t);
        let mut next = vec![0.0; k];
        for i in 0..k {
            let mut v = 0.0;
            for j in 0..k {
                v += a.at(i, j) * s[j];
            }
            for j in 0..w {
                v += b.at(i, j) * xt[j];
            }
            next[i] = v;
        }
        s = next;
        for i in 0..w {
            let mut v = 0.0;
            for j in 0..k {
                v += c.at(i, j) * s[j];
            }
            for j in 0..w {
                v += d.at(i, j) * xt[j];
            }
            y[t * w + i] = v;
        }
    }
    Tensor::new([n, w], y)
}
