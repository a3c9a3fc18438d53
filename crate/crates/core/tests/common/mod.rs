//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use damamba::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `x·w + b` with plain loops.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, i) = (x.rows(), x.cols());
    let o = w.cols();
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut s = b.data()[c];
            for k in 0..i {
                s += x.at(r, k) * w.at(k, c);
            }
            out[r * o + c] = s;
        }
    }
    Tensor::new([n, o], out).unwrap()
}

/// Single-head softmax attention of every query over every key, computed
/// directly from the definition (max-shifted exponentials, explicit sums).
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    let dv = v.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..dv {
            out[i * dv + c] = (0..nk).map(|j| w[j] * v.at(j, c)).sum::<f64>() / z;
        }
    }
    Tensor::new([nq, dv], out).unwrap()
}

/// Zeroes every row after `t`.
pub fn zero_after(x: &Tensor, t: usize) -> Tensor {
    let mut y = x.clone();
    let w = x.cols();
    for v in &mut y.data_mut()[(t + 1) * w..] {
        *v = 0.0;
    }
    y
}

/// Lin's concordance correlation coefficient by two-pass population moments.
pub fn ccc_two_pass(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    2.0 * cov / (va + vb + (ma - mb).powi(2))
}

/// Frame-wise design matrix of raw cues (all five streams, resampled to the
/// high rate and concatenated) and the labels, for every participant of
/// every session; participant-major within a session.
pub fn raw_frames(sessions: &[damamba::pipeline::SessionBatch]) -> (nalgebra::DMatrix<f64>, Vec<f64>) {
    let mut rows: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    let mut width = 0;
    for s in sessions {
        for (p, cues) in s.participants.iter().enumerate() {
            let a = cues.aligned().unwrap();
            width = a.streams.iter().map(|t| t.cols()).sum::<usize>();
            for r in 0..a.n {
                for t in &a.streams {
                    rows.extend((0..t.cols()).map(|c| t.at(r, c)));
                }
                y.push(s.labels.at(r, p));
            }
        }
    }
    (nalgebra::DMatrix::from_row_slice(y.len(), width, &rows), y)
}

/// Ridge regression on centered data; solved in whichever of the primal
/// (`width×width`) or dual (`rows×rows`) forms is smaller.
pub struct Ridge {
    w: nalgebra::DVector<f64>,
    x_mean: nalgebra::RowDVector<f64>,
    y_mean: f64,
}

impl Ridge {
    pub fn fit(x: &nalgebra::DMatrix<f64>, y: &[f64], lambda: f64) -> Ridge {
        let x_mean = x.row_mean();
        let y_mean = y.iter().sum::<f64>() / y.len() as f64;
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= &x_mean;
        }
        let yc = nalgebra::DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
        let w = if xc.nrows() >= xc.ncols() {
            let mut a = xc.tr_mul(&xc);
            for i in 0..a.nrows() {
                a[(i, i)] += lambda;
            }
            a.cholesky().expect("ridge system is positive definite").solve(&xc.tr_mul(&yc))
        } else {
            let mut k = &xc * xc.transpose();
            for i in 0..k.nrows() {
                k[(i, i)] += lambda;
            }
            let alpha = k.cholesky().expect("kernel system is positive definite").solve(&yc);
            xc.tr_mul(&alpha)
        };
        Ridge { w, x_mean, y_mean }
    }

    pub fn predict(&self, x: &nalgebra::DMatrix<f64>) -> Vec<f64> {
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= &self.x_mean;
        }
        (xc * &self.w).iter().map(|v| v + self.y_mean).collect()
    }
}

/// Mean CCC over every (session, participant) track of `sessions`.
pub fn ridge_score(model: &Ridge, sessions: &[damamba::pipeline::SessionBatch]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for s in sessions {
        let (x, _) = raw_frames(std::slice::from_ref(s));
        let pred = model.predict(&x);
        let n = s.labels.rows();
        for p in 0..s.participants.len() {
            let yl: Vec<f64> = (0..n).map(|r| s.labels.at(r, p)).collect();
            total += ccc_two_pass(&pred[p * n..(p + 1) * n], &yl);
            count += 1;
        }
    }
    total / count as f64
}

/// Ridge probe from raw per-frame cues to labels, fitted on `train` and
/// scored on `test`. The penalty is picked from a small grid by the score on
/// the last training session when fitted on the others.
pub fn ridge_probe_ccc(
    train: &[damamba::pipeline::SessionBatch],
    test: &[damamba::pipeline::SessionBatch],
) -> f64 {
    let (inner, tune) = train.split_at(train.len() - 1);
    let (xi, yi) = raw_frames(inner);
    let lambda = [1e0, 1e1, 1e2, 1e3, 1e4, 1e5]
        .into_iter()
        .map(|l| (l, ridge_score(&Ridge::fit(&xi, &yi, l), tune)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0;
    let (x, y) = raw_frames(train);
    ridge_score(&Ridge::fit(&x, &y, lambda), test)
}
