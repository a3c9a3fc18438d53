//! Dense row-major tensors and the `TNSR/1` file format.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous `f64` buffer.
//! Gradients live on the [`Tape`](crate::autograd::Tape), not on the
//! tensor, so parameter sets can be shared read-only across threads.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    /// Builds a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(dim_err!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but additionally rejects NaN / infinite entries.
    pub fn new_checked(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(shape, data)?;
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        assert!(!shape.contains(&0), "zero extent in shape {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty());
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { shape, data }
    }

    /// Samples i.i.d. entries uniform in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Shape `[n, m]` as a tuple; errors on anything other than 2-D.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(dim_err!("expected a 2-D tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what} has {} at flat index {i} (shape {:?})",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Copies rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        if start >= end || end > n {
            return Err(dim_err!("row range {start}..{end} out of bounds for {n} rows"));
        }
        Ok(Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        })
    }

    /// Row window `[start, start+len)` where rows outside `[0, n)` are zero.
    pub fn padded_rows(&self, start: isize, len: usize) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        let mut out = vec![0.0; len * c];
        for i in 0..len {
            let src = start + i as isize;
            if src >= 0 && (src as usize) < n {
                let s = src as usize;
                out[i * c..(i + 1) * c].copy_from_slice(&self.data[s * c..(s + 1) * c]);
            }
        }
        Tensor::new([len, c], out)
    }

    /// Concatenates 2-D tensors along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat_rows of zero tensors"))?;
        let c = first.dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.dims2()?;
            if pc != c {
                return Err(dim_err!("concat_rows width mismatch: {c} vs {pc}"));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new([rows, c], data)
    }

    /// Concatenates 2-D tensors along the feature axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat_cols of zero tensors"))?;
        let n = first.dims2()?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != n {
                return Err(Error::Alignment(format!(
                    "concat_cols frame mismatch: {n} vs {r}"
                )));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::new([n, total], data)
    }

    /// Writes the tensor as `TNSR/1` with the given scalar type.
    pub fn write_tnsr<W: Write>(&self, mut w: W, dtype: Dtype) -> std::io::Result<()> {
        let mut header = format!("TNSR v1 {} {}", dtype.as_str(), self.shape.len());
        for d in &self.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        match dtype {
            Dtype::F64 => {
                for v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for v in &self.data {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_tnsr<R: Read>(r: R) -> Result<Tensor> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        r.read_until(b'\n', &mut header)
            .map_err(|e| Error::Data(format!("reading TNSR header: {e}")))?;
        let header = std::str::from_utf8(&header)
            .map_err(|_| Error::Data("TNSR header is not ASCII".into()))?
            .trim_end();
        let mut fields = header.split(' ');
        if fields.next() != Some("TNSR") || fields.next() != Some("v1") {
            return Err(Error::Data(format!("bad TNSR magic in header {header:?}")));
        }
        let dtype = match fields.next() {
            Some("f64") => Dtype::F64,
            Some("f32") => Dtype::F32,
            other => return Err(Error::Data(format!("unsupported TNSR dtype {other:?}"))),
        };
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("malformed TNSR header {header:?}")))
        };
        let ndims = parse(fields.next())?;
        let shape = (0..ndims)
            .map(|_| parse(fields.next()))
            .collect::<Result<Vec<_>>>()?;
        if fields.next().is_some() {
            return Err(Error::Data(format!("trailing fields in TNSR header {header:?}")));
        }
        let n: usize = shape.iter().product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Data(format!("reading TNSR payload: {e}")))?;
        let width = dtype.width();
        if bytes.len() != n * width {
            return Err(Error::Data(format!(
                "TNSR payload has {} bytes, shape {shape:?} as {} needs {}",
                bytes.len(),
                dtype.as_str(),
                n * width
            )));
        }
        let data = match dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        Tensor::new(shape, data).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_tnsr(&mut w, Dtype::F64)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_tnsr(f).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Scalar encodings supported by `TNSR/1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// `out[m×p] += a[m×k] · b[k×p]` on raw row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`.
pub(crate) fn gemm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            out[i * p + j] += dot(arow, brow);
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · b[m×p]`.
pub(crate) fn gemm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
