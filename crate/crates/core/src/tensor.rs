//! Dense row-major tensors and the numeric kernels used by the graph.
//!
//! Matrices follow the column-per-sample convention: a batch of `q` feature
//! vectors of width `n` is an `n × q` matrix. Convolution inputs use the
//! `[batch, channels, height, width]` layout.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("from_rows", "rows have unequal lengths"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    /// Builds an `n × 1` column vector.
    pub fn column(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n, 1], values)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err("dims2", format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column_vec(&self, c: usize) -> Vec<T> {
        (0..self.rows()).map(|r| self.at(r, c)).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: {m}×{k} · {k2}×{n}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Adds an `r × 1` column vector to every column of an `r × c` matrix.
    pub fn add_column(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if bias.shape != [r, 1] {
            return Err(shape_err(
                "add_column",
                format!("bias {:?} does not fit {r}×{c}", bias.shape),
            ));
        }
        let mut out = self.clone();
        for i in 0..r {
            let b = bias.data[i];
            for v in &mut out.data[i * c..(i + 1) * c] {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Row L2 norms of a matrix.
    pub fn row_norms(&self) -> Result<Vec<T>> {
        let (r, c) = self.dims2()?;
        Ok((0..r)
            .map(|i| {
                self.data[i * c..(i + 1) * c]
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
            })
            .collect())
    }

    /// Column L2 norms of a matrix.
    pub fn col_norms(&self) -> Result<Vec<T>> {
        let (r, c) = self.dims2()?;
        let mut acc = vec![T::zero(); c];
        for i in 0..r {
            for (j, a) in acc.iter_mut().enumerate() {
                let v = self.data[i * c + j];
                *a += v * v;
            }
        }
        Ok(acc.into_iter().map(Float::sqrt).collect())
    }

    /// Column-wise softmax of a matrix.
    pub fn softmax_cols(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = self.clone();
        for j in 0..c {
            let mut max = T::neg_infinity();
            for i in 0..r {
                max = max.max(self.data[i * c + j]);
            }
            let mut z = T::zero();
            for i in 0..r {
                let e = (self.data[i * c + j] - max).exp();
                out.data[i * c + j] = e;
                z += e;
            }
            for i in 0..r {
                out.data[i * c + j] /= z;
            }
        }
        Ok(out)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start >= end || end > r {
            return Err(shape_err(
                "slice_rows",
                format!("range {start}..{end} outside {r} rows"),
            ));
        }
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Index of the largest entry of each column.
    pub fn argmax_cols(&self) -> Result<Vec<usize>> {
        let (r, c) = self.dims2()?;
        Ok((0..c)
            .map(|j| {
                let mut best = 0;
                for i in 1..r {
                    if self.data[i * c + j] > self.data[best * c + j] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts
            .first()
            .ok_or_else(|| invalid("vstack of nothing"))?
            .dims2()?
            .1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(shape_err("vstack", format!("column counts {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    /// Selects columns (samples) of a matrix by index.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(shape_err("select_cols", format!("column {bad} ≥ {c}")));
        }
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Self::new(vec![r, idx.len()], data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(shape_err(op, format!("expected a 4-D tensor, got {s:?}"))),
    }
}

/// Stride-1 "same" convolution with an odd square kernel.
///
/// `input` is `[q, cin, h, w]`, `kernel` is `[cout, cin, k, k]`, `bias` is
/// `[cout, 1]`. Output is `[q, cout, h, w]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (q, cin, h, w) = dims4(input, "conv2d")?;
    let (cout, kcin, kh, kw) = dims4(kernel, "conv2d")?;
    if kcin != cin || kh != kw || kh % 2 == 0 || bias.shape() != [cout, 1] {
        return Err(shape_err(
            "conv2d",
            format!(
                "input {:?}, kernel {:?}, bias {:?}",
                input.shape(),
                kernel.shape(),
                bias.shape()
            ),
        ));
    }
    let pad = (kh / 2) as isize;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); q * cout * h * w];
    for n in 0..q {
        for co in 0..cout {
            let obase = (n * cout + co) * h * w;
            let b = bias.data()[co];
            for v in &mut out[obase..obase + h * w] {
                *v = b;
            }
            for ci in 0..cin {
                let ibase = (n * cin + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = kd[((co * cin + ci) * kh + ky) * kw + kx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                out[obase + y * w + xx] +=
                                    kv * x[ibase + sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![q, cout, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (q, cin, h, w) = dims4(input, "conv2d_backward")?;
    let (cout, _, kh, kw) = dims4(kernel, "conv2d_backward")?;
    let pad = (kh / 2) as isize;
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); kd.len()];
    let mut gb = vec![T::zero(); cout];
    for n in 0..q {
        for co in 0..cout {
            let obase = (n * cout + co) * h * w;
            gb[co] += g[obase..obase + h * w].iter().copied().sum::<T>();
            for ci in 0..cin {
                let ibase = (n * cin + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let kv = kd[kidx];
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let mut acc = T::zero();
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let go = g[obase + y * w + xx];
                                let si = ibase + sy as usize * w + sx as usize;
                                acc += go * x[si];
                                gx[si] += go * kv;
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![cout, 1], gb)?,
    ))
}

/// 2×2 max-pool with stride 2. Returns the pooled tensor and, for every
/// output entry, the flat input index that produced it.
pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (q, c, h, w) = dims4(input, "max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("max_pool2", format!("odd spatial extent {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(q * c * oh * ow);
    let mut arg = Vec::with_capacity(q * c * oh * ow);
    for plane in 0..q * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![q, c, oh, ow], out)?, arg))
}

/// `[q, c, h, w]` → `[c·h·w, q]`: one flattened sample per column.
pub fn flatten_samples<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let q = *input
        .shape()
        .first()
        .ok_or_else(|| shape_err("flatten", "empty shape"))?;
    let per = input.len() / q;
    Tensor::new(vec![q, per], input.data().to_vec())?.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn identity_matmul_passthrough() {
        let i = Tensor::<f64>::identity(2);
        let v = Tensor::column(vec![1.5, -2.0]).unwrap();
        assert_eq!(i.matmul(&v).unwrap(), v);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let z = Tensor::<f64>::zeros(&[2, 1]);
        assert_eq!(z.softmax_cols().unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn flatten_puts_samples_in_columns() {
        let t = Tensor::<f64>::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = flatten_samples(&t).unwrap();
        assert_eq!(f.shape(), &[2, 2]);
        assert_eq!(f.data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn pool_picks_max() {
        let t = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (p, arg) = max_pool2(&t).unwrap();
        assert_eq!(p.data(), &[5.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn conv_with_centre_tap_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let b = Tensor::zeros(&[1, 1]);
        assert_eq!(conv2d(&x, &k, &b).unwrap().data(), x.data());
    }
}
