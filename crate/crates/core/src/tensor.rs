//! Dense row-major `f64` tensors and the eager kernels shared by the
//! autodiff tape and the verification code.

use crate::error::{Error, Result};

/// Dense n-dimensional array stored row-major.
///
/// An empty shape denotes a scalar (one element). Every listed dimension
/// must be positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_dims(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "zero-sized axis in {shape:?}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized axis in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        assert!(n > 0, "empty vector");
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        flat
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_dims(shape)?;
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        validate_axes(axes, self.ndim())?;
        let (shape, data) = permute_data(&self.shape, &self.data, axes);
        Ok(Tensor { shape, data })
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::InvalidShape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        self.permute(&[1, 0])
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product of `[.., k]` (leading axes flattened into rows) with
    /// a `[k, n]` matrix.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.ndim() != 2 || self.ndim() == 0 || self.last_dim() != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let k = rhs.shape[0];
        let n = rhs.shape[1];
        let m = self.len() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &rhs.data, false, &mut out, false);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Tensor::new(shape, out)
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.data.iter().any(|x| x.is_nan()) {
            return Err(Error::NaN("softmax_rows"));
        }
        let mut out = self.data.clone();
        softmax_inplace(&mut out, self.last_dim());
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// `gamma ⊙ (y − μ)/√(σ² + eps) + beta` along the last axis.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = self.last_dim();
        if gamma.len() != d {
            return Err(Error::shape("layer_norm gamma", &self.shape, &gamma.shape));
        }
        if beta.len() != d {
            return Err(Error::shape("layer_norm beta", &self.shape, &beta.shape));
        }
        let mut out = vec![0.0; self.len()];
        for (row, dst) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                dst[j] = gamma.data[j] * (row[j] - mean) * inv_std + beta.data[j];
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
        let shape = concat_shape(&shapes, axis)?;
        let datas: Vec<&[f64]> = parts.iter().map(|t| t.data()).collect();
        Ok(Tensor {
            data: concat_data(&shapes, &datas, axis),
            shape,
        })
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::InvalidShape(format!(
                "slice axis {axis} [{start}, {}) of {:?}",
                start + len,
                self.shape
            )));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let src_block = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_block + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn softmax_inplace(data: &mut [f64], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
}

pub(crate) fn validate_axes(axes: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    if axes.len() != ndim {
        return Err(Error::InvalidArgument(format!(
            "permutation {axes:?} for rank {ndim}"
        )));
    }
    for &a in axes {
        if a >= ndim || seen[a] {
            return Err(Error::InvalidArgument(format!(
                "permutation {axes:?} for rank {ndim}"
            )));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visit every multi-index of `shape` in row-major order, passing the
/// offset computed from `strides`.
pub(crate) fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut out = 0usize;
    while out < n {
        for j in 0..inner {
            f(out + j, base + j * inner_stride);
        }
        out += inner;
        // carry into the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn permute_data(shape: &[usize], data: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let src_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    for_each_offset(&out_shape, &gather, |o, s| out[o] = data[s]);
    (out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Strides for reading a right-aligned broadcast source while walking
/// `target` (zero stride on broadcast axes).
pub(crate) fn broadcast_strides(src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if src.len() > target.len() {
        return Err(Error::shape("broadcast", src, target));
    }
    let offset = target.len() - src.len();
    let src_strides = strides_of(src);
    let mut strides = vec![0; target.len()];
    for (i, &d) in src.iter().enumerate() {
        let t = target[offset + i];
        if d == t {
            strides[offset + i] = src_strides[i];
        } else if d != 1 {
            return Err(Error::shape("broadcast", src, target));
        }
    }
    Ok(strides)
}

pub(crate) fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes[0];
    if axis >= first.len() {
        return Err(Error::InvalidArgument(format!("concat axis {axis} for {first:?}")));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        if s.len() != first.len()
            || s.iter()
                .zip(first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape("concat", first, s));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

pub(crate) fn concat_data(shapes: &[&[usize]], datas: &[&[f64]], axis: usize) -> Vec<f64> {
    let outer = numel(&shapes[0][..axis]);
    let blocks: Vec<usize> = shapes.iter().map(|s| numel(&s[axis..])).collect();
    let total: usize = datas.iter().map(|d| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (d, &b) in datas.iter().zip(&blocks) {
            out.extend_from_slice(&d[o * b..(o + 1) * b]);
        }
    }
    out
}

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover m*k, k*n and m*n elements with the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.get(&[1, 0]), 3.0);
        let tt = t.t().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.get(&[2, 1]), 5.0);
        assert_eq!(tt.t().unwrap(), t);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.add(&Tensor::zeros(&[3, 2])).is_err());
        assert!(t.matmul(&Tensor::zeros(&[2, 2])).is_err());
        assert!(t.reshape(&[5]).is_err());
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.11).cos());
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for r in 0..6 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.data()[r * 4 + k] * b.get(&[k, j])).sum();
                assert!((c.data()[r * 5 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gemm_transposed_operands() {
        let a = Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0);
        let b = Tensor::from_fn(&[4, 3], |i| i as f64 - 2.0);
        // (aᵀ)(bᵀ) : [2,3]·[3,4]
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, a.data(), true, b.data(), true, &mut c, false);
        let want = a.t().unwrap().matmul(&b.t().unwrap()).unwrap();
        assert_eq!(c, want.data());
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_vec(vec![0.0, 0.0]).softmax_rows().unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = Tensor::from_vec(vec![1f64.ln(), 3f64.ln()]).softmax_rows().unwrap();
        assert!((t.data()[0] - 0.25).abs() < 1e-15);
        assert!((t.data()[1] - 0.75).abs() < 1e-15);
        let t = Tensor::from_vec(vec![1000.0, 1000.0]).softmax_rows().unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let err = Tensor::from_vec(vec![f64::NAN, 0.0]).softmax_rows();
        assert!(matches!(err, Err(Error::NaN(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let out = Tensor::from_vec(vec![3.0; 3]).layer_norm(&one, &zero, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0; 3]);

        let one2 = Tensor::full(&[2], 1.0);
        let zero2 = Tensor::zeros(&[2]);
        let out = Tensor::from_vec(vec![-1.0, 1.0]).layer_norm(&one2, &zero2, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-10);
        assert!((out.data()[1] - 1.0).abs() < 1e-10);

        let beta = Tensor::from_vec(vec![0.3, -0.7]);
        let out = Tensor::from_vec(vec![4.0, 9.0]).layer_norm(&zero2, &beta, 1e-5).unwrap();
        assert_eq!(out.data(), beta.data());

        assert!(matches!(
            Tensor::from_vec(vec![1.0, 2.0]).layer_norm(&one2, &zero2, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn concat_and_slice_recover_parts() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 1], |i| 100.0 + i as f64);
        let c = Tensor::concat(&[&a, &b], 2).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.slice_axis(2, 0, 2).unwrap(), a);
        assert_eq!(c.slice_axis(2, 2, 1).unwrap(), b);
        assert!(Tensor::concat(&[&a, &Tensor::zeros(&[2, 2, 1])], 2).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let t = Tensor::new(vec![3, 4], vals).unwrap().softmax_rows().unwrap();
            for row in t.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn permute_round_trip(vals in proptest::collection::vec(-1.0f64..1.0, 24)) {
            let t = Tensor::new(vec![2, 3, 4], vals).unwrap();
            let axes = [2, 0, 1];
            let p = t.permute(&axes).unwrap();
            prop_assert_eq!(p.shape(), &[4, 2, 3]);
            prop_assert_eq!(p.get(&[3, 1, 2]), t.get(&[1, 2, 3]));
            let back = p.permute(&inverse_permutation(&axes)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
