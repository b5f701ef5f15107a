//! Dense row-major `f32` tensors and the handful of kernels the ViT engine
//! and the quality scorer are built from.
//!
//! Every kernel is a pure function with a fixed evaluation order, so results
//! are bit-reproducible for a given build. Matrix products accumulate in
//! `f32`, left to right over the inner dimension. Row reductions (layer-norm
//! statistics, softmax denominators, L2 norms) accumulate in `f64` and round
//! once on output.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-6;
pub const L2_NORM_EPS: f32 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must have at least one dimension and no zero sizes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an empty shape or a zero dimension.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a matrix: rank 2 as-is, rank 1 as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [n] => Ok((1, n)),
            [m, n] => Ok((m, n)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.cols())
    }

    /// Copies rows `start..end` into a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if start >= end || end > m {
            return Err(Error::Range(format!(
                "row range {start}..{end} outside 0..{m}"
            )));
        }
        Self::new(vec![end - start, n], self.data[start * n..end * n].to_vec())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Affine map `x · Wᵀ + bias` with `weight` stored as `out × in`, the layout
/// used by every projection in a [`crate::model_io::VitModel`].
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, d_in) = x.dims2()?;
    let (d_out, w_in) = weight.dims2()?;
    if d_in != w_in || bias.len() != d_out {
        return Err(Error::Dimension(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape, weight.shape, bias.shape
        )));
    }
    let mut out = vec![0.0f32; m * d_out];
    for i in 0..m {
        let x_row = x.row(i);
        for o in 0..d_out {
            let w_row = &weight.data[o * d_in..(o + 1) * d_in];
            let mut acc = 0.0f32;
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            out[i * d_out + o] = acc + bias.data[o];
        }
    }
    Tensor::new(vec![m, d_out], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = Vec::with_capacity(x.len());
    let mut exps = vec![0.0f32; n];
    for row in x.rows() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (e, &v) in exps.iter_mut().zip(row) {
            *e = (v - max).exp();
            sum += f64::from(*e);
        }
        out.extend(exps.iter().map(|&e| (f64::from(e) / sum) as f32));
    }
    Tensor::new(x.shape.clone(), out)
}

/// Per-row standardization followed by the affine `gamma`, `beta`.
/// Constant rows collapse to `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if gamma.len() != n || beta.len() != n {
        return Err(Error::Dimension(format!(
            "layer_norm: input {:?}, gamma {:?}, beta {:?}",
            x.shape, gamma.shape, beta.shape
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mean;
                c * c
            })
            .sum::<f64>()
            / n as f64;
        let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
        for ((&v, &g), &b) in row.iter().zip(&gamma.data).zip(&beta.data) {
            let normed = ((f64::from(v) - mean) * inv_std) as f32;
            out.push(normed * g + b);
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Exact GELU, `x · Φ(x)` with `Φ` written through `erf`. Checkpoints trained
/// with the tanh approximation differ by well under 1e-3 per activation.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

/// Divides each row by `max(‖row‖₂, eps)`; all-zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor, eps: f32) -> Result<Tensor> {
    x.dims2()?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("l2 eps must be > 0, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let norm = l2_norm(row).max(f64::from(eps));
        out.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = Tensor::zeros(&[2, 2]);
        assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn linear_matches_matmul_with_transpose() {
        let x = t(&[&[1.0, -2.0, 0.5]]);
        let w = t(&[&[1.0, 0.0, 2.0], &[0.5, 1.0, -1.0]]);
        let b = Tensor::new(vec![2], vec![0.25, -0.25]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        let expect = matmul(&x, &w.transpose().unwrap()).unwrap();
        assert_eq!(
            y.data(),
            &[expect.data()[0] + 0.25, expect.data()[1] - 0.25]
        );
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f32.ln()]])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        assert!((s.row(2)[0] - 0.25).abs() < 1e-7);
        assert!((s.row(2)[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&t(&[&[5.0; 4]]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);

        let ones2 = Tensor::filled(&[2], 1.0);
        let zeros2 = Tensor::zeros(&[2]);
        let y = layer_norm(&t(&[&[1.0, -1.0]]), &ones2, &zeros2, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);

        let c = Tensor::filled(&[4], 3.5);
        let y = layer_norm(&t(&[&[1.0, 9.0, -2.0, 0.1]]), &zeros, &c, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[3.5; 4]);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let g = Tensor::filled(&[2], 1.0);
        assert!(layer_norm(&t(&[&[1.0, 2.0]]), &g, &g, 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        // 1 · Φ(1), Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.841_344_7).abs() < 1e-7);
        assert!((gelu_scalar(-1.0) + 0.158_655_26).abs() < 1e-7);
    }

    #[test]
    fn l2_normalize_examples() {
        let y =
            l2_normalize_rows(&t(&[&[3.0, 4.0], &[0.6, 0.8], &[0.0, 0.0]]), L2_NORM_EPS).unwrap();
        assert!((y.row(0)[0] - 0.6).abs() < 1e-7 && (y.row(0)[1] - 0.8).abs() < 1e-7);
        assert!((y.row(1)[0] - 0.6).abs() < 1e-7 && (y.row(1)[1] - 0.8).abs() < 1e-7);
        assert_eq!(y.row(2), &[0.0, 0.0]);
    }

    fn matrix(max_dim: usize) -> impl Strategy<Value = Tensor> {
        (1..=max_dim, 1..=max_dim).prop_flat_map(|(m, n)| {
            proptest::collection::vec(-10.0f32..10.0, m * n)
                .prop_map(move |data| Tensor::new(vec![m, n], data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matmul_identity_associativity(a in matrix(6), seed in 0u64..1000) {
            let (_, k) = a.dims2().unwrap();
            let n = (seed % 5 + 1) as usize;
            let b = Tensor::new(vec![k, n], (0..k * n).map(|i| ((i as f32) * 0.37 + seed as f32).sin()).collect()).unwrap();
            let lhs = matmul(&matmul(&a, &Tensor::identity(k)).unwrap(), &b).unwrap();
            let rhs = matmul(&a, &b).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(x in matrix(8), c in -50.0f32..50.0) {
            let s = softmax_rows(&x).unwrap();
            let shifted = softmax_rows(&x.map(|v| v + c)).unwrap();
            for (row, row2) in s.rows().zip(shifted.rows()) {
                let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                for (a, b) in row.iter().zip(row2) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn l2_normalize_idempotent_and_scale_invariant(x in matrix(8), c in 0.01f32..100.0) {
            let once = l2_normalize_rows(&x, L2_NORM_EPS).unwrap();
            let twice = l2_normalize_rows(&once, L2_NORM_EPS).unwrap();
            let scaled = l2_normalize_rows(&x.scale(c), L2_NORM_EPS).unwrap();
            for ((a, b), s) in once.data().iter().zip(twice.data()).zip(scaled.data()) {
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!((a - s).abs() < 1e-6);
            }
            for row in once.rows() {
                let norm = l2_norm(row);
                prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn layer_norm_shift_invariant_and_standardized(x in matrix(8), c in -10.0f32..10.0) {
            let (_, n) = x.dims2().unwrap();
            let g = Tensor::filled(&[n], 1.0);
            let b = Tensor::zeros(&[n]);
            let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
            let y2 = layer_norm(&x.map(|v| v + c), &g, &b, LAYER_NORM_EPS).unwrap();
            for (a, b) in y.data().iter().zip(y2.data()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
            for (row, src) in y.rows().zip(x.rows()) {
                let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
                prop_assert!(mean.abs() < 1e-6);
                let spread = src.iter().copied().fold(f32::MIN, f32::max) - src.iter().copied().fold(f32::MAX, f32::min);
                if n >= 2 && spread > 1.0 {
                    let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
                    prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
                }
            }
        }
    }
}
