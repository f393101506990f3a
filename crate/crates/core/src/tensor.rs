//! Dense row-major `f64` tensors and the handful of kernels the encoders need.
//!
//! Every kernel is a pure function of its inputs. Feature maps use
//! height × width × channels layout; convolution kernels are
//! kh × kw × Cin × Cout so the innermost loop runs over contiguous output
//! channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, param_err, Error, Result};

/// Default seed for every weight initializer.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return dim_err(format!("tensors carry 1 to 4 axes, got shape {shape:?}"));
        }
        if shape.contains(&0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim_err(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// n × n identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// 2-D tensor from nested rows. Panics on ragged input; meant for fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of vectors along the last axis.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return dim_err(format!(
                "{what}: expected a rank-{rank} tensor, got shape {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    /// `i`-th vector along the last axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape, other.shape
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
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

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Self> {
        self.expect_rank(2, "transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        Ok(Self::from_fn(&[n, m], |idx| {
            let (j, i) = (idx / m, idx % m);
            self.data[i * n + j]
        }))
    }

    /// Rows `start..end` of a matrix (or of the flattened leading axes).
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.last_dim();
        Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Concatenate two tensors with identical leading axes along the last axis.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let lead_a = &a.shape[..a.shape.len() - 1];
    let lead_b = &b.shape[..b.shape.len() - 1];
    if lead_a != lead_b {
        return dim_err(format!(
            "concat: leading axes of {:?} and {:?} differ",
            a.shape, b.shape
        ));
    }
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.rows().zip(b.rows()) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    let mut shape = lead_a.to_vec();
    shape.push(ca + cb);
    Tensor::new(shape, data)
}

/// Matrix product `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return dim_err(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape, b.shape
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Apply `x · weight + bias` over the last axis of `x` (any rank).
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let c_in = x.last_dim();
    weight.expect_rank(2, "linear weight")?;
    if weight.shape[0] != c_in {
        return dim_err(format!(
            "linear: input width {c_in} does not match weight {:?}",
            weight.shape
        ));
    }
    let c_out = weight.shape[1];
    if let Some(b) = bias {
        if b.shape != [c_out] {
            return dim_err(format!(
                "linear: bias {:?} does not match output width {c_out}",
                b.shape
            ));
        }
    }
    let flat = Tensor::new(vec![x.outer_len(), c_in], x.data.clone())?;
    let mut y = matmul(&flat, weight)?;
    if let Some(b) = bias {
        for row in y.data.chunks_exact_mut(c_out) {
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = c_out;
    Tensor::new(shape, y.data)
}

/// Row-wise softmax of `x / temperature`, stabilized by subtracting the row max.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return param_err(format!("softmax temperature must be > 0, got {temperature}"));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.last_dim()) {
        softmax_in_place(row, temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-sum-exp of a slice, stabilized by the max.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Zero-padded 2-D convolution of an H×W×Cin map with a kh×kw×Cin×Cout kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    input.expect_rank(3, "conv2d input")?;
    kernel.expect_rank(4, "conv2d kernel")?;
    let (h, w, c_in) = (input.shape[0], input.shape[1], input.shape[2]);
    let (kh, kw, k_in, c_out) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if k_in != c_in {
        return dim_err(format!(
            "conv2d: kernel {:?} expects {k_in} input channels, input {:?} has {c_in}",
            kernel.shape, input.shape
        ));
    }
    if stride == 0 {
        return param_err("conv2d: stride must be positive");
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return dim_err(format!(
            "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * pad,
            w + 2 * pad
        ));
    }
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; out_h * out_w * c_out];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let acc = &mut out[(oy * out_w + ox) * c_out..(oy * out_w + ox + 1) * c_out];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &input.data[(iy as usize * w + ix as usize) * c_in..][..c_in];
                    let kbase = (ky * kw + kx) * c_in * c_out;
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kernel.data[kbase + ci * c_out..kbase + (ci + 1) * c_out];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c_out], out)
}

/// 2×2 average pooling with stride 2 over an H×W×C map.
pub fn avg_pool_2x2(input: &Tensor) -> Result<Tensor> {
    input.expect_rank(3, "avg_pool_2x2")?;
    let (h, w, c) = (input.shape[0], input.shape[1], input.shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("avg_pool_2x2: extents {h}×{w} must be even"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = &input.data[((2 * oy + dy) * w + 2 * ox + dx) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= 0.25;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Layer normalization over the last axis followed by the affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gain.shape != [c] || bias.shape != [c] {
        return dim_err(format!(
            "layer_norm: gain {:?} / bias {:?} do not match last axis {c}",
            gain.shape, bias.shape
        ));
    }
    if !(eps > 0.0) {
        return param_err(format!("layer_norm eps must be > 0, got {eps}"));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// L2-normalize a vector. Errors on a zero vector.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "cannot normalize a vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded source for weight initialization.
///
/// Weights are drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
#[derive(Debug, Clone)]
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    /// Matrix `rows × cols` with fan-in `rows`.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        self.uniform(&[rows, cols], rows)
    }

    /// Convolution kernel with fan-in `kh·kw·Cin`.
    pub fn kernel(&mut self, kh: usize, kw: usize, c_in: usize, c_out: usize) -> Tensor {
        self.uniform(&[kh, kw, c_in, c_out], kh * kw * c_in)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; n]; m];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        assert_eq!(matmul(&a, &Tensor::eye(3)).unwrap(), a);
        let z = matmul(&Tensor::zeros(&[2, 3]), &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_swap_columns_matches_triple_loop() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let oracle = naive_matmul(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(oracle, vec![vec![2.0, 1.0], vec![4.0, 3.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn softmax_fixtures() {
        let u = softmax_rows(&Tensor::filled(&[1, 3], 4.2), 1.0).unwrap();
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 3f64.ln()]]), 1.0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(
            softmax_rows(&u, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn conv2d_fixtures() {
        let x = Tensor::from_fn(&[4, 5, 2], |i| i as f64 * 0.5 - 3.0);
        let mut ident = Tensor::zeros(&[1, 1, 2, 2]);
        ident.data_mut()[0] = 1.0;
        ident.data_mut()[3] = 1.0;
        assert_eq!(conv2d(&x, &ident, 1, 0).unwrap(), x);

        let ones = Tensor::filled(&[5, 5, 1], 1.0);
        let k = Tensor::filled(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&ones, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[2], 6.0);

        let y = conv2d(&Tensor::zeros(&[4, 4, 1]), &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);

        let big = Tensor::zeros(&[5, 5, 1, 1]);
        assert!(matches!(
            conv2d(&Tensor::zeros(&[4, 4, 1]), &big, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_stride_matches_sliding_window() {
        let mut init = ParamInit::new(3);
        let x = init.uniform(&[7, 6, 3], 1);
        let k = init.kernel(3, 3, 3, 2);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 3, 2]);
        for oy in 0..4 {
            for ox in 0..3 {
                for co in 0..2 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..3 {
                                acc += x.data()[(iy as usize * 6 + ix as usize) * 3 + ci]
                                    * k.data()[((ky * 3 + kx) * 3 + ci) * 2 + co];
                            }
                        }
                    }
                    let got = y.data()[(oy * 3 + ox) * 2 + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_fixtures() {
        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::from_rows(&[&[1.0, 3.0]]), &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let y = layer_norm(&Tensor::filled(&[1, 4], 7.0), &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, -2.0, 5.0], &[0.1, 0.2, 0.3]]);
        let y = layer_norm(&x, &Tensor::zeros(&[3]), &bias, 1e-5).unwrap();
        for row in y.rows() {
            assert_eq!(row, bias.data());
        }
        assert!(matches!(
            layer_norm(&x, &g, &b, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gelu_fixtures() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // Phi(1) = 0.5 * (1 + erf(1/sqrt 2)) = 0.841344746068543
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu_scalar(1.0) - 0.8413).abs() < 1e-4);
    }

    #[test]
    fn avg_pool_halves() {
        let x = Tensor::from_fn(&[2, 2, 1], |i| i as f64);
        assert_eq!(avg_pool_2x2(&x).unwrap().data(), &[1.5]);
        assert!(avg_pool_2x2(&Tensor::zeros(&[3, 2, 1])).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ParamInit::new(0).matrix(4, 3);
        let b = ParamInit::new(0).matrix(4, 3);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
        assert_ne!(a, ParamInit::new(1).matrix(4, 3));
    }
}
