//! Dense row-major tensors, the few linear-algebra kernels the denoiser needs,
//! and a seeded generator with a fixed algorithm.
//!
//! Every reduction runs sequentially in index order so that results are
//! bitwise reproducible across runs and platforms.

use crate::error::{AidError, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AidError::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a 2-D tensor from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AidError::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AidError::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_shape(self, other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape(self, other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        same_shape(self, other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

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

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape(self, other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, op)?;
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
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(AidError::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn require_2d(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(AidError::Dimension(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a · b` for `a: m×k`, `b: k×n`, summing sequentially over `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul")?;
    let (k2, n) = require_2d(b, "matmul")?;
    if k != k2 {
        return Err(AidError::Dimension(format!(
            "matmul: inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul_nt")?;
    let (n, k2) = require_2d(b, "matmul_nt")?;
    if k != k2 {
        return Err(AidError::Dimension(format!(
            "matmul_nt: inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            out[i * n + j] = s;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_2d(a, "matmul_tn")?;
    let (k2, n) = require_2d(b, "matmul_tn")?;
    if k != k2 {
        return Err(AidError::Dimension(format!(
            "matmul_tn: inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d(x, "softmax_rows")?;
    let mut out = x.data.clone();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Stacks the rows of `a` on top of the rows of `b`. Either side may have zero rows.
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = require_2d(a, "concat_rows")?;
    let (rb, cb) = require_2d(b, "concat_rows")?;
    if ca != cb {
        return Err(AidError::Dimension(format!(
            "concat_rows: column counts {ca} and {cb} differ"
        )));
    }
    let mut data = Vec::with_capacity((ra + rb) * ca);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        shape: vec![ra + rb, ca],
        data,
    })
}

/// `(1 − t)·a + t·b`
pub fn lerp(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    a.zip_with(b, "lerp", |x, y| (1.0 - t) * x + t * y)
}

/// Spherical interpolation between the flattened vectors `a` and `b`.
///
/// Falls back to [`lerp`] when the angle between them is below `1e-6`.
pub fn slerp(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    same_shape(a, b, "slerp")?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(AidError::Degenerate("slerp of a zero-norm tensor".into()));
    }
    let cos = (a.dot(b)? / (na * nb)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-6 {
        return lerp(a, b, t);
    }
    let sin = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / sin;
    let wb = (t * theta).sin() / sin;
    a.zip_with(b, "slerp", |x, y| wa * x + wb * y)
}

/// I.i.d. standard normal samples.
pub fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// xoshiro256** seeded through splitmix64.
///
/// Normals use the Box–Muller transform; the second variate of each pair is
/// cached, so the stream depends only on the seed and the call sequence.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    s: [u64; 4],
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        Self {
            seed,
            s,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// Derives an independent child stream.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
