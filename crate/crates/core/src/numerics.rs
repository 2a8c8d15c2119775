//! Dense matrices, keyed random streams and the jittered PSD log-determinant.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by [`log_det_psd`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Relative jitter applied when a factorization at the requested jitter fails.
pub const BASE_RELATIVE_JITTER: f64 = 1e-6;

/// Multipliers applied to the base jitter once the first attempt fails.
const JITTER_LADDER: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics, and a zero-column matrix still has `rows` empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    /// New matrix made of the listed rows, in order. Indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square() && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            for (o, &b_kj) in out_row.iter_mut().zip(b.row(k)) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// Lower Cholesky factor, or `None` when a pivot is not safely positive.
fn cholesky(k: &Matrix, jitter: f64, pivot_floor: f64) -> Option<Matrix> {
    let n = k.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = k[(j, j)] + jitter;
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if !(d > pivot_floor) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = k[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Jitter values tried, in order, by [`log_det_psd`] for a matrix with the
/// given mean diagonal.
pub fn jitter_ladder(jitter: f64, mean_diagonal: f64) -> Vec<f64> {
    let base = if jitter > 0.0 {
        jitter
    } else {
        let scale = if mean_diagonal > 0.0 { mean_diagonal } else { 1.0 };
        BASE_RELATIVE_JITTER * scale
    };
    let mut ladder = Vec::with_capacity(JITTER_LADDER.len() + 1);
    if jitter == 0.0 {
        ladder.push(0.0);
    }
    ladder.extend(JITTER_LADDER.iter().map(|m| m * base));
    ladder
}

/// `log |k + jitter·I|` for a symmetric positive semi-definite `k`.
///
/// The factorization is attempted at `jitter` first and then up the ladder
/// from [`jitter_ladder`]. A pivot counts as failed when it falls below
/// `1e-10` times the largest diagonal entry, so exactly rank-deficient kernels
/// (duplicate activation codes) always take the jittered path instead of
/// producing a log of rounding noise.
pub fn log_det_psd(k: &Matrix, jitter: f64) -> Result<f64> {
    if !k.is_square() {
        return Err(Error::Shape(format!(
            "log-determinant needs a square matrix, got {}x{}",
            k.rows, k.cols
        )));
    }
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(Error::Domain(format!("jitter must be finite and >= 0, got {jitter}")));
    }
    if !k.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Domain("kernel is not symmetric".into()));
    }
    let n = k.rows;
    if n == 0 {
        return Ok(0.0);
    }
    let mean_diag = k.trace() / n as f64;
    let max_diag = (0..n).map(|i| k[(i, i)]).fold(0.0_f64, f64::max);
    let ladder = jitter_ladder(jitter, mean_diag);
    for &j in &ladder {
        let floor = 1e-10 * (max_diag + j);
        if let Some(l) = cholesky(k, j, floor) {
            let half: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
            return Ok(2.0 * half);
        }
    }
    Err(Error::Singular { ladder })
}

/// Key naming one independent random stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub step: u64,
    pub node: u64,
    pub purpose: String,
}

/// A reproducible random stream: same root seed and key, same draws.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub root_seed: u64,
    pub key: StreamKey,
}

impl RngStream {
    pub fn new(root_seed: u64, step: u64, node: u64, purpose: impl Into<String>) -> Self {
        Self {
            root_seed,
            key: StreamKey {
                step,
                node,
                purpose: purpose.into(),
            },
        }
    }

    /// Stream with the same root and step/node but a refined purpose tag.
    pub fn child(&self, tag: impl fmt::Display) -> Self {
        Self::new(
            self.root_seed,
            self.key.step,
            self.key.node,
            format!("{}/{}", self.key.purpose, tag),
        )
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.root_seed.to_le_bytes());
        h.update(self.key.step.to_le_bytes());
        h.update(self.key.node.to_le_bytes());
        h.update((self.key.purpose.len() as u64).to_le_bytes());
        h.update(self.key.purpose.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Derives a 64-bit seed, for handing to code that wants a plain seed.
    pub fn derive_seed(&self) -> u64 {
        self.rng().next_u64()
    }
}

/// Matrix of i.i.d. `N(mean, std²)` draws.
pub fn rand_normal(stream: &RngStream, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Matrix> {
    let mut rng = stream.rng();
    normal_matrix(&mut rng, rows, cols, mean, std)
}

pub(crate) fn normal_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Domain(format!(
            "invalid normal parameters mean={mean} std={std}"
        )));
    }
    if std == 0.0 {
        return Ok(Matrix::filled(rows, cols, mean));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::Domain(e.to_string()))?;
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Ok(Matrix { rows, cols, data })
}

/// Matrix of independent `{0,1}` entries, 1 with probability `p_keep`.
pub fn bernoulli_mask(stream: &RngStream, rows: usize, cols: usize, p_keep: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(Error::Domain(format!("p_keep must lie in [0,1], got {p_keep}")));
    }
    let mut rng = stream.rng();
    let data = (0..rows * cols)
        .map(|_| if keep(&mut rng, p_keep) { 1.0 } else { 0.0 })
        .collect();
    Ok(Matrix { rows, cols, data })
}

/// One Bernoulli(p) trial. Always consumes exactly one uniform draw, so
/// degenerate probabilities stay in lockstep with the general case.
#[inline]
pub(crate) fn keep<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}
