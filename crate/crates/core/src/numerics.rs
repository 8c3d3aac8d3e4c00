//! Dense-vector primitives, numerically stable probability transforms,
//! reproducible random streams, and a finite-difference gradient oracle.
//!
//! Everything here is 64-bit: gradient checks at 1e-4 relative tolerance
//! are infeasible in 32-bit arithmetic.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

/// Errors from the numeric primitives.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("probability row must sum to 1 within {tol}, got sum {sum}")]
    NotNormalized { sum: f64, tol: f64 },
    #[error("probability row entry {value} at index {index} is negative")]
    NegativeProbability { index: usize, value: f64 },
}

/// A finite 64-bit real vector. Constructors reject NaN and infinities, so
/// any `Vec64` reachable at runtime holds only finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    /// Builds a vector after checking every entry is finite.
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { context: "Vec64::new" });
        }
        Ok(Vec64(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Vec64(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for Vec64 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl<'a> IntoIterator for &'a Vec64 {
    type Item = &'a f64;
    type IntoIter = std::slice::Iter<'a, f64>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Tolerance on the sum of a probability row.
pub const PROB_ROW_TOL: f64 = 1e-9;

/// A categorical distribution over classes: nonnegative entries summing to 1
/// within [`PROB_ROW_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow(Vec<f64>);

impl ProbRow {
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        if probs.is_empty() {
            return Err(NumericsError::EmptyInput("ProbRow::new"));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(NumericsError::NonFinite { context: "ProbRow::new" });
            }
            if value < 0.0 {
                return Err(NumericsError::NegativeProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_ROW_TOL {
            return Err(NumericsError::NotNormalized { sum, tol: PROB_ROW_TOL });
        }
        Ok(ProbRow(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry, ties broken toward the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Deref for ProbRow {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Dense row-major matrix, just large enough for the two-layer decoder.
/// General tensor algebra is out of scope.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out = self * x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `out = self^T * x`.
    pub fn matvec_transpose(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (r, &xr) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
    }

    /// `self += scale * u * v^T`.
    pub fn add_scaled_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, &vc) in row.iter_mut().zip(v) {
                *m += scale * ur * vc;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Purpose tags for [`RngStream::fork`]. Each consumer of randomness gets its
/// own stream keyed by (seed, episode index, purpose), so the amount of
/// randomness one consumer draws can never shift another consumer's values.
pub mod stream_purpose {
    /// Episode class selection.
    pub const CLASS_PICK: u64 = 1;
    /// Per-class instance selection; the subindex is the class slot.
    pub const CLASS_INSTANCES: u64 = 2;
    /// Decoder weight initialization.
    pub const DECODER_INIT: u64 = 3;
    /// Latent sampling noise inside the solver loop.
    pub const LATENT_NOISE: u64 = 4;
    /// Synthetic generator: class means.
    pub const SYNTH_MEANS: u64 = 5;
    /// Synthetic generator: per-class feature noise; subindex is the class.
    pub const SYNTH_NOISE: u64 = 6;
}

const STREAM_SALT: &[u8; 8] = b"TPVRNG01";

/// Counter-based deterministic random stream.
///
/// A stream is fully determined by `(seed, stream_id, purpose, subindex)`;
/// identical keys produce bit-identical `u64` sequences on every platform
/// and regardless of scheduling, which is what makes episode-level
/// parallelism reproducible. `stream_id` conventionally carries the episode
/// index; [`fork`](Self::fork) derives purpose-tagged child streams without
/// consuming state from the parent.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::keyed(seed, stream_id, 0, 0)
    }

    /// Child stream with the same (seed, stream_id) but a distinct purpose
    /// tag. Independent of how much the parent has been consumed.
    pub fn fork(&self, purpose: u64, subindex: u64) -> Self {
        Self::keyed(self.seed, self.stream_id, purpose, subindex)
    }

    fn keyed(seed: u64, stream_id: u64, purpose: u64, subindex: u64) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&purpose.to_le_bytes());
        key[16..24].copy_from_slice(&subindex.to_le_bytes());
        key[24..32].copy_from_slice(STREAM_SALT);
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng, spare_normal: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased uniform index in [0, n) via rejection sampling.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs a nonempty range");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, second value cached).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u is in (0, 1], keeping the log argument positive.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = self.standard_normal();
        }
    }
}

// ---------------------------------------------------------------------------
// Probability transforms and vector kernels
// ---------------------------------------------------------------------------

/// In-place log-softmax via max subtraction. Caller guarantees a non-empty,
/// finite input.
pub(crate) fn log_softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s -= max;
        sum += s.exp();
    }
    let lse = sum.ln();
    for s in scores.iter_mut() {
        *s -= lse;
    }
}

/// Log-probabilities of the softmax of `scores`.
///
/// Computed with max subtraction, so no overflow occurs for |score| up to
/// 1e300, and `exp` of the result sums to 1 within 1e-12.
pub fn log_softmax(scores: &[f64]) -> Result<Vec64, NumericsError> {
    if scores.is_empty() {
        return Err(NumericsError::EmptyInput("log_softmax"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(NumericsError::NonFinite { context: "log_softmax input" });
    }
    let mut out = scores.to_vec();
    log_softmax_in_place(&mut out);
    Ok(Vec64(out))
}

/// Squared Euclidean distance between equal-length vectors.
pub fn sq_dist(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `mean + sigma * eps` with standard normal `eps` per coordinate.
///
/// `sigma = 0` returns `mean` bitwise without consuming the stream.
pub fn gaussian_sample(mean: &Vec64, sigma: f64, rng: &mut RngStream) -> Vec64 {
    assert!(sigma.is_finite() && sigma >= 0.0, "sigma must be a nonnegative real");
    if sigma == 0.0 {
        return mean.clone();
    }
    let values = mean.iter().map(|&m| m + sigma * rng.standard_normal()).collect();
    // mean entries and sigma are finite; a Box-Muller draw is finite.
    Vec64(values)
}

/// Central-difference gradient of `f` at `x`: `(f(x+h e_d) - f(x-h e_d)) / 2h`
/// per coordinate. This is the independent oracle that validates the
/// analytic gradients of the objective; it must never share code with them.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec64, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(NumericsError::BadStep(h));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for d in 0..x.len() {
        let original = point[d];
        point[d] = original + h;
        let plus = f(&point);
        point[d] = original - h;
        let minus = f(&point);
        point[d] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite { context: "finite_diff_grad evaluation" });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Vec64::new(grad)
}
