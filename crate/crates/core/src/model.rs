//! Model state for per-episode inference: the prototype classifier, the
//! small decoder network, and the frozen task prior, together with the
//! probabilistic maps between them.

use thiserror::Error;

use crate::episodes::Episode;
use crate::numerics::{
    log_softmax_in_place, sq_dist, stream_purpose, Matrix, NumericsError, ProbRow, RngStream,
    Vec64,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("prototypes need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("temperature must be a positive real, got {0}")]
    BadTemperature(f64),
    #[error("class {0} has no support shots")]
    EmptySupportClass(usize),
    #[error("encoder noise scale must be a nonnegative real, got {0}")]
    BadSigma(f64),
    #[error("need at least one Monte Carlo sample")]
    NoSamples,
    #[error("expected {expected} parameters, got {got}")]
    BadParameterCount { expected: usize, got: usize },
}

/// Per-class prototype vectors with a softmax temperature (the inverse
/// variance of the class-conditional Gaussians).
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    rows: Vec<Vec64>,
    tau: f64,
}

impl Prototypes {
    pub fn new(rows: Vec<Vec64>, tau: f64) -> Result<Self, ModelError> {
        if rows.len() < 2 {
            return Err(ModelError::TooFewClasses(rows.len()));
        }
        let dim = rows[0].len();
        for row in &rows {
            if row.len() != dim {
                return Err(NumericsError::DimensionMismatch { expected: dim, got: row.len() }.into());
            }
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(ModelError::BadTemperature(tau));
        }
        Ok(Prototypes { rows, tau })
    }

    pub fn rows(&self) -> &[Vec64] {
        &self.rows
    }

    pub fn way(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Two-layer decoder `z -> W2 tanh(W1 z + b1) + b2`, mapping latents back to
/// observation space (here: the embedding space itself).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub(crate) w1: Matrix,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Matrix,
    pub(crate) b2: Vec<f64>,
}

impl DecoderParams {
    pub fn d_latent(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_obs(&self) -> usize {
        self.w2.rows()
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }
}

/// The frozen per-query class distribution taken from the first
/// classification by the untrained prototypes. Never mutated by the solver;
/// there is deliberately no mutable access.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    rows: Vec<ProbRow>,
}

impl PriorMatrix {
    /// Builds a prior from explicit rows. [`snapshot_prior`] is the
    /// canonical source; this exists for standalone analysis of the
    /// KL-style terms.
    pub fn from_rows(rows: Vec<ProbRow>) -> Result<Self, ModelError> {
        let width = match rows.first() {
            None => return Err(ModelError::TooFewClasses(0)),
            Some(r) => r.len(),
        };
        if width < 2 {
            return Err(ModelError::TooFewClasses(width));
        }
        for row in &rows {
            if row.len() != width {
                return Err(
                    NumericsError::DimensionMismatch { expected: width, got: row.len() }.into()
                );
            }
        }
        Ok(PriorMatrix { rows })
    }

    pub fn rows(&self) -> &[ProbRow] {
        &self.rows
    }

    pub fn num_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn way(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Column sums: total prior mass per class.
    pub fn marginals(&self) -> Vec<f64> {
        let way = self.way();
        let mut out = vec![0.0; way];
        for row in &self.rows {
            for (o, &p) in out.iter_mut().zip(row.iter()) {
                *o += p;
            }
        }
        out
    }

    /// Canonical byte image, used to verify the prior is never touched.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows.len() * self.way() * 8);
        for row in &self.rows {
            for &p in row.iter() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }
}

/// Everything the per-episode optimizer owns: prototypes, decoder, frozen
/// prior, encoder sampling noise, and the Monte Carlo sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct TpVaeState {
    prototypes: Prototypes,
    decoder: DecoderParams,
    prior: PriorMatrix,
    sigma_enc: f64,
    mc_samples: usize,
}

impl TpVaeState {
    pub fn new(
        prototypes: Prototypes,
        decoder: DecoderParams,
        prior: PriorMatrix,
        sigma_enc: f64,
        mc_samples: usize,
    ) -> Result<Self, ModelError> {
        if !(sigma_enc.is_finite() && sigma_enc >= 0.0) {
            return Err(ModelError::BadSigma(sigma_enc));
        }
        if mc_samples == 0 {
            return Err(ModelError::NoSamples);
        }
        Ok(TpVaeState { prototypes, decoder, prior, sigma_enc, mc_samples })
    }

    pub fn prototypes(&self) -> &Prototypes {
        &self.prototypes
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn prior(&self) -> &PriorMatrix {
        &self.prior
    }

    pub fn sigma_enc(&self) -> f64 {
        self.sigma_enc
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples
    }

    /// Number of optimizable coordinates: every prototype entry plus every
    /// decoder weight and bias.
    pub fn param_count(&self) -> usize {
        let p = &self.prototypes;
        let d = &self.decoder;
        p.way() * p.dim()
            + d.w1.rows() * d.w1.cols()
            + d.b1.len()
            + d.w2.rows() * d.w2.cols()
            + d.b2.len()
    }

    /// Flattens the optimizable parameters in a fixed order: prototype rows,
    /// then w1, b1, w2, b2.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for row in self.prototypes.rows() {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(self.decoder.w1.as_slice());
        out.extend_from_slice(&self.decoder.b1);
        out.extend_from_slice(self.decoder.w2.as_slice());
        out.extend_from_slice(&self.decoder.b2);
        out
    }

    /// Writes back a flat parameter vector in the [`flat_params`] order.
    /// Rejects wrong lengths and non-finite values (prototype rows must stay
    /// finite vectors).
    ///
    /// [`flat_params`]: Self::flat_params
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(ModelError::BadParameterCount { expected, got: flat.len() });
        }
        let dim = self.prototypes.dim();
        let way = self.prototypes.way();
        let mut offset = 0;
        let mut rows = Vec::with_capacity(way);
        for _ in 0..way {
            rows.push(Vec64::new(flat[offset..offset + dim].to_vec())?);
            offset += dim;
        }
        let take = |offset: &mut usize, n: usize| -> Result<Vec<f64>, ModelError> {
            let slice = &flat[*offset..*offset + n];
            if slice.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { context: "decoder parameters" }.into());
            }
            *offset += n;
            Ok(slice.to_vec())
        };
        let w1_len = self.decoder.w1.as_slice().len();
        let w1 = take(&mut offset, w1_len)?;
        let b1 = take(&mut offset, self.decoder.b1.len())?;
        let w2_len = self.decoder.w2.as_slice().len();
        let w2 = take(&mut offset, w2_len)?;
        let b2 = take(&mut offset, self.decoder.b2.len())?;

        self.prototypes.rows = rows;
        self.decoder.w1.as_mut_slice().copy_from_slice(&w1);
        self.decoder.b1 = b1;
        self.decoder.w2.as_mut_slice().copy_from_slice(&w2);
        self.decoder.b2 = b2;
        Ok(())
    }
}

/// One Monte Carlo draw of latents for every shot of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub support: Vec<Vec64>,
    pub query: Vec<Vec64>,
}

/// Prototype initialization: row k is the mean of the support features
/// labeled k.
pub fn init_prototypes(episode: &Episode, tau: f64) -> Result<Prototypes, ModelError> {
    let way = episode.way();
    let dim = episode.dim();
    let mut sums = vec![vec![0.0; dim]; way];
    let mut counts = vec![0usize; way];
    for shot in episode.support() {
        counts[shot.label] += 1;
        for (s, &v) in sums[shot.label].iter_mut().zip(shot.feature.iter()) {
            *s += v;
        }
    }
    let mut rows = Vec::with_capacity(way);
    for (k, (sum, &count)) in sums.into_iter().zip(&counts).enumerate() {
        if count == 0 {
            return Err(ModelError::EmptySupportClass(k));
        }
        let mean: Vec<f64> = sum.into_iter().map(|v| v / count as f64).collect();
        rows.push(Vec64::new(mean)?);
    }
    Prototypes::new(rows, tau)
}

/// Log-probabilities of the nearest-prototype softmax: scores are
/// `-tau * ||z - psi_k||^2`, normalized over classes.
pub(crate) fn fill_log_posterior(
    z: &[f64],
    protos: &Prototypes,
    out: &mut [f64],
) -> Result<(), ModelError> {
    debug_assert_eq!(out.len(), protos.way());
    for (o, row) in out.iter_mut().zip(protos.rows()) {
        *o = -protos.tau() * sq_dist(z, row)?;
    }
    if out.iter().any(|s| !s.is_finite()) {
        return Err(NumericsError::NonFinite { context: "posterior scores" }.into());
    }
    log_softmax_in_place(out);
    Ok(())
}

/// Class posterior of a single embedding under the prototype classifier.
pub fn posterior(z: &[f64], protos: &Prototypes) -> Result<ProbRow, ModelError> {
    let mut log_probs = vec![0.0; protos.way()];
    fill_log_posterior(z, protos, &mut log_probs)?;
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok(ProbRow::new(probs)?)
}

/// The task prior: the posterior of every query embedding under the
/// untrained (freshly initialized) prototypes, using deterministic
/// embeddings. Computed once before optimization and frozen.
pub fn snapshot_prior(episode: &Episode, protos_init: &Prototypes) -> Result<PriorMatrix, ModelError> {
    let rows = episode
        .query()
        .iter()
        .map(|q| posterior(&q.feature, protos_init))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PriorMatrix { rows })
}

/// Random decoder initialization: weights uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_decoder(d_obs: usize, d_hidden: usize, d_latent: usize, rng: &RngStream) -> DecoderParams {
    assert!(d_obs > 0 && d_hidden > 0 && d_latent > 0, "decoder dimensions must be positive");
    let mut rng = rng.fork(stream_purpose::DECODER_INIT, 0);
    let bound1 = 1.0 / (d_latent as f64).sqrt();
    let w1 = Matrix::from_fn(d_hidden, d_latent, |_, _| rng.uniform_in(-bound1, bound1));
    let bound2 = 1.0 / (d_hidden as f64).sqrt();
    let w2 = Matrix::from_fn(d_obs, d_hidden, |_, _| rng.uniform_in(-bound2, bound2));
    DecoderParams { w1, b1: vec![0.0; d_hidden], w2, b2: vec![0.0; d_obs] }
}

/// Decoder forward pass producing the reconstruction mean.
pub fn decode(theta: &DecoderParams, z: &[f64]) -> Result<Vec64, ModelError> {
    if z.len() != theta.d_latent() {
        return Err(NumericsError::DimensionMismatch { expected: theta.d_latent(), got: z.len() }.into());
    }
    let (out, _) = decode_cached(theta, z);
    Ok(Vec64::new(out)?)
}

/// Forward pass that also returns the hidden activations, for reuse by the
/// analytic backward pass.
pub(crate) fn decode_cached(theta: &DecoderParams, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut hidden = vec![0.0; theta.d_hidden()];
    theta.w1.matvec(z, &mut hidden);
    for (h, &b) in hidden.iter_mut().zip(&theta.b1) {
        *h = (*h + b).tanh();
    }
    let mut out = vec![0.0; theta.d_obs()];
    theta.w2.matvec(&hidden, &mut out);
    for (o, &b) in out.iter_mut().zip(&theta.b2) {
        *o += b;
    }
    (out, hidden)
}

/// Draws `mc_samples` latent sets: each stored feature plus isotropic
/// Gaussian noise of scale `sigma_enc`. With `sigma_enc = 0` the latents are
/// the features themselves, bitwise.
pub fn sample_latents(
    episode: &Episode,
    sigma_enc: f64,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Vec<LatentSet> {
    assert!(sigma_enc.is_finite() && sigma_enc >= 0.0, "sigma_enc must be a nonnegative real");
    assert!(mc_samples >= 1, "at least one Monte Carlo sample");
    (0..mc_samples)
        .map(|_| LatentSet {
            support: episode
                .support()
                .iter()
                .map(|s| crate::numerics::gaussian_sample(&s.feature, sigma_enc, rng))
                .collect(),
            query: episode
                .query()
                .iter()
                .map(|q| crate::numerics::gaussian_sample(&q.feature, sigma_enc, rng))
                .collect(),
        })
        .collect()
}
