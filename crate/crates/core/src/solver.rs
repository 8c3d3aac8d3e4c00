//! Per-episode optimization: initialize the prototypes from the support
//! means and the decoder randomly, snapshot the task prior once, then
//! iterate sample / loss / gradient / SGD until the total stops moving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::Episode;
use crate::model::{
    init_decoder, init_prototypes, posterior, sample_latents, snapshot_prior, ModelError,
    TpVaeState,
};
use crate::numerics::{stream_purpose, RngStream};
use crate::objective::{loss_and_grad, LossBreakdown, LossWeights, ObjectiveError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(
        "non-finite loss at iteration {iter} \
         (ce {ce}, recon {recon}, lik {lik}, tp {tp}): episode aborted"
    )]
    NonFiniteLoss { iter: usize, ce: f64, recon: f64, lik: f64, tp: f64 },
    #[error("invalid solver config: {0}")]
    BadConfig(String),
}

/// Solver hyper-parameters. The defaults are the published operating point:
/// SGD with learning rate 0.1 and momentum 0, one Monte Carlo sample, and
/// temperature 25.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lr: f64,
    pub momentum: f64,
    pub max_iters: usize,
    /// Early stop once consecutive totals differ by less than this.
    pub tol: f64,
    pub tau: f64,
    pub sigma_enc: f64,
    pub mc_samples: usize,
    pub weights: LossWeights,
    /// Decoder hidden width; `None` uses the feature dimension.
    pub d_hidden: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lr: 0.1,
            momentum: 0.0,
            max_iters: 150,
            tol: 1e-6,
            tau: 25.0,
            sigma_enc: 0.1,
            mc_samples: 1,
            weights: LossWeights::full(),
            d_hidden: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(SolverError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.momentum.is_finite() && self.momentum >= 0.0) {
            return Err(SolverError::BadConfig(format!(
                "momentum must be nonnegative, got {}",
                self.momentum
            )));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(SolverError::BadConfig(format!("tol must be nonnegative, got {}", self.tol)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(SolverError::BadConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.sigma_enc.is_finite() && self.sigma_enc >= 0.0) {
            return Err(SolverError::BadConfig(format!(
                "sigma-enc must be nonnegative, got {}",
                self.sigma_enc
            )));
        }
        if self.mc_samples == 0 {
            return Err(SolverError::BadConfig("mc-samples must be at least 1".into()));
        }
        if self.d_hidden == Some(0) {
            return Err(SolverError::BadConfig("d-hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one solved episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// Predicted class per query shot, ties broken toward the lowest index.
    pub predicted: Vec<usize>,
    /// Fraction of queries whose prediction matches the hidden label.
    pub accuracy: f64,
    /// Loss breakdown per iteration, recorded before each step.
    pub loss_trace: Vec<LossBreakdown>,
    /// SGD steps performed.
    pub iters_run: usize,
}

/// SGD with momentum on a flat parameter block:
/// `velocity = momentum * velocity + grads; params -= lr * velocity`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient shape mismatch");
    assert_eq!(params.len(), velocity.len(), "parameter/velocity shape mismatch");
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Runs the full per-episode loop and returns predictions plus the final
/// state (whose prior can then be audited against a fresh snapshot).
pub fn run_episode_traced(
    episode: &Episode,
    cfg: &SolverConfig,
    rng: &RngStream,
) -> Result<(EpisodeResult, TpVaeState), SolverError> {
    cfg.validate()?;
    let dim = episode.dim();
    let d_hidden = cfg.d_hidden.unwrap_or(dim);

    let prototypes = init_prototypes(episode, cfg.tau)?;
    let decoder = init_decoder(dim, d_hidden, dim, rng);
    // The prior is the classification of the untrained prototypes over the
    // deterministic embeddings, computed once before the loop.
    let prior = snapshot_prior(episode, &prototypes)?;
    let mut state = TpVaeState::new(prototypes, decoder, prior, cfg.sigma_enc, cfg.mc_samples)?;

    let mut latent_rng = rng.fork(stream_purpose::LATENT_NOISE, 0);
    let mut velocity = vec![0.0; state.param_count()];
    let mut trace = Vec::new();
    let mut prev_total: Option<f64> = None;
    let mut iters_run = 0;

    for iter in 0..cfg.max_iters {
        let latents = sample_latents(episode, cfg.sigma_enc, cfg.mc_samples, &mut latent_rng);
        let (breakdown, grads) = loss_and_grad(&state, episode, &cfg.weights, &latents)?;
        if !breakdown.total.is_finite() {
            return Err(SolverError::NonFiniteLoss {
                iter,
                ce: breakdown.ce,
                recon: breakdown.recon,
                lik: breakdown.lik,
                tp: breakdown.tp,
            });
        }
        trace.push(breakdown);

        let mut params = state.flat_params();
        sgd_step(&mut params, &grads.to_flat(), cfg.lr, cfg.momentum, &mut velocity);
        state.set_flat_params(&params)?;
        iters_run = iter + 1;

        if let Some(prev) = prev_total {
            if (breakdown.total - prev).abs() < cfg.tol {
                break;
            }
        }
        prev_total = Some(breakdown.total);
    }

    let predicted = predict(episode, &state)?;
    let accuracy = score(episode, &predicted);
    let result = EpisodeResult { predicted, accuracy, loss_trace: trace, iters_run };
    Ok((result, state))
}

/// Runs the full per-episode loop.
pub fn run_episode(
    episode: &Episode,
    cfg: &SolverConfig,
    rng: &RngStream,
) -> Result<EpisodeResult, SolverError> {
    Ok(run_episode_traced(episode, cfg, rng)?.0)
}

/// The untrained nearest-prototype classifier: predictions from the
/// initialized prototypes with no optimization.
pub fn baseline_prototype(episode: &Episode, tau: f64) -> Result<EpisodeResult, SolverError> {
    let prototypes = init_prototypes(episode, tau)?;
    let mut predicted = Vec::with_capacity(episode.query().len());
    for q in episode.query() {
        predicted.push(posterior(&q.feature, &prototypes)?.argmax());
    }
    let accuracy = score(episode, &predicted);
    Ok(EpisodeResult { predicted, accuracy, loss_trace: Vec::new(), iters_run: 0 })
}

/// Final predictions on the deterministic embeddings, regardless of the
/// sampling noise used during optimization.
fn predict(episode: &Episode, state: &TpVaeState) -> Result<Vec<usize>, SolverError> {
    let mut predicted = Vec::with_capacity(episode.query().len());
    for q in episode.query() {
        predicted.push(posterior(&q.feature, state.prototypes())?.argmax());
    }
    Ok(predicted)
}

fn score(episode: &Episode, predicted: &[usize]) -> f64 {
    let hits = episode
        .query()
        .iter()
        .zip(predicted)
        .filter(|(q, &p)| q.hidden_label == p)
        .count();
    hits as f64 / episode.query().len() as f64
}
