//! The per-episode objective: support cross-entropy plus the three
//! query-side lower-bound terms (reconstruction, class likelihood,
//! task-prior regularizer), their analytic gradients with respect to the
//! prototypes and decoder, and the sample-level/task-level KL pair.
//!
//! Sign convention: the lower-bound terms are stored as values to be
//! maximized, so the minimized total is
//! `w_ce * ce - (w_recon * recon + w_lik * lik + w_tp * tp)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::Episode;
use crate::model::{decode_cached, LatentSet, ModelError, PriorMatrix, TpVaeState};
use crate::numerics::{log_softmax_in_place, sq_dist, Matrix, NumericsError, ProbRow};

/// Floor applied to arguments of logarithms in the KL-style terms, where a
/// class can receive vanishing probability mass.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    Shape { context: &'static str, expected: usize, got: usize },
    #[error("non-finite posterior score for {context} shot {index}")]
    NonFiniteScore { context: &'static str, index: usize },
    #[error("non-finite gradient in {term}")]
    NonFiniteGradient { term: &'static str },
}

/// Which relaxation of the task-prior term to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpForm {
    /// `sum_k W_k log(P_k / W_k)` over predicted class masses `W` and prior
    /// class masses `P`: the exact outcome of the Jensen relaxation, and the
    /// default.
    JensenMarginal,
    /// `sum_k W_k log(sum_i P_ik / p_ik)`, the expression with the ratio sum
    /// inside one logarithm. Kept selectable for comparison only.
    Literal,
}

impl std::str::FromStr for TpForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jensen" | "jensen_marginal" => Ok(TpForm::JensenMarginal),
            "literal" => Ok(TpForm::Literal),
            other => Err(format!("unknown tp form {other:?} (expected jensen|literal)")),
        }
    }
}

impl std::fmt::Display for TpForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TpForm::JensenMarginal => f.write_str("jensen_marginal"),
            TpForm::Literal => f.write_str("literal"),
        }
    }
}

/// Nonnegative weights on the four loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_recon: f64,
    pub w_lik: f64,
    pub w_tp: f64,
    pub tp_form: TpForm,
}

impl LossWeights {
    pub fn new(w_ce: f64, w_recon: f64, w_lik: f64, w_tp: f64, tp_form: TpForm) -> Option<Self> {
        let ws = [w_ce, w_recon, w_lik, w_tp];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().all(|&w| w == 0.0) {
            return None;
        }
        Some(LossWeights { w_ce, w_recon, w_lik, w_tp, tp_form })
    }

    /// All components active with unit weights.
    pub fn full() -> Self {
        LossWeights { w_ce: 1.0, w_recon: 1.0, w_lik: 1.0, w_tp: 1.0, tp_form: TpForm::JensenMarginal }
    }

    /// Support cross-entropy only.
    pub fn ce_only() -> Self {
        LossWeights { w_ce: 1.0, w_recon: 0.0, w_lik: 0.0, w_tp: 0.0, tp_form: TpForm::JensenMarginal }
    }

    /// Cross-entropy plus the remainder terms (reconstruction and class
    /// likelihood), without the task-prior regularizer.
    pub fn ce_re() -> Self {
        LossWeights { w_ce: 1.0, w_recon: 1.0, w_lik: 1.0, w_tp: 0.0, tp_form: TpForm::JensenMarginal }
    }

    /// Cross-entropy plus the task-prior regularizer only.
    pub fn ce_tp() -> Self {
        LossWeights { w_ce: 1.0, w_recon: 0.0, w_lik: 0.0, w_tp: 1.0, tp_form: TpForm::JensenMarginal }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::full()
    }
}

/// Component values of one objective evaluation. The components are stored
/// unweighted; `total` folds the weights and the minimization sign in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Support cross-entropy, averaged per support shot. Nonnegative.
    pub ce: f64,
    /// Query reconstruction log-density (additive constants dropped).
    pub recon: f64,
    /// Posterior-weighted class log-likelihood of the query latents.
    pub lik: f64,
    /// Task-prior regularizer; nonpositive for the Jensen marginal form.
    pub tp: f64,
    /// `w_ce * ce - (w_recon * recon + w_lik * lik + w_tp * tp)`.
    pub total: f64,
}

/// Analytic gradients of the weighted total with respect to every prototype
/// coordinate and every decoder parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_psi: Vec<Vec<f64>>,
    pub d_w1: Matrix,
    pub d_b1: Vec<f64>,
    pub d_w2: Matrix,
    pub d_b2: Vec<f64>,
}

impl Gradients {
    fn zeros(way: usize, dim: usize, theta_like: &crate::model::DecoderParams) -> Self {
        Gradients {
            d_psi: vec![vec![0.0; dim]; way],
            d_w1: Matrix::zeros(theta_like.d_hidden(), theta_like.d_latent()),
            d_b1: vec![0.0; theta_like.d_hidden()],
            d_w2: Matrix::zeros(theta_like.d_obs(), theta_like.d_hidden()),
            d_b2: vec![0.0; theta_like.d_obs()],
        }
    }

    /// Flattened in the same order as [`TpVaeState::flat_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for row in &self.d_psi {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(self.d_w1.as_slice());
        out.extend_from_slice(&self.d_b1);
        out.extend_from_slice(self.d_w2.as_slice());
        out.extend_from_slice(&self.d_b2);
        out
    }

    fn check_finite(&self) -> Result<(), ObjectiveError> {
        let blocks: [(&'static str, &dyn Fn() -> bool); 5] = [
            ("prototype gradient", &|| self.d_psi.iter().flatten().all(|v| v.is_finite())),
            ("decoder w1 gradient", &|| self.d_w1.as_slice().iter().all(|v| v.is_finite())),
            ("decoder b1 gradient", &|| self.d_b1.iter().all(|v| v.is_finite())),
            ("decoder w2 gradient", &|| self.d_w2.as_slice().iter().all(|v| v.is_finite())),
            ("decoder b2 gradient", &|| self.d_b2.iter().all(|v| v.is_finite())),
        ];
        for (term, ok) in blocks {
            if !ok() {
                return Err(ObjectiveError::NonFiniteGradient { term });
            }
        }
        Ok(())
    }
}

/// Support cross-entropy, averaged over Monte Carlo samples and support
/// shots. Computed from log-probabilities directly, so no clamping is
/// needed.
pub fn loss_ce(
    state: &TpVaeState,
    episode: &Episode,
    latents: &[LatentSet],
) -> Result<f64, ObjectiveError> {
    check_shapes(state, episode, latents)?;
    Ok(eval(state, episode, &LossWeights::full(), latents, false)?.0.ce)
}

/// Query reconstruction term: `(1/L) sum_l sum_i -1/2 ||q_i - g(z_i^l)||^2`.
pub fn loss_recon(
    state: &TpVaeState,
    latents: &[LatentSet],
    episode: &Episode,
) -> Result<f64, ObjectiveError> {
    check_shapes(state, episode, latents)?;
    Ok(eval(state, episode, &LossWeights::full(), latents, false)?.0.recon)
}

/// Query class-likelihood term: posterior-weighted `-tau ||z - psi_k||^2`
/// (the class-conditional log density with its shared normalizer dropped).
pub fn loss_lik(
    state: &TpVaeState,
    latents: &[LatentSet],
    episode: &Episode,
) -> Result<f64, ObjectiveError> {
    check_shapes(state, episode, latents)?;
    Ok(eval(state, episode, &LossWeights::full(), latents, false)?.0.lik)
}

/// Task-prior term over one set of posterior rows.
///
/// With `W_k = sum_i p(k|z_i)` and `P_k = sum_i prior_ik`, the Jensen
/// marginal form is `sum_k W_k log(P_k / W_k)`; the literal form is
/// `sum_k W_k log(sum_i prior_ik / p(k|z_i))`. Logs are floored at
/// [`LOG_CLAMP`].
pub fn loss_tp(posterior_rows: &[ProbRow], prior: &PriorMatrix, form: TpForm) -> f64 {
    assert_eq!(posterior_rows.len(), prior.num_queries(), "row count mismatch");
    if posterior_rows.is_empty() {
        return 0.0;
    }
    let way = prior.way();
    assert!(posterior_rows.iter().all(|r| r.len() == way), "row width mismatch");

    let mut w = vec![0.0; way];
    for row in posterior_rows {
        for (acc, &p) in w.iter_mut().zip(row.iter()) {
            *acc += p;
        }
    }
    match form {
        TpForm::JensenMarginal => tp_jensen_value(&w, &prior.marginals()),
        TpForm::Literal => {
            let rows: Vec<&[f64]> = posterior_rows.iter().map(|r| r.as_slice()).collect();
            tp_literal_value(&rows, prior, &w).0
        }
    }
}

/// The unrelaxed sample-level term:
/// `sum_i sum_k p(k|z_i) log(prior_ik / p(k|z_i))`, i.e. minus the summed
/// per-query KL from posterior to prior.
pub fn loss_sample_kl(posterior_rows: &[ProbRow], prior: &PriorMatrix) -> f64 {
    assert_eq!(posterior_rows.len(), prior.num_queries(), "row count mismatch");
    let mut total = 0.0;
    for (row, prior_row) in posterior_rows.iter().zip(prior.rows()) {
        assert_eq!(row.len(), prior_row.len(), "row width mismatch");
        for (&p, &q) in row.iter().zip(prior_row.iter()) {
            if p > 0.0 {
                total += p * (q.max(LOG_CLAMP).ln() - p.max(LOG_CLAMP).ln());
            }
        }
    }
    total
}

/// Full loss breakdown for one episode state.
pub fn total_loss(
    state: &TpVaeState,
    episode: &Episode,
    weights: &LossWeights,
    latents: &[LatentSet],
) -> Result<LossBreakdown, ObjectiveError> {
    check_shapes(state, episode, latents)?;
    Ok(eval(state, episode, weights, latents, false)?.0)
}

/// Analytic gradient of the weighted total. The gradient flows through every
/// appearance of the prototypes, including the posterior weights; there is
/// no stop-gradient anywhere.
pub fn grad_total(
    state: &TpVaeState,
    episode: &Episode,
    weights: &LossWeights,
    latents: &[LatentSet],
) -> Result<Gradients, ObjectiveError> {
    check_shapes(state, episode, latents)?;
    let (_, grads) = eval(state, episode, weights, latents, true)?;
    let grads = grads.expect("gradients requested");
    grads.check_finite()?;
    Ok(grads)
}

/// Loss and gradient in one pass; what the solver iterates on.
pub fn loss_and_grad(
    state: &TpVaeState,
    episode: &Episode,
    weights: &LossWeights,
    latents: &[LatentSet],
) -> Result<(LossBreakdown, Gradients), ObjectiveError> {
    check_shapes(state, episode, latents)?;
    let (breakdown, grads) = eval(state, episode, weights, latents, true)?;
    let grads = grads.expect("gradients requested");
    grads.check_finite()?;
    Ok((breakdown, grads))
}

fn check_shapes(
    state: &TpVaeState,
    episode: &Episode,
    latents: &[LatentSet],
) -> Result<(), ObjectiveError> {
    if latents.is_empty() {
        return Err(ObjectiveError::Shape { context: "latent sets", expected: 1, got: 0 });
    }
    let protos = state.prototypes();
    if protos.way() != episode.way() {
        return Err(ObjectiveError::Shape {
            context: "prototype rows vs episode way",
            expected: episode.way(),
            got: protos.way(),
        });
    }
    if protos.dim() != episode.dim() {
        return Err(ObjectiveError::Shape {
            context: "prototype dim vs feature dim",
            expected: episode.dim(),
            got: protos.dim(),
        });
    }
    if state.decoder().d_latent() != episode.dim() || state.decoder().d_obs() != episode.dim() {
        return Err(ObjectiveError::Shape {
            context: "decoder dims vs feature dim",
            expected: episode.dim(),
            got: state.decoder().d_latent(),
        });
    }
    if state.prior().num_queries() != episode.query().len() {
        return Err(ObjectiveError::Shape {
            context: "prior rows vs query count",
            expected: episode.query().len(),
            got: state.prior().num_queries(),
        });
    }
    for set in latents {
        if set.support.len() != episode.support().len() {
            return Err(ObjectiveError::Shape {
                context: "latent support shots",
                expected: episode.support().len(),
                got: set.support.len(),
            });
        }
        if set.query.len() != episode.query().len() {
            return Err(ObjectiveError::Shape {
                context: "latent query shots",
                expected: episode.query().len(),
                got: set.query.len(),
            });
        }
    }
    Ok(())
}

/// Jensen marginal value with clamped logs.
fn tp_jensen_value(w: &[f64], p: &[f64]) -> f64 {
    w.iter()
        .zip(p)
        .map(|(&wk, &pk)| {
            if wk == 0.0 {
                0.0
            } else {
                wk * (pk.max(LOG_CLAMP).ln() - wk.max(LOG_CLAMP).ln())
            }
        })
        .sum()
}

/// Literal value; also returns the per-class ratio sums for the backward
/// pass.
fn tp_literal_value(posterior_rows: &[&[f64]], prior: &PriorMatrix, w: &[f64]) -> (f64, Vec<f64>) {
    let way = w.len();
    let mut ratio_sums = vec![0.0; way];
    for (row, prior_row) in posterior_rows.iter().zip(prior.rows()) {
        for k in 0..way {
            ratio_sums[k] += prior_row[k] / row[k].max(LOG_CLAMP);
        }
    }
    let value = w
        .iter()
        .zip(&ratio_sums)
        .map(|(&wk, &rk)| if wk == 0.0 { 0.0 } else { wk * rk.max(LOG_CLAMP).ln() })
        .sum();
    (value, ratio_sums)
}

/// Scores and log-posteriors of a set of latents under the prototypes,
/// stored as flat `shots x way` row-major matrices.
fn posterior_matrices(
    latents: &[crate::numerics::Vec64],
    state: &TpVaeState,
    context: &'static str,
) -> Result<(Vec<f64>, Vec<f64>), ObjectiveError> {
    let protos = state.prototypes();
    let way = protos.way();
    let tau = protos.tau();
    let mut scores = vec![0.0; latents.len() * way];
    for (i, z) in latents.iter().enumerate() {
        let row = &mut scores[i * way..(i + 1) * way];
        for (o, proto) in row.iter_mut().zip(protos.rows()) {
            *o = -tau * sq_dist(z, proto)?;
        }
        if row.iter().any(|s| !s.is_finite()) {
            return Err(ObjectiveError::NonFiniteScore { context, index: i });
        }
    }
    let mut log_probs = scores.clone();
    for i in 0..latents.len() {
        log_softmax_in_place(&mut log_probs[i * way..(i + 1) * way]);
    }
    Ok((scores, log_probs))
}

/// Accumulates `da[m] * 2 tau (z - psi_m)` into the prototype gradient for
/// one shot. `da` is the derivative of the weighted total with respect to
/// this shot's raw scores.
fn accumulate_psi(
    d_psi: &mut [Vec<f64>],
    z: &[f64],
    protos: &crate::model::Prototypes,
    da: &[f64],
) {
    let two_tau = 2.0 * protos.tau();
    for (m, (grad_row, proto)) in d_psi.iter_mut().zip(protos.rows()).enumerate() {
        let coef = da[m] * two_tau;
        if coef == 0.0 {
            continue;
        }
        for ((g, &zd), &pd) in grad_row.iter_mut().zip(z).zip(proto.iter()) {
            *g += coef * (zd - pd);
        }
    }
}

/// One combined forward (and optional backward) pass over all Monte Carlo
/// samples. Component values are always the true unweighted values; weights
/// only affect `total` and which gradient paths are active.
fn eval(
    state: &TpVaeState,
    episode: &Episode,
    weights: &LossWeights,
    latents: &[LatentSet],
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Gradients>), ObjectiveError> {
    let protos = state.prototypes();
    let theta = state.decoder();
    let way = protos.way();
    let num_support = episode.support().len();
    let num_queries = episode.query().len();
    let inv_l = 1.0 / latents.len() as f64;
    let prior_marginals = state.prior().marginals();

    let mut grads = want_grads.then(|| Gradients::zeros(way, protos.dim(), theta));
    let mut ce = 0.0;
    let mut recon = 0.0;
    let mut lik = 0.0;
    let mut tp = 0.0;

    // Scratch reused across queries for the decoder passes.
    let mut hidden_grad = vec![0.0; theta.d_hidden()];

    for set in latents {
        let (_, s_logp) = posterior_matrices(&set.support, state, "support")?;
        let (q_scores, q_logp) = posterior_matrices(&set.query, state, "query")?;

        // Support cross-entropy, averaged per shot.
        let mut ce_l = 0.0;
        for (s, shot) in episode.support().iter().enumerate() {
            ce_l -= s_logp[s * way + shot.label];
        }
        ce_l /= num_support as f64;
        ce += inv_l * ce_l;

        // Query posteriors, class masses, and per-query mean scores.
        let mut q_probs = vec![0.0; num_queries * way];
        let mut class_mass = vec![0.0; way];
        let mut mean_score = vec![0.0; num_queries];
        for i in 0..num_queries {
            let mut abar = 0.0;
            for k in 0..way {
                let p = q_logp[i * way + k].exp();
                q_probs[i * way + k] = p;
                class_mass[k] += p;
                if p > 0.0 {
                    abar += p * q_scores[i * way + k];
                }
            }
            mean_score[i] = abar;
        }
        lik += inv_l * mean_score.iter().sum::<f64>();

        // Task-prior term.
        let (tp_l, literal_ratio_sums) = match weights.tp_form {
            TpForm::JensenMarginal => (tp_jensen_value(&class_mass, &prior_marginals), Vec::new()),
            TpForm::Literal => {
                let rows: Vec<&[f64]> =
                    (0..num_queries).map(|i| &q_probs[i * way..(i + 1) * way]).collect();
                tp_literal_value(&rows, state.prior(), &class_mass)
            }
        };
        tp += inv_l * tp_l;

        // Reconstruction, with the decoder backward fused into the same
        // query loop.
        for (z, q) in set.query.iter().zip(episode.query()) {
            let (out, hidden) = decode_cached(theta, z);
            let mut sq = 0.0;
            for (&o, &t) in out.iter().zip(q.feature.iter()) {
                let r = t - o;
                sq += r * r;
            }
            recon -= inv_l * 0.5 * sq;

            if let Some(g) = grads.as_mut() {
                if weights.w_recon != 0.0 {
                    // d(total)/d(out) = -w_recon/L * (q - out) * d(recon)/d(out)
                    // with recon = -1/2 ||q - out||^2, so d/d(out) = (q - out).
                    let coef = -weights.w_recon * inv_l;
                    let dout: Vec<f64> =
                        out.iter().zip(q.feature.iter()).map(|(&o, &t)| coef * (t - o)).collect();
                    for (acc, &d) in g.d_b2.iter_mut().zip(&dout) {
                        *acc += d;
                    }
                    g.d_w2.add_scaled_outer(&dout, &hidden, 1.0);
                    theta.w2.matvec_transpose(&dout, &mut hidden_grad);
                    for (hg, &h) in hidden_grad.iter_mut().zip(&hidden) {
                        *hg *= 1.0 - h * h;
                    }
                    for (acc, &d) in g.d_b1.iter_mut().zip(&hidden_grad) {
                        *acc += d;
                    }
                    g.d_w1.add_scaled_outer(&hidden_grad, z, 1.0);
                }
            }
        }

        let Some(g) = grads.as_mut() else { continue };

        // Prototype gradient: support cross-entropy path.
        if weights.w_ce != 0.0 {
            let coef = weights.w_ce * inv_l / num_support as f64;
            let mut da = vec![0.0; way];
            for (s, shot) in episode.support().iter().enumerate() {
                for k in 0..way {
                    let p = s_logp[s * way + k].exp();
                    da[k] = coef * (p - if k == shot.label { 1.0 } else { 0.0 });
                }
                accumulate_psi(&mut g.d_psi, &set.support[s], protos, &da);
            }
        }

        // Prototype gradient: query-side paths (class likelihood and task
        // prior), combined per query.
        if weights.w_lik != 0.0 || weights.w_tp != 0.0 {
            let lik_coef = -weights.w_lik * inv_l;
            let tp_coef = -weights.w_tp * inv_l;

            // Jensen form: d(tp)/d(W_k), the per-class mass sensitivities.
            let jensen_u: Vec<f64> = match weights.tp_form {
                TpForm::JensenMarginal => class_mass
                    .iter()
                    .zip(&prior_marginals)
                    .map(|(&wk, &pk)| {
                        let mut u = pk.max(LOG_CLAMP).ln() - wk.max(LOG_CLAMP).ln();
                        if wk > LOG_CLAMP {
                            u -= 1.0;
                        }
                        u
                    })
                    .collect(),
                TpForm::Literal => Vec::new(),
            };
            let literal_log_r: Vec<f64> = literal_ratio_sums
                .iter()
                .map(|&r| r.max(LOG_CLAMP).ln())
                .collect();

            let mut da = vec![0.0; way];
            let mut t_row = vec![0.0; way];
            for i in 0..num_queries {
                let probs = &q_probs[i * way..(i + 1) * way];
                let scores = &q_scores[i * way..(i + 1) * way];

                for d in da.iter_mut() {
                    *d = 0.0;
                }
                if weights.w_lik != 0.0 {
                    let abar = mean_score[i];
                    for k in 0..way {
                        if probs[k] > 0.0 {
                            da[k] += lik_coef * probs[k] * (scores[k] - abar + 1.0);
                        }
                    }
                }
                if weights.w_tp != 0.0 {
                    match weights.tp_form {
                        TpForm::JensenMarginal => {
                            let ubar: f64 =
                                probs.iter().zip(&jensen_u).map(|(&p, &u)| p * u).sum();
                            for k in 0..way {
                                if probs[k] > 0.0 {
                                    da[k] += tp_coef * probs[k] * (jensen_u[k] - ubar);
                                }
                            }
                        }
                        TpForm::Literal => {
                            let prior_row = &state.prior().rows()[i];
                            for k in 0..way {
                                let mut t = probs[k] * literal_log_r[k];
                                if literal_ratio_sums[k] > LOG_CLAMP && probs[k] > LOG_CLAMP {
                                    t -= (class_mass[k] / literal_ratio_sums[k])
                                        * (prior_row[k] / probs[k]);
                                }
                                t_row[k] = t;
                            }
                            let t_sum: f64 = t_row.iter().sum();
                            for k in 0..way {
                                da[k] += tp_coef * (t_row[k] - probs[k] * t_sum);
                            }
                        }
                    }
                }
                accumulate_psi(&mut g.d_psi, &set.query[i], protos, &da);
            }
        }
    }

    let total = weights.w_ce * ce - (weights.w_recon * recon + weights.w_lik * lik + weights.w_tp * tp);
    Ok((LossBreakdown { ce, recon, lik, tp, total }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{
        gen_synthetic, sample_episode, Episode, EpisodeSpec, Preprocess, QueryShot, SupportShot,
        SynthSpec,
    };
    use crate::model::{
        init_decoder, init_prototypes, posterior, sample_latents, snapshot_prior, DecoderParams,
        Prototypes, TpVaeState,
    };
    use crate::numerics::{finite_diff_grad, Matrix, RngStream, Vec64};

    fn toy_episode(way: usize, shot: usize, queries: usize, dim: usize, seed: u64) -> Episode {
        let ds =
            gen_synthetic(&SynthSpec::new(way + 2, dim, shot + queries + 4, 2.0, seed).unwrap());
        let spec = EpisodeSpec::uniform(way, shot, queries, Preprocess::None).unwrap();
        sample_episode(&ds, &spec, &RngStream::new(seed, 1)).unwrap()
    }

    fn build_state(episode: &Episode, tau: f64, sigma_enc: f64, mc: usize, seed: u64) -> TpVaeState {
        let protos = init_prototypes(episode, tau).unwrap();
        let dim = episode.dim();
        let decoder = init_decoder(dim, dim, dim, &RngStream::new(seed, 2));
        let prior = snapshot_prior(episode, &protos).unwrap();
        TpVaeState::new(protos, decoder, prior, sigma_enc, mc).unwrap()
    }

    fn deterministic_latents(episode: &Episode) -> Vec<crate::model::LatentSet> {
        sample_latents(episode, 0.0, 1, &mut RngStream::new(0, 0))
    }

    fn shot(values: &[f64], label: usize) -> SupportShot {
        SupportShot { feature: Vec64::new(values.to_vec()).unwrap(), label }
    }

    fn query(values: &[f64], hidden_label: usize) -> QueryShot {
        QueryShot { feature: Vec64::new(values.to_vec()).unwrap(), hidden_label }
    }

    /// Handcrafted 2-way, 1-D instance: supports at 0 and 1 (so the
    /// initialized prototypes are exactly {0, 1}), one query at `q`, tau 1.
    fn two_term_fixture(q: f64) -> (Episode, TpVaeState) {
        let spec = EpisodeSpec::new(2, 1, vec![1, 0], Preprocess::None).unwrap();
        let episode = Episode::new(
            vec![shot(&[0.0], 0), shot(&[1.0], 1)],
            vec![query(&[q], 0)],
            spec,
        )
        .unwrap();
        let protos = init_prototypes(&episode, 1.0).unwrap();
        let decoder = init_decoder(1, 1, 1, &RngStream::new(5, 1));
        let prior = snapshot_prior(&episode, &protos).unwrap();
        let state = TpVaeState::new(protos, decoder, prior, 0.0, 1).unwrap();
        (episode, state)
    }

    #[test]
    fn ce_is_log_n_when_prototypes_coincide() {
        let ep = toy_episode(4, 2, 3, 5, 1);
        let mut state = build_state(&ep, 25.0, 0.0, 1, 1);
        let mut flat = state.flat_params();
        // Overwrite all prototype rows with the first row.
        let dim = ep.dim();
        let first: Vec<f64> = flat[0..dim].to_vec();
        for k in 1..4 {
            flat[k * dim..(k + 1) * dim].copy_from_slice(&first);
        }
        state.set_flat_params(&flat).unwrap();
        let latents = deterministic_latents(&ep);
        let ce = loss_ce(&state, &ep, &latents).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12, "ce {ce}");
    }

    #[test]
    fn ce_confident_correct_is_tiny() {
        let (ep, state) = {
            // 1-shot episode with prototypes at the supports and a huge
            // temperature: supports sit exactly on their prototypes.
            let ds = gen_synthetic(&SynthSpec::new(4, 6, 8, 12.0, 9).unwrap());
            let spec = EpisodeSpec::uniform(2, 1, 1, Preprocess::None).unwrap();
            let ep = sample_episode(&ds, &spec, &RngStream::new(2, 0)).unwrap();
            let protos = init_prototypes(&ep, 1e4).unwrap();
            let decoder = init_decoder(6, 6, 6, &RngStream::new(2, 1));
            let prior = snapshot_prior(&ep, &protos).unwrap();
            (ep.clone(), TpVaeState::new(protos, decoder, prior, 0.0, 1).unwrap())
        };
        let latents = deterministic_latents(&ep);
        let ce = loss_ce(&state, &ep, &latents).unwrap();
        assert!(ce >= 0.0);
        assert!(ce < 1e-4, "ce {ce}");
    }

    #[test]
    fn ce_matches_compositional_oracle() {
        let ep = toy_episode(5, 5, 4, 6, 3);
        let state = build_state(&ep, 25.0, 0.0, 1, 3);
        let latents = deterministic_latents(&ep);
        let ce = loss_ce(&state, &ep, &latents).unwrap();
        // Independent recomputation through the posterior op.
        let mut expected = 0.0;
        for shot in ep.support() {
            let row = posterior(&shot.feature, state.prototypes()).unwrap();
            expected -= row[shot.label].max(1e-300).ln();
        }
        expected /= ep.support().len() as f64;
        assert!((ce - expected).abs() < 1e-12, "{ce} vs {expected}");
    }

    #[test]
    fn recon_zero_when_decoder_reproduces_query() {
        let (ep, mut state) = two_term_fixture(0.25);
        // Zero weights and bias equal to the query feature reproduce it.
        let q0 = ep.query()[0].feature[0];
        let mut flat = state.flat_params();
        let n = flat.len();
        // Layout: psi (2), w1 (1), b1 (1), w2 (1), b2 (1).
        flat[n - 4] = 0.0; // w1
        flat[n - 3] = 0.0; // b1
        flat[n - 2] = 0.0; // w2
        flat[n - 1] = q0; // b2
        state.set_flat_params(&flat).unwrap();
        let latents = deterministic_latents(&ep);
        let recon = loss_recon(&state, &latents, &ep).unwrap();
        assert_eq!(recon, 0.0);
    }

    #[test]
    fn recon_zero_decoder_known_value() {
        // Single query (3,4), zero decoder: recon = -1/2 * 25.
        let spec = EpisodeSpec::new(2, 1, vec![1, 0], Preprocess::None).unwrap();
        let ep = Episode::new(
            vec![shot(&[0.0, 0.0], 0), shot(&[1.0, 1.0], 1)],
            vec![query(&[3.0, 4.0], 0)],
            spec,
        )
        .unwrap();
        let protos = init_prototypes(&ep, 1.0).unwrap();
        let decoder = DecoderParams {
            w1: Matrix::zeros(2, 2),
            b1: vec![0.0; 2],
            w2: Matrix::zeros(2, 2),
            b2: vec![0.0; 2],
        };
        let prior = snapshot_prior(&ep, &protos).unwrap();
        let state = TpVaeState::new(protos, decoder, prior, 0.0, 1).unwrap();
        let latents = deterministic_latents(&ep);
        let recon = loss_recon(&state, &latents, &ep).unwrap();
        assert_eq!(recon, -12.5);
    }

    #[test]
    fn recon_matches_naive_loop() {
        let ep = toy_episode(3, 1, 5, 4, 12);
        let state = build_state(&ep, 25.0, 0.0, 1, 12);
        let latents = deterministic_latents(&ep);
        let recon = loss_recon(&state, &latents, &ep).unwrap();
        let mut expected = 0.0;
        for (z, q) in latents[0].query.iter().zip(ep.query()) {
            let out = crate::model::decode(state.decoder(), z).unwrap();
            let mut sq = 0.0;
            for d in 0..out.len() {
                sq += (q.feature[d] - out[d]) * (q.feature[d] - out[d]);
            }
            expected -= 0.5 * sq;
        }
        assert!((recon - expected).abs() < 1e-12);
    }

    #[test]
    fn lik_two_term_direct_evaluation() {
        let (ep, state) = two_term_fixture(0.0);
        let latents = deterministic_latents(&ep);
        let lik = loss_lik(&state, &latents, &ep).unwrap();
        // 0.731...*0 + 0.2689...*(-1)
        assert!((lik - (-0.2689414213699951)).abs() < 1e-12, "lik {lik}");
    }

    #[test]
    fn lik_zero_at_prototype_with_one_hot_posterior() {
        let (ep, state) = two_term_fixture(0.0);
        // tau large enough that the losing class mass underflows to zero.
        let protos = Prototypes::new(
            vec![Vec64::new(vec![0.0]).unwrap(), Vec64::new(vec![1.0]).unwrap()],
            1e4,
        )
        .unwrap();
        let state = TpVaeState::new(
            protos.clone(),
            state.decoder().clone(),
            snapshot_prior(&ep, &protos).unwrap(),
            0.0,
            1,
        )
        .unwrap();
        let latents = deterministic_latents(&ep);
        let lik = loss_lik(&state, &latents, &ep).unwrap();
        assert_eq!(lik, 0.0);
    }

    #[test]
    fn lik_matches_naive_loop() {
        let ep = toy_episode(4, 1, 6, 5, 21);
        let state = build_state(&ep, 3.0, 0.0, 1, 21);
        let latents = deterministic_latents(&ep);
        let lik = loss_lik(&state, &latents, &ep).unwrap();
        let mut expected = 0.0;
        let tau = state.prototypes().tau();
        for z in &latents[0].query {
            let row = posterior(z, state.prototypes()).unwrap();
            for (k, proto) in state.prototypes().rows().iter().enumerate() {
                let d2 = crate::numerics::sq_dist(z, proto).unwrap();
                expected += row[k] * (-tau * d2);
            }
        }
        assert!((lik - expected).abs() < 1e-10, "{lik} vs {expected}");
    }

    #[test]
    fn tp_zero_when_rows_match_prior() {
        let rows = vec![
            ProbRow::new(vec![0.7, 0.3]).unwrap(),
            ProbRow::new(vec![0.2, 0.8]).unwrap(),
        ];
        let prior = PriorMatrix::from_rows(rows.clone()).unwrap();
        assert_eq!(loss_tp(&rows, &prior, TpForm::JensenMarginal), 0.0);
        assert_eq!(loss_sample_kl(&rows, &prior), 0.0);
    }

    #[test]
    fn tp_direct_two_class_evaluation() {
        // W = (1.5, 0.5), P = (1, 1).
        let rows = vec![
            ProbRow::new(vec![1.0, 0.0]).unwrap(),
            ProbRow::new(vec![0.5, 0.5]).unwrap(),
        ];
        let prior = PriorMatrix::from_rows(vec![
            ProbRow::new(vec![0.5, 0.5]).unwrap(),
            ProbRow::new(vec![0.5, 0.5]).unwrap(),
        ])
        .unwrap();
        let tp = loss_tp(&rows, &prior, TpForm::JensenMarginal);
        assert!((tp - (-0.2616240718822739)).abs() < 1e-12, "tp {tp}");
    }

    #[test]
    fn tp_jensen_nonpositive_and_dominates_sample_kl() {
        let mut rng = RngStream::new(4, 0);
        for trial in 0..200 {
            let way = 2 + (trial % 4);
            let queries = 1 + (trial % 7);
            let rows = random_rows(queries, way, &mut rng);
            let prior = PriorMatrix::from_rows(random_rows(queries, way, &mut rng)).unwrap();
            let tp = loss_tp(&rows, &prior, TpForm::JensenMarginal);
            let sk = loss_sample_kl(&rows, &prior);
            assert!(tp <= 1e-12, "tp {tp} must be nonpositive");
            assert!(sk <= tp + 1e-12, "sample kl {sk} must lower-bound tp {tp}");
            assert!(sk <= 1e-12);
        }
    }

    fn random_rows(n: usize, way: usize, rng: &mut RngStream) -> Vec<ProbRow> {
        (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..way).map(|_| rng.next_f64() + 1e-3).collect();
                let sum: f64 = raw.iter().sum();
                ProbRow::new(raw.into_iter().map(|v| v / sum).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn total_is_ce_when_other_weights_vanish() {
        let ep = toy_episode(3, 1, 4, 5, 30);
        let state = build_state(&ep, 25.0, 0.0, 1, 30);
        let latents = deterministic_latents(&ep);
        let weights = LossWeights::ce_only();
        let b = total_loss(&state, &ep, &weights, &latents).unwrap();
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn total_composes_from_components() {
        let ep = toy_episode(2, 1, 3, 4, 31);
        let state = build_state(&ep, 2.0, 0.0, 1, 31);
        let latents = deterministic_latents(&ep);
        let weights = LossWeights::full();
        let b = total_loss(&state, &ep, &weights, &latents).unwrap();
        let ce = loss_ce(&state, &ep, &latents).unwrap();
        let recon = loss_recon(&state, &latents, &ep).unwrap();
        let lik = loss_lik(&state, &latents, &ep).unwrap();
        let rows: Vec<ProbRow> = latents[0]
            .query
            .iter()
            .map(|z| posterior(z, state.prototypes()).unwrap())
            .collect();
        let tp = loss_tp(&rows, state.prior(), TpForm::JensenMarginal);
        assert!((b.ce - ce).abs() < 1e-12);
        assert!((b.recon - recon).abs() < 1e-12);
        assert!((b.lik - lik).abs() < 1e-12);
        assert!((b.tp - tp).abs() < 1e-10);
        let total = ce - (recon + lik + tp);
        assert!((b.total - total).abs() < 1e-10);
    }

    #[test]
    fn tp_form_switch_changes_only_tp_field() {
        let ep = toy_episode(3, 1, 5, 4, 32);
        let state = build_state(&ep, 2.0, 0.0, 1, 32);
        let latents = deterministic_latents(&ep);
        let jensen = total_loss(&state, &ep, &LossWeights::full(), &latents).unwrap();
        let literal = total_loss(
            &state,
            &ep,
            &LossWeights { tp_form: TpForm::Literal, ..LossWeights::full() },
            &latents,
        )
        .unwrap();
        assert_eq!(jensen.ce, literal.ce);
        assert_eq!(jensen.recon, literal.recon);
        assert_eq!(jensen.lik, literal.lik);
        assert_ne!(jensen.tp, literal.tp);
    }

    #[test]
    fn components_independent_of_mc_count_when_noise_free() {
        let ep = toy_episode(3, 2, 4, 5, 33);
        let state = build_state(&ep, 25.0, 0.0, 1, 33);
        let one = sample_latents(&ep, 0.0, 1, &mut RngStream::new(0, 0));
        let seven = sample_latents(&ep, 0.0, 7, &mut RngStream::new(0, 0));
        let a = total_loss(&state, &ep, &LossWeights::full(), &one).unwrap();
        let b = total_loss(&state, &ep, &LossWeights::full(), &seven).unwrap();
        assert!((a.ce - b.ce).abs() < 1e-12);
        assert!((a.recon - b.recon).abs() < 1e-12);
        assert!((a.lik - b.lik).abs() < 1e-12);
        assert!((a.tp - b.tp).abs() < 1e-12);
    }

    #[test]
    fn ce_bounds_hold_at_initialization_for_one_shot() {
        for seed in 0..30 {
            let ep = toy_episode(4, 1, 3, 6, 100 + seed);
            let state = build_state(&ep, 25.0, 0.0, 1, seed);
            let latents = deterministic_latents(&ep);
            let ce = loss_ce(&state, &ep, &latents).unwrap();
            // With 1-shot initialization each support sits on its own
            // prototype, so its true-class probability is at least 1/N.
            assert!(ce >= 0.0);
            assert!(ce <= (4.0f64).ln() + 1e-12, "seed {seed}: ce {ce}");
        }
    }

    #[test]
    fn symmetric_configuration_gives_identical_prototype_gradients() {
        let ep = toy_episode(3, 1, 4, 5, 40);
        let mut state = build_state(&ep, 4.0, 0.0, 1, 40);
        // All prototypes identical and a balanced prior by construction.
        let mut flat = state.flat_params();
        let dim = ep.dim();
        let first: Vec<f64> = flat[0..dim].to_vec();
        for k in 1..3 {
            flat[k * dim..(k + 1) * dim].copy_from_slice(&first);
        }
        state.set_flat_params(&flat).unwrap();
        let protos = state.prototypes().clone();
        let state = TpVaeState::new(
            protos.clone(),
            state.decoder().clone(),
            snapshot_prior(&ep, &protos).unwrap(),
            0.0,
            1,
        )
        .unwrap();
        let latents = deterministic_latents(&ep);
        // The support cross-entropy distinguishes classes through labels, so
        // test the symmetric query-side paths only.
        let weights =
            LossWeights::new(0.0, 1.0, 1.0, 1.0, TpForm::JensenMarginal).unwrap();
        let grads = grad_total(&state, &ep, &weights, &latents).unwrap();
        for k in 1..3 {
            for d in 0..dim {
                assert!(
                    (grads.d_psi[0][d] - grads.d_psi[k][d]).abs() < 1e-12,
                    "row {k} coord {d}"
                );
            }
        }
    }

    #[test]
    fn decoder_gradients_vanish_without_reconstruction() {
        let ep = toy_episode(3, 1, 4, 5, 41);
        let state = build_state(&ep, 4.0, 0.0, 1, 41);
        let latents = deterministic_latents(&ep);
        let weights = LossWeights::new(1.0, 0.0, 1.0, 1.0, TpForm::JensenMarginal).unwrap();
        let grads = grad_total(&state, &ep, &weights, &latents).unwrap();
        assert!(grads.d_w1.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.d_b1.iter().all(|&v| v == 0.0));
        assert!(grads.d_w2.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.d_b2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prototype_gradients_vanish_when_only_recon_active() {
        let ep = toy_episode(3, 1, 4, 5, 42);
        let state = build_state(&ep, 4.0, 0.0, 1, 42);
        let latents = deterministic_latents(&ep);
        let weights = LossWeights::new(0.0, 1.0, 0.0, 0.0, TpForm::JensenMarginal).unwrap();
        let grads = grad_total(&state, &ep, &weights, &latents).unwrap();
        assert!(grads.d_psi.iter().flatten().all(|&v| v == 0.0));
    }

    fn gradient_check(weights: &LossWeights, tau: f64, seed: u64) -> f64 {
        let ep = toy_episode(3, 1, 4, 4, seed);
        let mut state = build_state(&ep, tau, 0.0, 1, seed);
        // Move off the initialization stationary points.
        let mut flat = state.flat_params();
        let mut rng = RngStream::new(seed, 9);
        for v in flat.iter_mut() {
            *v += 0.3 * rng.standard_normal();
        }
        state.set_flat_params(&flat).unwrap();
        let latents = deterministic_latents(&ep);
        let analytic = grad_total(&state, &ep, weights, &latents).unwrap().to_flat();
        let numeric = finite_diff_grad(
            |params| {
                let mut probe = state.clone();
                probe.set_flat_params(params).unwrap();
                total_loss(&probe, &ep, weights, &latents).unwrap().total
            },
            &flat,
            1e-5,
        )
        .unwrap();
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| (a - n).abs() / f64::max(1.0, a.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for (i, weights) in [
            LossWeights::full(),
            LossWeights::ce_only(),
            LossWeights::ce_re(),
            LossWeights::ce_tp(),
        ]
        .iter()
        .enumerate()
        {
            let err = gradient_check(weights, 0.5, 50 + i as u64);
            assert!(err < 1e-6, "config {i}: max rel err {err}");
        }
    }

    #[test]
    fn literal_form_gradient_matches_finite_differences() {
        let weights = LossWeights { tp_form: TpForm::Literal, ..LossWeights::full() };
        let err = gradient_check(&weights, 0.5, 60);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0, TpForm::JensenMarginal).is_none());
        assert!(LossWeights::new(-1.0, 0.0, 0.0, 1.0, TpForm::JensenMarginal).is_none());
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.5, TpForm::JensenMarginal).is_some());
    }
}
