//! Transductive few-shot inference in embedding space.
//!
//! The library optimizes, per episode, a support cross-entropy plus a
//! task-prior conditional evidence lower bound over a prototype classifier
//! and a small decoder network, entirely on pre-extracted feature vectors.
//! An episodic evaluation harness covers uniform, nonuniform, ablation and
//! temperature-sweep protocols with paired, reproducible episode streams.
//!
//! Module map:
//! - [`numerics`]: dense-vector primitives, stable probability transforms,
//!   counter-based random streams, finite-difference gradient oracle.
//! - [`episodes`]: dataset model, synthetic generator, file ingestion,
//!   preprocessing, uniform/nonuniform episode sampling.
//! - [`model`]: prototypes, decoder, frozen task prior, posterior maps.
//! - [`objective`]: loss terms, analytic gradients, sample/task-level KL.
//! - [`solver`]: per-episode SGD loop and predictions.
//! - [`harness`]: multi-episode evaluation, ablations, sweeps, batteries.

pub mod episodes;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod solver;

pub use episodes::{
    gen_synthetic, load_dataset, preprocess, sample_episode, save_dataset, DataFormat,
    DatasetClass, DatasetError, EmbeddingDataset, Episode, EpisodeSpec, Preprocess, QueryShot,
    SampleError, SupportShot, SynthSpec,
};
pub use harness::{
    ablate, evaluate, evaluate_baseline, predicted_marginal_entropy, scenario_battery, sweep_tau,
    AblationArm, AblationTable, ConfigEcho, EpisodeRecord, EvalRun, EvalSummary, HarnessError,
    ScenarioRow, DEFAULT_TAU_SWEEP,
};
pub use model::{
    decode, init_decoder, init_prototypes, posterior, sample_latents, snapshot_prior,
    DecoderParams, LatentSet, ModelError, PriorMatrix, Prototypes, TpVaeState,
};
pub use numerics::{
    finite_diff_grad, gaussian_sample, log_softmax, sq_dist, Matrix, NumericsError, ProbRow,
    RngStream, Vec64,
};
pub use objective::{
    grad_total, loss_and_grad, loss_ce, loss_lik, loss_recon, loss_sample_kl, loss_tp, total_loss,
    Gradients, LossBreakdown, LossWeights, ObjectiveError, TpForm,
};
pub use solver::{
    baseline_prototype, run_episode, run_episode_traced, sgd_step, EpisodeResult, SolverConfig,
    SolverError,
};
