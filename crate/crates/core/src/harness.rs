//! Multi-episode evaluation: accuracy aggregation with confidence
//! intervals, the loss-component ablation, the temperature sweep, and the
//! uniform/nonuniform scenario battery. All comparative runners replay
//! identical episode streams across arms.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episodes::{sample_episode, EmbeddingDataset, EpisodeSpec, Preprocess, SampleError};
use crate::numerics::RngStream;
use crate::objective::LossWeights;
use crate::solver::{baseline_prototype, run_episode, EpisodeResult, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("episode {episode}: {source}")]
    Sample {
        episode: u64,
        #[source]
        source: SampleError,
    },
    #[error("episode {episode}: {source}")]
    Solver {
        episode: u64,
        #[source]
        source: SolverError,
    },
    #[error("invalid request: {0}")]
    Config(String),
}

/// The temperatures swept by default.
pub const DEFAULT_TAU_SWEEP: [f64; 7] = [5.0, 10.0, 25.0, 35.0, 50.0, 75.0, 100.0];

/// Everything needed to reproduce a run, echoed into every summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub solver: SolverConfig,
    pub episode_spec: EpisodeSpec,
    pub dataset_hash: String,
    pub seed: u64,
}

/// Aggregate outcome of a batch of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// `1.96 * sample_std / sqrt(n)`; zero for a single episode.
    pub ci95: f64,
    pub config_echo: ConfigEcho,
    pub wall_time_ms: u64,
}

/// Per-episode row backing the CSV output and the diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode_index: u64,
    pub accuracy: f64,
    pub iters_run: usize,
    /// Total loss at the last recorded iteration; NaN when no iteration ran.
    pub final_total_loss: f64,
    /// Histogram of predicted classes over this episode's queries.
    pub predicted_class_counts: Vec<u64>,
}

/// A summary plus the per-episode records and convergence-style curves.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub summary: EvalSummary,
    pub records: Vec<EpisodeRecord>,
    /// Mean accuracy over episodes `0..=i`, one entry per episode.
    pub running_mean: Vec<f64>,
    /// Hash over (episode index, sampled class ids); equal hashes across
    /// arms certify paired episodes.
    pub class_map_hash: String,
}

/// One arm of the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub name: &'static str,
    pub run: EvalRun,
    /// Entropy (nats) of the aggregate predicted-class marginal; low values
    /// evidence collapse toward few classes.
    pub marginal_entropy: f64,
}

/// The four-configuration loss ablation over paired episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub arms: Vec<AblationArm>,
}

impl AblationTable {
    pub fn arm(&self, name: &str) -> &AblationArm {
        self.arms.iter().find(|a| a.name == name).expect("known ablation arm")
    }
}

/// Runs `episodes` independent episodes with streams keyed by
/// `(seed, episode index)` and aggregates accuracies. Episodes execute in
/// parallel when a rayon pool with more than one thread is installed;
/// results are identical either way.
pub fn evaluate(
    ds: &EmbeddingDataset,
    spec: &EpisodeSpec,
    cfg: &SolverConfig,
    episodes: u64,
    seed: u64,
) -> Result<EvalRun, HarnessError> {
    run_batch(ds, spec, cfg, episodes, seed, Arm::Solver)
}

/// Same episode streams as [`evaluate`], scored by the untrained
/// nearest-prototype classifier instead of the optimized one.
pub fn evaluate_baseline(
    ds: &EmbeddingDataset,
    spec: &EpisodeSpec,
    cfg: &SolverConfig,
    episodes: u64,
    seed: u64,
) -> Result<EvalRun, HarnessError> {
    run_batch(ds, spec, cfg, episodes, seed, Arm::Baseline)
}

#[derive(Clone, Copy)]
enum Arm {
    Solver,
    Baseline,
}

fn run_batch(
    ds: &EmbeddingDataset,
    spec: &EpisodeSpec,
    cfg: &SolverConfig,
    episodes: u64,
    seed: u64,
    arm: Arm,
) -> Result<EvalRun, HarnessError> {
    if episodes == 0 {
        return Err(HarnessError::Config("need at least one episode".into()));
    }
    let started = Instant::now();
    let outcomes: Result<Vec<(EpisodeResult, Vec<u32>)>, HarnessError> = (0..episodes)
        .into_par_iter()
        .map(|index| {
            let rng = RngStream::new(seed, index);
            let episode = sample_episode(ds, spec, &rng)
                .map_err(|source| HarnessError::Sample { episode: index, source })?;
            let result = match arm {
                Arm::Solver => run_episode(&episode, cfg, &rng),
                Arm::Baseline => baseline_prototype(&episode, cfg.tau),
            }
            .map_err(|source| HarnessError::Solver { episode: index, source })?;
            Ok((result, episode.class_ids().to_vec()))
        })
        .collect();
    let outcomes = outcomes?;
    let wall_time_ms = started.elapsed().as_millis() as u64;

    let mut records = Vec::with_capacity(outcomes.len());
    let mut accuracies = Vec::with_capacity(outcomes.len());
    let mut running_mean = Vec::with_capacity(outcomes.len());
    let mut acc_sum = 0.0;
    let mut class_hasher = Sha256::new();
    for (index, (result, class_ids)) in outcomes.iter().enumerate() {
        let mut counts = vec![0u64; spec.way];
        for &p in &result.predicted {
            counts[p] += 1;
        }
        records.push(EpisodeRecord {
            episode_index: index as u64,
            accuracy: result.accuracy,
            iters_run: result.iters_run,
            final_total_loss: result.loss_trace.last().map_or(f64::NAN, |b| b.total),
            predicted_class_counts: counts,
        });
        accuracies.push(result.accuracy);
        acc_sum += result.accuracy;
        running_mean.push(acc_sum / (index + 1) as f64);
        class_hasher.update((index as u64).to_le_bytes());
        for id in class_ids {
            class_hasher.update(id.to_le_bytes());
        }
    }

    let mean = acc_sum / accuracies.len() as f64;
    let ci95 = ci95_normal(&accuracies, mean);
    let class_map_hash = hex(&class_hasher.finalize());

    Ok(EvalRun {
        summary: EvalSummary {
            episodes,
            accuracies,
            mean,
            ci95,
            config_echo: ConfigEcho {
                solver: cfg.clone(),
                episode_spec: spec.clone(),
                dataset_hash: ds.content_hash(),
                seed,
            },
            wall_time_ms,
        },
        records,
        running_mean,
        class_map_hash,
    })
}

fn ci95_normal(accuracies: &[f64], mean: f64) -> f64 {
    let n = accuracies.len();
    if n < 2 {
        return 0.0;
    }
    let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Entropy in nats of the aggregate predicted-class histogram of a run.
pub fn predicted_marginal_entropy(run: &EvalRun) -> f64 {
    let way = run.records.first().map_or(0, |r| r.predicted_class_counts.len());
    let mut counts = vec![0u64; way];
    for record in &run.records {
        for (acc, &c) in counts.iter_mut().zip(&record.predicted_class_counts) {
            *acc += c;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// The four loss configurations compared over identical episodes:
/// cross-entropy alone, plus the remainder terms, plus the task prior, and
/// the full objective.
pub fn ablate(
    ds: &EmbeddingDataset,
    spec: &EpisodeSpec,
    cfg: &SolverConfig,
    episodes: u64,
    seed: u64,
) -> Result<AblationTable, HarnessError> {
    let tp_form = cfg.weights.tp_form;
    let configs: [(&'static str, LossWeights); 4] = [
        ("ce", LossWeights { tp_form, ..LossWeights::ce_only() }),
        ("ce+re", LossWeights { tp_form, ..LossWeights::ce_re() }),
        ("ce+tp", LossWeights { tp_form, ..LossWeights::ce_tp() }),
        ("ce+tp+re", LossWeights { tp_form, ..LossWeights::full() }),
    ];
    let mut arms = Vec::with_capacity(4);
    for (name, weights) in configs {
        let arm_cfg = SolverConfig { weights, ..cfg.clone() };
        let run = evaluate(ds, spec, &arm_cfg, episodes, seed)?;
        let marginal_entropy = predicted_marginal_entropy(&run);
        arms.push(AblationArm { name, run, marginal_entropy });
    }
    Ok(AblationTable { arms })
}

/// Evaluates the same paired episodes at each temperature.
pub fn sweep_tau(
    ds: &EmbeddingDataset,
    spec: &EpisodeSpec,
    cfg: &SolverConfig,
    taus: &[f64],
    episodes: u64,
    seed: u64,
) -> Result<Vec<(f64, EvalRun)>, HarnessError> {
    if taus.is_empty() {
        return Err(HarnessError::Config("tau sweep needs at least one value".into()));
    }
    if let Some(&bad) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(HarnessError::Config(format!("tau values must be positive, got {bad}")));
    }
    taus.iter()
        .map(|&tau| {
            let arm_cfg = SolverConfig { tau, ..cfg.clone() };
            evaluate(ds, spec, &arm_cfg, episodes, seed).map(|run| (tau, run))
        })
        .collect()
}

/// One scenario of the battery.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRow {
    pub scenario: &'static str,
    pub shot: usize,
    pub run: EvalRun,
}

/// The uniform and nonuniform query profiles evaluated for both 1-shot and
/// 5-shot, with paired class selections and support sets per shot count.
pub fn scenario_battery(
    ds: &EmbeddingDataset,
    cfg: &SolverConfig,
    episodes: u64,
    seed: u64,
    preprocess: Preprocess,
) -> Result<Vec<ScenarioRow>, HarnessError> {
    let profiles: [(&'static str, Vec<usize>); 3] = [
        ("uniform", vec![15; 5]),
        ("slight_nonuniform", vec![20, 20, 10, 10, 15]),
        ("extreme_nonuniform", vec![19, 19, 18, 18, 1]),
    ];
    let mut rows = Vec::with_capacity(6);
    for shot in [1usize, 5] {
        for (scenario, counts) in &profiles {
            let spec = EpisodeSpec::new(5, shot, counts.clone(), preprocess)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let run = evaluate(ds, &spec, cfg, episodes, seed)?;
            rows.push(ScenarioRow { scenario, shot, run });
        }
    }
    Ok(rows)
}
