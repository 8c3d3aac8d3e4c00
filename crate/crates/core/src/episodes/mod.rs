//! Dataset model, synthetic Gaussian-mixture generator, embedding-file
//! ingestion, feature preprocessing, and uniform/nonuniform episode sampling.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset, DataFormat};
pub use synth::{gen_synthetic, SynthSpec};

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{stream_purpose, RngStream, Vec64};

/// Errors while building, reading or writing datasets.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte offset {offset}: expected \"FSE1\"")]
    BadMagic { offset: u64 },
    #[error("unsupported format version {got} at byte offset {offset}")]
    UnsupportedVersion { got: u32, offset: u64 },
    #[error("truncated file at byte offset {offset}: {context}")]
    Truncated { offset: u64, context: &'static str },
    #[error("line {line}: expected {expected} fields, got {got}")]
    RaggedRow { line: usize, expected: usize, got: usize },
    #[error("line {line}: bad {what}: {value:?}")]
    BadField { line: usize, what: &'static str, value: String },
    #[error("bad header line: {0:?}")]
    BadHeader(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
}

/// Errors while sampling an episode from a dataset.
#[derive(Debug, Error)]
pub enum SampleError {
    #[error("dataset has {have} classes, episode needs {need}")]
    NotEnoughClasses { have: usize, need: usize },
    #[error("class {class_id} has {have} features, episode slot {slot} needs {need}")]
    NotEnoughSamples { class_id: u32, slot: usize, have: usize, need: usize },
    #[error("invalid episode spec: {0}")]
    BadSpec(String),
}

/// Feature preprocessing applied per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Raw features.
    None,
    /// Each vector scaled to unit Euclidean norm; zero vectors unchanged.
    L2,
    /// Subtract the episode mean (over support and query), then L2.
    CenterL2,
}

impl std::str::FromStr for Preprocess {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Preprocess::None),
            "l2" => Ok(Preprocess::L2),
            "center_l2" => Ok(Preprocess::CenterL2),
            other => Err(format!("unknown preprocess mode {other:?} (expected none|l2|center_l2)")),
        }
    }
}

impl fmt::Display for Preprocess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preprocess::None => "none",
            Preprocess::L2 => "l2",
            Preprocess::CenterL2 => "center_l2",
        };
        f.write_str(s)
    }
}

/// One class of a dataset: a stable id and its feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetClass {
    pub id: u32,
    pub features: Vec<Vec64>,
}

/// Labeled feature vectors grouped by class; the stand-in for images pushed
/// through a trained backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    classes: Vec<DatasetClass>,
}

impl EmbeddingDataset {
    /// Validates the dataset invariants: consistent dimension, unique class
    /// ids, at least one feature per class.
    pub fn new(dim: usize, classes: Vec<DatasetClass>) -> Result<Self, DatasetError> {
        if dim == 0 {
            return Err(DatasetError::Invalid("dimension must be positive".into()));
        }
        if classes.is_empty() {
            return Err(DatasetError::Invalid("dataset has no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for class in &classes {
            if !seen.insert(class.id) {
                return Err(DatasetError::Invalid(format!("duplicate class id {}", class.id)));
            }
            if class.features.is_empty() {
                return Err(DatasetError::Invalid(format!("class {} has no features", class.id)));
            }
            for feat in &class.features {
                if feat.len() != dim {
                    return Err(DatasetError::Invalid(format!(
                        "class {}: feature of length {} in a dim-{} dataset",
                        class.id,
                        feat.len(),
                        dim
                    )));
                }
            }
        }
        Ok(EmbeddingDataset { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[DatasetClass] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_features(&self) -> usize {
        self.classes.iter().map(|c| c.features.len()).sum()
    }

    /// SHA-256 over a canonical serialization of the dataset contents
    /// (independent of the storage format it was loaded from).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"TPVH1");
        hasher.update((self.dim as u32).to_le_bytes());
        hasher.update((self.classes.len() as u32).to_le_bytes());
        for class in &self.classes {
            hasher.update(class.id.to_le_bytes());
            hasher.update((class.features.len() as u64).to_le_bytes());
            for feat in &class.features {
                for v in feat.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Shape of one N-way K-shot task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    /// Per-class query counts, exactly `way` entries.
    pub query_counts: Vec<usize>,
    pub preprocess: Preprocess,
}

impl EpisodeSpec {
    pub fn new(
        way: usize,
        shot: usize,
        query_counts: Vec<usize>,
        preprocess: Preprocess,
    ) -> Result<Self, SampleError> {
        if way < 2 {
            return Err(SampleError::BadSpec(format!("way must be at least 2, got {way}")));
        }
        if shot == 0 {
            return Err(SampleError::BadSpec("shot must be positive".into()));
        }
        if query_counts.len() != way {
            return Err(SampleError::BadSpec(format!(
                "query_counts has {} entries for a {way}-way episode",
                query_counts.len()
            )));
        }
        if query_counts.iter().all(|&q| q == 0) {
            return Err(SampleError::BadSpec("at least one query count must be positive".into()));
        }
        Ok(EpisodeSpec { way, shot, query_counts, preprocess })
    }

    /// The common balanced protocol: `queries_per_class` shots for every class.
    pub fn uniform(
        way: usize,
        shot: usize,
        queries_per_class: usize,
        preprocess: Preprocess,
    ) -> Result<Self, SampleError> {
        Self::new(way, shot, vec![queries_per_class; way], preprocess)
    }

    pub fn total_queries(&self) -> usize {
        self.query_counts.iter().sum()
    }

    pub fn total_support(&self) -> usize {
        self.way * self.shot
    }
}

/// A labeled support shot; labels are episode-local in `0..way`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportShot {
    pub feature: Vec64,
    pub label: usize,
}

/// A query shot. The ground-truth label is retained for scoring only and is
/// never visible to the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryShot {
    pub feature: Vec64,
    pub hidden_label: usize,
}

/// One sampled N-way K-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    support: Vec<SupportShot>,
    query: Vec<QueryShot>,
    spec: EpisodeSpec,
    /// Dataset class ids in slot order; episode labels are indices into this.
    class_ids: Vec<u32>,
}

impl Episode {
    /// Builds an episode from explicit shots, validating the count profile
    /// against the spec. Class slots are `0..way` with dataset ids equal to
    /// the slot. Intended for handcrafted instances; sampled episodes come
    /// from [`sample_episode`].
    pub fn new(
        support: Vec<SupportShot>,
        query: Vec<QueryShot>,
        spec: EpisodeSpec,
    ) -> Result<Self, SampleError> {
        let dim = support
            .first()
            .map(|s| s.feature.len())
            .ok_or_else(|| SampleError::BadSpec("empty support set".into()))?;
        let mut support_counts = vec![0usize; spec.way];
        for s in &support {
            if s.label >= spec.way {
                return Err(SampleError::BadSpec(format!("support label {} out of range", s.label)));
            }
            if s.feature.len() != dim {
                return Err(SampleError::BadSpec("inconsistent feature dimensions".into()));
            }
            support_counts[s.label] += 1;
        }
        if support_counts.iter().any(|&c| c != spec.shot) {
            return Err(SampleError::BadSpec(format!(
                "support counts {support_counts:?} do not match {}-shot spec",
                spec.shot
            )));
        }
        let mut query_counts = vec![0usize; spec.way];
        for q in &query {
            if q.hidden_label >= spec.way {
                return Err(SampleError::BadSpec(format!(
                    "query label {} out of range",
                    q.hidden_label
                )));
            }
            if q.feature.len() != dim {
                return Err(SampleError::BadSpec("inconsistent feature dimensions".into()));
            }
            query_counts[q.hidden_label] += 1;
        }
        if query_counts != spec.query_counts {
            return Err(SampleError::BadSpec(format!(
                "query counts {query_counts:?} do not match spec {:?}",
                spec.query_counts
            )));
        }
        let class_ids = (0..spec.way as u32).collect();
        Ok(Episode { support, query, spec, class_ids })
    }

    pub fn support(&self) -> &[SupportShot] {
        &self.support
    }

    pub fn query(&self) -> &[QueryShot] {
        &self.query
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn way(&self) -> usize {
        self.spec.way
    }

    pub fn dim(&self) -> usize {
        self.support[0].feature.len()
    }
}

/// Applies a preprocessing mode to a set of feature vectors. For
/// [`Preprocess::CenterL2`] the centering mean is taken over exactly the
/// vectors passed in, so episode-level calls must pass support and query
/// together.
pub fn preprocess(features: &mut [Vec64], mode: Preprocess) {
    match mode {
        Preprocess::None => {}
        Preprocess::L2 => {
            for feat in features.iter_mut() {
                *feat = l2_normalize(feat);
            }
        }
        Preprocess::CenterL2 => {
            if features.is_empty() {
                return;
            }
            let dim = features[0].len();
            let mut mean = vec![0.0; dim];
            for feat in features.iter() {
                for (m, &v) in mean.iter_mut().zip(feat.iter()) {
                    *m += v;
                }
            }
            let n = features.len() as f64;
            for m in mean.iter_mut() {
                *m /= n;
            }
            for feat in features.iter_mut() {
                let centered: Vec<f64> =
                    feat.iter().zip(&mean).map(|(&v, &m)| v - m).collect();
                let centered = Vec64::new(centered).expect("centering finite vectors is finite");
                *feat = l2_normalize(&centered);
            }
        }
    }
}

fn l2_normalize(v: &Vec64) -> Vec64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.clone();
    }
    Vec64::new(v.iter().map(|x| x / norm).collect()).expect("normalized vector is finite")
}

/// Partial Fisher-Yates: the first `k` elements of a shuffle of `0..n`.
///
/// Drawing a longer prefix from the same stream extends a shorter one, which
/// is what keeps support sets identical when only query counts change.
fn sample_indices(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.next_index(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Samples one episode: `way` classes without replacement, then per class
/// `shot + query_count` instances without replacement with the first `shot`
/// going to the support set. Dataset class ids are remapped to `0..way` in
/// the order sampled. Preprocessing is applied over support and query
/// jointly.
pub fn sample_episode(
    ds: &EmbeddingDataset,
    spec: &EpisodeSpec,
    rng: &RngStream,
) -> Result<Episode, SampleError> {
    if ds.num_classes() < spec.way {
        return Err(SampleError::NotEnoughClasses { have: ds.num_classes(), need: spec.way });
    }
    let mut class_rng = rng.fork(stream_purpose::CLASS_PICK, 0);
    let class_slots = sample_indices(ds.num_classes(), spec.way, &mut class_rng);

    let mut support = Vec::with_capacity(spec.total_support());
    let mut query = Vec::with_capacity(spec.total_queries());
    let mut class_ids = Vec::with_capacity(spec.way);
    for (slot, &class_index) in class_slots.iter().enumerate() {
        let class = &ds.classes()[class_index];
        class_ids.push(class.id);
        let need = spec.shot + spec.query_counts[slot];
        if class.features.len() < need {
            return Err(SampleError::NotEnoughSamples {
                class_id: class.id,
                slot,
                have: class.features.len(),
                need,
            });
        }
        let mut inst_rng = rng.fork(stream_purpose::CLASS_INSTANCES, slot as u64);
        let picked = sample_indices(class.features.len(), need, &mut inst_rng);
        for &i in &picked[..spec.shot] {
            support.push(SupportShot { feature: class.features[i].clone(), label: slot });
        }
        for &i in &picked[spec.shot..] {
            query.push(QueryShot { feature: class.features[i].clone(), hidden_label: slot });
        }
    }

    if spec.preprocess != Preprocess::None {
        let mut all: Vec<Vec64> = support
            .iter()
            .map(|s| s.feature.clone())
            .chain(query.iter().map(|q| q.feature.clone()))
            .collect();
        preprocess(&mut all, spec.preprocess);
        let mut it = all.into_iter();
        for s in support.iter_mut() {
            s.feature = it.next().expect("length preserved");
        }
        for q in query.iter_mut() {
            q.feature = it.next().expect("length preserved");
        }
    }

    Ok(Episode { support, query, spec: spec.clone(), class_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn toy_dataset(num_classes: usize, per_class: usize, dim: usize) -> EmbeddingDataset {
        let spec = SynthSpec::new(num_classes, dim, per_class, 4.0, 99).unwrap();
        gen_synthetic(&spec)
    }

    #[test]
    fn spec_validation() {
        assert!(EpisodeSpec::new(5, 1, vec![15; 5], Preprocess::None).is_ok());
        assert!(EpisodeSpec::new(1, 1, vec![15], Preprocess::None).is_err());
        assert!(EpisodeSpec::new(5, 0, vec![15; 5], Preprocess::None).is_err());
        assert!(EpisodeSpec::new(5, 1, vec![15; 4], Preprocess::None).is_err());
        assert!(EpisodeSpec::new(3, 1, vec![0, 0, 0], Preprocess::None).is_err());
    }

    #[test]
    fn uniform_5way_1shot_15query() {
        let ds = toy_dataset(10, 30, 8);
        let spec = EpisodeSpec::uniform(5, 1, 15, Preprocess::None).unwrap();
        let ep = sample_episode(&ds, &spec, &RngStream::new(0, 0)).unwrap();
        assert_eq!(ep.support().len(), 5);
        assert_eq!(ep.query().len(), 75);
    }

    #[test]
    fn nonuniform_profiles_are_honored_exactly() {
        let ds = toy_dataset(10, 40, 8);
        for (shot, counts) in [(1usize, vec![20, 20, 10, 10, 15]), (5, vec![19, 19, 18, 18, 1])] {
            let spec = EpisodeSpec::new(5, shot, counts.clone(), Preprocess::None).unwrap();
            let ep = sample_episode(&ds, &spec, &RngStream::new(1, 3)).unwrap();
            for slot in 0..5 {
                let got = ep.query().iter().filter(|q| q.hidden_label == slot).count();
                assert_eq!(got, counts[slot], "slot {slot}");
            }
            assert_eq!(ep.support().len(), 5 * shot);
        }
    }

    #[test]
    fn episode_counts_and_disjointness() {
        let ds = toy_dataset(8, 25, 4);
        let spec = EpisodeSpec::new(4, 3, vec![5, 2, 0, 7], Preprocess::None).unwrap();
        let ep = sample_episode(&ds, &spec, &RngStream::new(7, 42)).unwrap();
        assert_eq!(ep.support().len(), 12);
        assert_eq!(ep.query().len(), 14);
        // Support and query features must be distinct draws (the generator
        // produces distinct vectors with probability one).
        for s in ep.support() {
            for q in ep.query() {
                assert_ne!(s.feature, q.feature);
            }
        }
        // Labels form a bijection with the chosen dataset classes.
        assert_eq!(ep.class_ids().len(), 4);
        let distinct: std::collections::HashSet<u32> = ep.class_ids().iter().copied().collect();
        assert_eq!(distinct.len(), 4);
        for s in ep.support() {
            assert!(s.label < 4);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_index_sensitive() {
        let ds = toy_dataset(12, 30, 6);
        let spec = EpisodeSpec::uniform(5, 1, 4, Preprocess::None).unwrap();
        let a = sample_episode(&ds, &spec, &RngStream::new(3, 17)).unwrap();
        let b = sample_episode(&ds, &spec, &RngStream::new(3, 17)).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&ds, &spec, &RngStream::new(3, 18)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_two_of_a_thousand_episodes_identical() {
        let ds = toy_dataset(12, 30, 6);
        let spec = EpisodeSpec::uniform(5, 1, 1, Preprocess::None).unwrap();
        let mut seen = std::collections::HashSet::new();
        for index in 0..1000u64 {
            let ep = sample_episode(&ds, &spec, &RngStream::new(5, index)).unwrap();
            let mut key = Vec::new();
            for s in ep.support() {
                for v in s.feature.iter() {
                    key.extend_from_slice(&v.to_le_bytes());
                }
            }
            for q in ep.query() {
                for v in q.feature.iter() {
                    key.extend_from_slice(&v.to_le_bytes());
                }
            }
            assert!(seen.insert(key), "episode {index} duplicates an earlier one");
        }
    }

    #[test]
    fn support_prefix_is_stable_across_query_profiles() {
        let ds = toy_dataset(10, 40, 8);
        let uniform = EpisodeSpec::uniform(5, 1, 15, Preprocess::None).unwrap();
        let extreme = EpisodeSpec::new(5, 1, vec![19, 19, 18, 18, 1], Preprocess::None).unwrap();
        let rng = RngStream::new(11, 23);
        let a = sample_episode(&ds, &uniform, &rng).unwrap();
        let b = sample_episode(&ds, &extreme, &rng).unwrap();
        assert_eq!(a.class_ids(), b.class_ids());
        for (sa, sb) in a.support().iter().zip(b.support()) {
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn sampling_errors_name_the_deficit() {
        let ds = toy_dataset(3, 5, 4);
        let spec = EpisodeSpec::uniform(5, 1, 2, Preprocess::None).unwrap();
        match sample_episode(&ds, &spec, &RngStream::new(0, 0)) {
            Err(SampleError::NotEnoughClasses { have: 3, need: 5 }) => {}
            other => panic!("expected NotEnoughClasses, got {other:?}"),
        }
        let spec = EpisodeSpec::uniform(3, 2, 9, Preprocess::None).unwrap();
        match sample_episode(&ds, &spec, &RngStream::new(0, 0)) {
            Err(SampleError::NotEnoughSamples { have: 5, need: 11, .. }) => {}
            other => panic!("expected NotEnoughSamples, got {other:?}"),
        }
    }

    #[test]
    fn preprocess_none_is_identity_bitwise() {
        let original = vec![
            Vec64::new(vec![1.5, -2.5]).unwrap(),
            Vec64::new(vec![0.0, 3.25]).unwrap(),
        ];
        let mut worked = original.clone();
        preprocess(&mut worked, Preprocess::None);
        assert_eq!(worked, original);
    }

    #[test]
    fn preprocess_l2_known_norm() {
        let mut feats = vec![Vec64::new(vec![3.0, 4.0]).unwrap()];
        preprocess(&mut feats, Preprocess::L2);
        assert_eq!(feats[0].as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn preprocess_l2_leaves_zero_vectors() {
        let mut feats = vec![Vec64::zeros(3)];
        preprocess(&mut feats, Preprocess::L2);
        assert_eq!(feats[0].as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn preprocess_l2_unit_norms() {
        let mut rng = RngStream::new(2, 0);
        let mut feats: Vec<Vec64> = (0..20)
            .map(|_| {
                Vec64::new((0..6).map(|_| rng.standard_normal() * 3.0).collect()).unwrap()
            })
            .collect();
        preprocess(&mut feats, Preprocess::L2);
        for f in &feats {
            let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocess_center_l2_opposite_pair() {
        let v = Vec64::new(vec![2.0, -1.0, 0.5]).unwrap();
        let neg = Vec64::new(v.iter().map(|x| -x).collect()).unwrap();
        let mut feats = vec![v, neg];
        preprocess(&mut feats, Preprocess::CenterL2);
        for f in &feats {
            let norm: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        for (a, b) in feats[0].iter().zip(feats[1].iter()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocessed_episode_mean_is_episode_local() {
        let ds = toy_dataset(6, 20, 5);
        let spec = EpisodeSpec::uniform(3, 2, 4, Preprocess::CenterL2).unwrap();
        let ep = sample_episode(&ds, &spec, &RngStream::new(9, 1)).unwrap();
        // Centering over support+query then normalizing leaves vectors unit.
        for s in ep.support() {
            let norm: f64 = s.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
