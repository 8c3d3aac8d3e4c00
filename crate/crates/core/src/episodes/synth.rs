//! Synthetic Gaussian-mixture benchmark datasets with reproducible seeds.

use crate::numerics::{stream_purpose, RngStream, Vec64};

use super::{DatasetClass, DatasetError, EmbeddingDataset};

/// Parameters of a synthetic embedding dataset.
///
/// Class means sit on a sphere whose radius is chosen so the pairwise
/// distance between means concentrates near `separation`; features add
/// unit-variance isotropic Gaussian noise. `separation` is therefore
/// directly interpretable in units of within-class standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(
        num_classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        if num_classes < 2 {
            return Err(DatasetError::InvalidSynthSpec(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if dim == 0 {
            return Err(DatasetError::InvalidSynthSpec("dimension must be positive".into()));
        }
        if per_class == 0 {
            return Err(DatasetError::InvalidSynthSpec("per_class must be positive".into()));
        }
        if !(separation.is_finite() && separation >= 0.0) {
            return Err(DatasetError::InvalidSynthSpec(format!(
                "separation must be a nonnegative real, got {separation}"
            )));
        }
        Ok(SynthSpec { num_classes, dim, per_class, separation, seed })
    }
}

/// Generates a synthetic dataset, deterministic in `spec.seed`.
///
/// Feature values are quantized to f32 precision on creation so that a
/// dataset round-trips bit-exactly through the f32-based storage format.
pub fn gen_synthetic(spec: &SynthSpec) -> EmbeddingDataset {
    // Uniform points at radius r have pairwise distance concentrated near
    // r*sqrt(2) in high dimension, so r = separation / sqrt(2).
    let radius = spec.separation * std::f64::consts::FRAC_1_SQRT_2;
    let root = RngStream::new(spec.seed, 0);

    let mut means_rng = root.fork(stream_purpose::SYNTH_MEANS, 0);
    let means: Vec<Vec<f64>> =
        (0..spec.num_classes).map(|_| sphere_point(spec.dim, radius, &mut means_rng)).collect();

    let classes = means
        .iter()
        .enumerate()
        .map(|(c, mean)| {
            let mut noise_rng = root.fork(stream_purpose::SYNTH_NOISE, c as u64);
            let features = (0..spec.per_class)
                .map(|_| {
                    let values: Vec<f64> = mean
                        .iter()
                        .map(|&m| (m + noise_rng.standard_normal()) as f32 as f64)
                        .collect();
                    Vec64::new(values).expect("mean + unit noise is finite")
                })
                .collect();
            DatasetClass { id: c as u32, features }
        })
        .collect();

    EmbeddingDataset::new(spec.dim, classes).expect("generator upholds dataset invariants")
}

/// Uniform point on the sphere of the given radius: a normalized standard
/// normal draw. Radius zero maps everything to the origin.
fn sphere_point(dim: usize, radius: f64, rng: &mut RngStream) -> Vec<f64> {
    if radius == 0.0 {
        // Consume the draw anyway so mean positions do not depend on radius.
        for _ in 0..dim {
            rng.standard_normal();
        }
        return vec![0.0; dim];
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}
