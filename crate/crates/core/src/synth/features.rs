use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{derive_seed, EventTimeline};
use crate::error::{Error, Result};

/// Per-frame surrogate features, shape `(num_frames, feature_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    features: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(features: Array2<f32>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("features", "non-finite value"));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Frame `t` widened to `f64`.
    pub fn row_f64(&self, t: usize) -> Vec<f64> {
        self.features.row(t).iter().map(|&v| v as f64).collect()
    }
}

/// Unit-norm class embedding rows, shape `(num_classes, feature_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    rows: Array2<f64>,
}

impl ClassEmbedding {
    pub fn seeded(num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if feature_dim < num_classes {
            return Err(Error::Config(format!(
                "feature_dim {feature_dim} must be at least num_classes {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE0, 0));
        let mut rows: Array2<f64> =
            Array2::from_shape_simple_fn((num_classes, feature_dim), || {
                StandardNormal.sample(&mut rng)
            });
        for mut row in rows.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.rows.ncols()
    }
}

/// `features = labels · E + sigma · N(0, I)`, rounded to `f32`.
///
/// The embedding is passed in so that every video of a dataset shares it;
/// `seed` only drives the noise.
pub fn render_features(
    timeline: &EventTimeline,
    embedding: &ClassEmbedding,
    noise_sigma: f64,
    seed: u64,
) -> Result<FeatureSequence> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    if embedding.num_classes() != timeline.num_classes() {
        return Err(Error::shape(
            "render_features",
            timeline.num_classes(),
            embedding.num_classes(),
        ));
    }
    let labels = timeline.labels().mapv(f64::from);
    let clean = labels.dot(embedding.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF0, 0));
    let features = clean.mapv(|v| {
        let n: f64 = StandardNormal.sample(&mut rng);
        (v + noise_sigma * n) as f32
    });
    FeatureSequence::new(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timeline() -> EventTimeline {
        let mut labels = Array2::zeros((12, 3));
        labels[[5, 0]] = 1;
        labels[[5, 2]] = 1;
        labels[[9, 0]] = 1;
        labels[[9, 2]] = 1;
        labels[[1, 1]] = 1;
        EventTimeline::new(labels).unwrap()
    }

    #[test]
    fn embedding_rows_are_unit_norm() {
        let e = ClassEmbedding::seeded(5, 8, 3).unwrap();
        for row in e.rows().rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert!(ClassEmbedding::seeded(5, 4, 3).is_err());
    }

    #[test]
    fn noiseless_features_depend_only_on_labels() {
        let e = ClassEmbedding::seeded(3, 6, 1).unwrap();
        let f = render_features(&timeline(), &e, 0.0, 7).unwrap();
        assert_eq!(f.features().row(5), f.features().row(9));
        assert!(f.features().row(0).iter().all(|&v| v == 0.0));
        assert_ne!(f.features().row(1), f.features().row(5));
    }

    #[test]
    fn negative_noise_rejected() {
        let e = ClassEmbedding::seeded(3, 6, 1).unwrap();
        assert!(render_features(&timeline(), &e, -0.1, 7).is_err());
    }

    #[test]
    fn noise_has_half_normal_mean_deviation() {
        let labels = Array2::from_shape_fn((2000, 4), |(t, c)| ((t + c) % 3 == 0) as u8);
        let tl = EventTimeline::new(labels).unwrap();
        let e = ClassEmbedding::seeded(4, 8, 11).unwrap();
        let clean = render_features(&tl, &e, 0.0, 5).unwrap();
        let noisy = render_features(&tl, &e, 0.1, 5).unwrap();
        let n = clean.features().len() as f64;
        let mad = (noisy.features() - clean.features())
            .iter()
            .map(|v| v.abs() as f64)
            .sum::<f64>()
            / n;
        // E|N(0, s^2)| = s * sqrt(2 / pi)
        let expected = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mad - expected).abs() / expected < 0.1,
            "{mad} vs {expected}"
        );
    }
}
