//! Class weighting for the cross-entropy pre-training phase.
//!
//! The deep-brain structures occupy a tiny fraction of any crop, so unweighted
//! cross entropy is dominated by background. Weights default to the inverse
//! class-voxel frequency of the training set, normalized to mean 1; a uniform
//! scheme is available for comparison. The loss evaluations themselves are
//! tape primitives ([`crate::tensor::Tape::weighted_cross_entropy`] and
//! [`crate::tensor::Tape::soft_dice`]).

use crate::volume::LabelMap;
use serde::{Deserialize, Serialize};

/// Per-class nonnegative weights for the cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

/// How cross-entropy class weights are derived from the training labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingScheme {
    /// Inverse class-voxel frequency, normalized to mean 1.
    #[default]
    InverseFrequency,
    /// All classes weighted equally.
    Uniform,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes >= 1);
        Self(vec![1.0; num_classes])
    }

    /// Build inverse-frequency weights from per-class voxel counts. Absent
    /// classes are treated as having one voxel so their weight stays finite.
    pub fn inverse_frequency(counts: &[usize]) -> Self {
        assert!(!counts.is_empty());
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| 1.0 / (n.max(1) as f64))
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Self(raw.into_iter().map(|w| w / mean).collect())
    }

    /// Count label occurrences across a training set and derive weights.
    pub fn from_label_maps(
        maps: &[&LabelMap],
        num_classes: usize,
        scheme: WeightingScheme,
    ) -> Self {
        match scheme {
            WeightingScheme::Uniform => Self::uniform(num_classes),
            WeightingScheme::InverseFrequency => {
                let mut counts = vec![0usize; num_classes];
                for m in maps {
                    for &l in m.labels() {
                        if (l as usize) < num_classes {
                            counts[l as usize] += 1;
                        }
                    }
                }
                Self::inverse_frequency(&counts)
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_frequency_is_normalized_to_mean_one() {
        let w = ClassWeights::inverse_frequency(&[1000, 10, 10]);
        let mean: f64 = w.values().iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w.values()[1] > w.values()[0]);
        assert_eq!(w.values()[1], w.values()[2]);
    }

    #[test]
    fn absent_class_gets_finite_weight() {
        let w = ClassWeights::inverse_frequency(&[100, 0]);
        assert!(w.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn counting_across_maps() {
        let a = LabelMap::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0, 1]).unwrap();
        let b = LabelMap::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0, 0]).unwrap();
        let w = ClassWeights::from_label_maps(&[&a, &b], 2, WeightingScheme::InverseFrequency);
        // Counts: class 0 -> 3, class 1 -> 1; inverse ratio 3:1 after scaling.
        assert!((w.values()[1] / w.values()[0] - 3.0).abs() < 1e-12);
    }
}
