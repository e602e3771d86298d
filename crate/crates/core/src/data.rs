//! Partially labelled datasets.
//!
//! Class indices are zero-based inside the library (`0..n_classes`); the
//! CSV layer converts to and from one-based labels.

use crate::error::{Error, Result};

/// What an estimator may see of one row: the features, and the label only
/// when it is observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<'a> {
    pub y: &'a [f64],
    pub label: Option<usize>,
}

impl Observation<'_> {
    pub fn is_missing(&self) -> bool {
        self.label.is_none()
    }
}

/// Rows `(y_j, z_j, m_j)`. Ground-truth labels are retained for evaluation
/// even when `m_j = 1`; estimators go through [`PartialDataset::observed_label`]
/// or [`PartialDataset::observation`], which never reveal a hidden label.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialDataset {
    p: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    missing: Vec<bool>,
}

impl PartialDataset {
    /// `features` is row-major `n x p`.
    pub fn new(
        p: usize,
        n_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        missing: Vec<bool>,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidData("feature dimension must be at least 1".into()));
        }
        if n_classes < 2 {
            return Err(Error::InvalidData(format!("need at least 2 classes, got {n_classes}")));
        }
        if !features.len().is_multiple_of(p) {
            return Err(Error::InvalidData(format!(
                "{} feature values do not split into rows of {p}",
                features.len()
            )));
        }
        let n = features.len() / p;
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: n,
                found: labels.len(),
            });
        }
        if missing.len() != n {
            return Err(Error::DimensionMismatch {
                what: "missing indicators",
                expected: n,
                found: missing.len(),
            });
        }
        if let Some(j) = labels.iter().position(|&z| z >= n_classes) {
            return Err(Error::InvalidData(format!(
                "row {j}: label {} outside 0..{n_classes}",
                labels[j]
            )));
        }
        if let Some(j) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("row {}: non-finite feature", j / p)));
        }
        Ok(Self {
            p,
            n_classes,
            features,
            labels,
            missing,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.p..(j + 1) * self.p]
    }

    pub fn is_missing(&self, j: usize) -> bool {
        self.missing[j]
    }

    /// The label of row `j`, or `None` when it is hidden from estimators.
    pub fn observed_label(&self, j: usize) -> Option<usize> {
        (!self.missing[j]).then_some(self.labels[j])
    }

    pub fn observation(&self, j: usize) -> Observation<'_> {
        Observation {
            y: self.row(j),
            label: self.observed_label(j),
        }
    }

    pub fn observations(&self) -> impl ExactSizeIterator<Item = Observation<'_>> + '_ {
        (0..self.len()).map(move |j| self.observation(j))
    }

    /// Ground truth, for evaluation code only.
    pub fn true_label(&self, j: usize) -> usize {
        self.labels[j]
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|m| **m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.n_missing() as f64 / self.len() as f64
        }
    }

    pub fn missing_indicators(&self) -> &[bool] {
        &self.missing
    }

    /// Number of observed labels per class.
    pub fn labelled_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for j in 0..self.len() {
            if let Some(z) = self.observed_label(j) {
                counts[z] += 1;
            }
        }
        counts
    }

    /// The same rows with every label revealed.
    pub fn with_all_labels_revealed(&self) -> Self {
        Self {
            missing: vec![false; self.len()],
            ..self.clone()
        }
    }

    /// The same rows with a different missingness pattern.
    pub fn with_missing(&self, missing: Vec<bool>) -> Result<Self> {
        Self::new(self.p, self.n_classes, self.features.clone(), self.labels.clone(), missing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PartialDataset {
        PartialDataset::new(1, 2, vec![0.0, 1.0, 2.0], vec![0, 1, 1], vec![false, true, false]).unwrap()
    }

    #[test]
    fn hidden_labels_are_not_observed() {
        let d = toy();
        assert_eq!(d.observed_label(0), Some(0));
        assert_eq!(d.observed_label(1), None);
        assert_eq!(d.observation(1).label, None);
        assert_eq!(d.true_label(1), 1);
        assert_eq!(d.labelled_counts(), vec![1, 1]);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let r = PartialDataset::new(1, 2, vec![0.0], vec![2], vec![false]);
        assert!(matches!(r, Err(Error::InvalidData(_))));
    }

    #[test]
    fn reveal_all() {
        let d = toy().with_all_labels_revealed();
        assert_eq!(d.n_missing(), 0);
        assert_eq!(d.observed_label(1), Some(1));
    }
}
