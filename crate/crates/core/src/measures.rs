//! Empirical probability measures on the real line.
//!
//! A particle cloud `{y_1, ..., y_n}` with uniform weights stands in for the
//! law of the scalar value process. On the line the optimal quadratic coupling
//! between two equal-size clouds matches order statistics, so the
//! 2-Wasserstein distance is exact and needs no transport solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted, uniformly weighted sample cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmpiricalMeasure {
    samples: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Builds a measure from unsorted samples.
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("empirical measure needs at least one sample".into()));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("non-finite sample {bad} in empirical measure")));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    pub fn dirac(value: f64) -> Self {
        Self::new(vec![value]).expect("finite Dirac location")
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Population mean and population standard deviation.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        let var = self.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn mean(&self) -> f64 {
        self.moments().0
    }

    /// Exact W2 between two clouds of equal size.
    pub fn w2(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Usage(format!(
                "w2 requires equal sample counts, got {} and {}",
                self.len(),
                other.len()
            )));
        }
        let sq: f64 = self.samples.iter().zip(&other.samples).map(|(a, b)| (a - b).powi(2)).sum();
        Ok((sq / self.len() as f64).sqrt())
    }

    /// Shifts every sample by `c`.
    pub fn translated(&self, c: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v + c).collect() }
    }
}

impl TryFrom<Vec<f64>> for EmpiricalMeasure {
    type Error = Error;

    fn try_from(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples)
    }
}

impl From<EmpiricalMeasure> for Vec<f64> {
    fn from(m: EmpiricalMeasure) -> Self {
        m.samples
    }
}
