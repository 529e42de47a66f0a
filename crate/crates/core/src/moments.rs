//! Single-pass, mergeable central moments up to fourth order.
//!
//! [`MomentAccumulator`] keeps the count, the running mean and the central
//! power sums `M_k = Σ(x − x̄)^k` for `k = 2, 3, 4`. Updates use the
//! incremental recurrences of Terriberry/Pébay rather than raw power sums, so
//! a large common offset does not cancel away the higher moments. Two
//! accumulators built over disjoint samples can be merged exactly as if the
//! samples had been concatenated, which is what the parallel reductions in
//! [`crate::feature_stats`] rely on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variance (`M2 / n`) below this value is treated as zero.
pub const ZERO_VARIANCE_THRESHOLD: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MomentsError {
    #[error("non-finite input value {0}")]
    NonFiniteInput(f64),
    #[error("need at least {need} samples, have {have}")]
    InsufficientCount { need: u64, have: u64 },
    #[error("zero variance")]
    ZeroVariance,
}

/// Kurtosis estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KurtosisKind {
    /// Pearson's β₂ = m4 / m2².
    PearsonBeta2,
    /// Fisher's excess kurtosis, β₂ − 3.
    #[default]
    FisherExcess,
}

/// Skewness estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkewnessKind {
    /// Biased moment coefficient g1 = m3 / m2^1.5.
    #[default]
    BiasedG1,
    /// Σ(x − x̄)³ / ((n − 1)·s³) with s the n − 1 sample standard deviation.
    SampleStd,
}

/// Pair of estimators used to finalize an accumulator.
///
/// The default (Fisher excess kurtosis, biased g1 skewness) matches the
/// defaults of `scipy.stats.kurtosis` and `scipy.stats.skew`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct StatDefinition {
    pub kurtosis: KurtosisKind,
    pub skewness: SkewnessKind,
}

impl StatDefinition {
    pub fn new(kurtosis: KurtosisKind, skewness: SkewnessKind) -> Self {
        Self { kurtosis, skewness }
    }

    /// Smallest sample size for which both estimators are defined.
    pub fn min_count(&self) -> u64 {
        match self.skewness {
            SkewnessKind::BiasedG1 => 2,
            SkewnessKind::SampleStd => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl MomentAccumulator {
    pub const fn new() -> Self {
        Self {
            n: 0,
            mean: 0.0,
            m2: 0.0,
            m3: 0.0,
            m4: 0.0,
        }
    }

    /// Accumulates every value of `xs`, failing on the first non-finite one.
    pub fn from_slice(xs: &[f64]) -> Result<Self, MomentsError> {
        let mut acc = Self::new();
        for &x in xs {
            acc.update(x)?;
        }
        Ok(acc)
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Central power sum Σ(x − x̄)².
    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Central power sum Σ(x − x̄)³.
    pub fn m3(&self) -> f64 {
        self.m3
    }

    /// Central power sum Σ(x − x̄)⁴.
    pub fn m4(&self) -> f64 {
        self.m4
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn update(&mut self, x: f64) -> Result<(), MomentsError> {
        if !x.is_finite() {
            return Err(MomentsError::NonFiniteInput(x));
        }
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
        Ok(())
    }

    /// Combines two accumulators as if their samples had been concatenated.
    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n_total = self.n + other.n;
        let n = n_total as f64;
        let delta = other.mean - self.mean;
        let delta2 = delta * delta;
        let delta3 = delta2 * delta;
        let delta4 = delta2 * delta2;
        let nanb = na * nb;

        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + delta2 * nanb / n;
        let m3 = self.m3
            + other.m3
            + delta3 * nanb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + delta4 * nanb * (na * na - nanb + nb * nb) / (n * n * n)
            + 6.0 * delta2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;

        Self {
            n: n_total,
            mean,
            m2,
            m3,
            m4,
        }
    }

    /// Population variance `M2 / n`.
    pub fn population_variance(&self) -> Option<f64> {
        (self.n > 0).then(|| self.m2 / self.n as f64)
    }

    fn checked_m2(&self, need: u64) -> Result<f64, MomentsError> {
        if self.n < need {
            return Err(MomentsError::InsufficientCount { need, have: self.n });
        }
        let var = self.m2 / self.n as f64;
        if var < ZERO_VARIANCE_THRESHOLD {
            return Err(MomentsError::ZeroVariance);
        }
        Ok(var)
    }

    pub fn kurtosis(&self, kind: KurtosisKind) -> Result<f64, MomentsError> {
        let var = self.checked_m2(2)?;
        let beta2 = (self.m4 / self.n as f64) / (var * var);
        Ok(match kind {
            KurtosisKind::PearsonBeta2 => beta2,
            KurtosisKind::FisherExcess => beta2 - 3.0,
        })
    }

    pub fn skewness(&self, kind: SkewnessKind) -> Result<f64, MomentsError> {
        match kind {
            SkewnessKind::BiasedG1 => {
                let var = self.checked_m2(2)?;
                Ok((self.m3 / self.n as f64) / (var * var.sqrt()))
            }
            SkewnessKind::SampleStd => {
                self.checked_m2(3)?;
                let dof = (self.n - 1) as f64;
                let s = (self.m2 / dof).sqrt();
                Ok(self.m3 / (dof * s * s * s))
            }
        }
    }

    /// Both statistics under `def`.
    pub fn finalize(&self, def: StatDefinition) -> Result<(f64, f64), MomentsError> {
        Ok((self.kurtosis(def.kurtosis)?, self.skewness(def.skewness)?))
    }
}

impl Extend<f64> for MomentAccumulator {
    /// Panics on non-finite input; use [`MomentAccumulator::update`] to handle it.
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.update(x).expect("finite input");
        }
    }
}
