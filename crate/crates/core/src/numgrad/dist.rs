use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{NumError, Real, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Diagonal Gaussian with a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianDist {
    /// Clamps `log_std` into `[-5, 2]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self, NumError> {
        if mean.len() != log_std.len() {
            return Err(NumError::Dimension(format!(
                "mean has {} entries, log_std {}",
                mean.len(),
                log_std.len()
            )));
        }
        let log_std = log_std.into_iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, action: &[f64]) -> Result<f64, NumError> {
        if action.len() != self.mean.len() {
            return Err(NumError::Dimension(format!(
                "action has {} entries, distribution {}",
                action.len(),
                self.mean.len()
            )));
        }
        Ok(action
            .iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((a, m), s)| {
                let z = (a - m) / s.exp();
                -0.5 * z * z - s - 0.5 * (2.0 * PI).ln()
            })
            .sum())
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().sum::<f64>() + 0.5 * self.dim() as f64 * (1.0 + (2.0 * PI).ln())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s.exp() * z
            })
            .collect()
    }
}

/// Tape version: log-density of each action row under `N(mean, exp(log_std)²)`.
///
/// `log_std` is clamped into `[-5, 2]` on the tape.
pub fn gaussian_logprob<F: Real>(
    tape: &mut Tape<F>,
    mean: Var,
    log_std: Var,
    action: Tensor<F>,
) -> Result<Var, NumError> {
    let ls = tape.clamp(log_std, F::of(LOG_STD_MIN), F::of(LOG_STD_MAX))?;
    tape.gaussian_logprob(mean, ls, action)
}

/// Per-sample entropy of the clamped distribution (identical for every row).
pub fn gaussian_entropy<F: Real>(tape: &mut Tape<F>, log_std: Var) -> Result<Var, NumError> {
    let ls = tape.clamp(log_std, F::of(LOG_STD_MIN), F::of(LOG_STD_MAX))?;
    let n = tape.value(ls).len();
    let s = tape.sum(ls)?;
    let c = Tensor::scalar(F::of(0.5 * n as f64 * (1.0 + (2.0 * PI).ln())));
    tape.add_const(s, &c)
}
