use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CovariateSpace, SpaceKind, Unit};
use crate::error::{Error, Result};

/// How the simulated experimenter obtains predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    /// `F = 2W + X`, fixed for the whole run.
    OracleLinear,
    /// Least squares of `Y` on `(1, W, X)`, refit on the labeled data.
    RefitLinear,
    /// `F ≡ 0`: a predictor carrying no information.
    Null,
}

/// `Y = 2W + X + XW + ε` with `W ~ U[-1, 1]` and
/// `sd(ε | X) = noise_scale · |sin(noise_frequency · X)|`.
///
/// Every term is odd in `(X, W)`, so `E[Y] = 0` under a symmetric `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDgp {
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_noise_frequency")]
    pub noise_frequency: f64,
    #[serde(default = "default_predictor_mode")]
    pub predictor_mode: PredictorMode,
}

fn default_noise_scale() -> f64 {
    2.0
}

fn default_noise_frequency() -> f64 {
    1.5 * std::f64::consts::PI
}

fn default_predictor_mode() -> PredictorMode {
    PredictorMode::OracleLinear
}

impl Default for SyntheticDgp {
    fn default() -> Self {
        SyntheticDgp {
            noise_scale: default_noise_scale(),
            noise_frequency: default_noise_frequency(),
            predictor_mode: default_predictor_mode(),
        }
    }
}

impl SyntheticDgp {
    pub fn with_predictor(self, predictor_mode: PredictorMode) -> Self {
        SyntheticDgp {
            predictor_mode,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::invalid("noise_scale must be finite and non-negative"));
        }
        if !self.noise_frequency.is_finite() {
            return Err(Error::invalid("noise_frequency must be finite"));
        }
        Ok(())
    }

    /// `E[Y | X = x, W = w]`.
    pub fn mean_given(&self, x: f64, w: f64) -> f64 {
        2.0 * w + x + x * w
    }

    /// `E[Y | X = x]`.
    pub fn outcome_mean(&self, x: f64) -> f64 {
        x
    }

    pub fn noise_sd(&self, x: f64) -> f64 {
        self.noise_scale * (self.noise_frequency * x).sin().abs()
    }

    pub fn noise_var(&self, x: f64) -> f64 {
        let sd = self.noise_sd(x);
        sd * sd
    }

    /// Draws `(w, y)` at covariate `x`.
    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<(f64, f64)> {
        if !(-1.0..=1.0).contains(&x) {
            return Err(Error::invalid(format!("covariate {x} outside [-1, 1]")));
        }
        let w: f64 = rng.random_range(-1.0..=1.0);
        let z: f64 = rng.sample(StandardNormal);
        Ok((w, self.mean_given(x, w) + self.noise_sd(x) * z))
    }

    pub(crate) fn draw_unit<R: Rng + ?Sized>(
        &self,
        space: &CovariateSpace,
        point: usize,
        rng: &mut R,
    ) -> Result<Unit> {
        let x = space.sample_within(point, rng);
        let (w, y) = self.sample(x, rng)?;
        Ok(Unit {
            point,
            x,
            features: vec![w],
            y,
            stored_prediction: None,
        })
    }

    /// `θ = E_q[Y]` for a grid space. `E[Y|X]` is linear, so the cell midpoint
    /// gives the exact cell average.
    pub fn true_mean(&self, space: &CovariateSpace) -> Result<f64> {
        match space.kind() {
            SpaceKind::QuadratureGrid { lo, hi, .. } if lo >= -1.0 && hi <= 1.0 => {
                let means: Vec<f64> = space.points().iter().map(|&x| self.outcome_mean(x)).collect();
                Ok(space.expect_q(&means))
            }
            SpaceKind::QuadratureGrid { .. } => {
                Err(Error::invalid("synthetic world needs a grid inside [-1, 1]"))
            }
            SpaceKind::DiscreteStrata => Err(Error::invalid("synthetic world needs a grid space")),
        }
    }
}
