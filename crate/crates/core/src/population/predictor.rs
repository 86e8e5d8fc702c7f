use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::NormalEquations;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// `2W + X` for the synthetic world; the stored prediction column for a population.
    FixedOracle,
    LeastSquares,
    Knn,
    BinnedMean,
}

/// One labeled unit available for refitting a predictor.
#[derive(Debug, Clone, Copy)]
pub struct TrainingUnit<'a> {
    pub point: usize,
    pub x: f64,
    pub features: &'a [f64],
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    /// Intercept, then one coefficient per feature, then `x` when `include_x`.
    pub coefficients: Vec<f64>,
    pub include_x: bool,
}

impl LinearPredictor {
    fn design_row(x: f64, features: &[f64], include_x: bool, row: &mut Vec<f64>) {
        row.clear();
        row.push(1.0);
        row.extend_from_slice(features);
        if include_x {
            row.push(x);
        }
    }

    pub fn fit(data: &[TrainingUnit<'_>], include_x: bool) -> Result<Self> {
        let arity = data.first().map(|u| u.features.len()).unwrap_or(0);
        let dim = 1 + arity + usize::from(include_x);
        if data.len() < dim {
            return Err(Error::InsufficientLabeled {
                have: data.len(),
                need: dim,
            });
        }
        let mut ne = NormalEquations::new(dim);
        let mut row = Vec::with_capacity(dim);
        for u in data {
            if u.features.len() != arity {
                return Err(Error::invalid("training units have differing feature counts"));
            }
            Self::design_row(u.x, u.features, include_x, &mut row);
            ne.add(&row, u.y);
        }
        // A tiny ridge keeps collinear feature sets (e.g. constant columns) solvable.
        let coefficients = ne
            .solve()
            .or_else(|| ne.solve_toward(&vec![0.0; dim], 1e-8 * data.len() as f64))
            .ok_or_else(|| Error::invalid("least-squares predictor is singular"))?;
        Ok(LinearPredictor {
            coefficients,
            include_x,
        })
    }

    pub fn predict(&self, x: f64, features: &[f64]) -> f64 {
        let c = &self.coefficients;
        let mut f = c[0];
        for (b, v) in c[1..].iter().zip(features) {
            f += b * v;
        }
        if self.include_x {
            f += c[c.len() - 1] * x;
        }
        f
    }
}

/// Produces `F = f(X, W)`. Predictions are deterministic for a fixed fitted state.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    /// `2w + x` using the first feature as `w`.
    OracleLinear,
    /// Reads the unit's stored prediction.
    Stored,
    Constant(f64),
    Linear(LinearPredictor),
    Knn {
        k: usize,
        include_x: bool,
        center: Vec<f64>,
        scale: Vec<f64>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
    },
    /// Mean outcome per covariate point; unseen points get the overall mean.
    BinnedMean { means: Vec<Option<f64>>, overall: f64 },
    /// A refit predictor before its first fit.
    Unfitted(PredictorKind),
}

/// `predictor(x, w)` for the synthetic world's scalar `w`.
pub fn dgp_predict(predictor: &Predictor, x: f64, w: f64) -> Result<f64> {
    predictor.predict(None, x, &[w], None)
}

impl Predictor {
    pub fn is_fitted(&self) -> bool {
        !matches!(self, Predictor::Unfitted(_))
    }

    pub fn predict(
        &self,
        point: Option<usize>,
        x: f64,
        features: &[f64],
        stored: Option<f64>,
    ) -> Result<f64> {
        match self {
            Predictor::OracleLinear => {
                let w = features
                    .first()
                    .ok_or_else(|| Error::invalid("oracle predictor needs a feature"))?;
                Ok(2.0 * w + x)
            }
            Predictor::Stored => {
                stored.ok_or_else(|| Error::invalid("unit has no stored prediction"))
            }
            Predictor::Constant(c) => Ok(*c),
            Predictor::Linear(lp) => Ok(lp.predict(x, features)),
            Predictor::Knn {
                k,
                include_x,
                center,
                scale,
                inputs,
                targets,
            } => {
                let query = standardize(x, features, *include_x, center, scale);
                let mut dist: Vec<(f64, usize)> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let d: f64 = p.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum();
                        (d, i)
                    })
                    .collect();
                let k = (*k).min(dist.len());
                dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                Ok(dist[..k].iter().map(|&(_, i)| targets[i]).sum::<f64>() / k as f64)
            }
            Predictor::BinnedMean { means, overall } => {
                let point = point.ok_or_else(|| Error::invalid("binned predictor needs a point"))?;
                Ok(means.get(point).copied().flatten().unwrap_or(*overall))
            }
            Predictor::Unfitted(_) => Err(Error::PredictorNotFitted),
        }
    }

    /// Fits a refit-able predictor on labeled units. `include_x` adds the
    /// covariate value as a regressor (meaningful only for numeric covariates).
    pub fn fit(
        kind: PredictorKind,
        data: &[TrainingUnit<'_>],
        n_points: usize,
        include_x: bool,
        knn_k: usize,
    ) -> Result<Self> {
        match kind {
            PredictorKind::FixedOracle => Err(Error::invalid("fixed predictors are not refit")),
            PredictorKind::LeastSquares => Ok(Predictor::Linear(LinearPredictor::fit(data, include_x)?)),
            PredictorKind::Knn => {
                if data.is_empty() {
                    return Err(Error::InsufficientLabeled { have: 0, need: 1 });
                }
                let raw: Vec<Vec<f64>> = data
                    .iter()
                    .map(|u| standardize(u.x, u.features, include_x, &[], &[]))
                    .collect();
                let dim = raw[0].len();
                let n = raw.len() as f64;
                let center: Vec<f64> = (0..dim).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
                let scale: Vec<f64> = (0..dim)
                    .map(|j| {
                        let v = raw.iter().map(|r| (r[j] - center[j]).powi(2)).sum::<f64>() / n;
                        if v > 0.0 { v.sqrt() } else { 1.0 }
                    })
                    .collect();
                let inputs = raw
                    .iter()
                    .map(|r| r.iter().zip(&center).zip(&scale).map(|((v, c), s)| (v - c) / s).collect())
                    .collect();
                Ok(Predictor::Knn {
                    k: knn_k.max(1),
                    include_x,
                    center,
                    scale,
                    inputs,
                    targets: data.iter().map(|u| u.y).collect(),
                })
            }
            PredictorKind::BinnedMean => {
                if data.is_empty() {
                    return Err(Error::InsufficientLabeled { have: 0, need: 1 });
                }
                let mut sums = vec![(0.0, 0usize); n_points];
                for u in data {
                    let slot = sums
                        .get_mut(u.point)
                        .ok_or(Error::UnknownStratum(u.point))?;
                    slot.0 += u.y;
                    slot.1 += 1;
                }
                let overall = data.iter().map(|u| u.y).sum::<f64>() / data.len() as f64;
                let means = sums
                    .into_iter()
                    .map(|(s, c)| (c > 0).then(|| s / c as f64))
                    .collect();
                Ok(Predictor::BinnedMean { means, overall })
            }
        }
    }
}

fn standardize(x: f64, features: &[f64], include_x: bool, center: &[f64], scale: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(features.len() + 1);
    if include_x {
        v.push(x);
    }
    v.extend_from_slice(features);
    if !center.is_empty() {
        for ((val, c), s) in v.iter_mut().zip(center).zip(scale) {
            *val = (*val - c) / s;
        }
    }
    v
}
