//! Covariate spaces, worlds to sample from, and outcome predictors.

mod census;
mod finite;
mod predictor;
mod synthetic;

pub use census::census_like_csv;
pub use finite::{load_population, FinitePopulation, PopulationSchema, PopulationUnit};
pub use predictor::{dgp_predict, LinearPredictor, Predictor, PredictorKind, TrainingUnit};
pub use synthetic::{PredictorMode, SyntheticDgp};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const Q_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    DiscreteStrata,
    QuadratureGrid { lo: f64, hi: f64, cell_width: f64 },
}

/// A finite covariate support with its known density `q`.
///
/// Grids are midpoint discretizations of a continuous uniform density;
/// strata are coded `0..k` with one label per stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpace {
    points: Vec<f64>,
    q: Vec<f64>,
    labels: Vec<String>,
    kind: SpaceKind,
}

/// Midpoint grid of `m` equal cells on `[lo, hi]` with uniform weights.
pub fn make_grid_space(lo: f64, hi: f64, m: usize) -> Result<CovariateSpace> {
    CovariateSpace::grid(lo, hi, m)
}

impl CovariateSpace {
    pub fn grid(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("grid bounds must be finite"));
        }
        if lo >= hi {
            return Err(Error::invalid(format!("grid requires lo < hi, got [{lo}, {hi}]")));
        }
        if m < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 cells, got {m}")));
        }
        let width = (hi - lo) / m as f64;
        let points = (0..m).map(|i| lo + (i as f64 + 0.5) * width).collect();
        let q = vec![1.0 / m as f64; m];
        let labels = (0..m).map(|i| format!("cell{i}")).collect();
        Ok(CovariateSpace {
            points,
            q,
            labels,
            kind: SpaceKind::QuadratureGrid {
                lo,
                hi,
                cell_width: width,
            },
        })
    }

    /// Discrete strata with the given probabilities; points are the codes `0..k`.
    pub fn strata(labels: Vec<String>, q: Vec<f64>) -> Result<Self> {
        if labels.is_empty() || labels.len() != q.len() {
            return Err(Error::invalid("strata need one positive weight per label"));
        }
        if q.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("stratum weights must be positive and finite"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > Q_SUM_TOL {
            return Err(Error::invalid(format!("stratum weights sum to {total}, not 1")));
        }
        let mut seen = std::collections::HashSet::new();
        if !labels.iter().all(|l| seen.insert(l.as_str())) {
            return Err(Error::invalid("stratum labels must be distinct"));
        }
        Ok(CovariateSpace {
            points: (0..labels.len()).map(|i| i as f64).collect(),
            q,
            labels,
            kind: SpaceKind::DiscreteStrata,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    /// Index of the point (grid cell or stratum code) that `x` belongs to.
    pub fn locate(&self, x: f64) -> Option<usize> {
        match self.kind {
            SpaceKind::QuadratureGrid {
                lo, hi, cell_width, ..
            } => {
                if !(x >= lo && x <= hi) {
                    return None;
                }
                let i = ((x - lo) / cell_width).floor() as usize;
                Some(i.min(self.len() - 1))
            }
            SpaceKind::DiscreteStrata => {
                let i = x.round();
                if (x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.len() {
                    Some(i as usize)
                } else {
                    None
                }
            }
        }
    }

    /// Cell `[lo, hi)` for grid points; `None` for strata.
    pub fn cell_bounds(&self, i: usize) -> Option<(f64, f64)> {
        match self.kind {
            SpaceKind::QuadratureGrid { lo, cell_width, .. } => {
                let a = lo + i as f64 * cell_width;
                Some((a, a + cell_width))
            }
            SpaceKind::DiscreteStrata => None,
        }
    }

    /// Draws a covariate value inside point `i`: uniform within a grid cell,
    /// the code itself for a stratum. The returned value always locates back to `i`.
    pub fn sample_within<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> f64 {
        match self.cell_bounds(i) {
            Some((a, b)) => {
                let u: f64 = rng.random();
                let x = a + (b - a) * u;
                if self.locate(x) == Some(i) {
                    x
                } else {
                    self.points[i]
                }
            }
            None => self.points[i],
        }
    }

    /// `E_q[g]` computed exactly over the support.
    pub fn expect_q(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.q.iter().zip(values).map(|(q, v)| q * v).sum()
    }

    /// Index of the nearest point to `i` (by coordinate) among those where `have[j]` holds.
    pub(crate) fn nearest_with(&self, i: usize, have: &[bool]) -> Option<usize> {
        let xi = self.points[i];
        (0..self.len())
            .filter(|&j| have[j])
            .min_by(|&a, &b| {
                let da = (self.points[a] - xi).abs();
                let db = (self.points[b] - xi).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
    }
}

/// A unit drawn from a world at a chosen covariate point.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub point: usize,
    pub x: f64,
    pub features: Vec<f64>,
    pub y: f64,
    pub stored_prediction: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn assert_all_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn grid_midpoints() {
        let s = make_grid_space(-1.0, 1.0, 2).unwrap();
        assert_all_close(s.points(), &[-0.5, 0.5]);
        assert_all_close(s.q(), &[0.5, 0.5]);

        let s = make_grid_space(-1.0, 1.0, 4).unwrap();
        assert_all_close(s.points(), &[-0.75, -0.25, 0.25, 0.75]);
        assert_all_close(s.q(), &[0.25; 4]);

        let s = make_grid_space(0.0, 10.0, 5).unwrap();
        assert_all_close(s.points(), &[1.0, 3.0, 5.0, 7.0, 9.0]);
        assert_all_close(s.q(), &[0.2; 5]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_grid_space(f64::NAN, 1.0, 4).is_err());
        assert!(make_grid_space(0.0, f64::INFINITY, 4).is_err());
        assert!(make_grid_space(1.0, 1.0, 4).is_err());
        assert!(make_grid_space(-1.0, 1.0, 1).is_err());
    }

    #[test]
    fn locate_and_sample_within_agree() {
        let s = make_grid_space(-1.0, 1.0, 50).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for i in 0..50 {
            for _ in 0..20 {
                let x = s.sample_within(i, &mut rng);
                assert_eq!(s.locate(x), Some(i));
            }
        }
        assert_eq!(s.locate(1.0), Some(49));
        assert_eq!(s.locate(-1.0), Some(0));
        assert_eq!(s.locate(1.5), None);
    }

    #[test]
    fn strata_validation() {
        let s = CovariateSpace::strata(vec!["a".into(), "b".into()], vec![0.25, 0.75]).unwrap();
        assert_eq!(s.locate(1.0), Some(1));
        assert_eq!(s.locate(2.0), None);
        assert_eq!(s.locate(0.5), None);
        assert!(CovariateSpace::strata(vec!["a".into(), "a".into()], vec![0.5, 0.5]).is_err());
        assert!(CovariateSpace::strata(vec!["a".into(), "b".into()], vec![0.5, 0.6]).is_err());
        assert!(CovariateSpace::strata(vec!["a".into(), "b".into()], vec![0.0, 1.0]).is_err());
    }
}
