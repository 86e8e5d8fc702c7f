//! Conditional-moment regressions behind the adaptive design.
//!
//! From labeled records `τ̂₁(x, f) ≈ E[Y | X, F]` and `τ̂₂(x, f) ≈ E[Y² | X, F]`
//! are fit; averaging `τ̂₁` and `τ̂₁²` over all sampled records at each point
//! gives `μ̂₁`, `μ̂₂`; then `α̂ = μ̂₂ − μ̂₁²` and `β̂` is the per-point mean of
//! `τ̂₂ − τ̂₁²`. Both are clamped to `[var_min, var_max]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::design::{optimal_design_with, CapRule, DesignRule, VarianceComponents};
use crate::error::{Error, Result};
use crate::linalg::NormalEquations;
use crate::population::{CovariateSpace, SpaceKind};
use crate::trace::ExperimentRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    /// Means over (point × prediction-quantile) bins.
    #[default]
    BinnedMean,
    /// k nearest neighbours on standardized `(x, f)`.
    Knn,
    /// Per-point quadratic in `f`, shrunk toward a pooled fit (a quadratic
    /// surface in `(x, f)` on grids, one quadratic in `f` on strata).
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub kind: RegressorKind,
    pub f_bins: usize,
    pub knn_k: usize,
    pub var_min: f64,
    pub var_max: f64,
    /// Fewer labeled records than this and no fit is attempted.
    pub min_labeled: usize,
    /// How adaptive policies turn `(α̂, β̂)` into a design at each refresh.
    pub cap_rule: CapRule,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            kind: RegressorKind::BinnedMean,
            f_bins: 10,
            knn_k: 25,
            var_min: 1e-4,
            var_max: 1e6,
            min_labeled: 50,
            cap_rule: CapRule::Reoptimize,
        }
    }
}

impl NuisanceConfig {
    pub fn with_kind(self, kind: RegressorKind) -> Self {
        NuisanceConfig { kind, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_bins == 0 || self.knn_k == 0 {
            return Err(Error::invalid("f_bins and knn_k must be positive"));
        }
        if !(self.var_min > 0.0 && self.var_min < self.var_max && self.var_max.is_finite()) {
            return Err(Error::invalid(format!(
                "truncation bounds need 0 < var_min < var_max < ∞, got [{}, {}]",
                self.var_min, self.var_max
            )));
        }
        if self.min_labeled == 0 {
            return Err(Error::invalid("min_labeled must be at least 1"));
        }
        Ok(())
    }

    fn clamp(&self, v: f64, events: &mut usize) -> f64 {
        if v.is_nan() || v < self.var_min {
            *events += 1;
            self.var_min
        } else if v > self.var_max {
            *events += 1;
            self.var_max
        } else {
            v
        }
    }
}

/// One regression input: point index, covariate, prediction, target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub point: usize,
    pub x: f64,
    pub f: f64,
    pub target: f64,
}

/// A fitted regression of a target on `(x, f)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressor {
    Constant(f64),
    /// Returns `f` unchanged.
    Identity,
    Binned {
        edges: Vec<f64>,
        bins: usize,
        cells: Vec<Option<f64>>,
        point_means: Vec<Option<f64>>,
        overall: f64,
    },
    Knn {
        k: usize,
        center: [f64; 2],
        scale: [f64; 2],
        inputs: Vec<[f64; 2]>,
        targets: Vec<f64>,
    },
    Quadratic {
        f_center: f64,
        f_scale: f64,
        coef: Vec<[f64; 3]>,
    },
}

impl Regressor {
    pub fn fit(kind: RegressorKind, space: &CovariateSpace, data: &[Sample], cfg: &NuisanceConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InsufficientLabeled { have: 0, need: 1 });
        }
        if let Some(s) = data.iter().find(|s| s.point >= space.len()) {
            return Err(Error::UnknownStratum(s.point));
        }
        match kind {
            RegressorKind::BinnedMean => Ok(fit_binned(space.len(), data, cfg.f_bins)),
            RegressorKind::Knn => Ok(fit_knn(data, cfg.knn_k)),
            RegressorKind::LeastSquares => Ok(fit_quadratic(space, data)),
        }
    }

    pub fn predict(&self, point: usize, x: f64, f: f64) -> f64 {
        match self {
            Regressor::Constant(c) => *c,
            Regressor::Identity => f,
            Regressor::Binned {
                edges,
                bins,
                cells,
                point_means,
                overall,
            } => {
                let b = edges.partition_point(|&e| e <= f);
                cells
                    .get(point * bins + b)
                    .copied()
                    .flatten()
                    .or_else(|| point_means.get(point).copied().flatten())
                    .unwrap_or(*overall)
            }
            Regressor::Knn {
                k,
                center,
                scale,
                inputs,
                targets,
            } => {
                let qx = (x - center[0]) / scale[0];
                let qf = (f - center[1]) / scale[1];
                let mut dist: Vec<(f64, usize)> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p[0] - qx).powi(2) + (p[1] - qf).powi(2), i))
                    .collect();
                let k = (*k).min(dist.len());
                dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                dist[..k].iter().map(|&(_, i)| targets[i]).sum::<f64>() / k as f64
            }
            Regressor::Quadratic { f_center, f_scale, coef } => {
                let z = (f - f_center) / f_scale;
                let c = coef.get(point).copied().unwrap_or([0.0; 3]);
                c[0] + z * (c[1] + z * c[2])
            }
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn center_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let c = mean(values.clone());
    let v = mean(values.map(|v| (v - c) * (v - c)));
    (c, if v > 0.0 { v.sqrt() } else { 1.0 })
}

fn fit_binned(n_points: usize, data: &[Sample], f_bins: usize) -> Regressor {
    let mut fs: Vec<f64> = data.iter().map(|s| s.f).collect();
    fs.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..f_bins)
        .map(|j| fs[(j * fs.len() / f_bins).min(fs.len() - 1)])
        .collect();
    edges.dedup();
    let bins = edges.len() + 1;
    let mut cell_sums = vec![(0.0, 0usize); n_points * bins];
    let mut point_sums = vec![(0.0, 0usize); n_points];
    for s in data {
        let b = edges.partition_point(|&e| e <= s.f);
        let c = &mut cell_sums[s.point * bins + b];
        c.0 += s.target;
        c.1 += 1;
        let p = &mut point_sums[s.point];
        p.0 += s.target;
        p.1 += 1;
    }
    let avg = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Regressor::Binned {
        edges,
        bins,
        cells: cell_sums.into_iter().map(avg).collect(),
        point_means: point_sums.into_iter().map(avg).collect(),
        overall: mean(data.iter().map(|s| s.target)),
    }
}

fn fit_knn(data: &[Sample], k: usize) -> Regressor {
    let (cx, sx) = center_scale(data.iter().map(|s| s.x));
    let (cf, sf) = center_scale(data.iter().map(|s| s.f));
    Regressor::Knn {
        k: k.max(1),
        center: [cx, cf],
        scale: [sx, sf],
        inputs: data.iter().map(|s| [(s.x - cx) / sx, (s.f - cf) / sf]).collect(),
        targets: data.iter().map(|s| s.target).collect(),
    }
}

fn solve_or_ridge(ne: &NormalEquations, prior: &[f64]) -> Vec<f64> {
    ne.solve()
        .or_else(|| ne.solve_toward(prior, 1e-8 * ne.rows.max(1) as f64))
        .unwrap_or_else(|| prior.to_vec())
}

fn fit_quadratic(space: &CovariateSpace, data: &[Sample]) -> Regressor {
    let (f_center, f_scale) = center_scale(data.iter().map(|s| s.f));
    let z = |s: &Sample| (s.f - f_center) / f_scale;
    let mut prior_mean = vec![0.0; 6];
    prior_mean[0] = mean(data.iter().map(|s| s.target));
    // pooled fit, expressed per point as coefficients on (1, z, z²)
    let priors: Vec<[f64; 3]> = match space.kind() {
        SpaceKind::QuadratureGrid { .. } => {
            let mut ne = NormalEquations::new(6);
            for s in data {
                let z = z(s);
                ne.add(&[1.0, s.x, z, s.x * z, s.x * s.x, z * z], s.target);
            }
            let c = solve_or_ridge(&ne, &prior_mean);
            space
                .points()
                .iter()
                .map(|&x| [c[0] + c[1] * x + c[4] * x * x, c[2] + c[3] * x, c[5]])
                .collect()
        }
        SpaceKind::DiscreteStrata => {
            let mut ne = NormalEquations::new(3);
            for s in data {
                let z = z(s);
                ne.add(&[1.0, z, z * z], s.target);
            }
            let c = solve_or_ridge(&ne, &prior_mean[..3]);
            vec![[c[0], c[1], c[2]]; space.len()]
        }
    };
    let mut per = vec![NormalEquations::new(3); space.len()];
    for s in data {
        let z = z(s);
        per[s.point].add(&[1.0, z, z * z], s.target);
    }
    let coef = per
        .iter()
        .zip(&priors)
        .map(|(ne, prior)| match ne.solve_toward(prior, 1.0) {
            Some(c) => [c[0], c[1], c[2]],
            None => *prior,
        })
        .collect();
    Regressor::Quadratic { f_center, f_scale, coef }
}

/// Fits `τ̂₁` and `τ̂₂` on labeled `(point, x, f, y)` samples (the `target` field holds `y`).
pub fn fit_tau(space: &CovariateSpace, labeled: &[Sample], cfg: &NuisanceConfig) -> Result<(Regressor, Regressor)> {
    if labeled.len() < cfg.min_labeled {
        return Err(Error::InsufficientLabeled {
            have: labeled.len(),
            need: cfg.min_labeled,
        });
    }
    let tau1 = Regressor::fit(cfg.kind, space, labeled, cfg)?;
    let squared: Vec<Sample> = labeled
        .iter()
        .map(|s| Sample {
            target: s.target * s.target,
            ..*s
        })
        .collect();
    let tau2 = Regressor::fit(cfg.kind, space, &squared, cfg)?;
    Ok((tau1, tau2))
}

/// Per-point means of `τ̂₁` and `τ̂₁²` over `(point, x, f)` triples. Points
/// without records borrow the nearest observed point; their indices are
/// returned as gaps.
pub fn fit_mu(
    space: &CovariateSpace,
    records: &[(usize, f64, f64)],
    tau1: &Regressor,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    if records.is_empty() {
        return Err(Error::invalid("no records to average over"));
    }
    let n = space.len();
    let mut sums = vec![(0.0, 0.0, 0usize); n];
    for &(point, x, f) in records {
        let slot = sums.get_mut(point).ok_or(Error::UnknownStratum(point))?;
        let v = tau1.predict(point, x, f);
        slot.0 += v;
        slot.1 += v * v;
        slot.2 += 1;
    }
    let have: Vec<bool> = sums.iter().map(|s| s.2 > 0).collect();
    let mut mu1 = vec![0.0; n];
    let mut mu2 = vec![0.0; n];
    let mut gaps = Vec::new();
    for i in 0..n {
        let j = if have[i] {
            i
        } else {
            gaps.push(i);
            space.nearest_with(i, &have).expect("at least one point has records")
        };
        let (s1, s2, c) = sums[j];
        mu1[i] = s1 / c as f64;
        mu2[i] = (s2 / c as f64).max(0.0);
    }
    Ok((mu1, mu2, gaps))
}

const SMOOTH_DEGREE: usize = 4;

fn polynomial_fit(rows: impl Iterator<Item = (f64, f64)>) -> [f64; SMOOTH_DEGREE + 1] {
    let mut ne = NormalEquations::new(SMOOTH_DEGREE + 1);
    let mut sum = 0.0;
    for (u, y) in rows {
        ne.add(&powers(u), y);
        sum += y;
    }
    let mut prior = [0.0; SMOOTH_DEGREE + 1];
    prior[0] = sum / ne.rows.max(1) as f64;
    let c = solve_or_ridge(&ne, &prior);
    let mut out = [0.0; SMOOTH_DEGREE + 1];
    out.copy_from_slice(&c);
    out
}

fn powers(u: f64) -> [f64; SMOOTH_DEGREE + 1] {
    let mut row = [1.0; SMOOTH_DEGREE + 1];
    for k in 1..=SMOOTH_DEGREE {
        row[k] = row[k - 1] * u;
    }
    row
}

fn eval_polynomial(c: &[f64; SMOOTH_DEGREE + 1], u: f64) -> f64 {
    c.iter().zip(powers(u)).map(|(c, p)| c * p).sum()
}

/// Smoothed [`fit_mu`] for grids: `μ̂₁` is a quartic in `x` fit to `τ̂₁`, and
/// `μ̂₂ − μ̂₁²` a quartic fit to `(τ̂₁ − μ̂₁)²`, floored at zero. Every cell
/// gets a value; cells without records are still listed as gaps. On strata
/// this is [`fit_mu`].
pub fn fit_mu_smooth(
    space: &CovariateSpace,
    records: &[(usize, f64, f64)],
    tau1: &Regressor,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let n = space.len();
    let (Some((lo, _)), Some((_, hi))) = (space.cell_bounds(0), space.cell_bounds(n.saturating_sub(1))) else {
        return fit_mu(space, records, tau1);
    };
    if records.is_empty() {
        return Err(Error::invalid("no records to average over"));
    }
    let scaled = |x: f64| (2.0 * x - lo - hi) / (hi - lo);
    let mut seen = vec![false; n];
    let mut values = Vec::with_capacity(records.len());
    for &(point, x, f) in records {
        *seen.get_mut(point).ok_or(Error::UnknownStratum(point))? = true;
        values.push((scaled(x), tau1.predict(point, x, f)));
    }
    let mean_fit = polynomial_fit(values.iter().copied());
    let spread_fit = polynomial_fit(values.iter().map(|&(u, v)| (u, (v - eval_polynomial(&mean_fit, u)).powi(2))));
    let mut mu1 = Vec::with_capacity(n);
    let mut mu2 = Vec::with_capacity(n);
    for &x in space.points() {
        let u = scaled(x);
        let m = eval_polynomial(&mean_fit, u);
        mu1.push(m);
        mu2.push(eval_polynomial(&spread_fit, u).max(0.0) + m * m);
    }
    let gaps = (0..n).filter(|&i| !seen[i]).collect();
    Ok((mu1, mu2, gaps))
}

/// Fitted nuisances for one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFit {
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub tau1: Regressor,
    pub tau2: Regressor,
    pub alpha_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub var_min: f64,
    pub var_max: f64,
    /// Number of component values moved by truncation.
    pub clamp_events: usize,
    /// Points with no records, filled from a neighbour.
    pub gaps: Vec<usize>,
}

impl NuisanceFit {
    /// The snapshot used before any fit exists: `μ̂ ≡ 0`, `τ̂(x, f) = f`.
    /// Under full experimentation this makes each influence term equal to `y`.
    pub fn prior(space: &CovariateSpace, cfg: &NuisanceConfig) -> Self {
        let n = space.len();
        NuisanceFit {
            mu1: vec![0.0; n],
            mu2: vec![0.0; n],
            tau1: Regressor::Identity,
            tau2: Regressor::Constant(0.0),
            alpha_hat: vec![cfg.var_min; n],
            beta_hat: vec![cfg.var_min; n],
            var_min: cfg.var_min,
            var_max: cfg.var_max,
            clamp_events: 0,
            gaps: Vec::new(),
        }
    }

    pub fn tau_at(&self, point: usize, x: f64, f: f64) -> f64 {
        self.tau1.predict(point, x, f)
    }

    /// `τ̂₂` clamped so the implied conditional variance is non-negative.
    pub fn tau2_at(&self, point: usize, x: f64, f: f64) -> f64 {
        let t1 = self.tau1.predict(point, x, f);
        self.tau2.predict(point, x, f).max(t1 * t1)
    }

    pub fn mu_at(&self, point: usize) -> f64 {
        self.mu1[point]
    }

    pub fn components(&self) -> VarianceComponents {
        VarianceComponents {
            alpha: self.alpha_hat.clone(),
            beta: self.beta_hat.clone(),
        }
    }

    /// Writes `point,mu1,mu2,alpha_hat,beta_hat` rows.
    pub fn write_csv<W: Write>(&self, space: &CovariateSpace, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["point", "mu1", "mu2", "alpha_hat", "beta_hat"])?;
        for i in 0..space.len() {
            w.write_record(&[
                space.points()[i].to_string(),
                self.mu1[i].to_string(),
                self.mu2[i].to_string(),
                self.alpha_hat[i].to_string(),
                self.beta_hat[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Gaussian-kernel average of `value` at each grid midpoint, with bandwidth
/// `0.1 · range · n^(−1/5)`.
fn kernel_smooth(
    space: &CovariateSpace,
    records: &[(usize, f64, f64)],
    value: impl Fn(usize, f64, f64) -> f64,
) -> Vec<f64> {
    let n = space.len();
    let lo = space.cell_bounds(0).map_or(0.0, |b| b.0);
    let hi = space.cell_bounds(n - 1).map_or(1.0, |b| b.1);
    let h = 0.1 * (hi - lo) * (records.len().max(1) as f64).powf(-0.2);
    let points: Vec<(f64, f64)> = records.iter().map(|&(p, x, f)| (x, value(p, x, f))).collect();
    space
        .points()
        .iter()
        .map(|&m| {
            let (mut num, mut den) = (0.0, 0.0);
            for &(x, v) in &points {
                let w = (-0.5 * ((x - m) / h).powi(2)).exp();
                num += w * v;
                den += w;
            }
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect()
}

/// `α̂ = clamp(μ̂₂ − μ̂₁²)`, `β̂ = clamp(per-point mean of max(τ̂₂ − τ̂₁², 0))`.
/// A point seen fewer than twice takes `α̂` from the nearest point seen at
/// least twice. The least-squares kind replaces the per-point mean in `β̂`
/// by a kernel average over `x` on grids. Returns the components and the
/// number of clamped values.
pub fn estimate_components(
    space: &CovariateSpace,
    records: &[(usize, f64, f64)],
    tau1: &Regressor,
    tau2: &Regressor,
    mu1: &[f64],
    mu2: &[f64],
    cfg: &NuisanceConfig,
) -> Result<(VarianceComponents, usize)> {
    let n = space.len();
    if mu1.len() != n || mu2.len() != n {
        return Err(Error::Misaligned("moment vectors do not match the space".into()));
    }
    let mut sums = vec![(0.0, 0usize); n];
    for &(point, x, f) in records {
        let slot = sums.get_mut(point).ok_or(Error::UnknownStratum(point))?;
        let t1 = tau1.predict(point, x, f);
        let t2 = tau2.predict(point, x, f);
        slot.0 += (t2 - t1 * t1).max(0.0);
        slot.1 += 1;
    }
    let have: Vec<bool> = sums.iter().map(|s| s.1 > 0).collect();
    // a spread needs two draws; thinner points borrow α̂ from a neighbour
    let spread: Vec<bool> = sums.iter().map(|s| s.1 > 1).collect();
    let smoothed = match (cfg.kind, space.kind()) {
        (RegressorKind::LeastSquares, SpaceKind::QuadratureGrid { .. }) => {
            Some(kernel_smooth(space, records, |point, x, f| {
                let t1 = tau1.predict(point, x, f);
                (tau2.predict(point, x, f) - t1 * t1).max(0.0)
            }))
        }
        _ => None,
    };
    let mut events = 0;
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    for i in 0..n {
        let j = space.nearest_with(i, &spread).unwrap_or(i);
        alpha.push(cfg.clamp(mu2[j] - mu1[j] * mu1[j], &mut events));
        let raw = match (&smoothed, space.nearest_with(i, &have)) {
            (Some(values), _) => values[i],
            (None, Some(j)) => sums[j].0 / sums[j].1 as f64,
            (None, None) => 0.0,
        };
        beta.push(cfg.clamp(raw, &mut events));
    }
    Ok((VarianceComponents { alpha, beta }, events))
}

/// Fits every nuisance from a trace prefix: `τ̂` on labeled records, `μ̂`
/// and `β̂` on all records. The least-squares kind smooths `μ̂` over grids
/// with [`fit_mu_smooth`].
pub fn fit_nuisance(space: &CovariateSpace, records: &[ExperimentRecord], cfg: &NuisanceConfig) -> Result<NuisanceFit> {
    let labeled: Vec<Sample> = records
        .iter()
        .filter_map(|r| {
            r.y.map(|y| Sample {
                point: r.point,
                x: r.x,
                f: r.f,
                target: y,
            })
        })
        .collect();
    let (tau1, tau2) = fit_tau(space, &labeled, cfg)?;
    let triples: Vec<(usize, f64, f64)> = records.iter().map(|r| (r.point, r.x, r.f)).collect();
    let (mu1, mu2, gaps) = match cfg.kind {
        RegressorKind::LeastSquares => fit_mu_smooth(space, &triples, &tau1)?,
        _ => fit_mu(space, &triples, &tau1)?,
    };
    let (vc, clamp_events) = estimate_components(space, &triples, &tau1, &tau2, &mu1, &mu2, cfg)?;
    Ok(NuisanceFit {
        mu1,
        mu2,
        tau1,
        tau2,
        alpha_hat: vc.alpha,
        beta_hat: vc.beta,
        var_min: cfg.var_min,
        var_max: cfg.var_max,
        clamp_events,
        gaps,
    })
}

/// Plug-in design from estimated components: `p̂ ∝ q√α̂`, `π̂ ∝ √(β̂/α̂)`
/// normalized to spend `γ` under `p̂`, then capped at 1.
pub fn update_design(space: &CovariateSpace, vc: &VarianceComponents, gamma: f64) -> Result<DesignRule> {
    Ok(optimal_design_with(space, vc, gamma, CapRule::CapOnly)?.design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{budget_usage, optimal_design};
    use crate::population::{make_grid_space, SyntheticDgp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cfg(kind: RegressorKind) -> NuisanceConfig {
        NuisanceConfig::default().with_kind(kind)
    }

    const KINDS: [RegressorKind; 3] = [RegressorKind::BinnedMean, RegressorKind::Knn, RegressorKind::LeastSquares];

    fn grid_samples(n: usize, seed: u64, target: impl Fn(f64, f64, &mut ChaCha8Rng) -> f64) -> (CovariateSpace, Vec<Sample>) {
        let space = make_grid_space(-1.0, 1.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let f: f64 = rng.random_range(-1.0..1.0);
                Sample {
                    point: space.locate(x).unwrap(),
                    x,
                    f,
                    target: target(x, f, &mut rng),
                }
            })
            .collect();
        (space, data)
    }

    #[test]
    fn constant_outcome() {
        let (space, data) = grid_samples(500, 1, |_, _, _| 3.0);
        for kind in KINDS {
            let (t1, t2) = fit_tau(&space, &data, &cfg(kind)).unwrap();
            for &(x, f) in &[(-0.9, 0.3), (0.0, -1.0), (0.95, 0.99)] {
                let p = space.locate(x).unwrap();
                assert!((t1.predict(p, x, f) - 3.0).abs() < 1e-9, "{kind:?}");
                assert!((t2.predict(p, x, f) - 9.0).abs() < 1e-9, "{kind:?}");
            }
        }
    }

    #[test]
    fn noiseless_identity_outcome() {
        let (space, data) = grid_samples(10_000, 2, |_, f, _| f);
        let (t1, _) = fit_tau(&space, &data, &cfg(RegressorKind::LeastSquares)).unwrap();
        assert!((t1.predict(3, -0.35, 0.4) - 0.4).abs() < 1e-9);
        // binned: each bin holds f within one decile of U[-1,1], width 0.2,
        // so the bin mean is within 0.1 of any f in the bin
        let (t1, _) = fit_tau(&space, &data, &cfg(RegressorKind::BinnedMean)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x: f64 = rng.random_range(-1.0..1.0);
            let f: f64 = rng.random_range(-1.0..1.0);
            assert!((t1.predict(space.locate(x).unwrap(), x, f) - f).abs() < 0.13);
        }
    }

    #[test]
    fn conditional_variance_of_normal_noise() {
        let (space, data) = grid_samples(100_000, 4, |_, f, rng| f + rng.sample::<f64, _>(StandardNormal));
        for kind in [RegressorKind::BinnedMean, RegressorKind::LeastSquares] {
            let (t1, t2) = fit_tau(&space, &data, &cfg(kind)).unwrap();
            for &(x, f) in &[(-0.5, 0.0), (0.5, 0.5), (0.1, -0.7)] {
                let p = space.locate(x).unwrap();
                let v = t2.predict(p, x, f) - t1.predict(p, x, f).powi(2);
                assert!((v - 1.0).abs() < 0.1, "{kind:?}: {v}");
            }
        }
    }

    #[test]
    fn insufficient_labeled() {
        let (space, data) = grid_samples(10, 5, |_, f, _| f);
        assert!(matches!(
            fit_tau(&space, &data, &NuisanceConfig::default()),
            Err(Error::InsufficientLabeled { have: 10, need: 50 })
        ));
    }

    #[test]
    fn mu_of_constant_and_identity() {
        let space = make_grid_space(-1.0, 1.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let recs: Vec<(usize, f64, f64)> = (0..200_000)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                (space.locate(x).unwrap(), x, rng.random_range(-1.0..1.0))
            })
            .collect();
        let (m1, m2, gaps) = fit_mu(&space, &recs, &Regressor::Constant(2.5)).unwrap();
        assert!(gaps.is_empty());
        assert!(m1.iter().all(|&v| v == 2.5) && m2.iter().all(|&v| v == 6.25));
        let (m1, m2, _) = fit_mu(&space, &recs, &Regressor::Identity).unwrap();
        for i in 0..4 {
            // ~50k draws per cell: se of the mean ≈ 0.0026, of the second moment ≈ 0.0013
            assert!(m1[i].abs() < 0.01, "{}", m1[i]);
            assert!((m2[i] - 1.0 / 3.0).abs() < 0.006, "{}", m2[i]);
        }
    }

    #[test]
    fn single_stratum_mu_is_sample_mean() {
        let space = CovariateSpace::strata(vec!["all".into()], vec![1.0]).unwrap();
        let recs = vec![(0, 0.0, 1.0), (0, 0.0, 2.0), (0, 0.0, 6.0)];
        let (m1, m2, _) = fit_mu(&space, &recs, &Regressor::Identity).unwrap();
        assert!((m1[0] - 3.0).abs() < 1e-12);
        assert!((m2[0] - 41.0 / 3.0).abs() < 1e-12);
        assert!(fit_mu(&space, &[], &Regressor::Identity).is_err());
    }

    #[test]
    fn gaps_are_filled_from_neighbours() {
        let space = make_grid_space(-1.0, 1.0, 4).unwrap();
        let recs = vec![(0, -0.9, 1.0), (3, 0.9, 5.0)];
        let (m1, _, gaps) = fit_mu(&space, &recs, &Regressor::Identity).unwrap();
        assert_eq!(gaps, vec![1, 2]);
        assert_eq!(m1, vec![1.0, 1.0, 5.0, 5.0]);
    }

    #[test]
    fn single_draw_points_borrow_alpha() {
        let space = make_grid_space(-1.0, 1.0, 4).unwrap();
        let recs = vec![(0, -0.9, 1.0), (0, -0.8, 3.0), (1, -0.2, 7.0), (2, 0.2, 9.0), (3, 0.9, 4.0), (3, 0.8, 4.0)];
        let (m1, m2, _) = fit_mu(&space, &recs, &Regressor::Identity).unwrap();
        let cfg = NuisanceConfig::default();
        let (vc, _) = estimate_components(&space, &recs, &Regressor::Identity, &Regressor::Constant(0.0), &m1, &m2, &cfg)
            .unwrap();
        assert!((vc.alpha[0] - 1.0).abs() < 1e-12);
        assert!((vc.alpha[1] - 1.0).abs() < 1e-12);
        assert_eq!(vc.alpha[2], cfg.var_min);
        assert_eq!(vc.alpha[3], cfg.var_min);
    }

    fn records_from_dgp(n: usize, seed: u64) -> (CovariateSpace, Vec<ExperimentRecord>) {
        let space = make_grid_space(-1.0, 1.0, 50).unwrap();
        let dgp = SyntheticDgp::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = (0..n)
            .map(|t| {
                let point = rng.random_range(0..space.len());
                let unit = dgp.draw_unit(&space, point, &mut rng).unwrap();
                ExperimentRecord {
                    t: t as u64 + 1,
                    point,
                    x: unit.x,
                    f: 2.0 * unit.features[0] + unit.x,
                    delta: true,
                    y: Some(unit.y),
                    p: space.q()[point],
                    pi: 1.0,
                    q: space.q()[point],
                }
            })
            .collect();
        (space, recs)
    }

    #[test]
    fn recovers_predictable_variance_of_synthetic_model() {
        let (space, recs) = records_from_dgp(100_000, 7);
        let fit = fit_nuisance(&space, &recs, &cfg(RegressorKind::LeastSquares)).unwrap();
        for (i, &x) in space.points().iter().enumerate() {
            let truth = (2.0 + x).powi(2) / 3.0;
            let r = fit.alpha_hat[i] / truth;
            assert!((0.8..=1.25).contains(&r), "cell {i}: ratio {r}");
        }
        // law of total variance per cell: α + β ≈ Var(Y|X)
        let dgp = SyntheticDgp::default();
        for (i, &x) in space.points().iter().enumerate() {
            let total = (2.0 + x).powi(2) / 3.0 + dgp.noise_var(x);
            let est = fit.alpha_hat[i] + fit.beta_hat[i];
            assert!((est / total - 1.0).abs() < 0.15, "cell {i}: {est} vs {total}");
        }
    }

    #[test]
    fn deterministic_outcome_clamps_beta() {
        let space = make_grid_space(-1.0, 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recs: Vec<ExperimentRecord> = (0..2000)
            .map(|t| {
                let x: f64 = rng.random_range(-1.0..1.0);
                ExperimentRecord {
                    t: t + 1,
                    point: space.locate(x).unwrap(),
                    x,
                    f: rng.random_range(-1.0..1.0),
                    delta: true,
                    y: Some(3.0),
                    p: 0.2,
                    pi: 1.0,
                    q: 0.2,
                }
            })
            .collect();
        let c = cfg(RegressorKind::BinnedMean);
        let fit = fit_nuisance(&space, &recs, &c).unwrap();
        assert!(fit.beta_hat.iter().all(|&b| b == c.var_min));
        assert!(fit.alpha_hat.iter().all(|&a| a == c.var_min));
        assert_eq!(fit.clamp_events, 10);
    }

    #[test]
    fn predictable_variance_per_stratum() {
        // y = f + N(0, 0.25), f | stratum ~ N(0, s²) with s = 1, 2
        let space = CovariateSpace::strata(vec!["a".into(), "b".into()], vec![0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs: Vec<ExperimentRecord> = (0..100_000)
            .map(|t| {
                let point = rng.random_range(0..2usize);
                let f = (point as f64 + 1.0) * rng.sample::<f64, _>(StandardNormal);
                let y = f + 0.5 * rng.sample::<f64, _>(StandardNormal);
                ExperimentRecord {
                    t: t + 1,
                    point,
                    x: point as f64,
                    f,
                    delta: true,
                    y: Some(y),
                    p: 0.5,
                    pi: 1.0,
                    q: 0.5,
                }
            })
            .collect();
        for kind in KINDS {
            if kind == RegressorKind::Knn {
                continue;
            }
            let fit = fit_nuisance(&space, &recs, &cfg(kind)).unwrap();
            // bins average f over a decile, which moves some of Var(f) into β̂
            let tol = if kind == RegressorKind::BinnedMean { 0.1 } else { 0.05 };
            for (i, want) in [1.0, 4.0].into_iter().enumerate() {
                assert!((fit.alpha_hat[i] / want - 1.0).abs() < tol, "{kind:?} {i}: {}", fit.alpha_hat[i]);
                let total = fit.alpha_hat[i] + fit.beta_hat[i];
                assert!((total / (want + 0.25) - 1.0).abs() < 0.05, "{kind:?} {i}: {total}");
            }
            if kind == RegressorKind::LeastSquares {
                assert!((fit.beta_hat[0] / 0.25 - 1.0).abs() < 0.1 && (fit.beta_hat[1] / 0.25 - 1.0).abs() < 0.1);
            }
        }
    }

    #[test]
    fn binned_error_does_not_grow_with_data() {
        let space = make_grid_space(-1.0, 1.0, 5).unwrap();
        let c = cfg(RegressorKind::BinnedMean);
        let probe: Vec<(f64, f64)> = (0..50).map(|i| (-0.98 + 0.04 * i as f64, 0.5 - 0.02 * i as f64)).collect();
        let err_at = |n: usize, seed: u64| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Sample> = (0..n)
                .map(|_| {
                    let x: f64 = rng.random_range(-1.0..1.0);
                    let f: f64 = rng.random_range(-1.0..1.0);
                    Sample { point: space.locate(x).unwrap(), x, f, target: f + rng.sample::<f64, _>(StandardNormal) }
                })
                .collect();
            let (t1, _) = fit_tau(&space, &data, &c).unwrap();
            probe.iter().map(|&(x, f)| (t1.predict(space.locate(x).unwrap(), x, f) - f).abs()).sum::<f64>() / probe.len() as f64
        };
        let (mut small, mut large) = (0.0, 0.0);
        for seed in 0..100 {
            small += err_at(1000, seed);
            large += err_at(2000, 1000 + seed);
        }
        assert!(large <= small, "{large} > {small}");
    }

    #[test]
    fn update_design_examples() {
        let space = CovariateSpace::strata(vec!["a".into(), "b".into()], vec![0.5, 0.5]).unwrap();
        let vc = VarianceComponents::new(vec![1.0, 4.0], vec![1.0, 1.0]).unwrap();
        let d = update_design(&space, &vc, 0.5).unwrap();
        let o = optimal_design(&space, &vc, 0.5).unwrap().design;
        for i in 0..2 {
            assert!((d.p()[i] - o.p()[i]).abs() < 1e-12 && (d.pi()[i] - o.pi()[i]).abs() < 1e-12);
        }
        let flat = VarianceComponents::new(vec![2.0, 2.0], vec![0.7, 0.7]).unwrap();
        let d = update_design(&space, &flat, 0.3).unwrap();
        assert_eq!(d.p(), space.q());
        assert!(d.pi().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn update_design_is_always_valid(
            a in prop::collection::vec(1e-4f64..1e6, 1..12),
            b_seed in prop::collection::vec(1e-4f64..1e6, 12),
            gamma in 0.001f64..=1.0,
        ) {
            let n = a.len();
            let space = make_grid_space(-1.0, 1.0, n.max(2)).unwrap();
            let n = space.len();
            let alpha: Vec<f64> = (0..n).map(|i| a[i % a.len()]).collect();
            let vc = VarianceComponents::new(alpha, b_seed[..n].to_vec()).unwrap();
            let d = update_design(&space, &vc, gamma).unwrap();
            prop_assert!(budget_usage(&d) <= gamma + 1e-10);
            prop_assert!(d.pi().iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!((d.p().iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn components_always_within_truncation(
            ys in prop::collection::vec(-1e4f64..1e4, 60..120),
            fs in prop::collection::vec(-1e3f64..1e3, 120),
        ) {
            let space = make_grid_space(-1.0, 1.0, 3).unwrap();
            let c = NuisanceConfig { min_labeled: 10, ..NuisanceConfig::default() };
            let recs: Vec<ExperimentRecord> = ys.iter().enumerate().map(|(i, &y)| {
                let x = -0.9 + 1.8 * (i % 7) as f64 / 6.0;
                ExperimentRecord { t: i as u64 + 1, point: space.locate(x).unwrap(), x, f: fs[i], delta: true, y: Some(y), p: 1.0 / 3.0, pi: 1.0, q: 1.0 / 3.0 }
            }).collect();
            for kind in KINDS {
                let fit = fit_nuisance(&space, &recs, &c.with_kind(kind)).unwrap();
                for v in fit.alpha_hat.iter().chain(&fit.beta_hat) {
                    prop_assert!(v.is_finite() && *v >= c.var_min && *v <= c.var_max);
                }
            }
        }
    }
}
