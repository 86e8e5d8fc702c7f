//! Influence values, one-step estimators, baselines and confidence intervals.
//!
//! For a record drawn under `(p, π)` with nuisance values `μ̂(x)` and
//! `τ̂(x, f)`, the estimated influence value is
//!
//! ```text
//! ψ = q/(π p) · [δ (y − τ̂) − π (μ̂ − τ̂)]
//! ```
//!
//! and each estimator averages `E_q[μ̂] + ψ` over records, with nuisances
//! that never see the record they are applied to: fit on the other folds
//! (cross-fitting) or on earlier records only (adaptive).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisance, NuisanceConfig, NuisanceFit};
use crate::population::CovariateSpace;
use crate::trace::{ExperimentRecord, RefreshSchedule, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Naive,
    Crossfit,
    Adaptive,
    IpwOnly,
    Ppi,
}

impl EstimateMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimateMethod::Naive => "naive",
            EstimateMethod::Crossfit => "crossfit",
            EstimateMethod::Adaptive => "adaptive",
            EstimateMethod::IpwOnly => "ipw_only",
            EstimateMethod::Ppi => "ppi",
        }
    }
}

/// How `v_hat` is computed for the one-step estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Sample variance of the per-record contributions.
    #[default]
    Empirical,
    /// The efficiency bound at the estimated components, averaged over the
    /// designs in force: `mean_t (q_t/p_t)² (β̂(x_t)/π_t + α̂(x_t))`.
    PluginBound,
}

/// Sample size used in `θ̂ ± z √(v_hat / n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiCount {
    #[default]
    Total,
    Treated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    pub level: f64,
    pub folds: usize,
    pub nuisance: NuisanceConfig,
    pub schedule: RefreshSchedule,
    pub variance_mode: VarianceMode,
    pub ci_count: CiCount,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            level: 0.95,
            folds: 5,
            nuisance: NuisanceConfig::default(),
            schedule: RefreshSchedule::default(),
            variance_mode: VarianceMode::default(),
            ci_count: CiCount::default(),
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid(format!("confidence level {} outside (0, 1)", self.level)));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("cross-fitting needs at least 2 folds, got {}", self.folds)));
        }
        self.nuisance.validate()?;
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: EstimateMethod,
    pub theta_hat: f64,
    pub v_hat: f64,
    pub n_total: usize,
    pub n_treated: usize,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    /// Points with no labeled data whose estimate was borrowed from a neighbour.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_points: Vec<usize>,
}

impl EstimateReport {
    pub fn covers(&self, theta: f64) -> bool {
        self.ci_lo <= theta && theta <= self.ci_hi
    }

    pub fn ci_width(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }
}

/// `q/(π p) · [δ (y − τ̂) − π (μ̂ − τ̂)]` using the record's design snapshot.
pub fn influence_value(rec: &ExperimentRecord, mu_at_x: f64, tau_at_xf: f64) -> f64 {
    let (a, b) = influence_parts(rec, mu_at_x, tau_at_xf);
    a - b
}

/// The experimented part `q/(π p) · δ (y − τ̂)` and the prediction part
/// `q/p · (μ̂ − τ̂)`; the influence value is their difference.
pub fn influence_parts(rec: &ExperimentRecord, mu_at_x: f64, tau_at_xf: f64) -> (f64, f64) {
    let resid = match rec.y {
        Some(y) if rec.delta => y - tau_at_xf,
        _ => 0.0,
    };
    let a = rec.q / (rec.pi * rec.p) * resid;
    let b = rec.q / rec.p * (mu_at_x - tau_at_xf);
    (a, b)
}

/// Rational approximation to the standard normal quantile (Wichura's
/// AS241, about 16 significant digits).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        1.331_416_678_917_843_774_5e2,
        1.971_590_950_306_551_442_7e3,
        1.373_169_376_550_946_112_5e4,
        4.592_195_393_154_987_145_7e4,
        6.726_577_092_700_870_085_3e4,
        3.343_057_558_358_812_810_5e4,
        2.509_080_928_730_122_672_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091_125_2e1,
        6.871_870_074_920_579_083e2,
        5.394_196_021_424_751_107_7e3,
        2.121_379_430_158_659_586_7e4,
        3.930_789_580_009_271_061e4,
        2.872_908_573_572_194_267_4e4,
        5.226_495_278_852_545_925e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        2.417_807_251_774_506_117_7e-1,
        2.272_384_498_926_918_458_33e-2,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        6.897_673_349_851_000_045_5e-1,
        1.481_039_764_274_800_745_9e-1,
        1.519_866_656_361_645_719_66e-2,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        2.965_605_718_285_048_912_3e-1,
        2.653_218_952_657_612_309_3e-2,
        1.242_660_947_388_078_438_6e-3,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879_376_9e-1,
        1.369_298_809_227_358_053_1e-1,
        1.487_536_129_085_061_485_25e-2,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    if p.is_nan() || p <= 0.0 || p >= 1.0 {
        return match p {
            0.0 => f64::NEG_INFINITY,
            1.0 => f64::INFINITY,
            _ => f64::NAN,
        };
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// `θ̂ ± z · √(v_hat / n)` with `z` the upper `(1 − level)/2` normal quantile.
pub fn confidence_interval(theta_hat: f64, v_hat: f64, n: usize, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    if !(v_hat >= 0.0) {
        return Err(Error::invalid(format!("variance estimate {v_hat} is negative")));
    }
    if n == 0 {
        return Err(Error::invalid("confidence interval needs n ≥ 1"));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    let half = z * (v_hat / n as f64).sqrt();
    Ok((theta_hat - half, theta_hat + half))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_variance(v: &[f64], center: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    v.iter().map(|x| (x - center) * (x - center)).sum::<f64>() / (v.len() - 1) as f64
}

struct Contributions {
    phi: Vec<f64>,
    bound: Vec<f64>,
}

impl Contributions {
    fn with_capacity(n: usize) -> Self {
        Contributions {
            phi: Vec::with_capacity(n),
            bound: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, rec: &ExperimentRecord, fit: &NuisanceFit, mean_mu: f64) {
        let mu = fit.mu_at(rec.point);
        let tau = fit.tau_at(rec.point, rec.x, rec.f);
        self.phi.push(mean_mu + influence_value(rec, mu, tau));
        let w = rec.q / rec.p;
        self.bound
            .push(w * w * (fit.beta_hat[rec.point] / rec.pi + fit.alpha_hat[rec.point]));
    }
}

fn finish(
    method: EstimateMethod,
    trace: &Trace,
    theta_hat: f64,
    v_hat: f64,
    n_terms: usize,
    opts: &EstimatorOptions,
    fallback_points: Vec<usize>,
) -> Result<EstimateReport> {
    let n_treated = trace.n_treated();
    let n = match opts.ci_count {
        CiCount::Total => n_terms,
        CiCount::Treated => n_treated,
    };
    let (ci_lo, ci_hi) = confidence_interval(theta_hat, v_hat, n.max(1), opts.level)?;
    Ok(EstimateReport {
        method,
        theta_hat,
        v_hat,
        n_total: trace.len(),
        n_treated,
        ci_lo,
        ci_hi,
        level: opts.level,
        fallback_points,
    })
}

fn one_step_report(
    method: EstimateMethod,
    trace: &Trace,
    c: Contributions,
    opts: &EstimatorOptions,
) -> Result<EstimateReport> {
    let theta = mean(&c.phi);
    let v = match opts.variance_mode {
        VarianceMode::Empirical => sample_variance(&c.phi, theta),
        VarianceMode::PluginBound => mean(&c.bound),
    };
    finish(method, trace, theta, v, c.phi.len(), opts, Vec::new())
}

fn check_space(trace: &Trace, space: &CovariateSpace) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::invalid("trace has no records"));
    }
    if let Some(r) = trace.records.iter().find(|r| r.point >= space.len()) {
        return Err(Error::UnknownStratum(r.point));
    }
    Ok(())
}

/// K-fold cross-fit one-step estimator for a fixed-design trace. Fold
/// membership is a balanced random assignment drawn from `rng`.
pub fn crossfit_estimate<R: Rng + ?Sized>(
    trace: &Trace,
    space: &CovariateSpace,
    opts: &EstimatorOptions,
    rng: &mut R,
) -> Result<EstimateReport> {
    opts.validate()?;
    check_space(trace, space)?;
    let k = opts.folds;
    let n = trace.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0usize; n];
    for (j, &i) in order.iter().enumerate() {
        fold[i] = j % k;
    }
    let mut fits = Vec::with_capacity(k);
    for kk in 0..k {
        let in_fold = |i: &usize| fold[*i] == kk;
        if !(0..n).filter(in_fold).any(|i| trace.records[i].delta) {
            return Err(Error::FoldStarvation { fold: kk });
        }
        let train: Vec<ExperimentRecord> = (0..n)
            .filter(|i| fold[*i] != kk)
            .map(|i| trace.records[i].clone())
            .collect();
        let fit = match fit_nuisance(space, &train, &opts.nuisance) {
            Err(Error::InsufficientLabeled { .. }) => return Err(Error::FoldStarvation { fold: kk }),
            other => other?,
        };
        let mean_mu = space.expect_q(&fit.mu1);
        fits.push((fit, mean_mu));
    }
    let mut c = Contributions::with_capacity(n);
    for (i, rec) in trace.records.iter().enumerate() {
        let (fit, mean_mu) = &fits[fold[i]];
        c.push(rec, fit, *mean_mu);
    }
    one_step_report(EstimateMethod::Crossfit, trace, c, opts)
}

/// One-step estimator with a single given nuisance fit applied to every record.
pub fn one_step_estimate(
    trace: &Trace,
    space: &CovariateSpace,
    fit: &NuisanceFit,
    opts: &EstimatorOptions,
) -> Result<EstimateReport> {
    check_space(trace, space)?;
    let mean_mu = space.expect_q(&fit.mu1);
    let mut c = Contributions::with_capacity(trace.len());
    for rec in &trace.records {
        c.push(rec, fit, mean_mu);
    }
    one_step_report(EstimateMethod::Adaptive, trace, c, opts)
}

/// Nuisance snapshots for an adaptive trace: `(s, fit)` pairs where `fit` is
/// trained on the first `s` records and governs records `s+1, ...` up to the
/// next pair. Refreshes with too few labeled records keep the previous fit.
pub fn adaptive_snapshots(
    records: &[ExperimentRecord],
    space: &CovariateSpace,
    cfg: &NuisanceConfig,
    schedule: &RefreshSchedule,
) -> Result<Vec<(usize, NuisanceFit)>> {
    let mut out = vec![(0, NuisanceFit::prior(space, cfg))];
    for s in schedule.refresh_times(records.len()) {
        match fit_nuisance(space, &records[..s], cfg) {
            Ok(fit) => out.push((s, fit)),
            Err(Error::InsufficientLabeled { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Adaptive one-step estimator: record `t` uses nuisances fit on records
/// `1..t−1` only, refreshed on `opts.schedule`.
pub fn adaptive_estimate(trace: &Trace, space: &CovariateSpace, opts: &EstimatorOptions) -> Result<EstimateReport> {
    opts.validate()?;
    check_space(trace, space)?;
    for (i, r) in trace.records.iter().enumerate() {
        if r.t != i as u64 + 1 {
            return Err(Error::TraceIncomplete(format!(
                "record {i} has step {} where {} was expected",
                r.t,
                i + 1
            )));
        }
    }
    let snapshots = adaptive_snapshots(&trace.records, space, &opts.nuisance, &opts.schedule)?;
    adaptive_from_snapshots(trace, space, opts, &snapshots)
}

/// Adaptive estimate with precomputed snapshots, as produced by [`adaptive_snapshots`].
pub(crate) fn adaptive_from_snapshots(
    trace: &Trace,
    space: &CovariateSpace,
    opts: &EstimatorOptions,
    snapshots: &[(usize, NuisanceFit)],
) -> Result<EstimateReport> {
    let mut c = Contributions::with_capacity(trace.len());
    let mut current = 0;
    let mut mean_mu = space.expect_q(&snapshots[0].1.mu1);
    for (i, rec) in trace.records.iter().enumerate() {
        while current + 1 < snapshots.len() && snapshots[current + 1].0 <= i {
            current += 1;
            mean_mu = space.expect_q(&snapshots[current].1.mu1);
        }
        c.push(rec, &snapshots[current].1, mean_mu);
    }
    one_step_report(EstimateMethod::Adaptive, trace, c, opts)
}

/// Estimators that ignore the nuisance machinery.
///
/// * `Naive`: mean of labeled outcomes.
/// * `IpwOnly`: `Σ_i q_i ȳ_i` over labeled outcomes per point, with variance
///   `n Σ_i q_i² s_i² / n_i`. Points without labels borrow the nearest
///   labeled point and are listed in `fallback_points`.
/// * `Ppi`: mean of `(q/p)[f + δ/π (y − f)]`.
pub fn baseline_estimates(
    trace: &Trace,
    space: &CovariateSpace,
    kind: EstimateMethod,
    opts: &EstimatorOptions,
) -> Result<EstimateReport> {
    check_space(trace, space)?;
    let labeled: Vec<(usize, f64)> = trace.records.iter().filter_map(|r| r.y.map(|y| (r.point, y))).collect();
    match kind {
        EstimateMethod::Naive => {
            if labeled.is_empty() {
                return Err(Error::InsufficientLabeled { have: 0, need: 1 });
            }
            let ys: Vec<f64> = labeled.iter().map(|l| l.1).collect();
            let theta = mean(&ys);
            finish(kind, trace, theta, sample_variance(&ys, theta), ys.len(), opts, Vec::new())
        }
        EstimateMethod::IpwOnly => {
            if labeled.is_empty() {
                return Err(Error::InsufficientLabeled { have: 0, need: 1 });
            }
            let k = space.len();
            let mut by_point = vec![Vec::new(); k];
            for &(p, y) in &labeled {
                by_point[p].push(y);
            }
            let all: Vec<f64> = labeled.iter().map(|l| l.1).collect();
            let pooled_var = sample_variance(&all, mean(&all));
            let have: Vec<bool> = by_point.iter().map(|v| !v.is_empty()).collect();
            let mut fallback = Vec::new();
            let (mut theta, mut v) = (0.0, 0.0);
            for i in 0..k {
                let j = if have[i] {
                    i
                } else {
                    fallback.push(i);
                    space.nearest_with(i, &have).expect("some point is labeled")
                };
                let ys = &by_point[j];
                let m = mean(ys);
                let s2 = if ys.len() >= 2 { sample_variance(ys, m) } else { pooled_var };
                let q = space.q()[i];
                theta += q * m;
                v += q * q * s2 / ys.len() as f64;
            }
            let n = labeled.len();
            finish(kind, trace, theta, v * n as f64, n, opts, fallback)
        }
        EstimateMethod::Ppi => {
            let phi: Vec<f64> = trace
                .records
                .iter()
                .map(|r| {
                    let corr = r.y.map(|y| (y - r.f) / r.pi).unwrap_or(0.0);
                    r.q / r.p * (r.f + corr)
                })
                .collect();
            let theta = mean(&phi);
            finish(kind, trace, theta, sample_variance(&phi, theta), phi.len(), opts, Vec::new())
        }
        EstimateMethod::Crossfit | EstimateMethod::Adaptive => Err(Error::invalid(format!(
            "{} is not a baseline estimator",
            kind.as_str()
        ))),
    }
}
