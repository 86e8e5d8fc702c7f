//! Data-collection policies, replication studies and metric tables.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{optimal_design, optimal_design_with, optimal_experimentation, DesignRule, VarianceComponents};
use crate::error::{Error, Result};
use crate::estimator::{
    adaptive_from_snapshots, baseline_estimates, EstimateMethod, EstimateReport, EstimatorOptions,
};
use crate::nuisance::{fit_nuisance, NuisanceConfig, NuisanceFit, RegressorKind};
use crate::population::{
    CovariateSpace, FinitePopulation, Predictor, PredictorKind, PredictorMode, SyntheticDgp, TrainingUnit, Unit,
};
use crate::rng::{Purpose, StreamKey};
use crate::trace::{ExperimentRecord, RefreshSchedule, Trace};

/// Monte Carlo draws per cell for oracle variance components.
pub const DEFAULT_ORACLE_DRAWS: usize = 20_000;
const PREDICTOR_KNN_K: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    /// Adaptive design from estimated nuisances, adaptive one-step estimate.
    Pgae,
    /// The optimal design under the true variance components.
    PgaeOracle,
    /// `p = q`, every sampled unit experimented, sample mean.
    Naive,
    /// Neyman allocation `p ∝ q·sd(Y|X)` with true variances, no predictions.
    OptSample,
    /// `p = q` with the best experimentation rule for the true components, PPI estimate.
    PpiOracle,
    /// `p = q`, `π ≡ γ`, PPI estimate.
    #[serde(alias = "ppi")]
    PpiAdaptive,
    /// Neyman allocation with estimated variances, no predictions.
    PgaeNoPred,
}

impl PolicyName {
    pub const ALL: [PolicyName; 7] = [
        PolicyName::Pgae,
        PolicyName::PgaeOracle,
        PolicyName::Naive,
        PolicyName::OptSample,
        PolicyName::PpiOracle,
        PolicyName::PpiAdaptive,
        PolicyName::PgaeNoPred,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyName::Pgae => "pgae",
            PolicyName::PgaeOracle => "pgae_oracle",
            PolicyName::Naive => "naive",
            PolicyName::OptSample => "opt_sample",
            PolicyName::PpiOracle => "ppi_oracle",
            PolicyName::PpiAdaptive => "ppi_adaptive",
            PolicyName::PgaeNoPred => "pgae_no_pred",
        }
    }

    /// Whether units are sampled without being experimented on.
    pub fn uses_prediction(&self) -> bool {
        !matches!(self, PolicyName::Naive | PolicyName::OptSample | PolicyName::PgaeNoPred)
    }

    pub fn estimator(&self) -> EstimateMethod {
        match self {
            PolicyName::Pgae | PolicyName::PgaeOracle => EstimateMethod::Adaptive,
            PolicyName::Naive => EstimateMethod::Naive,
            PolicyName::OptSample | PolicyName::PgaeNoPred => EstimateMethod::IpwOnly,
            PolicyName::PpiOracle | PolicyName::PpiAdaptive => EstimateMethod::Ppi,
        }
    }
}

impl std::fmt::Display for PolicyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_batch() -> usize {
    RefreshSchedule::default().batch
}

fn default_warmup() -> usize {
    RefreshSchedule::default().warmup
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: PolicyName,
    pub gamma: f64,
    /// Run until this many units have been experimented on.
    pub treated_target: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Overrides the nuisance regressor of the estimator options.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regressor: Option<RegressorKind>,
}

impl PolicySpec {
    pub fn new(name: PolicyName, gamma: f64, treated_target: usize) -> Self {
        PolicySpec {
            name,
            gamma,
            treated_target,
            batch_size: default_batch(),
            warmup: default_warmup(),
            regressor: None,
        }
    }

    pub fn with_batch(self, batch_size: usize) -> Self {
        PolicySpec { batch_size, ..self }
    }

    pub fn with_regressor(self, kind: RegressorKind) -> Self {
        PolicySpec {
            regressor: Some(kind),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("{}: γ = {} outside (0, 1]", self.name, self.gamma)));
        }
        if self.treated_target == 0 {
            return Err(Error::invalid(format!("{}: treated_target must be at least 1", self.name)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid(format!("{}: batch_size must be at least 1", self.name)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> RefreshSchedule {
        RefreshSchedule {
            warmup: self.warmup,
            batch: self.batch_size,
        }
    }

    /// Estimator options for this policy: the shared options with this
    /// policy's schedule and regressor.
    pub fn options(&self, base: &EstimatorOptions) -> EstimatorOptions {
        let mut opts = base.clone();
        opts.schedule = self.schedule();
        if let Some(kind) = self.regressor {
            opts.nuisance.kind = kind;
        }
        opts
    }
}

/// Where predictions come from in a file-backed world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSource {
    /// The population file's prediction column.
    Stored,
    /// Fit once on `size` draws from the population before any run.
    Pretrained {
        kind: PredictorKind,
        size: usize,
        #[serde(default)]
        include_x: bool,
    },
    /// Refit on each run's labeled units at every refresh.
    Refit {
        kind: PredictorKind,
        #[serde(default)]
        include_x: bool,
    },
}

#[derive(Debug, Clone)]
pub enum WorldKind {
    Synthetic(SyntheticDgp),
    Population(Arc<FinitePopulation>),
}

/// Something to sample units from, with its covariate space, true mean and
/// predictor.
#[derive(Debug)]
pub struct World {
    kind: WorldKind,
    space: CovariateSpace,
    theta: f64,
    fixed_predictor: Option<Predictor>,
    refit: Option<(PredictorKind, bool)>,
    oracle_draws: usize,
    oracle_seed: u64,
    oracle: OnceLock<std::result::Result<VarianceComponents, String>>,
}

impl World {
    pub fn synthetic(dgp: SyntheticDgp, space: CovariateSpace) -> Result<Self> {
        dgp.validate()?;
        let theta = dgp.true_mean(&space)?;
        let (fixed_predictor, refit) = match dgp.predictor_mode {
            PredictorMode::OracleLinear => (Some(Predictor::OracleLinear), None),
            PredictorMode::RefitLinear => (None, Some((PredictorKind::LeastSquares, true))),
            PredictorMode::Null => (Some(Predictor::Constant(0.0)), None),
        };
        Ok(World {
            kind: WorldKind::Synthetic(dgp),
            space,
            theta,
            fixed_predictor,
            refit,
            oracle_draws: DEFAULT_ORACLE_DRAWS,
            oracle_seed: 0,
            oracle: OnceLock::new(),
        })
    }

    /// A bootstrap world over a finite population. `seed` drives the draws
    /// used to pretrain a predictor.
    pub fn population(pop: Arc<FinitePopulation>, source: &PredictorSource, seed: u64) -> Result<Self> {
        let space = pop.space()?;
        let theta = pop.mean_outcome();
        let (fixed_predictor, refit) = match source {
            PredictorSource::Stored => {
                if !pop.has_predictions() {
                    return Err(Error::invalid("population has no prediction column"));
                }
                (Some(Predictor::Stored), None)
            }
            PredictorSource::Pretrained { kind, size, include_x } => {
                if *size == 0 {
                    return Err(Error::invalid("pretraining needs at least one draw"));
                }
                let mut rng = StreamKey::new(seed).stream(Purpose::Auxiliary, 0);
                let cum = cumulative(space.q());
                let mut units = Vec::with_capacity(*size);
                for _ in 0..*size {
                    let point = pick(&cum, rng.random());
                    units.push(pop.draw_unit(point, &mut rng)?);
                }
                (Some(fit_predictor(*kind, &units, space.len(), *include_x)?), None)
            }
            PredictorSource::Refit { kind, include_x } => {
                if *kind == PredictorKind::FixedOracle {
                    return Err(Error::invalid("a fixed oracle predictor cannot be refit"));
                }
                (None, Some((*kind, *include_x)))
            }
        };
        Ok(World {
            kind: WorldKind::Population(pop),
            space,
            theta,
            fixed_predictor,
            refit,
            oracle_draws: DEFAULT_ORACLE_DRAWS,
            oracle_seed: 0,
            oracle: OnceLock::new(),
        })
    }

    /// Sets the Monte Carlo size and seed for the oracle components.
    pub fn with_oracle(mut self, draws: usize, seed: u64) -> Self {
        self.oracle_draws = draws.max(2);
        self.oracle_seed = seed;
        self.oracle = OnceLock::new();
        self
    }

    pub fn kind(&self) -> &WorldKind {
        &self.kind
    }

    pub fn space(&self) -> &CovariateSpace {
        &self.space
    }

    /// The estimand `E_q[Y]`.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn draw<R: Rng + ?Sized>(&self, point: usize, rng: &mut R) -> Result<Unit> {
        match &self.kind {
            WorldKind::Synthetic(dgp) => dgp.draw_unit(&self.space, point, rng),
            WorldKind::Population(pop) => pop.draw_unit(point, rng),
        }
    }

    /// The predictor in force before any refit.
    pub fn initial_predictor(&self) -> Predictor {
        self.fixed_predictor.clone().unwrap_or(Predictor::Constant(0.0))
    }

    pub fn refits_predictor(&self) -> bool {
        self.refit.is_some()
    }

    fn refit_predictor(&self, labeled: &[Unit]) -> Result<Predictor> {
        let (kind, include_x) = self.refit.expect("refit configured");
        fit_predictor(kind, labeled, self.space.len(), include_x)
    }

    /// True (unclamped) `α` and `β` per point, computed once per world.
    pub fn oracle_components(&self) -> Result<&VarianceComponents> {
        self.oracle
            .get_or_init(|| self.compute_oracle().map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::invalid(format!("oracle components unavailable: {e}")))
    }

    fn compute_oracle(&self) -> Result<VarianceComponents> {
        match &self.kind {
            WorldKind::Synthetic(dgp) => {
                synthetic_oracle_components(dgp, &self.space, self.oracle_draws, self.oracle_seed).map(|vc| (*vc).clone())
            }
            WorldKind::Population(pop) => {
                let predictor = match &self.fixed_predictor {
                    Some(p) => p.clone(),
                    None => {
                        let units: Vec<Unit> = pop
                            .units()
                            .iter()
                            .map(|u| Unit {
                                point: u.stratum,
                                x: u.stratum as f64,
                                features: u.features.clone(),
                                y: u.outcome,
                                stored_prediction: u.prediction,
                            })
                            .collect();
                        self.refit_predictor(&units)?
                    }
                };
                population_oracle_components(pop, &predictor)
            }
        }
    }
}

fn fit_predictor(kind: PredictorKind, units: &[Unit], n_points: usize, include_x: bool) -> Result<Predictor> {
    let data: Vec<TrainingUnit<'_>> = units
        .iter()
        .map(|u| TrainingUnit {
            point: u.point,
            x: u.x,
            features: &u.features,
            y: u.y,
        })
        .collect();
    Predictor::fit(kind, &data, n_points, include_x, PREDICTOR_KNN_K)
}

fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0)
}

type OracleKey = (u64, u64, PredictorMode, Vec<u64>, usize, u64);

fn oracle_cache() -> &'static Mutex<HashMap<OracleKey, Arc<VarianceComponents>>> {
    static CACHE: OnceLock<Mutex<HashMap<OracleKey, Arc<VarianceComponents>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Per-cell `α` and `β` of the synthetic model by direct simulation at each
/// cell midpoint: `α` is the variance of `E[Y | x, F]` over draws of `W`,
/// `β` the mean squared noise. With an uninformative predictor all of
/// `Var(Y | x)` lands in `β`.
pub fn synthetic_oracle_components(
    dgp: &SyntheticDgp,
    space: &CovariateSpace,
    draws: usize,
    seed: u64,
) -> Result<Arc<VarianceComponents>> {
    dgp.validate()?;
    dgp.true_mean(space)?;
    let key: OracleKey = (
        dgp.noise_scale.to_bits(),
        dgp.noise_frequency.to_bits(),
        dgp.predictor_mode,
        space.points().iter().map(|x| x.to_bits()).collect(),
        draws,
        seed,
    );
    if let Some(hit) = oracle_cache().lock().expect("oracle cache").get(&key) {
        return Ok(Arc::clone(hit));
    }
    let informative = dgp.predictor_mode != PredictorMode::Null;
    let streams = StreamKey::new(seed);
    let mut alpha = Vec::with_capacity(space.len());
    let mut beta = Vec::with_capacity(space.len());
    for (i, &x) in space.points().iter().enumerate() {
        let mut rng = streams.stream(Purpose::OracleDesign, i as u64);
        let mut means = Vec::with_capacity(draws);
        let mut noise2 = 0.0;
        for _ in 0..draws {
            let (w, y) = dgp.sample(x, &mut rng)?;
            let m = dgp.mean_given(x, w);
            noise2 += (y - m) * (y - m);
            means.push(m);
        }
        let predictable = sample_var(&means);
        let noise = noise2 / draws as f64;
        if informative {
            alpha.push(predictable);
            beta.push(noise);
        } else {
            alpha.push(0.0);
            beta.push(predictable + noise);
        }
    }
    let vc = Arc::new(VarianceComponents::new(alpha, beta)?);
    oracle_cache()
        .lock()
        .expect("oracle cache")
        .insert(key, Arc::clone(&vc));
    Ok(vc)
}

/// Per-stratum components of a finite population under a fixed predictor,
/// taking `E[Y | X, F]` to be the stratum's least-squares line in `F`.
pub fn population_oracle_components(pop: &FinitePopulation, predictor: &Predictor) -> Result<VarianceComponents> {
    let k = pop.q().len();
    let mut alpha = Vec::with_capacity(k);
    let mut beta = Vec::with_capacity(k);
    for s in 0..k {
        let members = pop.stratum_units(s).ok_or(Error::UnknownStratum(s))?;
        let n = members.len() as f64;
        let mut fs = Vec::with_capacity(members.len());
        let mut ys = Vec::with_capacity(members.len());
        for &i in members {
            let u = &pop.units()[i];
            fs.push(predictor.predict(Some(s), s as f64, &u.features, u.prediction)?);
            ys.push(u.outcome);
        }
        let mf = fs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vf = fs.iter().map(|f| (f - mf) * (f - mf)).sum::<f64>() / n;
        let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
        let cov = fs.iter().zip(&ys).map(|(f, y)| (f - mf) * (y - my)).sum::<f64>() / n;
        let a = if vf > 0.0 { (cov * cov / vf).min(vy) } else { 0.0 };
        alpha.push(a);
        beta.push((vy - a).max(0.0));
    }
    VarianceComponents::new(alpha, beta)
}

/// Components truncated to `[var_min, var_max]`.
pub fn clamp_components(vc: &VarianceComponents, cfg: &NuisanceConfig) -> VarianceComponents {
    let c = |v: &f64| v.clamp(cfg.var_min, cfg.var_max);
    VarianceComponents {
        alpha: vc.alpha.iter().map(c).collect(),
        beta: vc.beta.iter().map(c).collect(),
    }
}

/// Optimal design for the synthetic model from simulated components, with
/// components clamped to the configured truncation bounds.
pub fn oracle_design_numeric(
    dgp: &SyntheticDgp,
    space: &CovariateSpace,
    gamma: f64,
    draws: usize,
    seed: u64,
    cfg: &NuisanceConfig,
) -> Result<DesignRule> {
    let vc = synthetic_oracle_components(dgp, space, draws, seed)?;
    Ok(optimal_design(space, &clamp_components(&vc, cfg), gamma)?.design)
}

fn neyman(space: &CovariateSpace, var: &[f64]) -> Result<DesignRule> {
    let raw: Vec<f64> = space.q().iter().zip(var).map(|(q, v)| q * v.sqrt()).collect();
    let s: f64 = raw.iter().sum();
    DesignRule::new(raw.iter().map(|r| r / s).collect(), vec![1.0; space.len()], 1.0)
}

/// The design a fixed policy uses, or the warm-up design of an adaptive one.
pub fn policy_design(spec: &PolicySpec, world: &World, cfg: &NuisanceConfig) -> Result<DesignRule> {
    let space = world.space();
    let oracle = || world.oracle_components().map(|vc| clamp_components(vc, cfg));
    match spec.name {
        PolicyName::Naive | PolicyName::Pgae | PolicyName::PgaeNoPred => Ok(DesignRule::full_experimentation(space)),
        PolicyName::PgaeOracle => Ok(optimal_design(space, &oracle()?, spec.gamma)?.design),
        PolicyName::OptSample => neyman(space, &oracle()?.total()),
        PolicyName::PpiOracle => optimal_experimentation(space, space.q(), &oracle()?, spec.gamma),
        PolicyName::PpiAdaptive => {
            DesignRule::new(space.q().to_vec(), vec![spec.gamma; space.len()], spec.gamma)
        }
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn pick(cum: &[f64], u: f64) -> usize {
    let total = cum[cum.len() - 1];
    cum.partition_point(|&c| c <= u * total).min(cum.len() - 1)
}

/// Per-point labeled outcome variance, with unlabeled or single-label points
/// borrowing from the nearest point with at least two labels.
fn labeled_variances(space: &CovariateSpace, records: &[ExperimentRecord], cfg: &NuisanceConfig) -> Vec<f64> {
    let mut ys = vec![Vec::new(); space.len()];
    for r in records {
        if let Some(y) = r.y {
            ys[r.point].push(y);
        }
    }
    let have: Vec<bool> = ys.iter().map(|v| v.len() >= 2).collect();
    (0..space.len())
        .map(|i| {
            let v = match space.nearest_with(i, &have) {
                Some(j) => sample_var(&ys[j]),
                None => cfg.var_min,
            };
            v.clamp(cfg.var_min, cfg.var_max)
        })
        .collect()
}

/// Hard limit on samples per run: ten times the expected count.
fn sample_cap(treated_target: usize, gamma: f64) -> usize {
    (10.0 * treated_target as f64 / gamma).ceil() as usize
}

/// One run of a policy: sample until `treated_target` units are experimented
/// on, refreshing the predictor and (for adaptive policies) the design on the
/// policy's schedule, then apply the policy's estimator.
pub fn run_policy(
    spec: &PolicySpec,
    world: &World,
    key: StreamKey,
    base: &EstimatorOptions,
) -> Result<(Trace, EstimateReport)> {
    spec.validate()?;
    let opts = spec.options(base);
    opts.validate()?;
    let space = world.space();
    let cfg = &opts.nuisance;
    let gamma = spec.gamma;
    let target = spec.treated_target;
    let cap = sample_cap(target, gamma);

    let mut design = policy_design(spec, world, cfg)?;
    let mut cum = cumulative(design.p());
    let mut predictor = world.initial_predictor();
    let keeps_snapshots = matches!(spec.name, PolicyName::Pgae | PolicyName::PgaeOracle);
    let mut snapshots: Vec<(usize, NuisanceFit)> = vec![(0, NuisanceFit::prior(space, cfg))];
    let mut records: Vec<ExperimentRecord> = Vec::new();
    let mut labeled_units: Vec<Unit> = Vec::new();

    while labeled_units.len() < target {
        let s = records.len();
        if s >= cap {
            return Err(Error::Starvation {
                treated: labeled_units.len(),
                target,
                samples: s,
            });
        }
        if opts.schedule.is_refresh(s) {
            if world.refits_predictor() && labeled_units.len() >= cfg.min_labeled {
                predictor = world.refit_predictor(&labeled_units)?;
            }
            if keeps_snapshots {
                match fit_nuisance(space, &records, cfg) {
                    Ok(fit) => {
                        if spec.name == PolicyName::Pgae {
                            design = optimal_design_with(space, &fit.components(), gamma, cfg.cap_rule)?.design;
                            cum = cumulative(design.p());
                        }
                        snapshots.push((s, fit));
                    }
                    Err(Error::InsufficientLabeled { .. }) => {}
                    Err(e) => return Err(e),
                }
            } else if spec.name == PolicyName::PgaeNoPred && labeled_units.len() >= cfg.min_labeled {
                design = neyman(space, &labeled_variances(space, &records, cfg))?;
                cum = cumulative(design.p());
            }
        }

        let t = s as u64 + 1;
        let mut rng = key.unit(t);
        let point = pick(&cum, rng.random());
        let unit = world.draw(point, &mut rng)?;
        let f = predictor.predict(Some(point), unit.x, &unit.features, unit.stored_prediction)?;
        let pi = design.pi()[point];
        let delta = rng.random::<f64>() < pi;
        records.push(ExperimentRecord {
            t,
            point,
            x: unit.x,
            f,
            delta,
            y: delta.then_some(unit.y),
            p: design.p()[point],
            pi,
            q: space.q()[point],
        });
        if delta {
            labeled_units.push(unit);
        }
    }

    let trace = Trace { records };
    let report = match spec.name.estimator() {
        EstimateMethod::Adaptive => adaptive_from_snapshots(&trace, space, &opts, &snapshots)?,
        kind => baseline_estimates(&trace, space, kind, &opts)?,
    };
    Ok((trace, report))
}

/// `n` records under a fixed design with the world's initial predictor.
pub fn sample_fixed_design(world: &World, design: &DesignRule, n: usize, key: StreamKey) -> Result<Trace> {
    let space = world.space();
    if design.len() != space.len() {
        return Err(Error::Misaligned("design does not match the world's space".into()));
    }
    let cum = cumulative(design.p());
    let predictor = world.initial_predictor();
    let mut records = Vec::with_capacity(n);
    for s in 0..n {
        let t = s as u64 + 1;
        let mut rng = key.unit(t);
        let point = pick(&cum, rng.random());
        let unit = world.draw(point, &mut rng)?;
        let f = predictor.predict(Some(point), unit.x, &unit.features, unit.stored_prediction)?;
        let pi = design.pi()[point];
        let delta = rng.random::<f64>() < pi;
        records.push(ExperimentRecord {
            t,
            point,
            x: unit.x,
            f,
            delta,
            y: delta.then_some(unit.y),
            p: design.p()[point],
            pi,
            q: space.q()[point],
        });
    }
    Ok(Trace { records })
}

/// Runs replication `replication` of `spec`. Replications share unit streams
/// across policies, so policies are compared on common random numbers.
pub fn run_replication(
    spec: &PolicySpec,
    world: &World,
    seed: u64,
    replication: u64,
    opts: &EstimatorOptions,
) -> Result<(Trace, EstimateReport)> {
    run_policy(spec, world, StreamKey::new(seed).replication(replication), opts)
}

/// Outcome of one replication, as dumped for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub policy: PolicyName,
    pub gamma: f64,
    pub replication: u64,
    pub theta_hat: Option<f64>,
    pub v_hat: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_total: Option<usize>,
    pub n_treated: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: PolicyName,
    pub gamma: f64,
    pub treated_target: usize,
    /// Successful replications.
    pub n_replications: usize,
    pub failures: usize,
    pub mse: f64,
    pub bias: f64,
    /// Standard error of `bias`.
    pub bias_se: f64,
    pub variance: f64,
    pub ci_width_mean: f64,
    pub coverage: f64,
    pub mean_n_total: f64,
    pub mean_n_treated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub theta: f64,
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: [&str; 13] = [
    "policy",
    "gamma",
    "treated_target",
    "n_replications",
    "failures",
    "mse",
    "bias",
    "bias_se",
    "variance",
    "ci_width_mean",
    "coverage",
    "mean_n_total",
    "mean_n_treated",
];

impl MetricsTable {
    pub fn row(&self, policy: PolicyName, gamma: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.policy == policy && r.gamma == gamma)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            w.write_record(&[
                r.policy.as_str().to_string(),
                r.gamma.to_string(),
                r.treated_target.to_string(),
                r.n_replications.to_string(),
                r.failures.to_string(),
                r.mse.to_string(),
                r.bias.to_string(),
                r.bias_se.to_string(),
                r.variance.to_string(),
                r.ci_width_mean.to_string(),
                r.coverage.to_string(),
                r.mean_n_total.to_string(),
                r.mean_n_treated.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn aggregate(spec: &PolicySpec, theta: f64, reports: &[&EstimateReport], failures: usize) -> MetricsRow {
    let n = reports.len() as f64;
    let mean_of = |f: &dyn Fn(&EstimateReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let bias = mean_of(&|r| r.theta_hat - theta);
    let mse = mean_of(&|r| (r.theta_hat - theta).powi(2));
    let variance = if reports.len() > 1 {
        reports.iter().map(|r| (r.theta_hat - theta - bias).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MetricsRow {
        policy: spec.name,
        gamma: spec.gamma,
        treated_target: spec.treated_target,
        n_replications: reports.len(),
        failures,
        mse,
        bias,
        bias_se: (variance / n).sqrt(),
        variance,
        ci_width_mean: mean_of(&|r| r.ci_width()),
        coverage: mean_of(&|r| if r.covers(theta) { 1.0 } else { 0.0 }),
        mean_n_total: mean_of(&|r| r.n_total as f64),
        mean_n_treated: mean_of(&|r| r.n_treated as f64),
    }
}

/// Runs every spec `n_reps` times on the current rayon pool and aggregates
/// against the world's true mean. Results do not depend on the pool size.
pub fn replicate(
    specs: &[PolicySpec],
    world: &World,
    n_reps: usize,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<(MetricsTable, Vec<ReplicationRecord>)> {
    if n_reps == 0 {
        return Err(Error::invalid("n_reps must be at least 1"));
    }
    for spec in specs {
        spec.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|s| (0..n_reps as u64).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<Result<EstimateReport>> = jobs
        .par_iter()
        .map(|&(s, r)| run_replication(&specs[s], world, seed, r, opts).map(|(_, report)| report))
        .collect();

    let theta = world.theta();
    let mut rows = Vec::with_capacity(specs.len());
    let mut dump = Vec::with_capacity(jobs.len());
    for (s, spec) in specs.iter().enumerate() {
        let chunk = &outcomes[s * n_reps..(s + 1) * n_reps];
        let ok: Vec<&EstimateReport> = chunk.iter().filter_map(|o| o.as_ref().ok()).collect();
        rows.push(aggregate(spec, theta, &ok, n_reps - ok.len()));
        for (r, o) in chunk.iter().enumerate() {
            dump.push(match o {
                Ok(rep) => ReplicationRecord {
                    policy: spec.name,
                    gamma: spec.gamma,
                    replication: r as u64,
                    theta_hat: Some(rep.theta_hat),
                    v_hat: Some(rep.v_hat),
                    ci_lo: Some(rep.ci_lo),
                    ci_hi: Some(rep.ci_hi),
                    n_total: Some(rep.n_total),
                    n_treated: Some(rep.n_treated),
                    error: None,
                },
                Err(e) => ReplicationRecord {
                    policy: spec.name,
                    gamma: spec.gamma,
                    replication: r as u64,
                    theta_hat: None,
                    v_hat: None,
                    ci_lo: None,
                    ci_hi: None,
                    n_total: None,
                    n_treated: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    Ok((MetricsTable { theta, rows }, dump))
}
