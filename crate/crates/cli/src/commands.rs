use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use pgae_core::design::{optimal_design_with, variance_bound};
use pgae_core::estimator::{adaptive_estimate, baseline_estimates, crossfit_estimate};
use pgae_core::harness::{clamp_components, replicate, run_replication, ReplicationRecord};
use pgae_core::rng::Purpose;
use pgae_core::{
    CovariateSpace, DesignRule, EstimateMethod, EstimateReport, EstimatorOptions, MetricsTable, PolicySpec, StreamKey,
    Trace, VarianceComponents,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::write_atomic;

/// Summary written to `bound.json` by [`design`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSummary {
    pub gamma: f64,
    /// `V(p*, π*)`.
    pub bound: f64,
    /// `V(q, 1)`: sample from `q` and experiment on everyone.
    pub naive_bound: f64,
    /// `bound / naive_bound`.
    pub efficiency_ratio: f64,
    /// Budget actually spent, `E_p[π]`.
    pub budget_usage: f64,
    pub capped: Vec<usize>,
    pub floored: Vec<usize>,
    pub degenerate_alpha: bool,
}

fn components(cfg: &RunConfig, space: &CovariateSpace) -> Result<VarianceComponents> {
    if let Some(c) = &cfg.components {
        return c.build(space.len()).map_err(|e| CliError::Config(format!("components: {e}")));
    }
    let world = cfg.build_world()?;
    let vc = world.oracle_components().map_err(CliError::runtime)?;
    Ok(clamp_components(vc, &cfg.estimator.nuisance))
}

/// Computes the optimal design and writes `design.csv` and `bound.json`.
pub fn design(cfg: &RunConfig) -> Result<(DesignRule, BoundSummary)> {
    let dc = cfg
        .design
        .as_ref()
        .ok_or_else(|| CliError::Config("the design command needs a `design` section with `gamma`".into()))?;
    let space = cfg.space()?;
    let vc = components(cfg, &space)?;
    let opt = optimal_design_with(&space, &vc, dc.gamma, dc.cap_rule).map_err(CliError::runtime)?;
    let bound = variance_bound(&space, &opt.design, &vc).map_err(CliError::runtime)?;
    let naive = DesignRule::full_experimentation(&space);
    let naive_bound = variance_bound(&space, &naive, &vc).map_err(CliError::runtime)?;
    let summary = BoundSummary {
        gamma: dc.gamma,
        bound,
        naive_bound,
        efficiency_ratio: bound / naive_bound,
        budget_usage: opt.design.budget_usage(),
        capped: opt.capped.clone(),
        floored: opt.floored.clone(),
        degenerate_alpha: opt.degenerate_alpha,
    };

    let mut csv = Vec::new();
    opt.design.write_csv(&space, &mut csv).map_err(CliError::runtime)?;
    write_atomic(&cfg.output_dir.join("design.csv"), &csv)?;
    write_atomic(&cfg.output_dir.join("bound.json"), &json_bytes(&summary))?;
    Ok((opt.design, summary))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

/// File stem for a saved replication, e.g. `pgae_g0.4_r3`.
pub fn trace_stem(spec: &PolicySpec, replication: u64) -> String {
    format!("{}_g{}_r{}", spec.name, spec.gamma, replication)
}

/// Runs every policy `n_reps` times and writes `metrics.csv`, `metrics.json`
/// and, when configured, `replications.csv` and `traces/`.
pub fn simulate(cfg: &RunConfig) -> Result<MetricsTable> {
    if cfg.policies.is_empty() {
        return Err(CliError::Config("the simulate command needs at least one policy".into()));
    }
    let world = cfg.build_world()?;
    eprintln!(
        "simulating {} policies x {} replications over {} points",
        cfg.policies.len(),
        cfg.n_reps,
        world.space().len()
    );
    let (table, dump) =
        replicate(&cfg.policies, &world, cfg.n_reps, cfg.seed, &cfg.estimator).map_err(CliError::runtime)?;

    let mut csv = Vec::new();
    table.write_csv(&mut csv).map_err(CliError::runtime)?;
    write_atomic(&cfg.output_dir.join("metrics.csv"), &csv)?;
    write_atomic(&cfg.output_dir.join("metrics.json"), &json_bytes(&table))?;
    if cfg.dump_replications {
        write_atomic(&cfg.output_dir.join("replications.csv"), &replications_csv(&dump)?)?;
    }
    if cfg.trace_reps > 0 {
        let dir = cfg.output_dir.join("traces");
        for spec in &cfg.policies {
            for r in 0..cfg.trace_reps.min(cfg.n_reps) as u64 {
                let stem = trace_stem(spec, r);
                let Ok((trace, report)) = run_replication(spec, &world, cfg.seed, r, &cfg.estimator) else {
                    eprintln!("{stem}: replication failed, no trace saved");
                    continue;
                };
                let mut buf = Vec::new();
                trace.write_csv(&mut buf).map_err(CliError::runtime)?;
                write_atomic(&dir.join(format!("{stem}.csv")), &buf)?;
                write_atomic(&dir.join(format!("{stem}.report.json")), &json_bytes(&report))?;
                write_atomic(&dir.join(format!("{stem}.options.json")), &json_bytes(&spec.options(&cfg.estimator)))?;
            }
        }
    }
    for row in &table.rows {
        eprintln!(
            "{} γ={}: mse {:.4e}, coverage {:.3}, {} ok / {} failed",
            row.policy, row.gamma, row.mse, row.coverage, row.n_replications, row.failures
        );
    }
    if table.rows.iter().all(|r| r.n_replications == 0) {
        return Err(CliError::Runtime("every replication of every policy failed".into()));
    }
    Ok(table)
}

fn replications_csv(dump: &[ReplicationRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for rec in dump {
        w.serialize(rec).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub struct EstimateRequest {
    pub trace: PathBuf,
    pub method: EstimateMethod,
    /// Estimator options file; the config's options when absent.
    pub options: Option<PathBuf>,
}

pub fn read_options(path: &Path) -> Result<EstimatorOptions> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let opts: EstimatorOptions = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;
    opts.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(opts)
}

pub fn read_trace(path: &Path, space: &CovariateSpace) -> Result<Trace> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    Trace::read_csv(BufReader::new(file), space).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Re-estimates from a saved trace and writes `estimate.json`.
pub fn estimate(cfg: &RunConfig, req: &EstimateRequest) -> Result<EstimateReport> {
    let opts = match &req.options {
        Some(p) => read_options(p)?,
        None => cfg.estimator.clone(),
    };
    let space = cfg.space()?;
    let trace = read_trace(&req.trace, &space)?;
    let report = match req.method {
        EstimateMethod::Adaptive => adaptive_estimate(&trace, &space, &opts),
        EstimateMethod::Crossfit => {
            let mut rng = StreamKey::new(cfg.seed).stream(Purpose::Folds, 0);
            crossfit_estimate(&trace, &space, &opts, &mut rng)
        }
        kind => baseline_estimates(&trace, &space, kind, &opts),
    }
    .map_err(CliError::runtime)?;
    write_atomic(&cfg.output_dir.join("estimate.json"), &json_bytes(&report))?;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(&json_bytes(&report));
    Ok(report)
}
