//! Monte Carlo comparison of the `ρ²` estimators.
//!
//! For every distribution and every true `ρ²` on a grid, the harness draws
//! `R` clustered datasets, runs each requested estimator on each dataset and
//! reports the RMSE and bias of the truncated estimates.
//!
//! Each replication draws from its own stream, seeded from
//! `(master_seed, distribution, grid index, replication)`, and statistics are
//! reduced in replication order. Serial and parallel runs therefore agree
//! bit for bit.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredSample, ProportionVector};
use crate::datasets::BundledDataset;
use crate::distributions::{replication_seed, sample_clustered_dataset, DistributionKind, RandomStream};
use crate::divergence::PowerIndex;
use crate::error::{invalid, Error, Result};
use crate::estimation::{fit, FitOptions};
use crate::loglinear::{probabilities, DesignMatrix, DesignSpec, ParameterVector};
use crate::overdispersion::{
    dispersion_brier, dispersion_improved, dispersion_large_clusters, dispersion_semiparametric,
    weir_hill,
};

/// Replications used by the presets unless overridden.
pub const DEFAULT_REPLICATIONS: usize = 2000;

/// Cell probabilities the data are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Truth {
    Model { design: DesignSpec, theta: Vec<f64> },
    Probabilities { p: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Brier,
    Improved,
    /// Chi-square denominators from a power-divergence fit of the truth's
    /// model.
    Semiparametric { lambda: f64 },
    WeirHill,
    LargeCluster,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Brier => "brier",
            Self::Improved => "improved",
            Self::Semiparametric { .. } => "semiparametric",
            Self::WeirHill => "weir_hill",
            Self::LargeCluster => "large_cluster",
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Self::Semiparametric { lambda } => Some(*lambda),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// `(n_g, N_g)` pairs.
    pub group_layout: Vec<(u64, usize)>,
    pub truth: Truth,
    pub distributions: Vec<DistributionKind>,
    pub rho2_grid: Vec<f64>,
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    pub master_seed: u64,
    /// Keep every estimate, e.g. for density plots.
    #[serde(default)]
    pub keep_estimates: bool,
}

fn grid(start: f64, step: f64, count: usize) -> Vec<f64> {
    // decimal rounding keeps grid values such as 0.3 exact in the output
    (0..count)
        .map(|i| ((start + step * i as f64) * 1e6).round() / 1e6)
        .collect()
}

impl StudyConfig {
    /// Independence model for a 3×3 table with `θ = (0.1, 0.2, 0.4, 0.3)`,
    /// groups of 18 clusters of 5, 2 of 3 and 5 of 7.
    pub fn housing_study(replications: usize, master_seed: u64) -> Self {
        let mut estimators = vec![EstimatorKind::Brier, EstimatorKind::Improved];
        estimators.extend(
            [-0.5, 0.0, 2.0 / 3.0, 1.0, 2.0].map(|lambda| EstimatorKind::Semiparametric { lambda }),
        );
        Self {
            group_layout: vec![(5, 18), (3, 2), (7, 5)],
            truth: Truth::Model {
                design: DesignSpec::Independence { rows: 3, cols: 3 },
                theta: vec![0.1, 0.2, 0.4, 0.3],
            },
            distributions: DistributionKind::ALL.to_vec(),
            rho2_grid: grid(0.1, 0.1, 9),
            replications,
            estimators,
            master_seed,
            keep_estimates: false,
        }
    }

    /// Truth taken from the pooled allele frequencies of one locus, with the
    /// locus' six cluster sizes.
    pub fn fbi_study(locus: BundledDataset, replications: usize, master_seed: u64) -> Result<Self> {
        if locus == BundledDataset::Housing {
            return invalid("the FBI study needs one of the fbi-* loci");
        }
        let sample = locus.load();
        Ok(Self {
            group_layout: sample.clusters().map(|t| (t.cluster_size(), 1)).collect(),
            truth: Truth::Probabilities {
                p: sample.pooled_proportions().into_vec(),
            },
            distributions: DistributionKind::ALL.to_vec(),
            rho2_grid: grid(0.01, 0.01, 9),
            replications,
            estimators: vec![EstimatorKind::LargeCluster, EstimatorKind::WeirHill],
            master_seed,
            keep_estimates: false,
        })
    }
}

/// Validated study ready to run.
struct Prepared {
    p: ProportionVector,
    design: Option<DesignMatrix>,
}

fn prepare(config: &StudyConfig) -> Result<Prepared> {
    if config.rho2_grid.is_empty() {
        return invalid("rho^2 grid is empty");
    }
    if let Some(r) = config.rho2_grid.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return invalid(format!("grid values must lie in (0, 1), got {r}"));
    }
    if config.replications == 0 {
        return invalid("replications must be at least 1");
    }
    if config.distributions.is_empty() {
        return invalid("no distributions requested");
    }
    if config.estimators.is_empty() {
        return invalid("no estimators requested");
    }
    if config.group_layout.is_empty() {
        return invalid("group layout is empty");
    }
    if config.group_layout.iter().any(|&(n, count)| n == 0 || count == 0) {
        return invalid("every group needs a positive cluster size and cluster count");
    }
    let (p, design) = match &config.truth {
        Truth::Model { design, theta } => {
            let w = design.build()?;
            let p = probabilities(&w, &ParameterVector::new(theta.clone())?)?;
            (p, Some(w))
        }
        Truth::Probabilities { p } => (ProportionVector::new(p.clone())?, None),
    };
    if !p.is_strictly_positive() {
        return invalid("true cell probabilities must be strictly positive");
    }
    for e in &config.estimators {
        if let EstimatorKind::Semiparametric { lambda } = e {
            if design.is_none() {
                return invalid("semiparametric estimators need a model truth to fit");
            }
            let l = PowerIndex::new(*lambda)?;
            if l.is_reverse_kullback_leibler() {
                return Err(Error::Unsupported("estimation with lambda = -1".into()));
            }
        }
    }
    Ok(Prepared { p, design })
}

fn estimate(sample: &ClusteredSample, kind: EstimatorKind, design: Option<&DesignMatrix>) -> Result<f64> {
    let est = match kind {
        EstimatorKind::Brier => dispersion_brier(sample)?,
        EstimatorKind::Improved => dispersion_improved(sample)?,
        EstimatorKind::Semiparametric { lambda } => {
            let w = design.ok_or_else(|| Error::InvalidInput("no model to fit".into()))?;
            let f = fit(sample, w, &FitOptions::with_lambda(PowerIndex::new(lambda)?))?;
            dispersion_semiparametric(sample, &f, lambda)?
        }
        EstimatorKind::WeirHill => weir_hill(sample)?,
        EstimatorKind::LargeCluster => dispersion_large_clusters(sample, &sample.pooled_proportions())?,
    };
    Ok(est.rho2_hat)
}

/// Summary for one (distribution, ρ², estimator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub distribution: DistributionKind,
    pub rho2_true: f64,
    pub estimator: EstimatorKind,
    pub rmse: f64,
    pub bias: f64,
    pub replications_used: usize,
    /// Replications where the estimator was undefined.
    pub failures: usize,
    /// Truncated estimates in replication order, when requested.
    pub estimates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationReport {
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    /// Replications spread over the current rayon pool.
    #[default]
    Parallel,
}

pub fn run_study(config: &StudyConfig) -> Result<SimulationReport> {
    run_study_with(config, Execution::default())
}

pub fn run_study_with(config: &StudyConfig, execution: Execution) -> Result<SimulationReport> {
    let prepared = prepare(config)?;
    let reps = config.replications;
    let tasks: Vec<(DistributionKind, usize, usize)> = config
        .distributions
        .iter()
        .flat_map(|&d| {
            (0..config.rho2_grid.len()).flat_map(move |g| (0..reps).map(move |r| (d, g, r)))
        })
        .collect();

    let run = |&(kind, g, rep): &(DistributionKind, usize, usize)| -> Vec<Option<f64>> {
        let mut stream = RandomStream::from_seed(replication_seed(config.master_seed, kind, g, rep));
        match sample_clustered_dataset(&config.group_layout, &prepared.p, config.rho2_grid[g], kind, &mut stream) {
            Ok(sample) => config
                .estimators
                .iter()
                .map(|&e| estimate(&sample, e, prepared.design.as_ref()).ok())
                .collect(),
            Err(_) => vec![None; config.estimators.len()],
        }
    };
    let results: Vec<Vec<Option<f64>>> = match execution {
        Execution::Serial => tasks.iter().map(run).collect(),
        Execution::Parallel => tasks.par_iter().map(run).collect(),
    };

    let mut cells = Vec::new();
    for (block, chunk) in results.chunks(reps).enumerate() {
        let kind = config.distributions[block / config.rho2_grid.len()];
        let rho2 = config.rho2_grid[block % config.rho2_grid.len()];
        for (k, &estimator) in config.estimators.iter().enumerate() {
            let values: Vec<f64> = chunk.iter().filter_map(|row| row[k]).collect();
            cells.push(summarize_cell(kind, rho2, estimator, values, reps, config.keep_estimates));
        }
    }
    Ok(SimulationReport { cells })
}

fn summarize_cell(
    distribution: DistributionKind,
    rho2_true: f64,
    estimator: EstimatorKind,
    values: Vec<f64>,
    attempted: usize,
    keep: bool,
) -> CellSummary {
    let used = values.len();
    let (mut bias, mut mse) = (0.0, 0.0);
    for v in &values {
        bias += v - rho2_true;
        mse += (v - rho2_true).powi(2);
    }
    let (bias, rmse) = if used == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let bias = bias / used as f64;
        // the squared mean never exceeds the mean square; keep that exact under rounding
        (bias, (mse / used as f64).sqrt().max(bias.abs()))
    };
    CellSummary {
        distribution,
        rho2_true,
        estimator,
        rmse,
        bias,
        replications_used: used,
        failures: attempted - used,
        estimates: keep.then_some(values),
    }
}

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "distribution",
    "rho2_true",
    "estimator",
    "lambda",
    "rmse",
    "bias",
    "replications_used",
];

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// One row per cell, in report order.
pub fn write_summary_csv<W: Write>(report: &SimulationReport, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for c in &report.cells {
        wtr.write_record([
            c.distribution.short_name().to_string(),
            c.rho2_true.to_string(),
            c.estimator.name().to_string(),
            c.estimator.lambda().map(|l| l.to_string()).unwrap_or_default(),
            c.rmse.to_string(),
            c.bias.to_string(),
            c.replications_used.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::InvalidInput(format!("write failed: {e}")))
}

/// Retained estimates, one row per replication that produced one.
pub fn write_estimates_csv<W: Write>(report: &SimulationReport, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["distribution", "rho2_true", "estimator", "lambda", "estimate"])
        .map_err(csv_err)?;
    for c in &report.cells {
        let lambda = c.estimator.lambda().map(|l| l.to_string()).unwrap_or_default();
        for v in c.estimates.iter().flatten() {
            wtr.write_record([
                c.distribution.short_name(),
                &c.rho2_true.to_string(),
                c.estimator.name(),
                &lambda,
                &v.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    wtr.flush().map_err(|e| Error::InvalidInput(format!("write failed: {e}")))
}
