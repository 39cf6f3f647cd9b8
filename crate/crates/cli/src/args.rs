use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "overdisp", version, about = "Overdispersion estimates for clustered multinomial tables")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a log-linear model by minimum power divergence.
    Fit(FitArgs),
    /// Estimate the intracluster correlation.
    Dispersion(DispersionArgs),
    /// Run a Monte Carlo study and write its summary CSV.
    Simulate(SimulateArgs),
    /// Draw clustered tables from an overdispersed multinomial.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DataSource {
    /// Dataset CSV: group_id, cluster_id, cell_1..cell_M.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Bundled dataset: housing, fbi-d3s1358, fbi-vwa, fbi-fga, fbi-d8s1179.
    #[arg(long, value_name = "NAME")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Csv,
    JsonLines,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub source: DataSource,
    /// `independence I J`, `saturated`, or `matrix FILE` (CSV, one row per cell).
    #[arg(long, num_args = 1..=3, value_name = "MODEL", required = true)]
    pub model: Vec<String>,
    /// Power-divergence index; fractions such as 2/3 are accepted.
    #[arg(long, default_value = "0", value_parser = parse_lambda, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Brier,
    Improved,
    Semiparametric,
    WeirHill,
    LargeCluster,
}

#[derive(Debug, Args)]
pub struct DispersionArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Index of the fit behind model-based denominators.
    #[arg(long, default_value = "0", value_parser = parse_lambda, allow_hyphen_values = true)]
    pub lambda: f64,
    /// Model for semiparametric or model-based large-cluster estimates.
    #[arg(long, num_args = 1..=3, value_name = "MODEL")]
    pub model: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    HousingStudy,
    FbiStudy,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(value_enum, required_unless_present = "config", conflicts_with = "config")]
    pub preset: Option<Preset>,
    /// JSON study configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Defaults to 2000 for presets; overrides the config file when given.
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Locus behind the FBI study truth.
    #[arg(long, default_value = "fbi-d3s1358")]
    pub locus: String,
    /// Summary CSV; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Every truncated estimate, one row per replication.
    #[arg(long, value_name = "FILE")]
    pub estimates_out: Option<PathBuf>,
    /// Worker threads; falls back to OVERDISP_THREADS, then all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistributionArg {
    Dm,
    Ni,
    Rc,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub distribution: DistributionArg,
    /// Cluster size.
    #[arg(long)]
    pub n: u64,
    /// Cell probabilities, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub p: Vec<f64>,
    #[arg(long)]
    pub rho2: f64,
    /// Number of clusters.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("lambda must be finite, got {s}"))
    }
}
