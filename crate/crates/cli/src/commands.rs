use std::fs::File;
use std::io::Write;
use std::path::Path;

use overdisp::data::{ClusteredSample, ProportionVector};
use overdisp::datasets::{read_csv, write_csv, BundledDataset};
use overdisp::distributions::{sample_clustered_dataset, DistributionKind, RandomStream};
use overdisp::divergence::PowerIndex;
use overdisp::estimation::{fit, FitOptions, FitResult};
use overdisp::loglinear::{DesignMatrix, DesignSpec};
use overdisp::overdispersion::{
    dispersion_brier, dispersion_improved, dispersion_large_clusters, dispersion_large_clusters_model,
    dispersion_semiparametric, fitted_covariance, weir_hill, DispersionEstimate,
};
use overdisp::simulation::{
    run_study, write_estimates_csv, write_summary_csv, SimulationReport, StudyConfig, DEFAULT_REPLICATIONS,
};

use crate::args::{DataSource, DispersionArgs, DistributionArg, FitArgs, GenerateArgs, Method, Preset, SimulateArgs};
use crate::error::{CliError, CliResult};
use crate::report::{Record, Report};

pub const THREADS_ENV: &str = "OVERDISP_THREADS";

fn load(source: &DataSource) -> CliResult<ClusteredSample> {
    match (&source.data, &source.dataset) {
        (Some(path), _) => {
            let file = File::open(path).map_err(|e| CliError::io(path, e))?;
            Ok(read_csv(file)?)
        }
        (None, Some(name)) => Ok(BundledDataset::from_name(name)?.load()),
        (None, None) => Err(CliError::Input("one of --data or --dataset is required".into())),
    }
}

/// Builds the design named by `--model` words, with a short description.
fn parse_model(words: &[String], cells: usize) -> CliResult<(DesignMatrix, String)> {
    let number = |s: &String| {
        s.parse::<usize>()
            .map_err(|_| CliError::Input(format!("expected a positive integer in --model, got {s:?}")))
    };
    let (spec, label) = match words {
        [kind, i, j] if kind == "independence" => {
            let (rows, cols) = (number(i)?, number(j)?);
            if rows * cols != cells {
                return Err(CliError::Input(format!(
                    "independence {rows} {cols} needs {} cells, the data have {cells}",
                    rows * cols
                )));
            }
            (DesignSpec::Independence { rows, cols }, format!("independence {rows}x{cols}"))
        }
        [kind] if kind == "saturated" => (DesignSpec::Saturated { cells }, format!("saturated ({cells} cells)")),
        [kind, path] if kind == "matrix" => {
            let path = Path::new(path);
            let file = File::open(path).map_err(|e| CliError::io(path, e))?;
            let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
            let mut rows = Vec::new();
            for record in reader.records() {
                let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                let row = record
                    .iter()
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                rows.push(row);
            }
            (DesignSpec::Matrix { rows }, format!("matrix {}", path.display()))
        }
        _ => {
            return Err(CliError::Input(format!(
                "unknown model {:?}; use `independence I J`, `saturated` or `matrix FILE`",
                words.join(" ")
            )))
        }
    };
    Ok((spec.build()?, label))
}

fn fit_model(sample: &ClusteredSample, w: &DesignMatrix, lambda: f64, tol: f64, max_iter: usize) -> CliResult<FitResult> {
    let opts = FitOptions {
        lambda: PowerIndex::new(lambda)?,
        max_iterations: max_iter,
        tolerance: tol,
        ..FitOptions::default()
    };
    Ok(fit(sample, w, &opts)?)
}

fn describe(sample: &ClusteredSample) -> String {
    format!(
        "{} clusters in {} size groups, {} observations, {} cells",
        sample.num_clusters(),
        sample.num_groups(),
        sample.total_count(),
        sample.num_cells()
    )
}

fn fit_notes(f: &FitResult) -> String {
    format!(
        "{} after {} iterations, residual {:.3e}, solver {:?}",
        if f.converged { "converged" } else { "NOT converged" },
        f.iterations,
        f.final_residual_norm,
        f.solver
    )
}

fn dispersion_records(d: &DispersionEstimate) -> Vec<Record> {
    vec![
        Record::scalar("rho2", d.rho2_hat),
        Record::scalar("raw_rho2", d.raw_rho2),
        Record::scalar("design_effect", d.theta_hat_n),
        Record::scalar("effective_size", d.effective_size),
    ]
}

fn probability_records(p: &ProportionVector, se: Option<&[f64]>) -> Vec<Record> {
    p.iter()
        .enumerate()
        .map(|(i, &v)| Record::entry("p", i, v, se.map(|s| s[i])))
        .collect()
}

pub fn fit_command(args: &FitArgs) -> CliResult<()> {
    let sample = load(&args.source)?;
    let (w, label) = parse_model(&args.model, sample.num_cells())?;
    let f = fit_model(&sample, &w, args.lambda, args.tol, args.max_iter)?;

    let mut report = Report::default();
    report.notes.push(format!("{}; model {label}; lambda {}", describe(&sample), args.lambda));
    report.notes.push(fit_notes(&f));
    let records = &mut report.records;
    records.extend(f.theta_hat.as_slice().iter().enumerate().map(|(i, &t)| Record::entry("theta", i, t, None)));
    if f.converged {
        let d = dispersion_semiparametric(&sample, &f, args.lambda)?;
        let cov = fitted_covariance(&sample, &f.p_hat_model, &d, Some(&w))?;
        records.extend(probability_records(&f.p_hat_model, Some(&cov.standard_errors)));
        records.extend(dispersion_records(&d));
    } else {
        records.extend(probability_records(&f.p_hat_model, None));
    }
    records.push(Record::scalar("iterations", f.iterations as f64));
    records.push(Record::scalar("residual_norm", f.final_residual_norm));
    records.push(Record::scalar("converged", if f.converged { 1.0 } else { 0.0 }));
    report.emit(args.format, std::io::stdout().lock())?;

    if f.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged {
            iterations: f.iterations,
            residual: f.final_residual_norm,
        })
    }
}

pub fn dispersion_command(args: &DispersionArgs) -> CliResult<()> {
    let sample = load(&args.source)?;
    let model = match &args.model {
        Some(words) => Some(parse_model(words, sample.num_cells())?),
        None => None,
    };
    let fitted = |w: &DesignMatrix| -> CliResult<FitResult> {
        let f = fit_model(&sample, w, args.lambda, FitOptions::default().tolerance, FitOptions::default().max_iterations)?;
        if !f.converged {
            return Err(CliError::NotConverged {
                iterations: f.iterations,
                residual: f.final_residual_norm,
            });
        }
        Ok(f)
    };
    let pooled = sample.pooled_proportions();
    let mut report = Report::default();
    report.notes.push(describe(&sample));

    let (estimate, p, cov) = match (args.method, &model) {
        (Method::Semiparametric, None) => {
            return Err(CliError::Input("--method semiparametric needs --model".into()));
        }
        (Method::Brier | Method::Improved | Method::WeirHill, Some(_)) => {
            return Err(CliError::Input(format!("--method {:?} does not take --model", args.method).to_lowercase()));
        }
        (Method::Semiparametric, Some((w, label))) => {
            let f = fitted(w)?;
            report.notes.push(format!("model {label}; lambda {}; {}", args.lambda, fit_notes(&f)));
            let d = dispersion_semiparametric(&sample, &f, args.lambda)?;
            let cov = fitted_covariance(&sample, &f.p_hat_model, &d, Some(w))?;
            (d, f.p_hat_model, cov)
        }
        (Method::LargeCluster, Some((w, label))) => {
            let f = fitted(w)?;
            report.notes.push(format!("model {label}; lambda {}; {}", args.lambda, fit_notes(&f)));
            let d = dispersion_large_clusters_model(&sample, &f, args.lambda)?;
            let cov = fitted_covariance(&sample, &f.p_hat_model, &d, None)?;
            (d, f.p_hat_model, cov)
        }
        (method, None) => {
            let d = match method {
                Method::Brier => dispersion_brier(&sample)?,
                Method::Improved => dispersion_improved(&sample)?,
                Method::WeirHill => weir_hill(&sample)?,
                _ => dispersion_large_clusters(&sample, &pooled)?,
            };
            let cov = fitted_covariance(&sample, &pooled, &d, None)?;
            (d, pooled, cov)
        }
    };
    report.notes.push(format!("estimator {}", estimate.variant.label()));
    report.records.extend(dispersion_records(&estimate));
    report.records.extend(probability_records(&p, Some(&cov.standard_errors)));
    report.emit(args.format, std::io::stdout().lock())
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Input(format!("{THREADS_ENV} must be a thread count, got {v:?}"))),
        _ => Ok(None),
    }
}

fn study_config(args: &SimulateArgs) -> CliResult<StudyConfig> {
    let mut config = match (&args.config, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let mut config: StudyConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            if let Some(r) = args.replications {
                config.replications = r;
            }
            if let Some(s) = args.seed {
                config.master_seed = s;
            }
            config
        }
        (None, Some(preset)) => {
            let reps = args.replications.unwrap_or(DEFAULT_REPLICATIONS);
            let seed = args.seed.unwrap_or(0);
            match preset {
                Preset::HousingStudy => StudyConfig::housing_study(reps, seed),
                Preset::FbiStudy => StudyConfig::fbi_study(BundledDataset::from_name(&args.locus)?, reps, seed)?,
            }
        }
        (None, None) => return Err(CliError::Input("give a study preset or --config".into())),
    };
    if args.estimates_out.is_some() {
        config.keep_estimates = true;
    }
    Ok(config)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::io(path, e)),
        None => std::io::stdout()
            .lock()
            .write_all(bytes)
            .map_err(|e| CliError::Output(e.to_string())),
    }
}

pub fn simulate_command(args: &SimulateArgs) -> CliResult<()> {
    let config = study_config(args)?;
    let report: SimulationReport = match thread_count(args.threads)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?
            .install(|| run_study(&config))?,
        None => run_study(&config)?,
    };
    // everything is rendered before the first byte is written
    let mut summary = Vec::new();
    write_summary_csv(&report, &mut summary)?;
    let estimates = match &args.estimates_out {
        Some(_) => {
            let mut buf = Vec::new();
            write_estimates_csv(&report, &mut buf)?;
            Some(buf)
        }
        None => None,
    };
    write_output(args.out.as_deref(), &summary)?;
    if let (Some(path), Some(buf)) = (&args.estimates_out, estimates) {
        write_output(Some(path), &buf)?;
    }
    Ok(())
}

pub fn generate_command(args: &GenerateArgs) -> CliResult<()> {
    let kind = match args.distribution {
        DistributionArg::Dm => DistributionKind::DirichletMultinomial,
        DistributionArg::Ni => DistributionKind::NInflated,
        DistributionArg::Rc => DistributionKind::RandomClumped,
    };
    if args.count == 0 {
        return Err(CliError::Input("--count must be at least 1".into()));
    }
    let p = ProportionVector::new(args.p.clone())?;
    let mut stream = RandomStream::from_seed(args.seed);
    let sample = sample_clustered_dataset(&[(args.n, args.count)], &p, args.rho2, kind, &mut stream)?;
    let mut buf = Vec::new();
    write_csv(&sample, &mut buf)?;
    write_output(args.out.as_deref(), &buf)
}
