//! End-to-end acceptance checks, one line of output per criterion.
//! Runs without the libtest harness so the lines show up in plain `cargo test`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use overdisp::data::{ClusterGroup, ClusteredSample, ProportionVector};
use overdisp::datasets::BundledDataset;
use overdisp::distributions::{
    derive_seed, sample, sample_clustered_dataset, DistributionKind, OverdispersionParams, RandomStream,
};
use overdisp::divergence::{estimating_residual, hessian, power_divergence, PowerIndex};
use overdisp::estimation::{fit, FitOptions};
use overdisp::loglinear::{independence_design, probabilities, ParameterVector};
use overdisp::overdispersion::{
    brier_x2, dispersion_brier, dispersion_improved, dispersion_large_clusters, dispersion_semiparametric,
    fitted_covariance, weir_hill,
};
use overdisp::simulation::{run_study_with, write_summary_csv, Execution, EstimatorKind, StudyConfig};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn within(label: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{label}: got {got:.6}, want {want} +/- {tol}"))
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let detail = f()?;
    let took = start.elapsed();
    if took > limit {
        return Err(format!("{detail}; took {took:.2?}, limit {limit:?}"));
    }
    Ok(format!("{detail} ({took:.2?})"))
}

fn lam(l: f64) -> PowerIndex {
    PowerIndex::new(l).unwrap()
}

fn criterion_1() -> Check {
    timed(Duration::from_secs(1), || {
        let s = BundledDataset::Housing.load();
        let b = dispersion_brier(&s).map_err(|e| e.to_string())?.rho2_hat;
        let i = dispersion_improved(&s).map_err(|e| e.to_string())?.rho2_hat;
        within("brier", b, 0.0172, 5e-4)?;
        within("improved", i, 0.0199, 5e-4)?;
        Ok(format!("brier {b:.4}, improved {i:.4}"))
    })
}

fn criterion_2() -> Check {
    timed(Duration::from_secs(5), || {
        let s = BundledDataset::Housing.load();
        let w = independence_design(3, 3).unwrap();
        let mut got = Vec::new();
        for (l, want) in [(-0.5, 0.3109), (0.0, 0.1545), (2.0 / 3.0, 0.0872), (1.0, 0.0712), (2.0, 0.0477)] {
            let f = fit(&s, &w, &FitOptions::with_lambda(lam(l))).map_err(|e| e.to_string())?;
            let r = dispersion_semiparametric(&s, &f, l).map_err(|e| e.to_string())?.rho2_hat;
            within(&format!("lambda {l:.3}"), r, want, 1e-3)?;
            got.push(format!("{r:.4}"));
        }
        Ok(format!("semiparametric {}", got.join(", ")))
    })
}

fn criterion_3() -> Check {
    let s = BundledDataset::Housing.load();
    let w = independence_design(3, 3).unwrap();
    #[rustfmt::skip]
    let rows = [
        (0.0,
         [0.1302, 0.1016, 0.0182, 0.3201, 0.2497, 0.0448, 0.0705, 0.0550, 0.0099],
         [0.0331, 0.0276, 0.0093, 0.0512, 0.0464, 0.0210, 0.0245, 0.0198, 0.0055]),
        (2.0 / 3.0,
         [0.1316, 0.1027, 0.0252, 0.3004, 0.2345, 0.0575, 0.0751, 0.0586, 0.0144],
         [0.0303, 0.0253, 0.0103, 0.0456, 0.0411, 0.0214, 0.0229, 0.0186, 0.0066]),
    ];
    for (l, p_want, se_want) in rows {
        let f = fit(&s, &w, &FitOptions::with_lambda(lam(l))).map_err(|e| e.to_string())?;
        let d = dispersion_semiparametric(&s, &f, l).map_err(|e| e.to_string())?;
        let se = fitted_covariance(&s, &f.p_hat_model, &d, Some(&w)).map_err(|e| e.to_string())?.standard_errors;
        for r in 0..9 {
            within(&format!("p{} at {l:.3}", r + 1), f.p_hat_model[r], p_want[r], 5e-4)?;
            within(&format!("se{} at {l:.3}", r + 1), se[r], se_want[r], 5e-4)?;
        }
    }
    let p = s.pooled_proportions();
    let b = dispersion_brier(&s).map_err(|e| e.to_string())?;
    let se = fitted_covariance(&s, &p, &b, None).map_err(|e| e.to_string())?.standard_errors;
    let want = [0.0411, 0.0255, 0.0, 0.0479, 0.0479, 0.0183, 0.0210, 0.0234, 0.0210];
    for r in 0..9 {
        within(&format!("no-model se{}", r + 1), se[r], want[r], 5e-4)?;
    }
    Ok(format!("lambda 0 and 2/3 rows match; se(p1) no-model {:.4}", se[0]))
}

fn criterion_4() -> Check {
    timed(Duration::from_secs(1), || {
        let mut out = Vec::new();
        for (d, large, wh) in [
            (BundledDataset::FbiD3s1358, 0.0109, 0.0109),
            (BundledDataset::FbiVwa, 0.0133, 0.0156),
            (BundledDataset::FbiFga, 0.0090, 0.0065),
            (BundledDataset::FbiD8s1179, 0.0116, 0.0129),
        ] {
            let s = d.load();
            let a = dispersion_large_clusters(&s, &s.pooled_proportions()).map_err(|e| e.to_string())?.rho2_hat;
            let b = weir_hill(&s).map_err(|e| e.to_string())?.rho2_hat;
            within(&format!("{} large-cluster", d.name()), a, large, 5e-4)?;
            within(&format!("{} weir-hill", d.name()), b, wh, 5e-4)?;
            out.push(format!("{} {a:.4}/{b:.4}", d.name()));
        }
        Ok(out.join(", "))
    })
}

fn criterion_5() -> Check {
    timed(Duration::from_secs(30), || {
        let n = 5u64;
        let p = ProportionVector::new(vec![0.3, 0.3, 0.4]).unwrap();
        let par = OverdispersionParams::new(n, p.clone(), 0.5).unwrap();
        let theta = par.design_effect();
        let reps = 200_000;
        let mut out = Vec::new();
        for kind in DistributionKind::ALL {
            let mut stream = RandomStream::from_seed(derive_seed(2024, &[kind as u64]));
            let mut sum = [0.0; 3];
            let mut cross = [[0.0; 3]; 3];
            for _ in 0..reps {
                let t = sample(kind, &par, &mut stream).map_err(|e| e.to_string())?;
                let y = t.counts();
                for i in 0..3 {
                    sum[i] += y[i] as f64;
                    for j in 0..3 {
                        cross[i][j] += (y[i] * y[j]) as f64;
                    }
                }
            }
            let r = reps as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / r).collect();
            let np: Vec<f64> = p.iter().map(|q| n as f64 * q).collect();
            let mean_err = (0..3).map(|i| (mean[i] - np[i]).abs()).fold(0.0, f64::max)
                / np.iter().cloned().fold(f64::INFINITY, f64::min);
            let (mut diff, mut norm) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let cov = cross[i][j] / r - mean[i] * mean[j];
                    let target = theta * n as f64 * (if i == j { p[i] } else { 0.0 } - p[i] * p[j]);
                    diff += (cov - target).powi(2);
                    norm += target * target;
                }
            }
            let cov_err = (diff / norm).sqrt();
            if mean_err > 0.005 || cov_err > 0.02 {
                return Err(format!("{}: mean error {mean_err:.4}, covariance error {cov_err:.4}", kind.short_name()));
            }
            out.push(format!("{} mean {:.2}% cov {:.2}%", kind.short_name(), 100.0 * mean_err, 100.0 * cov_err));
        }
        Ok(out.join(", "))
    })
}

fn criterion_6() -> Check {
    timed(Duration::from_secs(120), || {
        let p = ProportionVector::new(vec![0.3, 0.3, 0.4]).unwrap();
        let reps = 500;
        let mut out = Vec::new();
        for kind in DistributionKind::ALL {
            let mae = |clusters: usize| -> std::result::Result<f64, String> {
                let mut total = 0.0;
                for rep in 0..reps {
                    let seed = derive_seed(606, &[kind as u64, clusters as u64, rep as u64]);
                    let mut stream = RandomStream::from_seed(seed);
                    let s = sample_clustered_dataset(&[(5, clusters)], &p, 0.5, kind, &mut stream)
                        .map_err(|e| e.to_string())?;
                    total += (dispersion_brier(&s).map_err(|e| e.to_string())?.rho2_hat - 0.5).abs();
                }
                Ok(total / reps as f64)
            };
            let (small, large) = (mae(20)?, mae(200)?);
            if large >= small {
                return Err(format!("{}: MAE at N=200 {large:.4} not below N=20 {small:.4}", kind.short_name()));
            }
            out.push(format!("{} {small:.4}->{large:.4}", kind.short_name()));
        }
        Ok(out.join(", "))
    })
}

fn rmse_of(report: &overdisp::simulation::SimulationReport, distribution: DistributionKind, estimator: EstimatorKind) -> f64 {
    report
        .cells
        .iter()
        .find(|c| c.distribution == distribution && c.estimator == estimator)
        .map(|c| c.rmse)
        .unwrap_or(f64::NAN)
}

fn criterion_7() -> Check {
    timed(Duration::from_secs(600), || {
        let semi = EstimatorKind::Semiparametric { lambda: 2.0 / 3.0 };
        let mut housing = StudyConfig::housing_study(2000, 7);
        housing.rho2_grid = vec![0.5];
        housing.distributions = vec![DistributionKind::DirichletMultinomial];
        housing.estimators = vec![EstimatorKind::Brier, EstimatorKind::Improved, semi];
        let r = run_study_with(&housing, Execution::Parallel).map_err(|e| e.to_string())?;
        let dm = DistributionKind::DirichletMultinomial;
        let (b, i, s) = (
            rmse_of(&r, dm, EstimatorKind::Brier),
            rmse_of(&r, dm, EstimatorKind::Improved),
            rmse_of(&r, dm, semi),
        );
        if !(s < i && i < b) {
            return Err(format!("housing DM RMSE semiparametric {s:.4}, improved {i:.4}, brier {b:.4}"));
        }
        let mut out = vec![format!("housing DM {s:.4} < {i:.4} < {b:.4}")];

        let mut fbi = StudyConfig::fbi_study(BundledDataset::FbiD3s1358, 2000, 7).map_err(|e| e.to_string())?;
        fbi.rho2_grid = vec![0.05];
        fbi.distributions = vec![DistributionKind::DirichletMultinomial, DistributionKind::NInflated];
        let r = run_study_with(&fbi, Execution::Parallel).map_err(|e| e.to_string())?;
        for d in fbi.distributions.clone() {
            let (lc, wh) = (rmse_of(&r, d, EstimatorKind::LargeCluster), rmse_of(&r, d, EstimatorKind::WeirHill));
            if lc.is_nan() || lc >= wh {
                return Err(format!("fbi {}: large-cluster {lc:.5} vs weir-hill {wh:.5}", d.short_name()));
            }
            out.push(format!("fbi {} {lc:.5} < {wh:.5}", d.short_name()));
        }
        Ok(out.join(", "))
    })
}

/// `Σ_ℓ (Y − n q̄)ᵀ (1/n) D_q⁻¹ (Y − n q̄)` over the cells where `q > 0`.
fn quadratic_form_x2(group: &ClusterGroup, denominator: &ProportionVector) -> f64 {
    let n = group.cluster_size() as f64;
    let center = group.proportions();
    let m = group.num_cells();
    let inv = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        denominator.iter().map(|&q| if q > 0.0 { 1.0 / q } else { 0.0 }),
    ));
    group
        .tables()
        .iter()
        .map(|t| {
            let dev = DVector::from_iterator(m, t.counts().iter().zip(center.iter()).map(|(&y, &c)| y as f64 - n * c));
            (dev.transpose() * &inv * &dev)[(0, 0)] / n
        })
        .sum()
}

fn criterion_8() -> Check {
    timed(Duration::from_secs(10), || {
        let s = BundledDataset::Housing.load();
        let w = independence_design(3, 3).unwrap();
        let p_hat = s.pooled_proportions();
        let theta = [0.3, -0.2, 0.5, 0.1];
        let mut worst_grad: f64 = 0.0;
        let mut worst_hess: f64 = 0.0;
        for l in [-0.5, 0.0, 2.0 / 3.0, 1.0, 2.0] {
            let lambda = lam(l);
            let d = |t: &[f64]| -> f64 {
                let p = probabilities(&w, &ParameterVector::new(t.to_vec()).unwrap()).unwrap();
                power_divergence(&p_hat, &p, lambda).unwrap()
            };
            let grad = |t: &[f64]| -> DVector<f64> {
                let p = probabilities(&w, &ParameterVector::new(t.to_vec()).unwrap()).unwrap();
                estimating_residual(&w, &p_hat, &p, lambda).unwrap() / -(1.0 + l)
            };
            let p = probabilities(&w, &ParameterVector::new(theta.to_vec()).unwrap()).unwrap();
            let g = grad(&theta);
            let h = hessian(&w, &p_hat, &p, lambda).unwrap();
            let step = 1e-5;
            let mut fd_g = DVector::zeros(4);
            let mut fd_h = DMatrix::zeros(4, 4);
            for k in 0..4 {
                let mut up = theta;
                let mut down = theta;
                up[k] += step;
                down[k] -= step;
                fd_g[k] = (d(&up) - d(&down)) / (2.0 * step);
                fd_h.set_column(k, &((grad(&up) - grad(&down)) / (2.0 * step)));
            }
            worst_grad = worst_grad.max((&fd_g - &g).amax() / g.amax());
            worst_hess = worst_hess.max((&fd_h - &h).amax() / h.amax());
        }
        if worst_grad > 1e-6 || worst_hess > 1e-4 {
            return Err(format!("finite differences: gradient {worst_grad:.2e}, hessian {worst_hess:.2e}"));
        }

        let mut worst_x2: f64 = 0.0;
        let f = fit(&s, &w, &FitOptions::default()).map_err(|e| e.to_string())?;
        let mut samples: Vec<ClusteredSample> = vec![s.clone()];
        let mut stream = RandomStream::from_seed(8);
        let q = ProportionVector::new(vec![0.1, 0.2, 0.3, 0.15, 0.25]).unwrap();
        for n in [3u64, 8, 20] {
            samples.push(
                sample_clustered_dataset(&[(n, 12)], &q, 0.3, DistributionKind::DirichletMultinomial, &mut stream)
                    .unwrap(),
            );
        }
        for sample in &samples {
            let pooled = sample.pooled_proportions();
            for g in sample.groups() {
                let mut denominators = vec![g.proportions(), pooled.clone()];
                if sample.num_cells() == 9 {
                    denominators.push(f.p_hat_model.clone());
                }
                for den in denominators {
                    let a = brier_x2(g, &den).map_err(|e| e.to_string())?;
                    let b = quadratic_form_x2(g, &den);
                    worst_x2 = worst_x2.max((a - b).abs() / a.abs().max(1.0));
                }
            }
        }
        if worst_x2 > 1e-10 {
            return Err(format!("X2 forms differ by {worst_x2:.2e}"));
        }

        let mut worst_limit: f64 = 0.0;
        let p = probabilities(&w, &ParameterVector::new(theta.to_vec()).unwrap()).unwrap();
        let at = |l: f64| -> (f64, DVector<f64>, DMatrix<f64>) {
            (
                power_divergence(&p_hat, &p, lam(l)).unwrap(),
                estimating_residual(&w, &p_hat, &p, lam(l)).unwrap(),
                hessian(&w, &p_hat, &p, lam(l)).unwrap(),
            )
        };
        let (d0, r0, h0) = at(0.0);
        for l in [1e-6, -1e-6] {
            let (d, r, h) = at(l);
            worst_limit = worst_limit
                .max((d - d0).abs())
                .max((r - &r0).amax())
                .max((h - &h0).amax());
        }
        let interior = ProportionVector::normalized(p_hat.iter().map(|x| x + 0.01).collect()).unwrap();
        let reverse = power_divergence(&interior, &p, lam(-1.0)).unwrap();
        for l in [-1.0 + 1e-6, -1.0 - 1e-6] {
            worst_limit = worst_limit.max((power_divergence(&interior, &p, lam(l)).unwrap() - reverse).abs());
        }
        if worst_limit > 1e-5 {
            return Err(format!("lambda limits differ by {worst_limit:.2e}"));
        }
        Ok(format!(
            "gradient {worst_grad:.1e}, hessian {worst_hess:.1e}, X2 {worst_x2:.1e}, limits {worst_limit:.1e}"
        ))
    })
}

fn criterion_9() -> Check {
    let mut config = StudyConfig::housing_study(25, 31);
    config.rho2_grid = vec![0.2, 0.5];
    let csv = |execution: Execution| -> std::result::Result<Vec<u8>, String> {
        let report = run_study_with(&config, execution).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_summary_csv(&report, &mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let runs = [csv(Execution::Serial)?, csv(Execution::Serial)?, csv(Execution::Parallel)?, csv(Execution::Parallel)?];
    if runs.iter().any(|r| r != &runs[0]) {
        return Err("CSV output differs between runs".into());
    }
    Ok(format!("{} identical bytes across 2 serial and 2 parallel runs", runs[0].len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("housing Brier and improved rho2", criterion_1),
        ("housing semiparametric rho2", criterion_2),
        ("housing fitted probabilities and standard errors", criterion_3),
        ("FBI large-cluster and Weir-Hill rho2", criterion_4),
        ("sampler moments", criterion_5),
        ("Brier estimator consistency", criterion_6),
        ("simulation RMSE orderings", criterion_7),
        ("numerical analysis", criterion_8),
        ("simulation reproducibility", criterion_9),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

