//! Design-effect and intracluster-correlation estimators, and the covariance
//! of estimated cell probabilities.
//!
//! The chi-square family works group by group. For a group of `N_g` clusters
//! of size `n_g`,
//!
//! ```text
//! X²_g = n_g Σ_r (1/q_r) Σ_ℓ (p̂_r^(ℓ) − p̂_r^(g))²,   ϑ_g = X²_g / ((N_g − 1)(M − 1))
//! ```
//!
//! where the denominator `q` is the group proportions (Brier), the pooled
//! proportions (improved) or fitted model probabilities (semiparametric).
//! Groups are combined as `ϑ = Σ w_g ϑ_g` and `ρ² = (ϑ − 1)/(n − 1)` for an
//! effective cluster size `n`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ClusterGroup, ClusteredSample, ProportionVector};
use crate::error::{invalid, Error, Result};
use crate::estimation::FitResult;
use crate::loglinear::{multinomial_covariance, DesignMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DispersionVariant {
    Brier,
    Improved,
    Semiparametric { lambda: f64 },
    LargeCluster,
    LargeClusterModel { lambda: f64 },
    WeirHill,
}

impl DispersionVariant {
    /// Short name, with the power index for model-based variants.
    pub fn label(&self) -> String {
        match self {
            Self::Brier => "brier".into(),
            Self::Improved => "improved".into(),
            Self::Semiparametric { lambda } => format!("semiparametric({lambda})"),
            Self::LargeCluster => "large_cluster".into(),
            Self::LargeClusterModel { lambda } => format!("large_cluster_model({lambda})"),
            Self::WeirHill => "weir_hill".into(),
        }
    }
}

/// Cluster size used to turn a design effect into `ρ²` when sizes differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeScale {
    /// `n̄ = Σ_g (N_g/N) n_g`, the mean cluster size.
    #[default]
    MeanSize,
    /// `n* = Σ_g w_g n_g`, the unit-weighted cluster size.
    WeightedSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionEstimate {
    /// Design effect `ϑ`.
    pub theta_hat_n: f64,
    /// `ρ²` clamped to `[0, 1]`.
    pub rho2_hat: f64,
    pub raw_rho2: f64,
    pub variant: DispersionVariant,
    pub truncated: bool,
    /// Cluster size `n` in `ϑ = 1 + raw_rho2 (n − 1)`.
    pub effective_size: f64,
}

impl DispersionEstimate {
    fn from_theta(theta: f64, size: f64, variant: DispersionVariant) -> Result<Self> {
        if size <= 1.0 {
            return Err(Error::Undefined(
                "every cluster has a single unit, so rho^2 is not identified".into(),
            ));
        }
        Self::from_rho2(theta, (theta - 1.0) / (size - 1.0), size, variant)
    }

    fn from_rho2(theta: f64, raw: f64, size: f64, variant: DispersionVariant) -> Result<Self> {
        if !raw.is_finite() || !theta.is_finite() {
            return Err(Error::Undefined(format!("{} gave a non-finite value", variant.label())));
        }
        let rho2 = raw.clamp(0.0, 1.0);
        Ok(Self {
            theta_hat_n: theta,
            rho2_hat: rho2,
            raw_rho2: raw,
            variant,
            truncated: rho2 != raw,
            effective_size: size,
        })
    }
}

/// `Σ_r (1/q_r) Σ_ℓ (x_r^(ℓ) − c_r)²` over proportion vectors `x^(ℓ)`.
fn scaled_spread<'a>(
    rows: impl Iterator<Item = &'a [f64]> + Clone,
    center: &[f64],
    denominator: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for (r, (&c, &q)) in center.iter().zip(denominator).enumerate() {
        let ss: f64 = rows.clone().map(|x| (x[r] - c).powi(2)).sum();
        if ss == 0.0 {
            continue;
        }
        if q.is_nan() || q <= 0.0 {
            return Err(Error::Undefined(format!(
                "cell {} has zero denominator but varies between clusters",
                r + 1
            )));
        }
        total += ss / q;
    }
    Ok(total)
}

fn check_cells(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { expected, found });
    }
    Ok(())
}

/// Inter-cluster chi-square of one group around its own proportions.
pub fn brier_x2(group: &ClusterGroup, denominator: &ProportionVector) -> Result<f64> {
    check_cells(group.num_cells(), denominator.len())?;
    let props: Vec<ProportionVector> = group.tables().iter().map(|t| t.proportions()).collect();
    let center = group.proportions();
    let spread = scaled_spread(
        props.iter().map(ProportionVector::as_slice),
        center.as_slice(),
        denominator.as_slice(),
    )?;
    Ok(group.cluster_size() as f64 * spread)
}

/// Aggregates per-group design effects; groups with a single cluster carry
/// no within-group information and are left out, with weights renormalized.
fn chi_square_family(
    sample: &ClusteredSample,
    denominator: impl Fn(&ClusterGroup) -> ProportionVector,
    variant: DispersionVariant,
    scale: SizeScale,
) -> Result<DispersionEstimate> {
    let m = sample.num_cells() as f64;
    let used: Vec<&ClusterGroup> = sample.groups().iter().filter(|g| g.num_clusters() >= 2).collect();
    if used.is_empty() {
        return Err(Error::Undefined(
            "every group has a single cluster; use the large-cluster estimator".into(),
        ));
    }
    let units: f64 = used.iter().map(|g| g.total_count() as f64).sum();
    let clusters: f64 = used.iter().map(|g| g.num_clusters() as f64).sum();
    let mut theta = 0.0;
    let (mut n_star, mut n_bar) = (0.0, 0.0);
    for g in used {
        let x2 = brier_x2(g, &denominator(g))?;
        let w = g.total_count() as f64 / units;
        theta += w * x2 / ((g.num_clusters() as f64 - 1.0) * (m - 1.0));
        n_star += w * g.cluster_size() as f64;
        n_bar += g.num_clusters() as f64 / clusters * g.cluster_size() as f64;
    }
    let size = match scale {
        SizeScale::MeanSize => n_bar,
        SizeScale::WeightedSize => n_star,
    };
    DispersionEstimate::from_theta(theta, size, variant)
}

/// Brier's estimator: each group's chi-square uses its own proportions.
pub fn dispersion_brier(sample: &ClusteredSample) -> Result<DispersionEstimate> {
    dispersion_brier_scaled(sample, SizeScale::default())
}

pub fn dispersion_brier_scaled(sample: &ClusteredSample, scale: SizeScale) -> Result<DispersionEstimate> {
    chi_square_family(sample, ClusterGroup::proportions, DispersionVariant::Brier, scale)
}

/// Chi-square denominators taken from the pooled proportions of all groups.
pub fn dispersion_improved(sample: &ClusteredSample) -> Result<DispersionEstimate> {
    dispersion_improved_scaled(sample, SizeScale::default())
}

pub fn dispersion_improved_scaled(
    sample: &ClusteredSample,
    scale: SizeScale,
) -> Result<DispersionEstimate> {
    let pooled = sample.pooled_proportions();
    chi_square_family(sample, |_| pooled.clone(), DispersionVariant::Improved, scale)
}

/// Chi-square denominators taken from a fitted log-linear model.
pub fn dispersion_semiparametric(
    sample: &ClusteredSample,
    fit: &FitResult,
    lambda: f64,
) -> Result<DispersionEstimate> {
    dispersion_semiparametric_scaled(sample, fit, lambda, SizeScale::default())
}

pub fn dispersion_semiparametric_scaled(
    sample: &ClusteredSample,
    fit: &FitResult,
    lambda: f64,
    scale: SizeScale,
) -> Result<DispersionEstimate> {
    if !fit.converged {
        return Err(Error::NotConverged {
            iterations: fit.iterations,
            residual: fit.final_residual_norm,
        });
    }
    check_cells(sample.num_cells(), fit.p_hat_model.len())?;
    chi_square_family(
        sample,
        |_| fit.p_hat_model.clone(),
        DispersionVariant::Semiparametric { lambda },
        scale,
    )
}

/// Estimator for few, large clusters: every cluster is treated on its own,
/// centred at the unweighted mean of the cluster proportions.
pub fn dispersion_large_clusters(
    sample: &ClusteredSample,
    denominator: &ProportionVector,
) -> Result<DispersionEstimate> {
    large_clusters(sample, denominator, DispersionVariant::LargeCluster)
}

/// [`dispersion_large_clusters`] with fitted model probabilities as denominator.
pub fn dispersion_large_clusters_model(
    sample: &ClusteredSample,
    fit: &FitResult,
    lambda: f64,
) -> Result<DispersionEstimate> {
    if !fit.converged {
        return Err(Error::NotConverged {
            iterations: fit.iterations,
            residual: fit.final_residual_norm,
        });
    }
    large_clusters(
        sample,
        &fit.p_hat_model,
        DispersionVariant::LargeClusterModel { lambda },
    )
}

fn large_clusters(
    sample: &ClusteredSample,
    denominator: &ProportionVector,
    variant: DispersionVariant,
) -> Result<DispersionEstimate> {
    check_cells(sample.num_cells(), denominator.len())?;
    let n = sample.num_clusters();
    if n < 2 {
        return invalid("the large-cluster estimator needs at least 2 clusters");
    }
    let m = sample.num_cells();
    let props: Vec<ProportionVector> = sample.clusters().map(|t| t.proportions()).collect();
    let mut mean = vec![0.0; m];
    for p in &props {
        for (acc, x) in mean.iter_mut().zip(p.iter()) {
            *acc += x / n as f64;
        }
    }
    let spread = scaled_spread(
        props.iter().map(ProportionVector::as_slice),
        &mean,
        denominator.as_slice(),
    )?;
    let raw = spread / ((n as f64 - 1.0) * (m as f64 - 1.0));
    let size = sample.effective_cluster_sizes().n_star;
    DispersionEstimate::from_rho2(1.0 + raw * (size - 1.0), raw, size, variant)
}

/// Weir–Hill method-of-moments estimator built from between-cluster and
/// within-cluster mean squares.
pub fn weir_hill(sample: &ClusteredSample) -> Result<DispersionEstimate> {
    let n = sample.num_clusters() as f64;
    let total = sample.total_count() as f64;
    if n < 2.0 {
        return invalid("the Weir-Hill estimator needs at least 2 clusters");
    }
    if total <= n {
        return Err(Error::Undefined("Weir-Hill needs some cluster with more than one unit".into()));
    }
    let pooled = sample.pooled_proportions();
    let sum_sq: f64 = sample.clusters().map(|t| (t.cluster_size() as f64).powi(2)).sum();
    let eta = (total * total - sum_sq) / ((n - 1.0) * total);

    let (mut num, mut den) = (0.0, 0.0);
    for (r, &p) in pooled.iter().enumerate() {
        let (mut msp, mut msg) = (0.0, 0.0);
        for t in sample.clusters() {
            let size = t.cluster_size() as f64;
            let x = t.counts()[r] as f64 / size;
            msp += size * (x - p).powi(2);
            msg += size * x * (1.0 - x);
        }
        msp /= n - 1.0;
        msg /= total - n;
        num += msp - msg;
        den += msp + (eta - 1.0) * msg;
    }
    if den == 0.0 {
        return Err(Error::Undefined("Weir-Hill denominator vanishes".into()));
    }
    let raw = num / den;
    let size = sample.effective_cluster_sizes().n_star;
    DispersionEstimate::from_rho2(1.0 + raw * (size - 1.0), raw, size, DispersionVariant::WeirHill)
}

/// Covariance matrix of estimated cell probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedCovariance {
    pub matrix: DMatrix<f64>,
    pub standard_errors: Vec<f64>,
}

impl FittedCovariance {
    fn new(matrix: DMatrix<f64>) -> Self {
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let standard_errors = matrix.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
        Self {
            matrix,
            standard_errors,
        }
    }

    /// Normal intervals `p_r ∓ z_{α/2}·se_r`.
    pub fn confidence_intervals(&self, p: &ProportionVector, alpha: f64) -> Result<Vec<(f64, f64)>> {
        check_cells(self.standard_errors.len(), p.len())?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
        }
        let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
        Ok(p.iter()
            .zip(&self.standard_errors)
            .map(|(&pr, se)| (pr - z * se, pr + z * se))
            .collect())
    }
}

/// Covariance of `p` scaled by the estimated dispersion.
///
/// * Brier and improved estimates, no model: `(ϑ/(N n̄)) Σ_p`.
/// * Semiparametric estimates with their model `W`:
///   `(ϑ/(N n̄)) Σ W (WᵀΣW)⁻¹ WᵀΣ`, with `Σ = Σ_p`.
/// * Large-cluster and Weir–Hill estimates, no model: `(ρ²/N²) Σ_p`.
pub fn fitted_covariance(
    sample: &ClusteredSample,
    p: &ProportionVector,
    dispersion: &DispersionEstimate,
    model: Option<&DesignMatrix>,
) -> Result<FittedCovariance> {
    check_cells(sample.num_cells(), p.len())?;
    let sigma = multinomial_covariance(p);
    let units = sample.total_count() as f64;
    let n = sample.num_clusters() as f64;
    use DispersionVariant as V;
    let matrix = match (dispersion.variant, model) {
        (V::Brier | V::Improved, None) => sigma * (dispersion.theta_hat_n / units),
        (V::Semiparametric { .. }, Some(w)) => {
            check_cells(w.num_cells(), p.len())?;
            let sigma_w = &sigma * w.matrix();
            let info = w.matrix().transpose() * &sigma_w;
            let inv = info
                .cholesky()
                .ok_or(Error::Singular("model information matrix"))?
                .inverse();
            &sigma_w * inv * sigma_w.transpose() * (dispersion.theta_hat_n / units)
        }
        (V::LargeCluster | V::LargeClusterModel { .. } | V::WeirHill, None) => {
            sigma * (dispersion.rho2_hat / (n * n))
        }
        (variant, model) => {
            return invalid(format!(
                "{} estimates cannot be paired {} a design matrix",
                variant.label(),
                if model.is_some() { "with" } else { "without" }
            ))
        }
    };
    Ok(FittedCovariance::new(matrix))
}

/// Plain multinomial covariance `(1/Σn_ℓ) Σ_p`, ignoring overdispersion.
pub fn multinomial_covariance_scaled(
    sample: &ClusteredSample,
    p: &ProportionVector,
) -> Result<FittedCovariance> {
    check_cells(sample.num_cells(), p.len())?;
    Ok(FittedCovariance::new(
        multinomial_covariance(p) / sample.total_count() as f64,
    ))
}
