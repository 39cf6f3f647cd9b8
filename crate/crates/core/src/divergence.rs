//! Power-divergence family `φ_λ` and the estimating-equation ingredients
//! of the quasi minimum power-divergence estimator.
//!
//! For `λ ∉ {−1, 0}`
//!
//! ```text
//! φ_λ(x) = (x^(λ+1) − x − λ(x − 1)) / (λ(1 + λ))
//! ```
//!
//! and the two excluded values are the limits: `λ = 0` gives
//! `x log x − x + 1` (Kullback-Leibler) and `λ = −1` gives `−log x + x − 1`.

use nalgebra::{DMatrix, DVector};

use crate::data::ProportionVector;
use crate::error::{invalid, Error, Result};
use crate::loglinear::{multinomial_covariance, DesignMatrix};

/// Distance from `0` or `−1` below which `λ` is routed to a limit branch.
pub const LIMIT_EPS: f64 = 1e-9;

/// The power index `λ` of the family.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PowerIndex(f64);

impl PowerIndex {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return invalid(format!("lambda must be finite, got {lambda}"));
        }
        Ok(Self(lambda))
    }

    /// Kullback-Leibler member, `λ = 0`.
    pub const KULLBACK_LEIBLER: PowerIndex = PowerIndex(0.0);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_kullback_leibler(self) -> bool {
        self.0.abs() < LIMIT_EPS
    }

    pub fn is_reverse_kullback_leibler(self) -> bool {
        (self.0 + 1.0).abs() < LIMIT_EPS
    }

    fn require_estimable(self) -> Result<()> {
        if self.is_reverse_kullback_leibler() {
            return Err(Error::Unsupported(
                "lambda = -1 has no estimating equations".into(),
            ));
        }
        Ok(())
    }
}

impl TryFrom<f64> for PowerIndex {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PowerIndex> for f64 {
    fn from(l: PowerIndex) -> f64 {
        l.0
    }
}

/// `φ_λ(x)` for `x ≥ 0`, with `φ_λ(0)` taken as the limit from the right.
pub fn phi(lambda: PowerIndex, x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return invalid(format!("phi is defined for x >= 0, got {x}"));
    }
    let l = lambda.0;
    let value = if lambda.is_kullback_leibler() {
        if x == 0.0 {
            1.0
        } else {
            x * x.ln() - x + 1.0
        }
    } else if lambda.is_reverse_kullback_leibler() {
        if x == 0.0 {
            f64::INFINITY
        } else {
            -x.ln() + x - 1.0
        }
    } else if x == 0.0 {
        if l + 1.0 > 0.0 {
            1.0 / (1.0 + l)
        } else {
            f64::INFINITY
        }
    } else {
        // x^(λ+1) − x = x·expm1(λ ln x) keeps precision for λ near 0
        (x * (l * x.ln()).exp_m1() - l * (x - 1.0)) / (l * (1.0 + l))
    };
    Ok(value)
}

fn check_pair(p_hat: &ProportionVector, p: &ProportionVector) -> Result<()> {
    if p_hat.len() != p.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            found: p_hat.len(),
        });
    }
    if !p.is_strictly_positive() {
        return invalid("model probabilities must be strictly positive");
    }
    Ok(())
}

/// `p̂_r^(λ+1) / p_r^λ`, with the `p̂_r = 0` limit.
fn tilted(p_hat: f64, p: f64, lambda: f64) -> f64 {
    if lambda.abs() < LIMIT_EPS {
        return p_hat;
    }
    if p_hat == 0.0 {
        return if lambda + 1.0 > 0.0 { 0.0 } else { f64::INFINITY };
    }
    p_hat * (p_hat / p).powf(lambda)
}

/// `d_λ(p̂, p) = Σ_r p_r φ_λ(p̂_r / p_r)`.
///
/// `λ = 0` is the Kullback-Leibler divergence `d(p̂, p)`, `λ = −1` the
/// reversed one `d(p, p̂)`.
pub fn power_divergence(
    p_hat: &ProportionVector,
    p: &ProportionVector,
    lambda: PowerIndex,
) -> Result<f64> {
    check_pair(p_hat, p)?;
    let mut total = 0.0;
    for (&q, &pr) in p_hat.iter().zip(p.iter()) {
        total += pr * phi(lambda, q / pr)?;
    }
    Ok(total)
}

/// `Ψ_r = (p̂_r^(λ+1)/p_r^λ − p_r) / (1 + λ)`; equals `p̂ − p` at `λ = 0`.
pub fn psi_vector(
    p_hat: &ProportionVector,
    p: &ProportionVector,
    lambda: PowerIndex,
) -> Result<Vec<f64>> {
    check_pair(p_hat, p)?;
    lambda.require_estimable()?;
    if lambda.is_kullback_leibler() {
        return Ok(p_hat.iter().zip(p.iter()).map(|(q, r)| q - r).collect());
    }
    let l = lambda.0;
    Ok(p_hat
        .iter()
        .zip(p.iter())
        .map(|(&q, &r)| (tilted(q, r, l) - r) / (1.0 + l))
        .collect())
}

/// Left-hand side of the estimating equations,
/// `Wᵀ (I − p1ᵀ) D_p^(−λ) (p̂^(λ+1) − p^(λ+1))`.
///
/// Along the model, this equals `−(1 + λ) ∇_θ d_λ(p̂, p(θ))`.
pub fn estimating_residual(
    w: &DesignMatrix,
    p_hat: &ProportionVector,
    p: &ProportionVector,
    lambda: PowerIndex,
) -> Result<DVector<f64>> {
    check_model(w, p)?;
    check_pair(p_hat, p)?;
    lambda.require_estimable()?;
    let l = lambda.0;
    let v = DVector::from_iterator(
        p.len(),
        p_hat.iter().zip(p.iter()).map(|(&q, &r)| tilted(q, r, l) - r),
    );
    let total = v.sum();
    let centered = DVector::from_iterator(
        p.len(),
        v.iter().zip(p.iter()).map(|(vr, pr)| vr - pr * total),
    );
    Ok(w.matrix().transpose() * centered)
}

/// Hessian of `θ ↦ d_λ(p̂, p(θ))`:
///
/// ```text
/// (s·WᵀΣW + λ·WᵀΣ D_p̂^(λ+1) D_p^(−(λ+2)) ΣW) / (1 + λ),   s = Σ_r p̂_r^(λ+1)/p_r^λ
/// ```
///
/// with `Σ = Σ_p(θ)`. At `p̂ = p` and at `λ = 0` the factor `s` is one and this
/// is the same matrix as [`scoring_matrix`].
pub fn hessian(
    w: &DesignMatrix,
    p_hat: &ProportionVector,
    p: &ProportionVector,
    lambda: PowerIndex,
) -> Result<DMatrix<f64>> {
    let s = if lambda.is_kullback_leibler() {
        1.0
    } else {
        check_pair(p_hat, p)?;
        p_hat
            .iter()
            .zip(p.iter())
            .map(|(&q, &r)| tilted(q, r, lambda.0))
            .sum()
    };
    curvature(w, p_hat, p, lambda, s)
}

/// The matrix `G_λ = (WᵀΣW + λ·WᵀΣ D_p̂^(λ+1) D_p^(−(λ+2)) ΣW) / (1 + λ)`,
/// i.e. [`hessian`] without the `s` factor on the first term.
pub fn scoring_matrix(
    w: &DesignMatrix,
    p_hat: &ProportionVector,
    p: &ProportionVector,
    lambda: PowerIndex,
) -> Result<DMatrix<f64>> {
    curvature(w, p_hat, p, lambda, 1.0)
}

fn curvature(
    w: &DesignMatrix,
    p_hat: &ProportionVector,
    p: &ProportionVector,
    lambda: PowerIndex,
    s: f64,
) -> Result<DMatrix<f64>> {
    check_model(w, p)?;
    check_pair(p_hat, p)?;
    lambda.require_estimable()?;
    let sigma_w = multinomial_covariance(p) * w.matrix();
    let base = w.matrix().transpose() * &sigma_w;
    if lambda.is_kullback_leibler() {
        return Ok(base);
    }
    let l = lambda.0;
    let weights = DVector::from_iterator(
        p.len(),
        p_hat
            .iter()
            .zip(p.iter())
            .map(|(&q, &r)| tilted(q, r, l) / (r * r)),
    );
    let weighted = DMatrix::from_diagonal(&weights) * &sigma_w;
    let tilt = sigma_w.transpose() * weighted;
    let h = (base * s + tilt * l) / (1.0 + l);
    // symmetrize away rounding
    Ok((&h + h.transpose()) * 0.5)
}

fn check_model(w: &DesignMatrix, p: &ProportionVector) -> Result<()> {
    if w.num_cells() != p.len() {
        return Err(Error::Dimension {
            expected: w.num_cells(),
            found: p.len(),
        });
    }
    Ok(())
}
