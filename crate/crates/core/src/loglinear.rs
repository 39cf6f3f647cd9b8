//! Log-linear models `p(θ) = exp(Wθ) / 1ᵀexp(Wθ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ProportionVector;
use crate::error::{invalid, Error, Result};

/// Relative singular-value cutoff used by the rank checks.
pub const RANK_TOL: f64 = 1e-10;

/// A full column rank `M × M₀` design matrix whose columns are linearly
/// independent of the all-ones vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix(DMatrix<f64>);

impl DesignMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        let (m, m0) = w.shape();
        if m0 == 0 || m0 >= m {
            return invalid(format!(
                "a {m}x{m0} design needs 1 <= columns < rows"
            ));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return invalid("design matrix has non-finite entries");
        }
        if numerical_rank(&w) != m0 {
            return invalid("design matrix is not of full column rank");
        }
        let mut aug = DMatrix::from_element(m, m0 + 1, 1.0);
        aug.view_mut((0, 1), (m, m0)).copy_from(&w);
        if numerical_rank(&aug) != m0 + 1 {
            return invalid("design columns are not independent of the ones vector");
        }
        Ok(Self(w))
    }

    /// Builds a design from row-major rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let m0 = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != m0) {
            return Err(Error::Dimension {
                expected: m0,
                found: r.len(),
            });
        }
        Self::new(DMatrix::from_fn(m, m0, |i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Number of cells `M`.
    pub fn num_cells(&self) -> usize {
        self.0.nrows()
    }

    /// Number of free parameters `M₀`.
    pub fn num_params(&self) -> usize {
        self.0.ncols()
    }

    /// A copy with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.0 * c)
    }
}

fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

/// Model parameters `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return invalid("parameter vector has non-finite entries");
        }
        Ok(Self(theta))
    }

    pub fn zeros(m0: usize) -> Self {
        Self(vec![0.0; m0])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub(crate) fn from_dvector(v: &DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(t: ParameterVector) -> Self {
        t.0
    }
}

/// Evaluates `p(θ)`, subtracting `max(Wθ)` before exponentiating.
pub fn probabilities(w: &DesignMatrix, theta: &ParameterVector) -> Result<ProportionVector> {
    if theta.len() != w.num_params() {
        return Err(Error::Dimension {
            expected: w.num_params(),
            found: theta.len(),
        });
    }
    if theta.0.iter().any(|x| !x.is_finite()) {
        return invalid("parameter vector has non-finite entries");
    }
    Ok(probabilities_unchecked(w, &theta.to_dvector()))
}

pub(crate) fn probabilities_unchecked(w: &DesignMatrix, theta: &DVector<f64>) -> ProportionVector {
    let eta = &w.0 * theta;
    let max = eta.max();
    let e: Vec<f64> = eta.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    ProportionVector::from_raw(e.into_iter().map(|x| x / total).collect())
}

/// Independence model for an `I × J` table with sum-to-zero effect coding.
///
/// Cells are in lexicographic order `(1,1), (1,2), …, (I,J)`. The first
/// `I−1` columns carry the row effects and the last `J−1` the column effects;
/// the last level of each factor is coded `−1` in every column of its factor.
pub fn independence_design(rows: usize, cols: usize) -> Result<DesignMatrix> {
    if rows < 2 || cols < 2 {
        return invalid(format!("independence design needs I, J >= 2, got {rows}x{cols}"));
    }
    let m = rows * cols;
    let m0 = (rows - 1) + (cols - 1);
    let effect = |level: usize, col: usize, levels: usize| -> f64 {
        if level == levels - 1 {
            -1.0
        } else if level == col {
            1.0
        } else {
            0.0
        }
    };
    let w = DMatrix::from_fn(m, m0, |cell, k| {
        let (i, j) = (cell / cols, cell % cols);
        if k < rows - 1 {
            effect(i, k, rows)
        } else {
            effect(j, k - (rows - 1), cols)
        }
    });
    DesignMatrix::new(w)
}

/// Saturated model with `M − 1` contrast columns.
pub fn saturated_design(m: usize) -> Result<DesignMatrix> {
    if m < 2 {
        return invalid(format!("saturated design needs M >= 2, got {m}"));
    }
    let w = DMatrix::from_fn(m, m - 1, |r, c| {
        if r == m - 1 {
            -1.0
        } else if r == c {
            1.0
        } else {
            0.0
        }
    });
    DesignMatrix::new(w)
}

/// `Σ_p = D_p − p pᵀ`.
pub fn multinomial_covariance(p: &ProportionVector) -> DMatrix<f64> {
    let v = DVector::from_column_slice(p.as_slice());
    DMatrix::from_diagonal(&v) - &v * v.transpose()
}

/// Serializable description of a design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DesignSpec {
    Independence { rows: usize, cols: usize },
    Saturated { cells: usize },
    /// Explicit matrix, one inner vector per cell.
    Matrix { rows: Vec<Vec<f64>> },
}

impl DesignSpec {
    pub fn build(&self) -> Result<DesignMatrix> {
        match self {
            Self::Independence { rows, cols } => independence_design(*rows, *cols),
            Self::Saturated { cells } => saturated_design(*cells),
            Self::Matrix { rows } => DesignMatrix::from_rows(rows),
        }
    }
}
