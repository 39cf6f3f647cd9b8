//! Quasi minimum power-divergence estimation of log-linear parameters.
//!
//! The estimator minimizes `θ ↦ d_λ(p̂, p(θ))` for the pooled proportions
//! `p̂`. The solver starts from a weighted least-squares fit of `log p̂`, runs
//! damped Newton iterations on the exact Hessian and, when those stall,
//! hands the last iterate to a dogleg trust-region root-finder on the
//! estimating equations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredSample, ProportionVector};
use crate::divergence::{estimating_residual, hessian, power_divergence, PowerIndex};
use crate::error::{invalid, Error, Result};
use crate::loglinear::{probabilities_unchecked, DesignMatrix, ParameterVector};

/// Step halvings tried before a Newton step is declared a failure.
const MAX_HALVINGS: usize = 40;

/// How zero cells of `p̂` are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroCountPolicy {
    /// Replace a zero count by ½ inside the starting-value logarithm only.
    #[default]
    ReplaceHalfCount,
    /// Refuse samples with empty cells.
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda: PowerIndex,
    pub max_iterations: usize,
    /// Bound on the max-norm of the estimating residual.
    pub tolerance: f64,
    pub step_damping: bool,
    pub zero_count_policy: ZeroCountPolicy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: PowerIndex::KULLBACK_LEIBLER,
            max_iterations: 100,
            tolerance: 1e-10,
            step_damping: true,
            zero_count_policy: ZeroCountPolicy::ReplaceHalfCount,
        }
    }
}

impl FitOptions {
    pub fn with_lambda(lambda: PowerIndex) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return invalid(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_iterations == 0 {
            return invalid("max_iterations must be positive");
        }
        if self.lambda.is_reverse_kullback_leibler() {
            return Err(Error::Unsupported("estimation with lambda = -1".into()));
        }
        Ok(())
    }
}

/// Which solver produced the final iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    Newton,
    TrustRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    pub p_hat_model: ProportionVector,
    pub iterations: usize,
    pub converged: bool,
    pub final_residual_norm: f64,
    pub initial_theta: ParameterVector,
    pub solver: SolverPath,
    /// Divergence at the start and after every accepted iteration.
    pub divergence_trace: Vec<f64>,
}

/// Weighted least-squares starting value: regress `log p̂` on `(1, W)` with
/// weights `p̂` and keep the `W` block.
///
/// Zero cells are first set to a count of ½ out of `total_count`, and the
/// vector renormalized.
pub fn wls_initial(
    w: &DesignMatrix,
    p_hat: &ProportionVector,
    total_count: u64,
) -> Result<ParameterVector> {
    if w.num_cells() != p_hat.len() {
        return Err(Error::Dimension {
            expected: w.num_cells(),
            found: p_hat.len(),
        });
    }
    if total_count == 0 {
        return invalid("total count must be positive");
    }
    let floor = 0.5 / total_count as f64;
    let raw: Vec<f64> = p_hat
        .iter()
        .map(|&q| if q > 0.0 { q } else { floor })
        .collect();
    let q = ProportionVector::normalized(raw)?;

    let (m, m0) = (w.num_cells(), w.num_params());
    let mut x = DMatrix::from_element(m, m0 + 1, 1.0);
    x.view_mut((0, 1), (m, m0)).copy_from(w.matrix());
    let weights = DVector::from_column_slice(q.as_slice());
    let log_q = DVector::from_iterator(m, q.iter().map(|v| v.ln()));
    let xtd = x.transpose() * DMatrix::from_diagonal(&weights);
    let normal = &xtd * &x;
    let rhs = &xtd * log_q;
    let beta = normal
        .cholesky()
        .ok_or(Error::Singular("weighted least-squares normal equations"))?
        .solve(&rhs);
    ParameterVector::new(beta.rows(1, m0).iter().copied().collect())
}

/// Fits the log-linear model `w` to the pooled proportions of `sample`.
pub fn fit(sample: &ClusteredSample, w: &DesignMatrix, opts: &FitOptions) -> Result<FitResult> {
    fit_proportions(&sample.pooled_proportions(), sample.total_count(), w, opts)
}

/// Same as [`fit`], from pooled proportions and the number of units behind them.
pub fn fit_proportions(
    p_hat: &ProportionVector,
    total_count: u64,
    w: &DesignMatrix,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    if w.num_cells() != p_hat.len() {
        return Err(Error::Dimension {
            expected: w.num_cells(),
            found: p_hat.len(),
        });
    }
    if !p_hat.is_strictly_positive() {
        if opts.zero_count_policy == ZeroCountPolicy::Error {
            return invalid("sample has empty cells");
        }
        if opts.lambda.value() < -1.0 {
            return Err(Error::Undefined(
                "lambda < -1 with empty cells gives an infinite divergence".into(),
            ));
        }
    }

    let problem = Problem {
        w,
        p_hat,
        lambda: opts.lambda,
    };
    let initial_theta = wls_initial(w, p_hat, total_count)?;
    let mut theta = initial_theta.to_dvector();
    let mut state = problem.evaluate(&theta)?;
    let mut trace = vec![state.divergence];
    let mut iterations = 0;
    let mut newton_ok = true;

    while state.residual_norm > opts.tolerance && iterations < opts.max_iterations {
        match problem.newton_step(&theta, &state, opts.step_damping)? {
            Some((next, next_state)) => {
                theta = next;
                state = next_state;
                trace.push(state.divergence);
                iterations += 1;
            }
            None => {
                newton_ok = false;
                break;
            }
        }
    }

    let mut solver = SolverPath::Newton;
    if state.residual_norm > opts.tolerance && !newton_ok {
        solver = SolverPath::TrustRegion;
        let (t, s, used) = problem.dogleg(theta, state, opts.tolerance, opts.max_iterations)?;
        theta = t;
        state = s;
        trace.push(state.divergence);
        iterations += used;
    }

    Ok(FitResult {
        theta_hat: ParameterVector::from_dvector(&theta)?,
        converged: state.residual_norm <= opts.tolerance,
        final_residual_norm: state.residual_norm,
        p_hat_model: state.p,
        iterations,
        initial_theta,
        solver,
        divergence_trace: trace,
    })
}

struct Problem<'a> {
    w: &'a DesignMatrix,
    p_hat: &'a ProportionVector,
    lambda: PowerIndex,
}

#[derive(Debug, Clone)]
struct State {
    p: ProportionVector,
    divergence: f64,
    residual: DVector<f64>,
    residual_norm: f64,
}

impl Problem<'_> {
    fn evaluate(&self, theta: &DVector<f64>) -> Result<State> {
        let p = probabilities_unchecked(self.w, theta);
        let divergence = power_divergence(self.p_hat, &p, self.lambda)?;
        let residual = estimating_residual(self.w, self.p_hat, &p, self.lambda)?;
        let residual_norm = residual.amax();
        if !divergence.is_finite() || !residual_norm.is_finite() {
            return Err(Error::Undefined("non-finite divergence".into()));
        }
        Ok(State {
            p,
            divergence,
            residual,
            residual_norm,
        })
    }

    /// One damped Newton step; `None` when the Hessian is not positive
    /// definite or no halving decreases the divergence.
    fn newton_step(
        &self,
        theta: &DVector<f64>,
        state: &State,
        damping: bool,
    ) -> Result<Option<(DVector<f64>, State)>> {
        let h = hessian(self.w, self.p_hat, &state.p, self.lambda)?;
        let Some(chol) = h.cholesky() else {
            return Ok(None);
        };
        // ∇d = −r/(1+λ), so the Newton direction is H⁻¹r/(1+λ)
        let step = chol.solve(&state.residual) / (1.0 + self.lambda.value());
        if !step.iter().all(|x| x.is_finite()) {
            return Ok(None);
        }
        if !damping {
            return Ok(self.evaluate(&(theta + &step)).ok().map(|s| (theta + step, s)));
        }
        let slack = 8.0 * f64::EPSILON * state.divergence.abs();
        let mut t = 1.0;
        for _ in 0..MAX_HALVINGS {
            let candidate = theta + &step * t;
            if let Ok(next) = self.evaluate(&candidate) {
                if next.divergence <= state.divergence + slack {
                    return Ok(Some((candidate, next)));
                }
            }
            t *= 0.5;
        }
        Ok(None)
    }

    /// Jacobian of the residual map, `−(1+λ)·H`.
    fn jacobian(&self, state: &State) -> Result<DMatrix<f64>> {
        Ok(hessian(self.w, self.p_hat, &state.p, self.lambda)? * -(1.0 + self.lambda.value()))
    }

    /// Powell dogleg on `F(θ) = r(θ)` with merit `½‖F‖²`.
    fn dogleg(
        &self,
        mut theta: DVector<f64>,
        mut state: State,
        tolerance: f64,
        max_iterations: usize,
    ) -> Result<(DVector<f64>, State, usize)> {
        let mut radius = theta.norm().max(1.0);
        let mut used = 0;
        while state.residual_norm > tolerance && used < max_iterations {
            used += 1;
            let f = state.residual.clone();
            let jac = self.jacobian(&state)?;
            let gradient = jac.transpose() * &f;
            let jg = &jac * &gradient;
            let cauchy_len = gradient.norm_squared() / jg.norm_squared().max(f64::MIN_POSITIVE);
            let cauchy = &gradient * -cauchy_len;
            let gauss_newton = jac
                .clone()
                .svd(true, true)
                .solve(&(-&f), f64::EPSILON.sqrt())
                .ok()
                .filter(|s| s.iter().all(|x| x.is_finite()));

            let merit = 0.5 * f.norm_squared();
            loop {
                let step = dogleg_step(&cauchy, gauss_newton.as_ref(), radius);
                let predicted = merit - 0.5 * (&f + &jac * &step).norm_squared();
                let candidate = &theta + &step;
                let ratio = match self.evaluate(&candidate) {
                    Ok(next) if predicted > 0.0 => {
                        let actual = merit - 0.5 * next.residual.norm_squared();
                        let ratio = actual / predicted;
                        if ratio > 1e-4 {
                            theta = candidate;
                            state = next;
                            if ratio > 0.75 && step.norm() >= 0.99 * radius {
                                radius *= 2.0;
                            }
                            Some(ratio)
                        } else {
                            None
                        }
                    }
                    _ => None,
                };
                if ratio.is_some() {
                    break;
                }
                radius = 0.25 * step.norm().min(radius);
                if radius <= 1e-15 * (1.0 + theta.norm()) {
                    return Ok((theta, state, used));
                }
            }
        }
        Ok((theta, state, used))
    }
}

fn dogleg_step(cauchy: &DVector<f64>, gauss_newton: Option<&DVector<f64>>, radius: f64) -> DVector<f64> {
    if let Some(gn) = gauss_newton {
        if gn.norm() <= radius {
            return gn.clone();
        }
    }
    let cn = cauchy.norm();
    if cn >= radius || gauss_newton.is_none() {
        return cauchy * (radius / cn.max(f64::MIN_POSITIVE));
    }
    // walk from the Cauchy point toward the Gauss-Newton point up to the boundary
    let d = gauss_newton.unwrap() - cauchy;
    let a = d.norm_squared();
    let b = 2.0 * cauchy.dot(&d);
    let c = cn * cn - radius * radius;
    let tau = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
    cauchy + d * tau
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::data::{ClusterGroup, ClusterTable};
    use crate::loglinear::{independence_design, probabilities, saturated_design};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pv(v: &[f64]) -> ProportionVector {
        ProportionVector::new(v.to_vec()).unwrap()
    }

    fn sample(rows: &[&[u64]]) -> ClusteredSample {
        ClusteredSample::from_tables(
            rows.iter().map(|r| ClusterTable::new(r.to_vec()).unwrap()).collect(),
        )
        .unwrap()
    }

    fn opts(l: f64) -> FitOptions {
        FitOptions::with_lambda(PowerIndex::new(l).unwrap())
    }

    fn two_by_three() -> ClusteredSample {
        sample(&[
            &[3, 1, 0, 2, 1, 1],
            &[1, 2, 1, 1, 2, 1],
            &[2, 0, 1, 3, 1, 1],
            &[0, 1, 2, 1, 1, 3],
            &[1, 1, 0, 0, 1, 0],
            &[0, 0, 1, 1, 0, 1],
        ])
    }

    #[test]
    fn wls_uniform_gives_zero() {
        let w = independence_design(3, 3).unwrap();
        let theta = wls_initial(&w, &ProportionVector::uniform(9), 90).unwrap();
        assert!(theta.as_slice().iter().all(|t| t.abs() < 1e-14));
    }

    #[test]
    fn wls_saturated_round_trip() {
        let w = saturated_design(4).unwrap();
        let p = pv(&[0.1, 0.2, 0.3, 0.4]);
        let theta = wls_initial(&w, &p, 100).unwrap();
        let back = probabilities(&w, &theta).unwrap();
        for (a, b) in back.iter().zip(p.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn wls_replaces_empty_cells() {
        let w = saturated_design(3).unwrap();
        let theta = wls_initial(&w, &pv(&[0.5, 0.5, 0.0]), 10).unwrap();
        let back = probabilities(&w, &theta).unwrap();
        // counts (5, 5, ½) renormalized
        assert_relative_eq!(back[2], 0.5 / 10.5, epsilon = 1e-12);
    }

    #[test]
    fn saturated_fit_recovers_pooled_proportions() {
        let s = two_by_three();
        let w = saturated_design(6).unwrap();
        let p_hat = s.pooled_proportions();
        for l in [-0.5, 0.0, 2.0 / 3.0, 1.0, 2.0] {
            let f = fit(&s, &w, &opts(l)).unwrap();
            assert!(f.converged, "lambda {l}");
            for (a, b) in f.p_hat_model.iter().zip(p_hat.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn kullback_leibler_fit_is_the_independence_mle() {
        let s = two_by_three();
        let w = independence_design(2, 3).unwrap();
        let p_hat = s.pooled_proportions();
        let f = fit(&s, &w, &opts(0.0)).unwrap();
        assert!(f.converged);
        assert!(f.final_residual_norm <= 1e-10);
        let rows: Vec<f64> = (0..2).map(|i| (0..3).map(|j| p_hat[3 * i + j]).sum()).collect();
        let cols: Vec<f64> = (0..3).map(|j| (0..2).map(|i| p_hat[3 * i + j]).sum()).collect();
        for i in 0..2 {
            for j in 0..3 {
                assert_relative_eq!(f.p_hat_model[3 * i + j], rows[i] * cols[j], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn converged_fit_is_a_local_minimum() {
        let s = two_by_three();
        let w = independence_design(2, 3).unwrap();
        let p_hat = s.pooled_proportions();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for l in [-0.5, 0.0, 2.0 / 3.0, 2.0] {
            let o = opts(l);
            let f = fit(&s, &w, &o).unwrap();
            assert!(f.converged);
            let best = power_divergence(&p_hat, &f.p_hat_model, o.lambda).unwrap();
            for _ in 0..100 {
                let mut eps: Vec<f64> = (0..w.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
                let scale = rng.random_range(0.0..0.01) / norm;
                eps.iter_mut().for_each(|e| *e *= scale);
                let theta: Vec<f64> = f.theta_hat.as_slice().iter().zip(&eps).map(|(a, b)| a + b).collect();
                let p = probabilities(&w, &ParameterVector::new(theta).unwrap()).unwrap();
                assert!(power_divergence(&p_hat, &p, o.lambda).unwrap() >= best - 1e-15);
            }
        }
    }

    #[test]
    fn damping_keeps_the_divergence_non_increasing() {
        let s = two_by_three();
        let w = independence_design(2, 3).unwrap();
        for l in [-0.5, 0.0, 1.0, 2.0] {
            let f = fit(&s, &w, &opts(l)).unwrap();
            assert_eq!(f.solver, SolverPath::Newton);
            for pair in f.divergence_trace.windows(2) {
                assert!(pair[1] <= pair[0] * (1.0 + 1e-14), "{pair:?}");
            }
        }
    }

    #[test]
    fn fit_ignores_cluster_order_and_group_splits() {
        let s = two_by_three();
        let w = independence_design(2, 3).unwrap();
        let base = fit(&s, &w, &opts(2.0 / 3.0)).unwrap();

        let mut tables: Vec<ClusterTable> = s.clusters().cloned().collect();
        tables.reverse();
        let reversed = ClusteredSample::from_tables(tables.clone()).unwrap();
        let split = ClusteredSample::new(vec![
            ClusterGroup::new(tables[0..1].to_vec()).unwrap(),
            ClusterGroup::new(tables[1..2].to_vec()).unwrap(),
            ClusterGroup::new(tables[2..].to_vec()).unwrap(),
        ]);
        // tables[0] and tables[1] have size 3; the rest size 8
        let split = split.unwrap();
        for other in [reversed, split] {
            let f = fit(&other, &w, &opts(2.0 / 3.0)).unwrap();
            for (a, b) in f.p_hat_model.iter().zip(base.p_hat_model.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn empty_cells_follow_the_policy() {
        let s = sample(&[&[2, 0, 1, 1], &[1, 0, 2, 1]]);
        let w = independence_design(2, 2).unwrap();
        let mut o = opts(1.0);
        assert!(fit(&s, &w, &o).unwrap().converged);
        o.zero_count_policy = ZeroCountPolicy::Error;
        assert!(matches!(fit(&s, &w, &o), Err(Error::InvalidInput(_))));
        assert!(matches!(fit(&s, &w, &opts(-1.5)), Err(Error::Undefined(_))));
        assert!(matches!(fit(&s, &w, &opts(-1.0)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn options_are_validated() {
        let s = two_by_three();
        let w = independence_design(2, 3).unwrap();
        let mut o = opts(0.0);
        o.tolerance = 0.0;
        assert!(fit(&s, &w, &o).is_err());
        let wrong = independence_design(2, 2).unwrap();
        assert!(matches!(fit(&s, &wrong, &opts(0.0)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn iteration_budget_reports_non_convergence() {
        let s = two_by_three();
        let w = independence_design(2, 3).unwrap();
        let mut o = opts(2.0);
        o.max_iterations = 1;
        o.tolerance = 1e-300;
        let f = fit(&s, &w, &o).unwrap();
        assert!(!f.converged);
        assert!(f.final_residual_norm > o.tolerance);
    }

    #[test]
    fn dogleg_solves_from_a_poor_start() {
        let s = two_by_three();
        let w = independence_design(2, 3).unwrap();
        let p_hat = s.pooled_proportions();
        let lambda = PowerIndex::new(1.0).unwrap();
        let problem = Problem {
            w: &w,
            p_hat: &p_hat,
            lambda,
        };
        let start = DVector::from_vec(vec![2.0, -1.5, 1.0]);
        let state = problem.evaluate(&start).unwrap();
        let (theta, state, used) = problem.dogleg(start, state, 1e-11, 200).unwrap();
        assert!(state.residual_norm <= 1e-11, "{} after {used}", state.residual_norm);
        let newton = fit(&s, &w, &FitOptions::with_lambda(lambda)).unwrap();
        for (a, b) in theta.iter().zip(newton.theta_hat.as_slice()) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn dogleg_step_respects_the_radius() {
        let cauchy = DVector::from_vec(vec![1.0, 0.0]);
        let gn = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(dogleg_step(&cauchy, Some(&gn), 10.0), gn);
        let s = dogleg_step(&cauchy, Some(&gn), 2.0);
        assert_relative_eq!(s.norm(), 2.0, epsilon = 1e-14);
        let s = dogleg_step(&cauchy, Some(&gn), 0.5);
        assert_relative_eq!(s[0], 0.5, epsilon = 1e-15);
        let s = dogleg_step(&cauchy, None, 3.0);
        assert_relative_eq!(s[0], 3.0, epsilon = 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn saturated_fit_is_exact(
            counts in prop::collection::vec(1u64..20, 3..7),
            l in prop::sample::select(vec![-0.5, 0.0, 0.5, 1.0, 2.0]),
        ) {
            let s = ClusteredSample::from_tables(vec![ClusterTable::new(counts).unwrap()]).unwrap();
            let w = saturated_design(s.num_cells()).unwrap();
            let f = fit(&s, &w, &opts(l)).unwrap();
            prop_assert!(f.converged);
            for (a, b) in f.p_hat_model.iter().zip(s.pooled_proportions().iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn independence_fits_converge(
            counts in prop::collection::vec(1u64..30, 6),
            l in prop::sample::select(vec![-0.5, 0.0, 2.0 / 3.0, 1.0, 2.0]),
        ) {
            let s = ClusteredSample::from_tables(vec![ClusterTable::new(counts).unwrap()]).unwrap();
            let w = independence_design(2, 3).unwrap();
            let f = fit(&s, &w, &opts(l)).unwrap();
            prop_assert!(f.converged);
            prop_assert!(f.final_residual_norm <= 1e-10);
            let total: f64 = f.p_hat_model.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
