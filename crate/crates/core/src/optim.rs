//! Bounded Levenberg-Marquardt over sum-of-squares objectives.
//!
//! The objective is `E(x) = Σ rᵢ(x)²`. Box bounds are handled with an
//! active set: coordinates sitting on a bound whose gradient points outward
//! are frozen for the step, the damped system is solved over the rest, and
//! the trial point is projected back into the box. A step is accepted only
//! if it lowers the energy, so accepted energies never increase.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x² / (x² + c²)`, bounded in `[0, 1)`.
pub fn geman_mcclure(x: f64, c: f64) -> f64 {
    let x2 = x * x;
    x2 / (x2 + c * c)
}

pub fn geman_mcclure_derivative(x: f64, c: f64) -> f64 {
    let c2 = c * c;
    let d = x * x + c2;
    2.0 * x * c2 / (d * d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyTerm {
    Reprojection,
    Priors,
    Glob,
    Structure,
}

/// Energy split by objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub reprojection: f64,
    pub priors: f64,
    pub glob: f64,
    pub structure: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.reprojection + self.priors + self.glob + self.structure
    }

    fn add(&mut self, term: EnergyTerm, value: f64) {
        match term {
            EnergyTerm::Reprojection => self.reprojection += value,
            EnergyTerm::Priors => self.priors += value,
            EnergyTerm::Glob => self.glob += value,
            EnergyTerm::Structure => self.structure += value,
        }
    }

    pub fn from_residuals(residuals: &DVector<f64>, layout: &[(EnergyTerm, Range<usize>)]) -> Self {
        let mut terms = EnergyTerms::default();
        for (term, range) in layout {
            let e: f64 = residuals.rows(range.start, range.len()).norm_squared();
            terms.add(*term, e);
        }
        terms
    }
}

/// A residual-and-Jacobian callback with optional box bounds.
pub trait Problem {
    fn dim(&self) -> usize;

    fn residual_count(&self) -> usize;

    /// Residuals at `x`. When `jacobian` is given it has shape
    /// `residual_count × dim`, arrives zeroed and must be filled in.
    fn evaluate(&self, x: &DVector<f64>, jacobian: Option<&mut DMatrix<f64>>) -> DVector<f64>;

    /// Lower and upper bounds, `±inf` for free coordinates.
    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Maps a trial point back into the feasible set. The default clamps to
    /// [`Problem::bounds`].
    fn project(&self, x: &mut DVector<f64>) {
        if let Some((lo, hi)) = self.bounds() {
            for i in 0..x.len() {
                x[i] = x[i].clamp(lo[i], hi[i]);
            }
        }
    }

    /// Residual ranges belonging to each energy term.
    fn term_layout(&self) -> Vec<(EnergyTerm, Range<usize>)> {
        Vec::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Relative energy decrease below which an accepted step ends the solve.
    pub ftol: f64,
    /// Infinity norm of the projected gradient below which the solve ends.
    pub gtol: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Damping at which the solver gives up looking for a descent step.
    pub max_lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 200,
            ftol: 1e-8,
            gtol: 1e-10,
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_lambda: 1e16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative energy change fell below `ftol`.
    EnergyChange,
    /// Projected gradient fell below `gtol`.
    Gradient,
    /// Zero energy reached.
    ZeroEnergy,
    /// No descent step found up to `max_lambda`.
    Stalled,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub terms: EnergyTerms,
    /// Energy after each accepted step, starting with the initial energy.
    #[serde(skip)]
    pub energy_history: Vec<f64>,
}

fn check_finite(r: &DVector<f64>) -> Result<()> {
    match r.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteResidual { index }),
        None => Ok(()),
    }
}

/// Minimizes `Σ r(x)²` from `x0`.
pub fn minimize<P: Problem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    config: &LmConfig,
) -> Result<(DVector<f64>, OptimReport)> {
    let n = problem.dim();
    let m = problem.residual_count();
    let bounds = problem.bounds();
    let mut x = x0.clone();
    problem.project(&mut x);

    let mut jac = DMatrix::zeros(m, n);
    let mut r = problem.evaluate(&x, Some(&mut jac));
    check_finite(&r)?;
    if let Some(index) = jac.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResidual {
            index: index % m.max(1),
        });
    }
    let mut energy = r.norm_squared();
    let initial_energy = energy;
    let mut history = vec![energy];
    let mut lambda = config.initial_lambda;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        if energy == 0.0 {
            termination = Termination::ZeroEnergy;
            break;
        }
        let grad = jac.tr_mul(&r);
        let free: Vec<usize> = (0..n)
            .filter(|&i| match &bounds {
                Some((lo, hi)) => !((x[i] <= lo[i] && grad[i] > 0.0) || (x[i] >= hi[i] && grad[i] < 0.0)),
                None => true,
            })
            .collect();
        let gnorm = free.iter().map(|&i| (2.0 * grad[i]).abs()).fold(0.0, f64::max);
        if gnorm < config.gtol {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;

        let hessian = jac.tr_mul(&jac);
        let k = free.len();
        let mut h_free = DMatrix::zeros(k, k);
        let mut g_free = DVector::zeros(k);
        for (a, &i) in free.iter().enumerate() {
            g_free[a] = grad[i];
            for (b, &j) in free.iter().enumerate() {
                h_free[(a, b)] = hessian[(i, j)];
            }
        }
        let max_diag = (0..k).map(|a| h_free[(a, a)]).fold(0.0, f64::max).max(1e-300);

        let mut accepted = false;
        loop {
            let mut damped = h_free.clone();
            for a in 0..k {
                damped[(a, a)] += lambda * h_free[(a, a)].max(1e-12 * max_diag);
            }
            let step = damped.cholesky().map(|c| c.solve(&(-&g_free)));
            if let Some(step) = step {
                let mut trial = x.clone();
                for (a, &i) in free.iter().enumerate() {
                    trial[i] += step[a];
                }
                problem.project(&mut trial);
                let r_trial = problem.evaluate(&trial, None);
                check_finite(&r_trial)?;
                let e_trial = r_trial.norm_squared();
                if e_trial < energy {
                    let rel = (energy - e_trial) / energy;
                    x = trial;
                    energy = e_trial;
                    history.push(energy);
                    lambda *= config.lambda_down;
                    accepted = true;
                    if rel < config.ftol {
                        termination = Termination::EnergyChange;
                    }
                    break;
                }
            }
            lambda = if lambda == 0.0 {
                config.initial_lambda.max(1e-3)
            } else {
                lambda * config.lambda_up
            };
            if lambda > config.max_lambda {
                termination = Termination::Stalled;
                break;
            }
        }
        if !accepted || termination == Termination::EnergyChange {
            if accepted {
                r = problem.evaluate(&x, None);
            }
            break;
        }
        jac.fill(0.0);
        r = problem.evaluate(&x, Some(&mut jac));
        check_finite(&r)?;
    }

    let terms = EnergyTerms::from_residuals(&r, &problem.term_layout());
    let converged = !matches!(termination, Termination::MaxIterations);
    Ok((
        x,
        OptimReport {
            initial_energy,
            final_energy: energy,
            iterations,
            converged,
            termination,
            terms,
            energy_history: history,
        },
    ))
}

/// Infinity norm of `x − P(x − ∇E)`, zero at a KKT point of the bounded problem.
pub fn kkt_residual<P: Problem + ?Sized>(problem: &P, x: &DVector<f64>) -> f64 {
    let mut jac = DMatrix::zeros(problem.residual_count(), problem.dim());
    let r = problem.evaluate(x, Some(&mut jac));
    let grad = 2.0 * jac.tr_mul(&r);
    let mut moved = x - grad;
    problem.project(&mut moved);
    (x - moved).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// `r(x) = A x − b`.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
        bounds: Option<(Vec<f64>, Vec<f64>)>,
    }

    impl Problem for Linear {
        fn dim(&self) -> usize {
            self.a.ncols()
        }
        fn residual_count(&self) -> usize {
            self.a.nrows()
        }
        fn evaluate(&self, x: &DVector<f64>, jacobian: Option<&mut DMatrix<f64>>) -> DVector<f64> {
            if let Some(j) = jacobian {
                j.copy_from(&self.a);
            }
            &self.a * x - &self.b
        }
        fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
            self.bounds.clone()
        }
    }

    struct Rosenbrock;

    impl Problem for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn residual_count(&self) -> usize {
            2
        }
        fn evaluate(&self, x: &DVector<f64>, jacobian: Option<&mut DMatrix<f64>>) -> DVector<f64> {
            if let Some(j) = jacobian {
                j[(0, 0)] = -20.0 * x[0];
                j[(0, 1)] = 10.0;
                j[(1, 0)] = -1.0;
            }
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
    }

    struct NanProblem;

    impl Problem for NanProblem {
        fn dim(&self) -> usize {
            1
        }
        fn residual_count(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &DVector<f64>, _: Option<&mut DMatrix<f64>>) -> DVector<f64> {
            DVector::from_element(1, x[0].sqrt())
        }
    }

    #[test]
    fn geman_mcclure_values() {
        assert_eq!(geman_mcclure(0.0, 2.0), 0.0);
        assert_relative_eq!(geman_mcclure(2.0, 2.0), 0.5, epsilon = 1e-15);
        assert!(geman_mcclure(1e3, 1.0) < 1.0);
    }

    #[test]
    fn geman_mcclure_derivative_matches_differences() {
        for c in [0.1, 1.0, 7.5] {
            for i in -200..=200 {
                let x = i as f64 * 0.05 * c;
                let h = 1e-6 * c;
                let fd = (geman_mcclure(x + h, c) - geman_mcclure(x - h, c)) / (2.0 * h);
                let an = geman_mcclure_derivative(x, c);
                assert!((an - fd).abs() <= 1e-6 * fd.abs().max(1e-6 / c), "x {x} c {c}");
            }
        }
    }

    #[test]
    fn quadratic_bowl_converges_fast() {
        let target = DVector::from_vec(vec![1.5, -2.0, 0.25, 7.0]);
        let problem = Linear {
            a: DMatrix::identity(4, 4),
            b: target.clone(),
            bounds: None,
        };
        let (x, report) = minimize(&problem, &DVector::zeros(4), &LmConfig::default()).unwrap();
        assert!((x - target).amax() < 1e-8);
        assert!(report.iterations <= 20);
        assert!(report.converged);
    }

    #[test]
    fn rosenbrock_converges() {
        let (x, report) = minimize(&Rosenbrock, &DVector::from_vec(vec![-1.2, 1.0]), &LmConfig::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x}");
        assert!(report.energy_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn undamped_step_solves_normal_equations() {
        let a = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 2.0, 0.5, //
                -1.0, 0.3, 2.0, //
                0.7, -0.2, 1.0, //
                2.0, 1.0, -1.0, //
                0.1, 0.4, 0.9,
            ],
        );
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.2]);
        let normal = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
        let problem = Linear { a, b, bounds: None };
        let config = LmConfig {
            initial_lambda: 0.0,
            max_iterations: 1,
            ..LmConfig::default()
        };
        let (x, _) = minimize(&problem, &DVector::zeros(3), &config).unwrap();
        assert!((x - normal).amax() < 1e-10);
    }

    #[test]
    fn bounded_minimum_lands_on_the_boundary() {
        // Rotated, anisotropic bowl centered outside the box [0,1]².
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 1.5]);
        let center = DVector::from_vec(vec![1.8, -0.6]);
        let b = &a * &center;
        let problem = Linear {
            a: a.clone(),
            b: b.clone(),
            bounds: Some((vec![0.0, 0.0], vec![1.0, 1.0])),
        };
        let (x, report) = minimize(&problem, &DVector::from_vec(vec![0.5, 0.5]), &LmConfig::default()).unwrap();
        assert!(kkt_residual(&problem, &x) < 1e-6);
        assert!(report.energy_history.windows(2).all(|w| w[1] <= w[0]));

        // Oracle: dense search over the four box edges.
        let energy = |p: &DVector<f64>| (&a * p - &b).norm_squared();
        let mut best = (f64::INFINITY, DVector::zeros(2));
        let steps = 200_000;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            for p in [[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]] {
                let p = DVector::from_vec(p.to_vec());
                let e = energy(&p);
                if e < best.0 {
                    best = (e, p);
                }
            }
        }
        assert!((&x - &best.1).amax() < 1e-4, "{x} vs {}", best.1);
        assert!(energy(&x) <= best.0 + 1e-9);
    }

    #[test]
    fn non_finite_residuals_are_errors() {
        let err = minimize(&NanProblem, &DVector::from_element(1, -1.0), &LmConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteResidual { index: 0 })));
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let (xa, ra) = minimize(&Rosenbrock, &x0, &LmConfig::default()).unwrap();
        let (xb, rb) = minimize(&Rosenbrock, &x0, &LmConfig::default()).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(ra.energy_history, rb.energy_history);
    }
}
