//! Discrete optimal transport between empirical measures.
//!
//! Two solvers live here. [`sinkhorn`] solves the entropy-regularized
//! problem `min <T, C> - H(T) / lambda` over the transportation polytope and
//! is what the alignment losses use. [`exact_ot`] solves the unregularized
//! linear program exactly by integer min-cost flow and exists to validate the
//! Sinkhorn path; [`permutation_oracle`] is a second, brute-force check for
//! small square uniform instances.

mod exact;
mod sinkhorn;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Matrix;

pub use exact::{exact_ot, permutation_oracle, MAX_PERMUTATION_SIZE, MAX_SCALE};
pub use sinkhorn::sinkhorn;

/// Weights of a discrete probability measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return dim_err("measure with no atoms");
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Domain(format!("measure weight {w} is not a non-negative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Domain(format!("measure weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `n` atoms of mass `1/n` each.
pub fn uniform_measure(n: usize) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return dim_err("uniform measure over zero atoms");
    }
    Ok(EmpiricalMeasure { weights: vec![1.0 / n as f64; n] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Inverse regularization strength; larger means closer to exact OT.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stopping threshold on the L-infinity marginal violation.
    pub tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { lambda: 50.0, max_iters: 10_000, tol: 1e-9, log_domain: true }
    }
}

impl SinkhornConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self { lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("sinkhorn.lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("sinkhorn.tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn.max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// A coupling together with its cost and solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    pub plan: Matrix,
    /// `<plan, C>` for the cost matrix the plan was solved against.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub marginal_err: f64,
}

impl TransportPlan {
    pub(crate) fn from_plan(
        plan: Matrix,
        cost_matrix: &Matrix,
        alpha: &EmpiricalMeasure,
        beta: &EmpiricalMeasure,
        iterations: usize,
        converged: bool,
    ) -> Self {
        let marginal_err = marginal_violation(&plan, alpha, beta);
        let cost = crate::numerics::frobenius_dot(&plan, cost_matrix)
            .expect("plan and cost share a shape");
        Self { plan, cost, iterations, converged, marginal_err }
    }

    /// Recomputes feasibility from scratch, e.g. after deserializing a plan.
    pub fn check_feasible(
        &self,
        alpha: &EmpiricalMeasure,
        beta: &EmpiricalMeasure,
        tol: f64,
    ) -> Result<()> {
        if self.plan.shape() != (alpha.len(), beta.len()) {
            return dim_err(format!(
                "plan is {:?} but marginals are {}x{}",
                self.plan.shape(),
                alpha.len(),
                beta.len()
            ));
        }
        if let Some(v) = self.plan.as_slice().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain(format!("negative plan entry {v}")));
        }
        let err = marginal_violation(&self.plan, alpha, beta);
        if err > tol {
            return Err(Error::Domain(format!("marginal violation {err:e} exceeds {tol:e}")));
        }
        Ok(())
    }
}

pub fn marginal_violation(plan: &Matrix, alpha: &EmpiricalMeasure, beta: &EmpiricalMeasure) -> f64 {
    let rows = plan.row_sums().into_iter().zip(alpha.weights()).map(|(s, a)| (s - a).abs());
    let cols = plan.col_sums().into_iter().zip(beta.weights()).map(|(s, b)| (s - b).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Shannon entropy `-sum T_ij log T_ij`, with `0 log 0 = 0`.
pub fn entropy(t: &Matrix) -> Result<f64> {
    let mut h = 0.0;
    for &v in t.as_slice() {
        if v < 0.0 {
            return Err(Error::Domain(format!("entropy of negative entry {v}")));
        }
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h)
}

fn check_shapes(c: &Matrix, alpha: &EmpiricalMeasure, beta: &EmpiricalMeasure) -> Result<()> {
    if c.shape() != (alpha.len(), beta.len()) {
        return dim_err(format!(
            "cost matrix is {}x{} but marginals have {} and {} atoms",
            c.rows(),
            c.cols(),
            alpha.len(),
            beta.len()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_measure(1).unwrap().weights(), &[1.0]);
        assert_eq!(uniform_measure(4).unwrap().weights(), &[0.25; 4]);
        let third = uniform_measure(3).unwrap();
        assert!(third.weights().iter().all(|&w| w == 1.0 / 3.0));
        assert!((third.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        assert!(matches!(uniform_measure(0), Err(Error::Dimension(_))));
    }

    #[test]
    fn measure_validation() {
        assert!(EmpiricalMeasure::new(vec![0.5, 0.5]).is_ok());
        assert!(EmpiricalMeasure::new(vec![1.0, 0.0]).is_ok());
        assert!(EmpiricalMeasure::new(vec![0.6, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::new(vec![]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&Matrix::identity(1)).unwrap(), 0.0);
        let product = Matrix::filled(2, 2, 0.25);
        assert!((entropy(&product).unwrap() - 4f64.ln()).abs() <= 1e-12);
        let diag = Matrix::identity(2).scale(0.5);
        assert!((entropy(&diag).unwrap() - 2f64.ln()).abs() <= 1e-12);
        let neg = Matrix::from_rows(&[vec![1.1, -0.1]]).unwrap();
        assert!(matches!(entropy(&neg), Err(Error::Domain(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SinkhornConfig::default().validate().is_ok());
        assert!(SinkhornConfig::with_lambda(0.0).validate().is_err());
        assert!(SinkhornConfig { tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(SinkhornConfig { max_iters: 0, ..Default::default() }.validate().is_err());
    }
}
