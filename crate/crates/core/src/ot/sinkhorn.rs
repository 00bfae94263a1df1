use super::{check_shapes, EmpiricalMeasure, SinkhornConfig, TransportPlan};
use crate::error::Result;
use crate::numerics::{cholesky_solve, logsumexp_unchecked, Matrix};

/// Entropy-regularized OT by alternating Sinkhorn scaling.
///
/// The solution has the form `diag(u) exp(-lambda C) diag(v)`. In log domain
/// the scalings are kept as potentials `log u`, `log v` and updated through
/// log-sum-exp, which stays finite for any `lambda`. The marginal violation is
/// checked before every update; a run that exhausts `max_iters` comes back
/// with `converged = false` instead of an error.
pub fn sinkhorn(
    c: &Matrix,
    alpha: &EmpiricalMeasure,
    beta: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    check_shapes(c, alpha, beta)?;
    cfg.validate()?;

    // With a single atom on either side U(alpha, beta) holds exactly one plan.
    if c.rows() == 1 || c.cols() == 1 {
        let plan = Matrix::from_fn(c.rows(), c.cols(), |i, j| {
            alpha.weights()[i] * beta.weights()[j]
        });
        return Ok(TransportPlan::from_plan(plan, c, alpha, beta, 0, true));
    }

    let (plan, iterations, converged) = if cfg.log_domain {
        solve_log(c, alpha, beta, cfg)
    } else {
        solve_scaling(c, alpha, beta, cfg)
    };
    Ok(TransportPlan::from_plan(plan, c, alpha, beta, iterations, converged))
}

/// Sweeps run in blocks of this many before a stalled solve tries Newton steps.
const SWEEP_BLOCK: usize = 50;
const NEWTON_MAX_HALVINGS: usize = 40;
const RIDGES: [f64; 4] = [0.0, 1e-14, 1e-12, 1e-10];
/// Continuation starts at the largest `lambda / 2^k` with `lambda * range(C)` at most this.
const CONTINUATION_START: f64 = 50.0;
/// Marginal tolerance for the intermediate continuation stages.
const STAGE_TOL: f64 = 1e-6;

/// Log-domain potentials `f = log u`, `g = log v` over a fixed log-kernel.
struct LogState<'a> {
    log_k: Matrix,
    log_k_t: Matrix,
    alpha: &'a [f64],
    beta: &'a [f64],
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> LogState<'a> {
    fn new(c: &Matrix, alpha: &'a [f64], beta: &'a [f64], lambda: f64) -> Self {
        let log_k = c.scale(-lambda);
        let log_k_t = log_k.transpose();
        let (n, m) = c.shape();
        Self {
            log_k,
            log_k_t,
            alpha,
            beta,
            log_a: alpha.iter().map(|w| w.ln()).collect(),
            log_b: beta.iter().map(|w| w.ln()).collect(),
            f: vec![0.0; n],
            g: vec![0.0; m],
            scratch: vec![0.0; n.max(m)],
        }
    }

    fn shape(&self) -> (usize, usize) {
        self.log_k.shape()
    }

    /// Moves to a new kernel, keeping the dual potentials `f / lambda` fixed.
    fn rescale(&mut self, c: &Matrix, from: f64, to: f64) {
        self.log_k = c.scale(-to);
        self.log_k_t = self.log_k.transpose();
        let ratio = to / from;
        for v in self.f.iter_mut().chain(self.g.iter_mut()) {
            if v.is_finite() {
                *v *= ratio;
            }
        }
    }

    /// `log sum_j K_ij v_j` for row `i`.
    fn row_lse(&mut self, i: usize) -> f64 {
        let m = self.g.len();
        let buf = &mut self.scratch[..m];
        for ((s, k), gj) in buf.iter_mut().zip(self.log_k.row(i)).zip(&self.g) {
            *s = k + gj;
        }
        logsumexp_unchecked(buf)
    }

    fn col_lse(&mut self, j: usize) -> f64 {
        let n = self.f.len();
        let buf = &mut self.scratch[..n];
        for ((s, k), fi) in buf.iter_mut().zip(self.log_k_t.row(j)).zip(&self.f) {
            *s = k + fi;
        }
        logsumexp_unchecked(buf)
    }

    /// One full Sinkhorn sweep given precomputed row log-sums for the current `g`.
    fn sweep(&mut self, row_lse: &[f64]) {
        for (i, lse) in row_lse.iter().enumerate() {
            self.f[i] = self.log_a[i] - lse;
        }
        for j in 0..self.g.len() {
            self.g[j] = self.log_b[j] - self.col_lse(j);
        }
    }

    /// Marginal error of the current potentials; infinite if any entry overflows.
    fn marginal_err(&self) -> f64 {
        let (n, m) = self.shape();
        let mut rows = vec![0.0; n];
        let mut cols = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let v = (self.f[i] + self.log_k[(i, j)] + self.g[j]).exp();
                rows[i] += v;
                cols[j] += v;
            }
        }
        let r: Vec<f64> = rows.iter().zip(self.alpha).map(|(s, a)| a - s).collect();
        let c: Vec<f64> = cols.iter().zip(self.beta).map(|(s, b)| b - s).collect();
        let err = max_abs(&r, &c);
        if err.is_finite() { err } else { f64::INFINITY }
    }

    fn plan(&self) -> Matrix {
        let (n, m) = self.shape();
        Matrix::from_fn(n, m, |i, j| {
            let v = (self.f[i] + self.log_k[(i, j)] + self.g[j]).exp();
            if v.is_finite() { v } else { 0.0 }
        })
    }

    fn residuals(plan: &Matrix, alpha: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = alpha.iter().zip(plan.row_sums()).map(|(a, s)| a - s).collect();
        let c = beta.iter().zip(plan.col_sums()).map(|(b, s)| b - s).collect();
        (r, c)
    }

    /// One damped Newton step on the dual. Returns the new marginal error, or
    /// `None` when no step along the Newton direction reduces it.
    ///
    /// The Jacobian of the marginals with respect to `(f, g)` is
    /// `[[diag(r), T], [T^T, diag(c)]]`; it is singular along `(1, -1)`, so the
    /// last column potential is pinned and its equation dropped.
    fn newton_step(&mut self) -> Option<f64> {
        let (n, m) = self.shape();
        let plan = self.plan();
        let (res_r, res_c) = Self::residuals(&plan, self.alpha, self.beta);
        let err = max_abs(&res_r, &res_c);

        let dim = n + m - 1;
        let mut jac = vec![0.0; dim * dim];
        let row_sums = plan.row_sums();
        let col_sums = plan.col_sums();
        for i in 0..n {
            jac[i * dim + i] = row_sums[i];
            for j in 0..m - 1 {
                jac[i * dim + n + j] = plan[(i, j)];
                jac[(n + j) * dim + i] = plan[(i, j)];
            }
        }
        for j in 0..m - 1 {
            jac[(n + j) * dim + n + j] = col_sums[j];
        }
        let rhs: Vec<f64> = res_r.iter().chain(&res_c[..m - 1]).copied().collect();
        // Blocks joined only by underflowing entries make the system numerically
        // singular; a small relative ridge keeps the factorization alive.
        let scale = (0..dim).map(|k| jac[k * dim + k]).fold(0.0, f64::max);
        let step = RIDGES.iter().find_map(|&ridge| {
            let mut damped = jac.clone();
            for k in 0..dim {
                damped[k * dim + k] += ridge * scale;
            }
            cholesky_solve(&damped, &rhs, dim)
        })?;
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }

        let (f0, g0) = (self.f.clone(), self.g.clone());
        let mut t = 1.0;
        for _ in 0..NEWTON_MAX_HALVINGS {
            for i in 0..n {
                self.f[i] = f0[i] + t * step[i];
            }
            for j in 0..m - 1 {
                self.g[j] = g0[j] + t * step[n + j];
            }
            let new_err = self.marginal_err();
            if new_err < err {
                return Some(new_err);
            }
            t *= 0.5;
        }
        self.f = f0;
        self.g = g0;
        None
    }
}

/// Largest absolute residual; NaN counts as infinitely bad.
fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .chain(b)
        .fold(0.0, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) })
}

/// Log-domain solve.
///
/// Large `lambda` is reached by continuation: a sequence of doubling
/// `lambda` values, each warm-started from the previous stage's potentials.
/// Within a stage, Sinkhorn sweeps run in blocks, and a block that ends
/// unconverged hands over to Newton steps on the same potentials. Sweeps slow
/// to a crawl when the plan nearly splits into disconnected blocks (e.g.
/// near-permutation optima); Newton resolves the balance between blocks in a
/// few steps. Every sweep and Newton step counts as one iteration.
fn solve_log(
    c: &Matrix,
    alpha: &EmpiricalMeasure,
    beta: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> (Matrix, usize, bool) {
    let (lo, hi) = c.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    let mut stages = vec![cfg.lambda];
    while stages[0] * range > CONTINUATION_START {
        stages.insert(0, stages[0] / 2.0);
    }

    let mut state = LogState::new(c, alpha.weights(), beta.weights(), stages[0]);
    let mut iterations = 0;
    let last = stages.len() - 1;
    for (k, &lambda) in stages.iter().enumerate() {
        if k > 0 {
            state.rescale(c, stages[k - 1], lambda);
        }
        let tol = if k == last { cfg.tol } else { STAGE_TOL.max(cfg.tol) };
        let converged = solve_stage(&mut state, tol, cfg.max_iters, &mut iterations);
        if k == last || iterations >= cfg.max_iters {
            return (state.plan(), iterations, converged && k == last);
        }
    }
    unreachable!("the final stage always returns")
}

fn solve_stage(state: &mut LogState<'_>, tol: f64, max_iters: usize, iterations: &mut usize) -> bool {
    let (n, _) = state.shape();
    let mut lse = vec![0.0; n];
    let mut swept = false;
    loop {
        let block_end = (*iterations + SWEEP_BLOCK).min(max_iters);
        loop {
            for (i, l) in lse.iter_mut().enumerate() {
                *l = state.row_lse(i);
            }
            // Column sums are exact after a sweep; row sums are exp(f_i + lse_i).
            if swept {
                let row_err = (0..n)
                    .map(|i| ((state.f[i] + lse[i]).exp() - state.alpha[i]).abs())
                    .fold(0.0, f64::max);
                if row_err <= tol {
                    return true;
                }
            }
            if *iterations >= block_end {
                break;
            }
            state.sweep(&lse);
            swept = true;
            *iterations += 1;
        }
        if *iterations >= max_iters {
            return false;
        }

        let mut improved = false;
        while *iterations < max_iters {
            match state.newton_step() {
                Some(err) => {
                    *iterations += 1;
                    improved = true;
                    if err <= tol {
                        return true;
                    }
                }
                None => break,
            }
        }
        if *iterations >= max_iters {
            return false;
        }
        // Newton leaves columns inexact; the next sweep restores them.
        swept = !improved && swept;
    }
}

fn solve_scaling(
    c: &Matrix,
    alpha: &EmpiricalMeasure,
    beta: &EmpiricalMeasure,
    cfg: &SinkhornConfig,
) -> (Matrix, usize, bool) {
    let (n, m) = c.shape();
    let k = c.map(|v| (-cfg.lambda * v).exp());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];

    let mut iterations = 0;
    let mut converged = false;
    loop {
        let kv: Vec<f64> = (0..n).map(|i| crate::numerics::dot(k.row(i), &v)).collect();
        if iterations > 0 {
            let row_err = (0..n)
                .map(|i| (u[i] * kv[i] - alpha.weights()[i]).abs())
                .fold(0.0, f64::max);
            if row_err <= cfg.tol {
                converged = true;
                break;
            }
        }
        if iterations == cfg.max_iters {
            break;
        }

        let new_u: Vec<f64> = alpha.weights().iter().zip(&kv).map(|(a, s)| a / s).collect();
        let mut new_v = vec![0.0; m];
        for i in 0..n {
            for (acc, kij) in new_v.iter_mut().zip(k.row(i)) {
                *acc += kij * new_u[i];
            }
        }
        for (nv, b) in new_v.iter_mut().zip(beta.weights()) {
            *nv = b / *nv;
        }
        // Kernel underflow: keep the last finite scalings and report failure.
        if new_u.iter().chain(&new_v).any(|x| !x.is_finite()) {
            break;
        }
        u = new_u;
        v = new_v;
        iterations += 1;
    }

    let plan = Matrix::from_fn(n, m, |i, j| u[i] * k[(i, j)] * v[j]);
    (plan, iterations, converged)
}
