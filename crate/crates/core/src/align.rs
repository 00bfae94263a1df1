//! OT alignment losses between student and teacher representations.
//!
//! The loss of one layer pair is `<T*, C>` where `C` is the cross-attention
//! cost and `T*` the Sinkhorn plan under uniform token masses. Gradients
//! treat `T*` as a constant (envelope convention): only the cost pathway is
//! differentiated, which makes them checkable against finite differences of
//! the loss with the plan frozen.

use serde::Serialize;

use crate::cost::{cost_matrix, similarity, teacher_keys, Projection};
use crate::error::{dim_err, Result};
use crate::numerics::{frobenius_dot, row_softmax, Matrix};
use crate::ot::{sinkhorn, uniform_measure, SinkhornConfig, TransportPlan};

/// Embedding and last-hidden sequences of one model on one input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReprBundle {
    pub embeddings: Matrix,
    pub hiddens: Matrix,
    pub label: String,
}

impl ReprBundle {
    pub fn new(embeddings: Matrix, hiddens: Matrix, label: impl Into<String>) -> Result<Self> {
        if embeddings.rows() == 0 || embeddings.rows() != hiddens.rows() {
            return dim_err(format!(
                "bundle needs matching non-zero token counts, got {} embeddings and {} hiddens",
                embeddings.rows(),
                hiddens.rows()
            ));
        }
        if embeddings.cols() == 0 || hiddens.cols() == 0 {
            return dim_err("bundle with zero-width representations");
        }
        Ok(Self { embeddings, hiddens, label: label.into() })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layer-wise alignment result. `loss == emb_loss + hid_loss`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignReport {
    pub loss: f64,
    pub emb_loss: f64,
    pub hid_loss: f64,
    pub emb_plan: TransportPlan,
    pub hid_plan: TransportPlan,
    pub emb_projected: bool,
    pub hid_projected: bool,
    pub config: SinkhornConfig,
}

impl AlignReport {
    pub fn converged(&self) -> bool {
        self.emb_plan.converged && self.hid_plan.converged
    }
}

/// `<T*, C(X, Y)>` with uniform token masses, and the plan `T*`.
pub fn ot_loss(
    x: &Matrix,
    y: &Matrix,
    p: Option<&Projection>,
    cfg: &SinkhornConfig,
) -> Result<(f64, TransportPlan)> {
    let c = cost_matrix(x, y, p)?;
    let plan = sinkhorn(&c, &uniform_measure(x.rows())?, &uniform_measure(y.rows())?, cfg)?;
    Ok((plan.cost, plan))
}

/// OT loss on the embedding layer plus OT loss on the last hidden layer.
pub fn layer_ot_loss(
    s: &ReprBundle,
    t: &ReprBundle,
    p_emb: Option<&Projection>,
    p_hid: Option<&Projection>,
    cfg: &SinkhornConfig,
) -> Result<AlignReport> {
    let (emb_loss, emb_plan) = ot_loss(&s.embeddings, &t.embeddings, p_emb, cfg)?;
    let (hid_loss, hid_plan) = ot_loss(&s.hiddens, &t.hiddens, p_hid, cfg)?;
    Ok(AlignReport {
        loss: emb_loss + hid_loss,
        emb_loss,
        hid_loss,
        emb_plan,
        hid_plan,
        emb_projected: p_emb.is_some(),
        hid_projected: p_hid.is_some(),
        config: *cfg,
    })
}

/// `<plan, C(X, Y)>` for a fixed plan.
pub fn frozen_plan_loss(x: &Matrix, y: &Matrix, p: Option<&Projection>, plan: &TransportPlan) -> Result<f64> {
    frobenius_dot(&plan.plan, &cost_matrix(x, y, p)?)
}

/// `<plan, softmax(S)>`. Since `C = 1 - softmax(S)`, the frozen-plan loss
/// is the plan's total mass minus this value, and differences of it are free
/// of the rounding in `1 - A`.
pub fn frozen_plan_affinity(x: &Matrix, y: &Matrix, p: Option<&Projection>, plan: &TransportPlan) -> Result<f64> {
    frobenius_dot(&plan.plan, &row_softmax(&similarity(x, y, p)?)?)
}

/// `d<T, C>/dC` with the plan frozen, which is the plan itself.
pub fn grad_wrt_cost(plan: &TransportPlan) -> Matrix {
    plan.plan.clone()
}

/// Frozen-plan gradients of `<T, C(X, Y)>` with respect to every input.
#[derive(Debug, Clone)]
pub struct CostGradients {
    /// `N x d`
    pub student: Matrix,
    /// `M x D`
    pub teacher: Matrix,
    /// `D x d`, present when a projection was used.
    pub projection: Option<Matrix>,
}

/// Backpropagates through `C = 1 - softmax(X Q^T / sqrt(d))`, `Q = Y P`.
///
/// With `A = softmax(S)` and the plan fixed, `dL/dS_ij = A_ij (sum_k T_ik A_ik - T_ij)`.
pub fn cost_gradients(
    x: &Matrix,
    y: &Matrix,
    p: Option<&Projection>,
    plan: &TransportPlan,
) -> Result<CostGradients> {
    let keys = teacher_keys(y, x.cols(), p)?;
    if plan.plan.shape() != (x.rows(), y.rows()) {
        return dim_err(format!(
            "plan is {:?} but sequences have {} and {} tokens",
            plan.plan.shape(),
            x.rows(),
            y.rows()
        ));
    }
    let inv_sqrt_d = 1.0 / (x.cols() as f64).sqrt();
    let attn = row_softmax(&similarity(x, y, p)?)?;
    let t = &plan.plan;
    let d_scores = Matrix::from_fn_unchecked(x.rows(), y.rows(), |i, j| {
        let expected: f64 = t.row(i).iter().zip(attn.row(i)).map(|(a, b)| a * b).sum();
        attn[(i, j)] * (expected - t[(i, j)])
    });

    let student = d_scores.matmul(&keys)?.scale(inv_sqrt_d);
    let d_keys = d_scores.t_matmul(x)?.scale(inv_sqrt_d);
    let (teacher, projection) = match p {
        Some(p) => (d_keys.matmul_t(&p.weights)?, Some(y.t_matmul(&d_keys)?)),
        None => (d_keys, None),
    };
    Ok(CostGradients { student, teacher, projection })
}

/// `dL/dX` with the plan frozen; `N x d`.
pub fn grad_wrt_student(x: &Matrix, y: &Matrix, p: Option<&Projection>, plan: &TransportPlan) -> Result<Matrix> {
    Ok(cost_gradients(x, y, p, plan)?.student)
}

/// `dL/dY` with the plan frozen; `M x D`.
pub fn grad_wrt_teacher(x: &Matrix, y: &Matrix, p: Option<&Projection>, plan: &TransportPlan) -> Result<Matrix> {
    Ok(cost_gradients(x, y, p, plan)?.teacher)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub h: f64,
}

/// Entries whose analytic gradient is smaller than this are compared absolutely.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Error between one analytic and one numeric derivative: relative, or
/// absolute when the analytic value is below [`GRAD_ABS_FLOOR`].
pub fn gradient_error(analytic: f64, numeric: f64) -> (f64, bool) {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < GRAD_ABS_FLOOR {
        (diff, diff <= GRAD_ABS_FLOOR)
    } else {
        let rel = diff / analytic.abs().max(numeric.abs());
        (rel, rel <= GRAD_REL_TOL)
    }
}

/// Compares [`grad_wrt_student`] with central differences of the
/// frozen-plan loss, perturbing each entry of `X` by `+-h`.
pub fn finite_diff_check(
    x: &Matrix,
    y: &Matrix,
    p: Option<&Projection>,
    cfg: &SinkhornConfig,
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(crate::Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let (_, plan) = ot_loss(x, y, p, cfg)?;
    let analytic = grad_wrt_student(x, y, p, &plan)?;

    let mut max_err: f64 = 0.0;
    let mut pass = true;
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = frozen_plan_loss(&probe, y, p, &plan)?;
        probe.as_mut_slice()[k] = orig - h;
        let down = frozen_plan_loss(&probe, y, p, &plan)?;
        probe.as_mut_slice()[k] = orig;

        let (err, ok) = gradient_error(analytic.as_slice()[k], (up - down) / (2.0 * h));
        max_err = max_err.max(err);
        pass &= ok;
    }
    Ok(GradCheckReport { max_rel_err: max_err, pass, h })
}
