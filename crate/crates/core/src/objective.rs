//! Cross chain-of-thought alignment losses and the combined training objective.
//!
//! A [`CoTQuad`] holds the student and teacher representations of an input
//! with and without a CoT prompt. `L_CST` aligns like with like
//! (CoT-CoT, raw-raw), `L_CRC` aligns across (raw-CoT, CoT-raw), and
//! `L_CCoT = L_CRC + L_CST`. The final loss is
//! `(1 - alpha) L_CE + alpha (L_CCoT + L_KD)`.

use serde::{Deserialize, Serialize};

use crate::align::{layer_ot_loss, AlignReport, ReprBundle};
use crate::cost::Projection;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{logsumexp_unchecked, softmax_in_place, Matrix};
use crate::ot::SinkhornConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoTQuad {
    pub s_raw: ReprBundle,
    pub s_cot: ReprBundle,
    pub t_raw: ReprBundle,
    pub t_cot: ReprBundle,
}

impl CoTQuad {
    pub fn new(s_raw: ReprBundle, s_cot: ReprBundle, t_raw: ReprBundle, t_cot: ReprBundle) -> Result<Self> {
        let widths = |b: &ReprBundle| (b.embeddings.cols(), b.hiddens.cols());
        if widths(&s_raw) != widths(&s_cot) {
            return dim_err(format!(
                "student raw bundle widths {:?} differ from CoT bundle widths {:?}",
                widths(&s_raw),
                widths(&s_cot)
            ));
        }
        if widths(&t_raw) != widths(&t_cot) {
            return dim_err(format!(
                "teacher raw bundle widths {:?} differ from CoT bundle widths {:?}",
                widths(&t_raw),
                widths(&t_cot)
            ));
        }
        Ok(Self { s_raw, s_cot, t_raw, t_cot })
    }

    /// The same quad with the student's raw and CoT bundles exchanged.
    pub fn swap_student(&self) -> Self {
        Self {
            s_raw: self.s_cot.clone(),
            s_cot: self.s_raw.clone(),
            t_raw: self.t_raw.clone(),
            t_cot: self.t_cot.clone(),
        }
    }

    pub fn student(&self, side: Side) -> &ReprBundle {
        match side {
            Side::Raw => &self.s_raw,
            Side::Cot => &self.s_cot,
        }
    }

    pub fn teacher(&self, side: Side) -> &ReprBundle {
        match side {
            Side::Raw => &self.t_raw,
            Side::Cot => &self.t_cot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Raw,
    Cot,
}

/// One student/teacher pairing inside the cross-CoT losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CrossPair {
    pub student: Side,
    pub teacher: Side,
}

impl CrossPair {
    /// Pairs summed by `L_CST`, in summation order.
    pub const CST: [CrossPair; 2] = [
        CrossPair { student: Side::Cot, teacher: Side::Cot },
        CrossPair { student: Side::Raw, teacher: Side::Raw },
    ];
    /// Pairs summed by `L_CRC`, in summation order.
    pub const CRC: [CrossPair; 2] = [
        CrossPair { student: Side::Raw, teacher: Side::Cot },
        CrossPair { student: Side::Cot, teacher: Side::Raw },
    ];

    pub fn label(&self) -> &'static str {
        match (self.student, self.teacher) {
            (Side::Raw, Side::Raw) => "raw-raw",
            (Side::Raw, Side::Cot) => "raw-cot",
            (Side::Cot, Side::Raw) => "cot-raw",
            (Side::Cot, Side::Cot) => "cot-cot",
        }
    }
}

/// Projections for the embedding and hidden layer pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub emb: Option<Projection>,
    pub hid: Option<Projection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub sinkhorn: SinkhornConfig,
    pub projections: ProjectionSet,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 1.0,
            sinkhorn: SinkhornConfig::default(),
            projections: ProjectionSet::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        self.sinkhorn.validate()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Layer-wise OT loss of one cross pair.
pub fn pair_loss(q: &CoTQuad, pair: CrossPair, cfg: &ObjectiveConfig) -> Result<AlignReport> {
    let p = &cfg.projections;
    layer_ot_loss(
        q.student(pair.student),
        q.teacher(pair.teacher),
        p.emb.as_ref(),
        p.hid.as_ref(),
        &cfg.sinkhorn,
    )
}

fn sum_pairs(q: &CoTQuad, pairs: &[CrossPair], cfg: &ObjectiveConfig) -> Result<f64> {
    let mut total = 0.0;
    for &pair in pairs {
        total += pair_loss(q, pair, cfg)?.loss;
    }
    Ok(total)
}

/// `L_OT(s_cot, t_cot) + L_OT(s_raw, t_raw)`.
pub fn cross_st_loss(q: &CoTQuad, cfg: &ObjectiveConfig) -> Result<f64> {
    sum_pairs(q, &CrossPair::CST, cfg)
}

/// `L_OT(s_raw, t_cot) + L_OT(s_cot, t_raw)`.
pub fn cross_rc_loss(q: &CoTQuad, cfg: &ObjectiveConfig) -> Result<f64> {
    sum_pairs(q, &CrossPair::CRC, cfg)
}

pub fn ccot_loss(q: &CoTQuad, cfg: &ObjectiveConfig) -> Result<f64> {
    Ok(cross_rc_loss(q, cfg)? + cross_st_loss(q, cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub pair: &'static str,
    #[serde(flatten)]
    pub report: AlignReport,
}

/// Every term of `L_CCoT` with its plans.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcotReport {
    pub ccot: f64,
    pub crc: f64,
    pub cst: f64,
    pub terms: Vec<PairReport>,
}

impl CcotReport {
    pub fn converged(&self) -> bool {
        self.terms.iter().all(|t| t.report.converged())
    }
}

pub fn ccot_report(q: &CoTQuad, cfg: &ObjectiveConfig) -> Result<CcotReport> {
    let mut terms = Vec::with_capacity(4);
    let mut sum = |pairs: &[CrossPair]| -> Result<f64> {
        let mut total = 0.0;
        for &pair in pairs {
            let report = pair_loss(q, pair, cfg)?;
            total += report.loss;
            terms.push(PairReport { pair: pair.label(), report });
        }
        Ok(total)
    };
    let crc = sum(&CrossPair::CRC)?;
    let cst = sum(&CrossPair::CST)?;
    Ok(CcotReport { ccot: crc + cst, crc, cst, terms })
}

fn check_targets(logits: &Matrix, targets: &[usize]) -> Result<()> {
    if logits.rows() == 0 {
        return dim_err("loss over zero positions");
    }
    if targets.len() != logits.rows() {
        return dim_err(format!("{} targets for {} positions", targets.len(), logits.rows()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Index(format!("target {t} outside vocabulary of size {}", logits.cols())));
    }
    Ok(())
}

/// Mean over positions of `-log softmax(logits_t)[target_t]`.
pub fn ce_loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    check_targets(logits, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(t, &y)| logsumexp_unchecked(logits.row(t)) - logits[(t, y)])
        .sum();
    Ok(total / logits.rows() as f64)
}

/// CE loss and its gradient `(softmax(z) - onehot) / T` with respect to the logits.
pub fn ce_grad(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let loss = ce_loss(logits, targets)?;
    let inv_t = 1.0 / logits.rows() as f64;
    let mut grad = logits.clone();
    for (t, &y) in targets.iter().enumerate() {
        let row = grad.row_mut(t);
        softmax_in_place(row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_t);
    }
    Ok((loss, grad))
}

fn check_kd(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<()> {
    if student.shape() != teacher.shape() {
        return dim_err(format!(
            "student logits are {:?} but teacher logits are {:?}",
            student.shape(),
            teacher.shape()
        ));
    }
    if student.rows() == 0 || student.cols() == 0 {
        return dim_err("distillation loss over empty logits");
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(())
}

fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let lse = logsumexp_unchecked(&scaled);
    scaled.into_iter().map(|v| v - lse).collect()
}

/// `tau^2` times the mean over positions of `KL(softmax(t / tau) || softmax(s / tau))`.
pub fn kl_kd_loss(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<f64> {
    check_kd(student, teacher, temperature)?;
    let mut total = 0.0;
    for t in 0..student.rows() {
        let ls = log_softmax(student.row(t), temperature);
        let lt = log_softmax(teacher.row(t), temperature);
        let kl: f64 = lt
            .iter()
            .zip(&ls)
            .filter(|(a, _)| a.is_finite())
            .map(|(a, b)| a.exp() * (a - b))
            .sum();
        // Rounding can leave a tiny negative value for identical rows.
        total += kl.max(0.0);
    }
    Ok(temperature * temperature * total / student.rows() as f64)
}

/// KD loss and its gradient `tau (p_s - p_t) / T` with respect to the student logits.
pub fn kl_kd_grad(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    let loss = kl_kd_loss(student, teacher, temperature)?;
    let scale = temperature / student.rows() as f64;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for t in 0..student.rows() {
        let ls = log_softmax(student.row(t), temperature);
        let lt = log_softmax(teacher.row(t), temperature);
        for ((g, a), b) in grad.row_mut(t).iter_mut().zip(&ls).zip(&lt) {
            *g = scale * (a.exp() - b.exp());
        }
    }
    Ok((loss, grad))
}

/// `(1 - alpha) ce + alpha (ccot + kd)`.
pub fn total_objective(ce: f64, kd: f64, ccot: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * ce + alpha * (ccot + kd))
}
