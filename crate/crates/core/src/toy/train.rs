//! Distillation loop for the toy models.
//!
//! The teacher is trained on the task by cross-entropy alone, then frozen,
//! and its response representations are cached. The student is trained by
//! plain gradient descent on
//! `(1 - alpha) CE + alpha (CCoT + KD)`, with the projections between the
//! two representation spaces learned alongside it. OT plans are treated as
//! constants when differentiating.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{copy_task, corpus, Sample};
use super::model::{Forward, ToyLM, Upstream};
use super::tokenizer::ToyTokenizer;
use crate::align::{cost_gradients, frozen_plan_affinity, frozen_plan_loss, gradient_error, GradCheckReport, ReprBundle};
use crate::cost::{init_projection, Projection};
use crate::error::{dim_err, Error, Result};
use crate::numerics::Matrix;
use crate::objective::{ce_grad, kl_kd_grad, total_objective, CrossPair, ProjectionSet, Side};
use crate::ot::{sinkhorn, uniform_measure, SinkhornConfig, TransportPlan};

/// Configurations of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// CoT-augmented data, no alignment terms.
    OnlyCot,
    /// `L_CST` only.
    Cst,
    /// `L_CRC` only.
    Crc,
    /// Both cross losses on the last hidden layer only.
    OnlyHidden,
    Full,
    /// Teacher shares the student's tokenizer, enabling the KL term.
    SameTokenizer,
}

impl Ablation {
    pub const ALL: [Ablation; 6] =
        [Self::OnlyCot, Self::Cst, Self::Crc, Self::OnlyHidden, Self::Full, Self::SameTokenizer];

    pub fn name(self) -> &'static str {
        match self {
            Self::OnlyCot => "only-cot",
            Self::Cst => "cst",
            Self::Crc => "crc",
            Self::OnlyHidden => "only-hidden",
            Self::Full => "full",
            Self::SameTokenizer => "same-tokenizer",
        }
    }

    pub fn terms(self) -> Terms {
        let all = Terms { cst: true, crc: true, emb: true, hid: true, kd: false };
        match self {
            Self::OnlyCot => Terms { cst: false, crc: false, ..all },
            Self::Cst => Terms { crc: false, ..all },
            Self::Crc => Terms { cst: false, ..all },
            Self::OnlyHidden => Terms { emb: false, ..all },
            Self::Full => all,
            Self::SameTokenizer => Terms { kd: true, ..all },
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Which objective components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Terms {
    pub cst: bool,
    pub crc: bool,
    pub emb: bool,
    pub hid: bool,
    pub kd: bool,
}

impl Terms {
    fn ot(&self) -> bool {
        (self.cst || self.crc) && (self.emb || self.hid)
    }

    fn pairs(&self) -> Vec<CrossPair> {
        let mut pairs = Vec::new();
        if self.crc {
            pairs.extend(CrossPair::CRC);
        }
        if self.cst {
            pairs.extend(CrossPair::CST);
        }
        pairs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step size for the two projections. Their OT gradients are orders of
    /// magnitude smaller than the model's CE gradients.
    pub proj_lr: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub batch: usize,
    pub temperature: f64,
    /// Weight of CoT samples relative to raw ones in the CE and KD terms.
    pub cot_ratio: f64,
    pub ablation: Ablation,
    pub samples: usize,
    pub student_dim: usize,
    pub student_hidden: usize,
    pub teacher_dim: usize,
    pub teacher_hidden: usize,
    pub teacher_merges: usize,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.5,
            proj_lr: 100.0,
            alpha: 0.5,
            lambda: 50.0,
            seed: 0,
            batch: 4,
            temperature: 1.0,
            cot_ratio: 1.0,
            ablation: Ablation::Full,
            samples: 200,
            student_dim: 8,
            student_hidden: 16,
            teacher_dim: 12,
            teacher_hidden: 20,
            teacher_merges: 24,
            teacher_steps: 1000,
            teacher_lr: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        for (name, v) in [("lr", self.lr), ("proj_lr", self.proj_lr), ("teacher_lr", self.teacher_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.cot_ratio >= 0.0 && self.cot_ratio.is_finite()) {
            return bad(format!("cot_ratio must be >= 0, got {}", self.cot_ratio));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        let dims = [self.student_dim, self.student_hidden, self.teacher_dim, self.teacher_hidden];
        if dims.contains(&0) {
            return bad("model widths must be >= 1".into());
        }
        self.sinkhorn().validate()
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig::with_lambda(self.lambda)
    }

    /// Whether the run ever looks at the teacher.
    pub fn uses_teacher(&self) -> bool {
        let t = self.ablation.terms();
        self.alpha > 0.0 && (t.ot() || t.kd)
    }

    fn settings(&self) -> Settings {
        Settings {
            alpha: self.alpha,
            temperature: self.temperature,
            cot_ratio: self.cot_ratio,
            terms: self.ablation.terms(),
            sinkhorn: self.sinkhorn(),
        }
    }
}

/// A token sequence split into prompt and response.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
}

impl Seq {
    pub fn new(prompt: Vec<usize>, response: Vec<usize>) -> Result<Self> {
        if prompt.is_empty() || response.is_empty() {
            return dim_err("prompt and response must both be non-empty");
        }
        let prompt_len = prompt.len();
        let mut ids = prompt;
        ids.extend(response);
        Ok(Self { ids, prompt_len })
    }

    pub fn encode(tok: &ToyTokenizer, prompt: &str, response: &str) -> Result<Self> {
        Self::new(tok.encode(prompt)?, tok.encode(response)?)
    }

    /// Rows whose logits predict the response tokens.
    fn predict_rows(&self) -> (usize, usize) {
        (self.prompt_len - 1, self.ids.len() - 1)
    }

    fn targets(&self) -> &[usize] {
        &self.ids[self.prompt_len..]
    }

    /// Rows holding the response tokens.
    fn response_rows(&self) -> (usize, usize) {
        (self.prompt_len, self.ids.len())
    }
}

/// Frozen teacher outputs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherView {
    /// Response-row representations.
    pub bundle: ReprBundle,
    /// Logits on the response-predicting rows.
    pub logits: Matrix,
}

impl TeacherView {
    pub fn compute(teacher: &ToyLM, seq: &Seq, label: &str) -> Result<Self> {
        let f = teacher.forward(&seq.ids)?;
        let (r0, r1) = seq.response_rows();
        let (p0, p1) = seq.predict_rows();
        Ok(Self {
            bundle: ReprBundle::new(f.embeddings.slice_rows(r0, r1), f.hiddens.slice_rows(r0, r1), label)?,
            logits: f.logits.slice_rows(p0, p1),
        })
    }
}

/// One training sample as the student sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub raw: Seq,
    pub cot: Seq,
    pub teacher: Option<[TeacherView; 2]>,
}

impl Example {
    fn seq(&self, side: Side) -> &Seq {
        match side {
            Side::Raw => &self.raw,
            Side::Cot => &self.cot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Student {
    pub model: ToyLM,
    pub proj: ProjectionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrads {
    pub model: ToyLM,
    pub emb_proj: Option<Matrix>,
    pub hid_proj: Option<Matrix>,
}

impl StudentGrads {
    fn zeros(s: &Student) -> Self {
        let m = &s.model;
        let zeros_like = |p: &Option<Projection>| p.as_ref().map(|p| Matrix::zeros(p.input_dim(), p.output_dim()));
        Self {
            model: ToyLM::zeros(m.vocab_size(), m.dim(), m.hidden_dim()),
            emb_proj: zeros_like(&s.proj.emb),
            hid_proj: zeros_like(&s.proj.hid),
        }
    }

    fn add_scaled(&mut self, other: &StudentGrads, scale: f64) -> Result<()> {
        self.model.add_scaled(&other.model, scale)?;
        for (a, b) in [(&mut self.emb_proj, &other.emb_proj), (&mut self.hid_proj, &other.hid_proj)] {
            if let (Some(a), Some(b)) = (a, b) {
                a.add_scaled(b, scale)?;
            }
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.model.all_finite()
            && [&self.emb_proj, &self.hid_proj].iter().all(|p| p.as_ref().is_none_or(Matrix::all_finite))
    }
}

impl Student {
    fn apply(&mut self, g: &StudentGrads, lr: f64, proj_lr: f64) -> Result<()> {
        self.model.add_scaled(&g.model, -lr)?;
        for (p, gp) in [(&mut self.proj.emb, &g.emb_proj), (&mut self.proj.hid, &g.hid_proj)] {
            if let (Some(p), Some(gp)) = (p, gp) {
                p.weights.add_scaled(gp, -proj_lr)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Settings {
    pub alpha: f64,
    pub temperature: f64,
    pub cot_ratio: f64,
    pub terms: Terms,
    pub sinkhorn: SinkhornConfig,
}

/// Objective components of one example or batch. Absent components were not evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Components {
    pub ce: f64,
    pub kd: Option<f64>,
    pub ccot: Option<f64>,
    pub emb_ot: Option<f64>,
    pub hid_ot: Option<f64>,
    pub total: f64,
}

#[derive(Debug)]
pub struct Evaluation {
    pub components: Components,
    pub grads: StudentGrads,
    /// Plans in evaluation order, for replaying the loss with plans frozen.
    pub plans: Vec<TransportPlan>,
    /// With frozen plans: weighted pieces whose differences sum to the
    /// difference of `total` (OT terms enter as `-alpha <T, A>`).
    pub parts: Vec<f64>,
}

/// Loss and gradients for one example. With `frozen` the OT terms reuse
/// those plans instead of solving.
pub fn evaluate(
    student: &Student,
    ex: &Example,
    s: &Settings,
    frozen: Option<&[TransportPlan]>,
) -> Result<Evaluation> {
    let model = &student.model;
    let w_raw = 1.0 / (1.0 + s.cot_ratio);
    let weight = |side: Side| if side == Side::Raw { w_raw } else { 1.0 - w_raw };
    let sides = [Side::Raw, Side::Cot];
    let fwd: Vec<Forward> = sides.iter().map(|&side| model.forward(&ex.seq(side).ids)).collect::<Result<_>>()?;
    if !fwd.iter().all(|f| f.hiddens.all_finite() && f.logits.all_finite()) {
        return Err(Error::NonFinite("model activations overflowed".into()));
    }
    let mut ups: Vec<Upstream> = fwd
        .iter()
        .map(|f| Upstream {
            embeddings: Some(Matrix::zeros(f.embeddings.rows(), f.embeddings.cols())),
            hiddens: Some(Matrix::zeros(f.hiddens.rows(), f.hiddens.cols())),
            logits: Some(Matrix::zeros(f.logits.rows(), f.logits.cols())),
        })
        .collect();
    let idx = |side: Side| if side == Side::Raw { 0 } else { 1 };

    let mut ce = 0.0;
    let mut kd = None;
    let mut parts = Vec::new();
    for &side in &sides {
        let seq = ex.seq(side);
        let (p0, p1) = seq.predict_rows();
        let logits = fwd[idx(side)].logits.slice_rows(p0, p1);
        let (loss, g) = ce_grad(&logits, seq.targets())?;
        ce += weight(side) * loss;
        parts.push((1.0 - s.alpha) * weight(side) * loss);
        add_rows(ups[idx(side)].logits.as_mut().unwrap(), p0, &g, (1.0 - s.alpha) * weight(side));
    }

    let teacher = ex.teacher.as_ref();
    if s.alpha > 0.0 && s.terms.kd {
        let views = teacher.ok_or_else(|| Error::Config("KD term requires teacher outputs".into()))?;
        let mut total = 0.0;
        for &side in &sides {
            let (p0, p1) = ex.seq(side).predict_rows();
            let logits = fwd[idx(side)].logits.slice_rows(p0, p1);
            let (loss, g) = kl_kd_grad(&logits, &views[idx(side)].logits, s.temperature)?;
            total += weight(side) * loss;
            parts.push(s.alpha * weight(side) * loss);
            add_rows(ups[idx(side)].logits.as_mut().unwrap(), p0, &g, s.alpha * weight(side));
        }
        kd = Some(total);
    }

    let mut grads = StudentGrads::zeros(student);
    let mut plans = Vec::new();
    let (mut emb_ot, mut hid_ot) = (None, None);
    if s.alpha > 0.0 && s.terms.ot() {
        let views = teacher.ok_or_else(|| Error::Config("alignment terms require teacher outputs".into()))?;
        let mut frozen_iter = frozen.map(|p| p.iter());
        for pair in s.terms.pairs() {
            let (r0, r1) = ex.seq(pair.student).response_rows();
            let f = &fwd[idx(pair.student)];
            let t = &views[idx(pair.teacher)].bundle;
            let layers = [
                (s.terms.emb, &f.embeddings, &t.embeddings, student.proj.emb.as_ref(), &mut emb_ot, &mut grads.emb_proj),
                (s.terms.hid, &f.hiddens, &t.hiddens, student.proj.hid.as_ref(), &mut hid_ot, &mut grads.hid_proj),
            ];
            for (layer, (on, full, y, p, acc, gp)) in layers.into_iter().enumerate() {
                if !on {
                    continue;
                }
                let x = full.slice_rows(r0, r1);
                let plan = match frozen_iter.as_mut() {
                    Some(it) => it.next().cloned().ok_or_else(|| Error::Dimension("too few frozen plans".into()))?,
                    None => solve_plan(&x, y, p, &s.sinkhorn)?,
                };
                let loss = match frozen {
                    Some(_) => {
                        parts.push(-s.alpha * frozen_plan_affinity(&x, y, p, &plan)?);
                        frozen_plan_loss(&x, y, p, &plan)?
                    }
                    None => plan.cost,
                };
                *acc = Some(acc.unwrap_or(0.0) + loss);
                let cg = cost_gradients(&x, y, p, &plan)?;
                let up = &mut ups[idx(pair.student)];
                let target = if layer == 0 { up.embeddings.as_mut() } else { up.hiddens.as_mut() };
                add_rows(target.unwrap(), r0, &cg.student, s.alpha);
                if let (Some(gp), Some(dp)) = (gp.as_mut(), cg.projection) {
                    gp.add_scaled(&dp, s.alpha)?;
                }
                plans.push(plan);
            }
        }
    }
    let ccot = match (emb_ot, hid_ot) {
        (None, None) => None,
        (e, h) => Some(e.unwrap_or(0.0) + h.unwrap_or(0.0)),
    };
    let total = total_objective(ce, kd.unwrap_or(0.0), ccot.unwrap_or(0.0), s.alpha)?;

    for &side in &sides {
        let g = model.backward_from(&ex.seq(side).ids, &fwd[idx(side)], &ups[idx(side)])?;
        grads.model.add_scaled(&g, 1.0)?;
    }
    Ok(Evaluation { components: Components { ce, kd, ccot, emb_ot, hid_ot, total }, grads, plans, parts })
}

fn solve_plan(x: &Matrix, y: &Matrix, p: Option<&Projection>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let c = crate::cost::cost_matrix(x, y, p)?;
    sinkhorn(&c, &uniform_measure(x.rows())?, &uniform_measure(y.rows())?, cfg)
}

fn add_rows(dst: &mut Matrix, start: usize, src: &Matrix, scale: f64) {
    for i in 0..src.rows() {
        for (d, s) in dst.row_mut(start + i).iter_mut().zip(src.row(i)) {
            *d += scale * s;
        }
    }
}

/// The frozen teacher with its tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Teacher {
    pub tokenizer: ToyTokenizer,
    pub model: ToyLM,
    /// Mean CE over the dataset after pretraining.
    pub final_ce: f64,
}

fn seq_pair(tok: &ToyTokenizer, s: &Sample) -> Result<(Seq, Seq)> {
    Ok((Seq::encode(tok, &s.prompt, &s.response)?, Seq::encode(tok, &s.cot_prompt, &s.cot_response)?))
}

/// Trains the teacher by CE on the dataset. The pair tokenizer is learned
/// from the dataset unless the ablation shares the student's tokenizer.
pub fn pretrain_teacher(cfg: &TrainConfig, samples: &[Sample]) -> Result<Teacher> {
    cfg.validate()?;
    let tokenizer = match cfg.ablation {
        Ablation::SameTokenizer => ToyTokenizer::char(),
        _ => ToyTokenizer::pair_from_corpus(&corpus(samples), cfg.teacher_merges)?,
    };
    let model = ToyLM::init(tokenizer.vocab_size(), cfg.teacher_dim, cfg.teacher_hidden, cfg.seed.wrapping_add(2))?;
    let examples = samples
        .iter()
        .map(|s| {
            let (raw, cot) = seq_pair(&tokenizer, s)?;
            Ok(Example { raw, cot, teacher: None })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut student = Student { model, proj: ProjectionSet::default() };
    let settings = Settings { alpha: 0.0, ..cfg.settings() };
    let mut batches = Batches::new(examples.len(), cfg.batch, cfg.seed.wrapping_add(6));
    for _ in 0..cfg.teacher_steps {
        let (_, grads) = batch_step(&student, &examples, &batches.next_batch(), &settings)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite("teacher pretraining diverged".into()));
        }
        student.apply(&grads, cfg.teacher_lr, 0.0)?;
    }
    let mut ce = 0.0;
    for ex in &examples {
        ce += evaluate(&student, ex, &settings, None)?.components.ce;
    }
    Ok(Teacher { tokenizer, model: student.model, final_ce: ce / examples.len() as f64 })
}

/// Cycles through one seeded permutation of the dataset.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { order, pos: 0, batch }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

fn batch_step(
    student: &Student,
    examples: &[Example],
    batch: &[usize],
    s: &Settings,
) -> Result<(Components, StudentGrads)> {
    let inv = 1.0 / batch.len() as f64;
    let mut grads = StudentGrads::zeros(student);
    let mut sum = Components { ce: 0.0, kd: None, ccot: None, emb_ot: None, hid_ot: None, total: 0.0 };
    let add = |acc: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *acc = Some(acc.unwrap_or(0.0) + v * inv);
        }
    };
    for &i in batch {
        let e = evaluate(student, &examples[i], s, None)?;
        let c = e.components;
        sum.ce += c.ce * inv;
        sum.total += c.total * inv;
        add(&mut sum.kd, c.kd);
        add(&mut sum.ccot, c.ccot);
        add(&mut sum.emb_ot, c.emb_ot);
        add(&mut sum.hid_ot, c.hid_ot);
        grads.add_scaled(&e.grads, inv)?;
    }
    Ok((sum, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub kd: Option<f64>,
    pub ccot: Option<f64>,
    pub emb_ot: Option<f64>,
    pub hid_ot: Option<f64>,
    pub total: f64,
}

/// Averages over the steps of one pass through the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub ce: f64,
    /// Mean alignment loss `L_CCoT`, when evaluated.
    pub ot: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingLog {
    /// Dataset averages at the initial parameters, before any update.
    pub initial: Components,
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub steps_per_epoch: usize,
    pub diverged: bool,
}

impl TrainingLog {
    fn summarize(initial: Components, records: Vec<StepRecord>, steps_per_epoch: usize, diverged: bool) -> Self {
        let epochs = records
            .chunks(steps_per_epoch)
            .enumerate()
            .map(|(epoch, chunk)| {
                let n = chunk.len() as f64;
                let ot = chunk.iter().map(|r| r.ccot).sum::<Option<f64>>().map(|s| s / n);
                EpochRecord {
                    epoch,
                    steps: chunk.len(),
                    ce: chunk.iter().map(|r| r.ce).sum::<f64>() / n,
                    ot,
                    total: chunk.iter().map(|r| r.total).sum::<f64>() / n,
                }
            })
            .collect();
        Self { initial, records, epochs, steps_per_epoch, diverged }
    }

    /// Epochs that cover a full pass.
    pub fn complete_epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |e| e.steps == self.steps_per_epoch)
    }
}

/// Builds the student-side examples, attaching teacher outputs when the
/// configuration needs them.
pub fn build_examples(cfg: &TrainConfig, samples: &[Sample], teacher: Option<&Teacher>) -> Result<Vec<Example>> {
    let tok = ToyTokenizer::char();
    samples
        .iter()
        .map(|s| {
            let (raw, cot) = seq_pair(&tok, s)?;
            let views = match teacher.filter(|_| cfg.uses_teacher()) {
                Some(t) => {
                    let (traw, tcot) = seq_pair(&t.tokenizer, s)?;
                    Some([
                        TeacherView::compute(&t.model, &traw, "teacher/raw")?,
                        TeacherView::compute(&t.model, &tcot, "teacher/cot")?,
                    ])
                }
                None => None,
            };
            Ok(Example { raw, cot, teacher: views })
        })
        .collect()
}

pub fn init_student(cfg: &TrainConfig) -> Result<Student> {
    let model = ToyLM::init(ToyTokenizer::char().vocab_size(), cfg.student_dim, cfg.student_hidden, cfg.seed.wrapping_add(1))?;
    let proj = ProjectionSet {
        emb: Some(init_projection(cfg.teacher_dim, cfg.student_dim, cfg.seed.wrapping_add(3))?),
        hid: Some(init_projection(cfg.teacher_hidden, cfg.student_hidden, cfg.seed.wrapping_add(4))?),
    };
    Ok(Student { model, proj })
}

/// Runs distillation, passing each step record to `on_step` as it is produced.
pub fn train_run_with(
    cfg: &TrainConfig,
    samples: &[Sample],
    teacher: Option<&Teacher>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(TrainingLog, Student)> {
    cfg.validate()?;
    if cfg.uses_teacher() && teacher.is_none() {
        return Err(Error::Config("this configuration needs a pretrained teacher".into()));
    }
    let examples = build_examples(cfg, samples, teacher)?;
    let mut student = init_student(cfg)?;
    let settings = cfg.settings();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch);
    let everything: Vec<usize> = (0..examples.len()).collect();
    let (initial, _) = batch_step(&student, &examples, &everything, &settings)?;
    let mut batches = Batches::new(examples.len(), cfg.batch, cfg.seed.wrapping_add(5));
    let mut records = Vec::with_capacity(cfg.steps);
    let mut diverged = false;
    for step in 0..cfg.steps {
        let (c, grads) = match batch_step(&student, &examples, &batches.next_batch(), &settings) {
            Ok(out) => out,
            Err(Error::NonFinite(_)) => {
                let rec = StepRecord {
                    step,
                    ce: f64::NAN,
                    kd: None,
                    ccot: None,
                    emb_ot: None,
                    hid_ot: None,
                    total: f64::NAN,
                };
                on_step(&rec);
                records.push(rec);
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let rec = StepRecord {
            step,
            ce: c.ce,
            kd: c.kd,
            ccot: c.ccot,
            emb_ot: c.emb_ot,
            hid_ot: c.hid_ot,
            total: c.total,
        };
        on_step(&rec);
        records.push(rec);
        if !c.total.is_finite() || !grads.all_finite() {
            diverged = true;
            break;
        }
        student.apply(&grads, cfg.lr, cfg.proj_lr)?;
    }
    Ok((TrainingLog::summarize(initial, records, steps_per_epoch, diverged), student))
}

pub fn train_run(cfg: &TrainConfig, samples: &[Sample], teacher: Option<&Teacher>) -> Result<TrainingLog> {
    Ok(train_run_with(cfg, samples, teacher, |_| {})?.0)
}

/// Dataset, teacher pretraining when needed, and distillation, all from `cfg`.
pub fn run(cfg: &TrainConfig, on_step: impl FnMut(&StepRecord)) -> Result<(TrainingLog, Option<Teacher>)> {
    cfg.validate()?;
    let samples = copy_task(cfg.samples, cfg.seed)?;
    let teacher = if cfg.uses_teacher() { Some(pretrain_teacher(cfg, &samples)?) } else { None };
    let (log, _) = train_run_with(cfg, &samples, teacher.as_ref(), on_step)?;
    Ok((log, teacher))
}

/// Compares every parameter gradient of the full objective, plans frozen,
/// with central differences on a small random model (`d = 3`, `h = 4`,
/// `V = 10`) against a wider teacher with the same vocabulary, so CE, KD and
/// all eight OT terms contribute.
pub fn objective_grad_check(seed: u64, h: f64) -> Result<GradCheckReport> {
    use rand::Rng;
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 10;
    let mut ids = |n: usize| (0..n).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>();
    let raw = Seq::new(ids(3), ids(4))?;
    let cot = Seq::new(ids(4), ids(7))?;
    let teacher = ToyLM::init(vocab, 5, 6, seed.wrapping_add(100))?;
    let views = [TeacherView::compute(&teacher, &raw, "t/raw")?, TeacherView::compute(&teacher, &cot, "t/cot")?];
    let ex = Example { raw, cot, teacher: Some(views) };
    let student = Student {
        model: ToyLM::init(vocab, 3, 4, seed.wrapping_add(200))?,
        proj: ProjectionSet {
            emb: Some(init_projection(5, 3, seed.wrapping_add(300))?),
            hid: Some(init_projection(6, 4, seed.wrapping_add(400))?),
        },
    };
    let settings = Settings {
        alpha: 0.5,
        temperature: 2.0,
        cot_ratio: 0.5,
        terms: Ablation::SameTokenizer.terms(),
        sinkhorn: SinkhornConfig::default(),
    };
    let base = evaluate(&student, &ex, &settings, None)?;
    let loss = |s: &Student| -> Result<Vec<f64>> { Ok(evaluate(s, &ex, &settings, Some(&base.plans))?.parts) };

    let mut max_err: f64 = 0.0;
    let mut pass = true;
    // Differencing piece by piece keeps the rounding of the large constant
    // parts of the loss out of the numeric derivative.
    let mut check = |analytic: f64, up: Vec<f64>, down: Vec<f64>| {
        let diff: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
        let (err, ok) = gradient_error(analytic, diff / (2.0 * h));
        max_err = max_err.max(err);
        pass &= ok;
    };
    let mut probe = student.clone();
    for block in 0..5 {
        for k in 0..probe.model.params()[block].len() {
            let orig = probe.model.params()[block][k];
            probe.model.params_mut()[block][k] = orig + h;
            let up = loss(&probe)?;
            probe.model.params_mut()[block][k] = orig - h;
            let down = loss(&probe)?;
            probe.model.params_mut()[block][k] = orig;
            check(base.grads.model.params()[block][k], up, down);
        }
    }
    for layer in 0..2 {
        let analytic = if layer == 0 { &base.grads.emb_proj } else { &base.grads.hid_proj };
        let analytic = analytic.as_ref().expect("projections are set");
        for k in 0..analytic.as_slice().len() {
            let orig = slot(&mut probe, layer)[k];
            slot(&mut probe, layer)[k] = orig + h;
            let up = loss(&probe)?;
            slot(&mut probe, layer)[k] = orig - h;
            let down = loss(&probe)?;
            slot(&mut probe, layer)[k] = orig;
            check(analytic.as_slice()[k], up, down);
        }
    }
    Ok(GradCheckReport { max_rel_err: max_err, pass, h })
}

fn slot(s: &mut Student, layer: usize) -> &mut [f64] {
    let p = if layer == 0 { &mut s.proj.emb } else { &mut s.proj.hid };
    p.as_mut().expect("projections are set").weights.as_mut_slice()
}
