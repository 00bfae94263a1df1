//! Subcommand implementations.

use std::io::{self, BufWriter, Write};
use std::path::Path;

use otalign::align::{finite_diff_check, layer_ot_loss, ot_loss, GradCheckReport, ReprBundle};
use otalign::cost::{init_projection, Projection};
use otalign::io::{parse_quad, read_matrix, read_projection, read_text, to_json, PlanJson, RunConfig};
use otalign::objective::{ccot_report, total_objective, ObjectiveConfig, ProjectionSet};
use otalign::ot::{exact_ot, permutation_oracle, sinkhorn, uniform_measure, SinkhornConfig};
use otalign::toy::data::corpus;
use otalign::toy::{copy_task, objective_grad_check, run as train, EpochRecord, ToyTokenizer, TrainConfig};
use otalign::{Error, Matrix, Result};
use serde::Serialize;

use crate::{Cli, Command, OracleMethod, SolverFlags, TokenizerChoice, TrainFlags};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Flagged = 2,
    Diverged = 3,
}

impl Status {
    fn flagged_unless(ok: bool) -> Self {
        if ok {
            Self::Ok
        } else {
            Self::Flagged
        }
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    let mut out = BufWriter::new(io::stdout().lock());
    let status = match cli.command {
        Command::Sinkhorn { cost, solver } => {
            apply_solver(&mut cfg, &solver)?;
            cmd_sinkhorn(&mut out, &cost, &cfg.sinkhorn)?
        }
        Command::Oracle { cost, method } => cmd_oracle(&mut out, &cost, method)?,
        Command::Align { student, teacher, student_hid, teacher_hid, proj, proj_hid, plans, solver } => {
            apply_solver(&mut cfg, &solver)?;
            let hid = student_hid.zip(teacher_hid);
            let files = AlignFiles { student: &student, teacher: &teacher, hid: hid.as_ref().map(|(s, t)| (s.as_path(), t.as_path())) };
            cmd_align(&mut out, files, proj.as_deref(), proj_hid.as_deref(), plans, &cfg.sinkhorn)?
        }
        Command::Ccot { quad, proj, proj_hid, ce, kd, alpha, solver } => {
            apply_solver(&mut cfg, &solver)?;
            if let Some(a) = alpha {
                cfg.objective.alpha = a;
            }
            cfg.validate()?;
            cmd_ccot(&mut out, &quad, proj.as_deref(), proj_hid.as_deref(), ce.map(|ce| (ce, kd.unwrap_or(0.0))), &cfg)?
        }
        Command::Checkgrad { student, teacher, h, proj, toy, seed, solver } => {
            apply_solver(&mut cfg, &solver)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let files = student.as_deref().zip(teacher.as_deref());
            cmd_checkgrad(&mut out, files, h, proj.as_deref(), toy, &cfg)?
        }
        Command::Train(flags) => {
            apply_train(&mut cfg.train, &flags)?;
            cmd_train(&mut out, &cfg.train, flags.quiet)?
        }
        Command::Tokenize { text, kind, merges, seed } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cmd_tokenize(&mut out, &text, kind, merges, &cfg.train)?
        }
    };
    out.flush()?;
    Ok(status)
}

fn apply_solver(cfg: &mut RunConfig, flags: &SolverFlags) -> Result<()> {
    let s = &mut cfg.sinkhorn;
    if let Some(v) = flags.lambda {
        s.lambda = v;
    }
    if let Some(v) = flags.tol {
        s.tol = v;
    }
    if let Some(v) = flags.max_iters {
        s.max_iters = v;
    }
    if let Some(v) = flags.log_domain {
        s.log_domain = v;
    }
    s.validate()
}

fn apply_train(t: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.steps {
        t.steps = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.alpha {
        t.alpha = v;
    }
    if let Some(v) = f.lambda {
        t.lambda = v;
    }
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if let Some(v) = f.batch {
        t.batch = v;
    }
    if let Some(v) = &f.ablation {
        t.ablation = v.parse()?;
    }
    if let Some(v) = f.samples {
        t.samples = v;
    }
    t.validate()
}

fn emit<W: Write, T: Serialize + ?Sized>(out: &mut W, value: &T) -> Result<()> {
    writeln!(out, "{}", to_json(value)?)?;
    Ok(())
}

fn uniform_pair(c: &Matrix) -> Result<(otalign::ot::EmpiricalMeasure, otalign::ot::EmpiricalMeasure)> {
    Ok((uniform_measure(c.rows())?, uniform_measure(c.cols())?))
}

fn cmd_sinkhorn<W: Write>(out: &mut W, cost: &Path, cfg: &SinkhornConfig) -> Result<Status> {
    let (_, c) = read_matrix(cost)?;
    let (a, b) = uniform_pair(&c)?;
    let plan = sinkhorn(&c, &a, &b, cfg)?;
    emit(out, &PlanJson::from(&plan))?;
    Ok(Status::flagged_unless(plan.converged))
}

#[derive(Serialize)]
struct PermutationOut {
    method: &'static str,
    cost: f64,
}

fn cmd_oracle<W: Write>(out: &mut W, cost: &Path, method: OracleMethod) -> Result<Status> {
    let (_, c) = read_matrix(cost)?;
    match method {
        OracleMethod::Flow => {
            let (a, b) = uniform_pair(&c)?;
            emit(out, &PlanJson::from(&exact_ot(&c, &a, &b)?))?;
        }
        OracleMethod::Permutation => {
            emit(out, &PermutationOut { method: "permutation", cost: permutation_oracle(&c)? })?;
        }
    }
    Ok(Status::Ok)
}

/// `--proj` values: an integer seeds a fresh `D x d` projection, anything
/// else names a matrix file.
fn projection(arg: Option<&str>, teacher_dim: usize, student_dim: usize) -> Result<Option<Projection>> {
    match arg {
        None => Ok(None),
        Some(s) => match s.parse::<u64>() {
            Ok(seed) => init_projection(teacher_dim, student_dim, seed).map(Some),
            Err(_) => read_projection(Path::new(s)).map(Some),
        },
    }
}

struct AlignFiles<'a> {
    student: &'a Path,
    teacher: &'a Path,
    hid: Option<(&'a Path, &'a Path)>,
}

#[derive(Serialize)]
struct SingleLayerOut {
    mode: &'static str,
    loss: f64,
    projected: bool,
    converged: bool,
    config: SinkhornConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan: Option<PlanJson>,
}

#[derive(Serialize)]
struct LayersOut {
    mode: &'static str,
    loss: f64,
    emb_loss: f64,
    hid_loss: f64,
    emb_projected: bool,
    hid_projected: bool,
    converged: bool,
    config: SinkhornConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    emb_plan: Option<PlanJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hid_plan: Option<PlanJson>,
}

fn cmd_align<W: Write>(
    out: &mut W,
    files: AlignFiles<'_>,
    proj: Option<&str>,
    proj_hid: Option<&str>,
    plans: bool,
    cfg: &SinkhornConfig,
) -> Result<Status> {
    let (_, x) = read_matrix(files.student)?;
    let (_, y) = read_matrix(files.teacher)?;
    let p_emb = projection(proj, y.cols(), x.cols())?;
    let Some((s_hid, t_hid)) = files.hid else {
        if proj_hid.is_some() {
            return Err(Error::Config("--proj-hid needs --student-hid and --teacher-hid".into()));
        }
        let (loss, plan) = ot_loss(&x, &y, p_emb.as_ref(), cfg)?;
        let converged = plan.converged;
        emit(
            out,
            &SingleLayerOut {
                mode: "single",
                loss,
                projected: p_emb.is_some(),
                converged,
                config: *cfg,
                plan: plans.then(|| PlanJson::from(&plan)),
            },
        )?;
        return Ok(Status::flagged_unless(converged));
    };
    let (_, xh) = read_matrix(s_hid)?;
    let (_, yh) = read_matrix(t_hid)?;
    let p_hid = projection(proj_hid, yh.cols(), xh.cols())?;
    let s = ReprBundle::new(x, xh, "student")?;
    let t = ReprBundle::new(y, yh, "teacher")?;
    let r = layer_ot_loss(&s, &t, p_emb.as_ref(), p_hid.as_ref(), cfg)?;
    emit(
        out,
        &LayersOut {
            mode: "layers",
            loss: r.loss,
            emb_loss: r.emb_loss,
            hid_loss: r.hid_loss,
            emb_projected: r.emb_projected,
            hid_projected: r.hid_projected,
            converged: r.converged(),
            config: r.config,
            emb_plan: plans.then(|| PlanJson::from(&r.emb_plan)),
            hid_plan: plans.then(|| PlanJson::from(&r.hid_plan)),
        },
    )?;
    Ok(Status::flagged_unless(r.converged()))
}

#[derive(Serialize)]
struct TermOut {
    pair: &'static str,
    loss: f64,
    emb_loss: f64,
    hid_loss: f64,
    converged: bool,
}

#[derive(Serialize)]
struct CcotOut {
    ccot: f64,
    crc: f64,
    cst: f64,
    terms: Vec<TermOut>,
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    total: Option<f64>,
    config: SinkhornConfig,
}

fn cmd_ccot<W: Write>(
    out: &mut W,
    quad: &Path,
    proj: Option<&str>,
    proj_hid: Option<&str>,
    ce_kd: Option<(f64, f64)>,
    cfg: &RunConfig,
) -> Result<Status> {
    let q = parse_quad(&read_text(quad)?)?;
    let (s, t) = (&q.s_raw, &q.t_raw);
    let projections = ProjectionSet {
        emb: projection(proj, t.embeddings.cols(), s.embeddings.cols())?,
        hid: projection(proj_hid, t.hiddens.cols(), s.hiddens.cols())?,
    };
    let ocfg = ObjectiveConfig {
        alpha: cfg.objective.alpha,
        temperature: cfg.objective.temperature,
        sinkhorn: cfg.sinkhorn,
        projections,
    };
    let r = ccot_report(&q, &ocfg)?;
    let converged = r.terms.iter().all(|t| t.report.converged());
    let total = ce_kd.map(|(ce, kd)| total_objective(ce, kd, r.ccot, ocfg.alpha)).transpose()?;
    let terms = r
        .terms
        .iter()
        .map(|t| TermOut {
            pair: t.pair,
            loss: t.report.loss,
            emb_loss: t.report.emb_loss,
            hid_loss: t.report.hid_loss,
            converged: t.report.converged(),
        })
        .collect();
    emit(out, &CcotOut { ccot: r.ccot, crc: r.crc, cst: r.cst, terms, alpha: ocfg.alpha, total, config: cfg.sinkhorn })?;
    Ok(Status::flagged_unless(converged))
}

#[derive(Serialize)]
struct CheckOut {
    mode: &'static str,
    #[serde(flatten)]
    report: GradCheckReport,
}

fn cmd_checkgrad<W: Write>(
    out: &mut W,
    files: Option<(&Path, &Path)>,
    h: f64,
    proj: Option<&str>,
    toy: bool,
    cfg: &RunConfig,
) -> Result<Status> {
    let (mode, report) = if toy {
        ("toy", objective_grad_check(cfg.seed, h)?)
    } else {
        let (x, y) = match files {
            Some((s, t)) => (read_matrix(s)?.1, read_matrix(t)?.1),
            None => (
                Matrix::seeded_uniform(3, 4, 1.0, cfg.seed),
                Matrix::seeded_uniform(5, 4, 1.0, cfg.seed.wrapping_add(1)),
            ),
        };
        let p = projection(proj, y.cols(), x.cols())?;
        ("alignment", finite_diff_check(&x, &y, p.as_ref(), &cfg.sinkhorn, h)?)
    };
    emit(out, &CheckOut { mode, report })?;
    Ok(Status::flagged_unless(report.pass))
}

#[derive(Serialize)]
struct Summary<'a> {
    summary: SummaryBody<'a>,
}

#[derive(Serialize)]
struct SummaryBody<'a> {
    steps: usize,
    diverged: bool,
    ablation: &'static str,
    steps_per_epoch: usize,
    teacher_final_ce: Option<f64>,
    first_epoch: Option<&'a EpochRecord>,
    last_epoch: Option<&'a EpochRecord>,
    epochs: &'a [EpochRecord],
    config: &'a TrainConfig,
}

fn cmd_train<W: Write>(out: &mut W, cfg: &TrainConfig, quiet: bool) -> Result<Status> {
    let mut write_err = None;
    let (log, teacher) = train(cfg, |rec| {
        if !quiet && write_err.is_none() {
            if let Err(e) = emit(out, rec) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let complete: Vec<&EpochRecord> = log.complete_epochs().collect();
    emit(
        out,
        &Summary {
            summary: SummaryBody {
                steps: log.records.len(),
                diverged: log.diverged,
                ablation: cfg.ablation.name(),
                steps_per_epoch: log.steps_per_epoch,
                teacher_final_ce: teacher.map(|t| t.final_ce),
                first_epoch: complete.first().copied(),
                last_epoch: complete.last().copied(),
                epochs: &log.epochs,
                config: cfg,
            },
        },
    )?;
    Ok(if log.diverged { Status::Diverged } else { Status::Ok })
}

#[derive(Serialize)]
struct TokenizeOut<'a> {
    kind: &'static str,
    text: &'a str,
    ids: Vec<usize>,
    tokens: Vec<&'a str>,
    vocab_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    merges: Option<&'a [(String, String)]>,
}

fn cmd_tokenize<W: Write>(
    out: &mut W,
    text: &str,
    kind: TokenizerChoice,
    merges: Option<usize>,
    cfg: &TrainConfig,
) -> Result<Status> {
    let (name, tok) = match kind {
        TokenizerChoice::Char => ("char", ToyTokenizer::char()),
        TokenizerChoice::Pair => {
            let samples = copy_task(cfg.samples, cfg.seed)?;
            ("pair", ToyTokenizer::pair_from_corpus(&corpus(&samples), merges.unwrap_or(cfg.teacher_merges))?)
        }
    };
    let ids = tok.encode(text)?;
    let tokens = ids.iter().map(|&i| tok.symbol(i).expect("encoded ids are in the vocabulary")).collect();
    let merges = matches!(kind, TokenizerChoice::Pair).then(|| tok.merges());
    emit(out, &TokenizeOut { kind: name, text, vocab_size: tok.vocab_size(), ids, tokens, merges })?;
    Ok(Status::Ok)
}
