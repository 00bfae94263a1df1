//! Browser bindings for the demo page in `www/`.
//!
//! Each export takes plain numbers or strings and returns a JSON document,
//! so the page needs no generated type definitions. The `*_json` functions
//! hold the logic and are callable (and tested) on the host.

use otalign::align::{layer_ot_loss, ReprBundle};
use otalign::cost::cost_matrix;
use otalign::ot::{exact_ot, sinkhorn, uniform_measure, SinkhornConfig};
use otalign::toy::data::corpus;
use otalign::toy::tokenizer::split_symbols;
use otalign::toy::{copy_task, run, Ablation, EpochRecord, StepRecord, ToyTokenizer, TrainConfig};
use otalign::{Matrix, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Letters, space and the two markers: the width of the bag-of-symbols embedding.
const EMBED_DIM: usize = 29;
/// Embedding norm. Larger values sharpen the attention softmax.
const EMBED_SCALE: f64 = 4.0;
const MAX_POINTS: usize = 64;
const MAX_DEMO_STEPS: usize = 2000;

fn to_js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Sinkhorn versus exact OT between two seeded point clouds on `[0, 1]`.
#[wasm_bindgen]
pub fn plan_1d(n: usize, m: usize, lambda: f64, seed: u64) -> std::result::Result<String, JsError> {
    to_js(plan_1d_json(n, m, lambda, seed))
}

/// Char-tokenized student text aligned to pair-tokenized teacher text.
#[wasm_bindgen]
pub fn align_strings(student: &str, teacher: &str, merges: usize, lambda: f64) -> std::result::Result<String, JsError> {
    to_js(align_strings_json(student, teacher, merges, lambda))
}

/// A short toy distillation run; returns the per-epoch loss curve.
#[wasm_bindgen]
pub fn train_curve(ablation: &str, steps: usize, seed: u64) -> std::result::Result<String, JsError> {
    to_js(train_curve_json(ablation, steps, seed))
}

#[derive(Serialize)]
struct PlanDemo {
    xs: Vec<f64>,
    ys: Vec<f64>,
    cost: Vec<Vec<f64>>,
    plan: Vec<Vec<f64>>,
    exact_plan: Vec<Vec<f64>>,
    sinkhorn_cost: f64,
    exact_cost: f64,
    iterations: usize,
    converged: bool,
}

fn sorted_points(n: usize, seed: u64) -> Vec<f64> {
    let mut v: Vec<f64> = Matrix::seeded_uniform(n, 1, 0.5, seed).as_slice().iter().map(|x| x + 0.5).collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn plan_1d_json(n: usize, m: usize, lambda: f64, seed: u64) -> Result<String> {
    let (n, m) = (n.clamp(1, MAX_POINTS), m.clamp(1, MAX_POINTS));
    let xs = sorted_points(n, seed);
    let ys = sorted_points(m, seed.wrapping_add(1));
    let c = Matrix::from_fn(n, m, |i, j| (xs[i] - ys[j]).abs());
    let (a, b) = (uniform_measure(n)?, uniform_measure(m)?);
    let plan = sinkhorn(&c, &a, &b, &SinkhornConfig::with_lambda(lambda))?;
    let exact = exact_ot(&c, &a, &b)?;
    Ok(serde_json::to_string(&PlanDemo {
        cost: c.to_rows(),
        plan: plan.plan.to_rows(),
        exact_plan: exact.plan.to_rows(),
        sinkhorn_cost: plan.cost,
        exact_cost: exact.cost,
        iterations: plan.iterations,
        converged: plan.converged,
        xs,
        ys,
    })?)
}

/// Scaled bag-of-symbols vector of one token, so tokens that share letters
/// look alike whichever tokenizer produced them.
fn embed(token: &str) -> Result<Vec<f64>> {
    let alphabet = otalign::toy::tokenizer::base_alphabet();
    let mut v = vec![0.0; EMBED_DIM];
    for sym in split_symbols(token)? {
        let k = alphabet.iter().position(|a| a == sym).expect("split_symbols yields base symbols");
        v[k] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Ok(v.into_iter().map(|x| EMBED_SCALE * x / norm).collect())
}

/// Embeddings and causal running means, as the toy models build hiddens.
fn bundle(tok: &ToyTokenizer, text: &str, label: &str) -> Result<(Vec<String>, ReprBundle)> {
    let ids = tok.encode(text)?;
    let tokens: Vec<String> = ids.iter().map(|&i| tok.symbol(i).unwrap_or("?").to_string()).collect();
    let rows = tokens.iter().map(|t| embed(t)).collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; EMBED_DIM];
    let means: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .map(|(t, r)| {
            acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
            acc.iter().map(|a| a / (t + 1) as f64).collect()
        })
        .collect();
    let b = ReprBundle::new(Matrix::from_rows(&rows)?, Matrix::from_rows(&means)?, label)?;
    Ok((tokens, b))
}

#[derive(Serialize)]
struct AlignDemo {
    student_tokens: Vec<String>,
    teacher_tokens: Vec<String>,
    emb_cost: Vec<Vec<f64>>,
    emb_plan: Vec<Vec<f64>>,
    hid_cost: Vec<Vec<f64>>,
    hid_plan: Vec<Vec<f64>>,
    emb_loss: f64,
    hid_loss: f64,
    loss: f64,
    converged: bool,
}

pub fn align_strings_json(student: &str, teacher: &str, merges: usize, lambda: f64) -> Result<String> {
    let samples = copy_task(200, 0)?;
    let pair = ToyTokenizer::pair_from_corpus(&corpus(&samples), merges)?;
    let (student_tokens, s) = bundle(&ToyTokenizer::char(), student, "student")?;
    let (teacher_tokens, t) = bundle(&pair, teacher, "teacher")?;
    let r = layer_ot_loss(&s, &t, None, None, &SinkhornConfig::with_lambda(lambda))?;
    Ok(serde_json::to_string(&AlignDemo {
        emb_cost: cost_matrix(&s.embeddings, &t.embeddings, None)?.to_rows(),
        hid_cost: cost_matrix(&s.hiddens, &t.hiddens, None)?.to_rows(),
        emb_plan: r.emb_plan.plan.to_rows(),
        hid_plan: r.hid_plan.plan.to_rows(),
        emb_loss: r.emb_loss,
        hid_loss: r.hid_loss,
        loss: r.loss,
        converged: r.converged(),
        student_tokens,
        teacher_tokens,
    })?)
}

#[derive(Serialize)]
struct TrainDemo<'a> {
    ablation: &'static str,
    initial_ot: Option<f64>,
    epochs: &'a [EpochRecord],
    last: Option<&'a StepRecord>,
    diverged: bool,
}

pub fn train_curve_json(ablation: &str, steps: usize, seed: u64) -> Result<String> {
    let ablation: Ablation = ablation.parse()?;
    let cfg = TrainConfig {
        steps: steps.clamp(1, MAX_DEMO_STEPS),
        seed,
        ablation,
        samples: 80,
        teacher_steps: 400,
        ..TrainConfig::default()
    };
    let (log, _) = run(&cfg, |_| {})?;
    Ok(serde_json::to_string(&TrainDemo {
        ablation: ablation.name(),
        initial_ot: log.initial.ccot,
        epochs: &log.epochs,
        last: log.records.last(),
        diverged: log.diverged,
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn plan_demo_is_consistent() {
        let v: Value = serde_json::from_str(&plan_1d_json(5, 7, 200.0, 3).unwrap()).unwrap();
        let plan = v["plan"].as_array().unwrap();
        assert_eq!(plan.len(), 5);
        assert_eq!(plan[0].as_array().unwrap().len(), 7);
        let (s, e) = (v["sinkhorn_cost"].as_f64().unwrap(), v["exact_cost"].as_f64().unwrap());
        assert!(s >= e - 1e-9 && s - e < 0.05, "{s} vs {e}");
        assert!(v["converged"].as_bool().unwrap());
        // Out-of-range sizes are clamped rather than rejected.
        let v: Value = serde_json::from_str(&plan_1d_json(0, 500, 50.0, 0).unwrap()).unwrap();
        assert_eq!(v["xs"].as_array().unwrap().len(), 1);
        assert_eq!(v["ys"].as_array().unwrap().len(), MAX_POINTS);
        assert!(plan_1d_json(3, 3, -1.0, 0).is_err());
    }

    #[test]
    fn align_demo_shapes_and_losses() {
        let v: Value = serde_json::from_str(&align_strings_json("copy abc", "copy abc", 24, 50.0).unwrap()).unwrap();
        let (n, m) = (v["student_tokens"].as_array().unwrap().len(), v["teacher_tokens"].as_array().unwrap().len());
        assert_eq!(n, 8);
        assert!(m < n, "pair tokenizer should merge");
        assert_eq!(v["emb_plan"].as_array().unwrap().len(), n);
        let (e, h, l) = (v["emb_loss"].as_f64().unwrap(), v["hid_loss"].as_f64().unwrap(), v["loss"].as_f64().unwrap());
        assert!((e + h - l).abs() < 1e-12);
        assert!(align_strings_json("ABC", "abc", 4, 50.0).is_err());
        assert!(align_strings_json("", "abc", 4, 50.0).is_err());
    }

    #[test]
    fn train_demo_runs() {
        let v: Value = serde_json::from_str(&train_curve_json("crc", 40, 1).unwrap()).unwrap();
        assert_eq!(v["ablation"], "crc");
        assert!(!v["epochs"].as_array().unwrap().is_empty());
        assert!(v["initial_ot"].as_f64().is_some());
        let v: Value = serde_json::from_str(&train_curve_json("only-cot", 10, 1).unwrap()).unwrap();
        assert!(v["initial_ot"].is_null());
        assert!(train_curve_json("nope", 10, 1).is_err());
    }
}
