//! JSON file formats, run configuration, and deterministic JSON output.
//!
//! Matrices are read either as a sequence file
//! `{"name": .., "rows": N, "cols": d, "data": [[..], ..]}` or as a bare
//! nested array. Floats are written with 17 significant digits, so equal
//! values always print identically and re-parse to the same bits.

use std::io::{self, Write};
use std::path::Path;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::Formatter;
use serde_json::Value;

use crate::align::ReprBundle;
use crate::cost::Projection;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::objective::CoTQuad;
use crate::ot::{SinkhornConfig, TransportPlan};
use crate::toy::TrainConfig;

pub const SEED_ENV: &str = "OTALIGN_SEED";

/// A named token sequence of `rows` vectors of width `cols`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqFile {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl SeqFile {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self { name: name.into(), rows: m.rows(), cols: m.cols(), data: m.to_rows() }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.data.len() != self.rows {
            return Err(Error::Dimension(format!(
                "data: {} rows given but rows is {}",
                self.data.len(),
                self.rows
            )));
        }
        if let Some((i, r)) = self.data.iter().enumerate().find(|(_, r)| r.len() != self.cols) {
            return Err(Error::Dimension(format!("data: row {i} has {} entries but cols is {}", r.len(), self.cols)));
        }
        matrix_from_rows(&self.data, "data")
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<Matrix> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Dimension(format!("{field}: matrix must be non-empty")));
    }
    Matrix::from_rows(rows).map_err(|e| match e {
        Error::Dimension(m) => Error::Dimension(format!("{field}: {m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("{field} {m}")),
        other => other,
    })
}

/// Parses a matrix from a sequence-file object or a nested array; returns
/// the name, if any, with the matrix.
pub fn matrix_from_value(v: Value, field: &str) -> Result<(Option<String>, Matrix)> {
    match v {
        Value::Array(_) => {
            let rows: Vec<Vec<f64>> = serde_json::from_value(v)
                .map_err(|e| Error::Config(format!("{field}: expected an array of number arrays ({e})")))?;
            Ok((None, matrix_from_rows(&rows, field)?))
        }
        Value::Object(map) => {
            let seq = seq_from_map(map, field)?;
            let m = seq.to_matrix().map_err(|e| prefix(e, field))?;
            Ok((Some(seq.name), m))
        }
        _ => Err(Error::Config(format!("{field}: expected a sequence object or a nested array"))),
    }
}

/// Field-by-field decoding, so every error names the offending key.
fn seq_from_map(mut map: serde_json::Map<String, Value>, field: &str) -> Result<SeqFile> {
    const KEYS: [&str; 4] = ["name", "rows", "cols", "data"];
    if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("{field}: unknown field `{k}`, expected one of {KEYS:?}")));
    }
    fn take<T: serde::de::DeserializeOwned>(
        map: &mut serde_json::Map<String, Value>,
        key: &str,
        field: &str,
    ) -> Result<T> {
        let v = map.remove(key).ok_or_else(|| Error::Config(format!("{field}: missing field `{key}`")))?;
        serde_json::from_value(v).map_err(|e| Error::Config(format!("{field}.{key}: {e}")))
    }
    Ok(SeqFile {
        name: take(&mut map, "name", field)?,
        rows: take(&mut map, "rows", field)?,
        cols: take(&mut map, "cols", field)?,
        data: take(&mut map, "data", field)?,
    })
}

fn prefix(e: Error, field: &str) -> Error {
    match e {
        Error::Dimension(m) => Error::Dimension(format!("{field}.{m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("{field}.{m}")),
        other => other,
    }
}

pub fn parse_matrix(text: &str) -> Result<(Option<String>, Matrix)> {
    matrix_from_value(serde_json::from_str(text)?, "matrix")
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_matrix(path: &Path) -> Result<(Option<String>, Matrix)> {
    parse_matrix(&read_text(path)?)
}

/// Reads a `D x d` projection from a matrix file.
pub fn read_projection(path: &Path) -> Result<Projection> {
    Projection::from_matrix(read_matrix(path)?.1)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    #[serde(default)]
    label: Option<String>,
    embeddings: Value,
    hiddens: Value,
}

fn bundle_from_value(v: Value, field: &str) -> Result<ReprBundle> {
    let b: BundleFile = serde_json::from_value(v).map_err(|e| Error::Config(format!("{field}: {e}")))?;
    let (_, emb) = matrix_from_value(b.embeddings, &format!("{field}.embeddings"))?;
    let (_, hid) = matrix_from_value(b.hiddens, &format!("{field}.hiddens"))?;
    ReprBundle::new(emb, hid, b.label.unwrap_or_else(|| field.to_string())).map_err(|e| prefix(e, field))
}

/// A bundle file: `{"label": .., "embeddings": <matrix>, "hiddens": <matrix>}`.
pub fn parse_bundle(text: &str) -> Result<ReprBundle> {
    bundle_from_value(serde_json::from_str(text)?, "bundle")
}

/// A quad file: an object with bundles under `s_raw`, `s_cot`, `t_raw`, `t_cot`.
pub fn parse_quad(text: &str) -> Result<CoTQuad> {
    let v: Value = serde_json::from_str(text)?;
    let Value::Object(mut map) = v else {
        return Err(Error::Config("quad: expected an object".into()));
    };
    const KEYS: [&str; 4] = ["s_raw", "s_cot", "t_raw", "t_cot"];
    if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("quad: unknown field `{k}`, expected one of {KEYS:?}")));
    }
    let mut take = |k: &str| -> Result<ReprBundle> {
        let v = map.remove(k).ok_or_else(|| Error::Config(format!("quad: missing field `{k}`")))?;
        bundle_from_value(v, k)
    };
    let (s_raw, s_cot, t_raw, t_cot) = (take("s_raw")?, take("s_cot")?, take("t_raw")?, take("t_cot")?);
    CoTQuad::new(s_raw, s_cot, t_raw, t_cot)
}

/// Plan output as written by the CLI; re-parses into a [`TransportPlan`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct PlanJson {
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_err: f64,
    pub plan: Vec<Vec<f64>>,
}

impl From<&TransportPlan> for PlanJson {
    fn from(p: &TransportPlan) -> Self {
        Self {
            cost: p.cost,
            converged: p.converged,
            iterations: p.iterations,
            marginal_err: p.marginal_err,
            plan: p.plan.to_rows(),
        }
    }
}

impl PlanJson {
    pub fn into_plan(self) -> Result<TransportPlan> {
        Ok(TransportPlan {
            plan: matrix_from_rows(&self.plan, "plan")?,
            cost: self.cost,
            iterations: self.iterations,
            converged: self.converged,
            marginal_err: self.marginal_err,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { alpha: 0.5, temperature: 1.0 }
    }
}

/// Configuration shared by all subcommands. Every section and key is
/// optional; unknown keys are rejected.
#[derive(Debug, Default, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sinkhorn: SinkhornConfig,
    pub objective: ObjectiveSection,
    pub train: TrainConfig,
    /// Seed for projection initialization and random check instances.
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    /// Replaces every seed with `value` when it is present.
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
            self.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    /// Applies the `OTALIGN_SEED` environment variable.
    pub fn apply_env(&mut self) -> Result<()> {
        self.override_seed(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        if !(0.0..=1.0).contains(&self.objective.alpha) {
            return Err(Error::Config(format!("objective.alpha must lie in [0, 1], got {}", self.objective.alpha)));
        }
        if !(self.objective.temperature > 0.0 && self.objective.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "objective.temperature must be > 0, got {}",
                self.objective.temperature
            )));
        }
        self.train.validate()
    }
}

/// Writes floats as `d.dddddddddddddddde[-]x` (17 significant digits).
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactFloatFormatter;

impl Formatter for ExactFloatFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Compact JSON with 17-significant-digit floats. Non-finite floats become `null`.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, ExactFloatFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{sinkhorn, uniform_measure};

    #[test]
    fn seq_file_round_trip() {
        let m = Matrix::from_rows(&[vec![1.0, 2.5], vec![-3.0, 0.125]]).unwrap();
        let seq = SeqFile::from_matrix("s", &m);
        let text = to_json(&seq).unwrap();
        let (name, back) = parse_matrix(&text).unwrap();
        assert_eq!(name.as_deref(), Some("s"));
        assert_eq!(back, m);
        assert_eq!(parse_matrix("[[1, 2], [3, 4]]").unwrap().1.shape(), (2, 2));
    }

    #[test]
    fn malformed_matrices_name_the_field() {
        let err = parse_matrix(r#"{"name":"x","rows":2,"cols":2,"data":[[1,2]]}"#).unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
        let err = parse_matrix(r#"{"name":"x","rows":1,"cols":3,"data":[[1,2]]}"#).unwrap_err();
        assert!(err.to_string().contains("cols"), "{err}");
        let err = parse_matrix(r#"{"name":"x","rows":1,"cols":1,"data":[[1]],"extra":0}"#).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
        let err = parse_matrix(r#"{"rows":1,"cols":1,"data":[[1]]}"#).unwrap_err();
        assert!(err.to_string().contains("name"), "{err}");
        assert!(parse_matrix("[[1, 2], [3]]").is_err());
        assert!(parse_matrix("[]").is_err());
        assert!(parse_matrix("{").is_err());
    }

    #[test]
    fn bundles_and_quads() {
        let b = parse_bundle(r#"{"label":"s","embeddings":[[1,0],[0,1]],"hiddens":[[0.5],[0.2]]}"#).unwrap();
        assert_eq!(b.label, "s");
        assert_eq!(b.hiddens.shape(), (2, 1));
        let err = parse_bundle(r#"{"embeddings":[[1,0]],"hiddens":[[0.5],[0.2]]}"#).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));

        let one = r#"{"embeddings":[[1,0]],"hiddens":[[0.5]]}"#;
        let quad = format!(r#"{{"s_raw":{one},"s_cot":{one},"t_raw":{one},"t_cot":{one}}}"#);
        let q = parse_quad(&quad).unwrap();
        assert_eq!(q.t_cot.label, "t_cot");
        let missing = format!(r#"{{"s_raw":{one},"s_cot":{one},"t_raw":{one}}}"#);
        assert!(parse_quad(&missing).unwrap_err().to_string().contains("t_cot"));
    }

    #[test]
    fn floats_print_with_seventeen_digits() {
        assert_eq!(to_json(&(1.0f64 / 3.0)).unwrap(), "3.3333333333333331e-1");
        assert_eq!(to_json(&0.0f64).unwrap(), "0.0000000000000000e0");
        assert_eq!(to_json(&f64::NAN).unwrap(), "null");
        for v in [0.1, 1e-300, 123456.789, -2.5e17, f64::MIN_POSITIVE] {
            let back: f64 = serde_json::from_str(&to_json(&v).unwrap()).unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn plan_json_round_trip() {
        let c = Matrix::from_rows(&[vec![0.0, 1.0, 0.5], vec![1.0, 0.0, 0.5]]).unwrap();
        let (a, b) = (uniform_measure(2).unwrap(), uniform_measure(3).unwrap());
        let plan = sinkhorn(&c, &a, &b, &SinkhornConfig::default()).unwrap();
        let text = to_json(&PlanJson::from(&plan)).unwrap();
        let back: PlanJson = serde_json::from_str(&text).unwrap();
        let back = back.into_plan().unwrap();
        assert_eq!(back, plan);
        back.check_feasible(&a, &b, 1e-9).unwrap();
    }

    #[test]
    fn run_config_defaults_and_validation() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sinkhorn.lambda, 50.0);
        assert_eq!(cfg.objective.alpha, 0.5);
        let cfg = RunConfig::parse(r#"{"sinkhorn":{"lambda":200}}"#).unwrap();
        assert_eq!(cfg.sinkhorn.lambda, 200.0);
        assert_eq!(cfg.sinkhorn.tol, 1e-9);

        let err = RunConfig::parse(r#"{"sinkhorn":{"lamda":200}}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
        assert!(RunConfig::parse(r#"{"bogus":1}"#).is_err());

        let bad = RunConfig::parse(r#"{"objective":{"alpha":2}}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(Some("42")).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (42, 42));
        cfg.override_seed(None).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(cfg.override_seed(Some("x")).is_err());
    }
}
