//! Text formats: `key=value` configs and the versioned model file.
//!
//! A model file starts with [`MODEL_HEADER`], then a `status` line
//! (`refined` or `2sr-only`), the config echo between `config` and `end`,
//! and named sections. Matrices are written as `matrix NAME ROWS COLS`
//! followed by one row-major line per row; floats use the shortest
//! representation that parses back to the same value.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap, RffMap};
use crate::inference::ConditionalTensor;
use crate::model::{FeatureChoice, HqmmConfig, HqmmModel, Loss, Mode, ModelParts};

pub const MODEL_HEADER: &str = "HSEHQMM-MODEL v1";

fn config_error(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

/// Parses `key=value` lines over the defaults. `#` starts a comment;
/// unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<HqmmConfig> {
    let mut c = HqmmConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_error(line_no, format!("expected key=value, got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        set_config_value(&mut c, key, value).map_err(|m| config_error(line_no, m))?;
    }
    c.validate().map_err(|e| config_error(0, e.to_string()))?;
    Ok(c)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))
}

pub fn set_config_value(c: &mut HqmmConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "feature_count" => c.feature_count = parse_value(key, value)?,
        "lambda" => c.lambda = parse_value(key, value)?,
        "window" => c.window = parse_value(key, value)?,
        "state_size" => c.state_size = parse_value(key, value)?,
        "learning_rate" => c.learning_rate = parse_value(key, value)?,
        "bptt_horizon" => c.bptt_horizon = parse_value(key, value)?,
        "epochs" => c.epochs = parse_value(key, value)?,
        "batch_size" => c.batch_size = parse_value(key, value)?,
        "grad_clip" => c.grad_clip = parse_value(key, value)?,
        "prediction_horizon" => c.prediction_horizon = parse_value(key, value)?,
        "n_density_samples" => c.n_density_samples = parse_value(key, value)?,
        "hull_samples" => c.hull_samples = parse_value(key, value)?,
        "symbols" => c.symbols = parse_value(key, value)?,
        "loss_horizon" => c.loss_horizon = parse_value(key, value)?,
        "seed" => c.seed = parse_value(key, value)?,
        "mode" => c.mode = value.parse::<Mode>().map_err(|e| e.to_string())?,
        "features" => {
            c.features = match value {
                "rff" => FeatureChoice::Rff,
                "onehot" => FeatureChoice::OneHot,
                _ => return Err(format!("features: expected rff or onehot, got '{value}'")),
            }
        }
        "loss" => {
            c.loss = match value {
                "mse" => Loss::Mse,
                "cross_entropy" => Loss::CrossEntropy,
                _ => return Err(format!("loss: expected mse or cross_entropy, got '{value}'")),
            }
        }
        "bandwidth" => {
            c.bandwidth = match value {
                "median" => None,
                v => Some(parse_value(key, v)?),
            }
        }
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

pub fn config_to_text(c: &HqmmConfig) -> String {
    let features = match c.features {
        FeatureChoice::Rff => "rff",
        FeatureChoice::OneHot => "onehot",
    };
    let loss = match c.loss {
        Loss::Mse => "mse",
        Loss::CrossEntropy => "cross_entropy",
    };
    let bandwidth = c.bandwidth.map_or("median".to_string(), |b| format!("{b}"));
    [
        format!("feature_count={}", c.feature_count),
        format!("lambda={}", c.lambda),
        format!("window={}", c.window),
        format!("state_size={}", c.state_size),
        format!("learning_rate={}", c.learning_rate),
        format!("bptt_horizon={}", c.bptt_horizon),
        format!("epochs={}", c.epochs),
        format!("batch_size={}", c.batch_size),
        format!("grad_clip={}", c.grad_clip),
        format!("prediction_horizon={}", c.prediction_horizon),
        format!("n_density_samples={}", c.n_density_samples),
        format!("hull_samples={}", c.hull_samples),
        format!("mode={}", c.mode.as_str()),
        format!("features={features}"),
        format!("symbols={}", c.symbols),
        format!("bandwidth={bandwidth}"),
        format!("loss={loss}"),
        format!("loss_horizon={}", c.loss_horizon),
        format!("seed={}", c.seed),
    ]
    .join("\n")
        + "\n"
}

pub fn load_config(path: &Path) -> Result<HqmmConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", fields.join(" "));
    }
}

fn write_vector(out: &mut String, name: &str, v: &DVector<f64>) {
    write_matrix(out, name, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
}

fn write_map(out: &mut String, name: &str, map: &FeatureMap) {
    match map.kind() {
        FeatureKind::Rff(r) => {
            let _ = writeln!(out, "map {name} rff {:e} {}", r.bandwidth(), r.seed());
            write_matrix(out, &format!("{name}.frequencies"), r.frequencies());
            write_vector(out, &format!("{name}.phases"), r.phases());
        }
        FeatureKind::OneHot(o) => {
            let _ = writeln!(out, "map {name} onehot {} {}", o.symbols, o.width);
        }
    }
    if let Some(p) = map.projection() {
        write_matrix(out, &format!("{name}.projection"), p);
    }
}

pub fn model_to_text(model: &HqmmModel) -> String {
    let p = model.parts();
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_HEADER}");
    let _ = writeln!(out, "status {}", if p.refined { "refined" } else { "2sr-only" });
    let _ = writeln!(out, "mode {}", p.mode.as_str());
    out.push_str("config\n");
    out.push_str(&config_to_text(&p.config));
    out.push_str("end\n");
    let _ = writeln!(out, "tensor {} {}", p.tensor.out_dim(), p.tensor.obs_dim());
    write_matrix(&mut out, "tensor", p.tensor.matrix());
    write_vector(&mut out, "initial", &p.initial_state);
    write_matrix(&mut out, "samples", &p.density_samples);
    write_vector(&mut out, "obs_mean", &p.obs_mean);
    if let Some(c) = &p.marginalizer {
        write_vector(&mut out, "marginalizer", c);
    }
    write_map(&mut out, "obs", &p.obs_map);
    if let Some(m) = &p.history_map {
        write_map(&mut out, "history", m);
    }
    if let Some(m) = &p.future_map {
        write_map(&mut out, "future", m);
    }
    out
}

struct Reader<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl std::fmt::Display) -> Error {
        Error::ModelFormat(format!("line {}: {message}", self.pos))
    }

    fn next(&mut self) -> Option<&'a str> {
        let l = self.lines.get(self.pos).copied();
        if l.is_some() {
            self.pos += 1;
        }
        l
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    fn expect(&mut self) -> Result<Vec<&'a str>> {
        match self.next() {
            Some(l) => Ok(l.split_whitespace().collect()),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse '{s}'")))
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let head = self.expect()?;
        if head.len() != 4 || head[0] != "matrix" || head[1] != name {
            return Err(self.err(format!("expected matrix {name}")));
        }
        let rows: usize = self.num(head[2])?;
        let cols: usize = self.num(head[3])?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let fields = self.expect()?;
            if fields.len() != cols {
                return Err(self.err(format!("expected {cols} values, found {}", fields.len())));
            }
            for f in fields {
                data.push(self.num::<f64>(f)?);
            }
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn vector(&mut self, name: &str) -> Result<DVector<f64>> {
        let m = self.matrix(name)?;
        if m.ncols() != 1 {
            return Err(self.err(format!("{name} must have one column")));
        }
        Ok(DVector::from_column_slice(m.as_slice()))
    }

    fn map(&mut self, name: &str) -> Result<FeatureMap> {
        let head = self.expect()?;
        if head.len() != 5 || head[0] != "map" || head[1] != name {
            return Err(self.err(format!("expected map {name}")));
        }
        let map = match head[2] {
            "rff" => {
                let bandwidth: f64 = self.num(head[3])?;
                let seed: u64 = self.num(head[4])?;
                let freq = self.matrix(&format!("{name}.frequencies"))?;
                let phases = self.vector(&format!("{name}.phases"))?;
                FeatureMap::rff(RffMap::from_parts(freq, phases, bandwidth, seed)?)
            }
            "onehot" => FeatureMap::one_hot(self.num(head[3])?, self.num(head[4])?),
            other => return Err(self.err(format!("unknown map kind '{other}'"))),
        };
        let proj_head = format!("matrix {name}.projection ");
        if self.peek().is_some_and(|l| l.starts_with(&proj_head)) {
            let p = self.matrix(&format!("{name}.projection"))?;
            return map.with_projection(p);
        }
        Ok(map)
    }

    fn keyword(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let fields = self.expect()?;
        if fields.first() != Some(&key) {
            return Err(self.err(format!("expected '{key}'")));
        }
        Ok(fields[1..].to_vec())
    }
}

pub fn model_from_text(text: &str) -> Result<HqmmModel> {
    let mut r = Reader {
        lines: text.lines().collect(),
        pos: 0,
    };
    match r.next() {
        Some(MODEL_HEADER) => {}
        Some(other) => return Err(r.err(format!("bad header '{other}', expected '{MODEL_HEADER}'"))),
        None => return Err(r.err("empty model file")),
    }
    let refined = match r.keyword("status")?.as_slice() {
        ["refined"] => true,
        ["2sr-only"] => false,
        _ => return Err(r.err("status must be refined or 2sr-only")),
    };
    let mode: Mode = match r.keyword("mode")?.as_slice() {
        [m] => m.parse()?,
        _ => return Err(r.err("mode line")),
    };
    r.keyword("config")?;
    let mut config_text = String::new();
    loop {
        match r.next() {
            Some("end") => break,
            Some(l) => {
                config_text.push_str(l);
                config_text.push('\n');
            }
            None => return Err(r.err("unterminated config block")),
        }
    }
    let config = parse_config(&config_text)?;
    let dims = r.keyword("tensor")?;
    if dims.len() != 2 {
        return Err(r.err("tensor line needs out and obs dimensions"));
    }
    let (out_dim, obs_dim): (usize, usize) = (r.num(dims[0])?, r.num(dims[1])?);
    let tensor = ConditionalTensor::new(r.matrix("tensor")?, out_dim, obs_dim)?;
    let initial_state = r.vector("initial")?;
    let density_samples = r.matrix("samples")?;
    let obs_mean = r.vector("obs_mean")?;
    let marginalizer = if r.peek().is_some_and(|l| l.starts_with("matrix marginalizer ")) {
        Some(r.vector("marginalizer")?)
    } else {
        None
    };
    let obs_map = r.map("obs")?;
    let history_map = if r.peek().is_some_and(|l| l.starts_with("map history ")) {
        Some(r.map("history")?)
    } else {
        None
    };
    let future_map = if r.peek().is_some_and(|l| l.starts_with("map future ")) {
        Some(r.map("future")?)
    } else {
        None
    };
    if let Some(extra) = r.next() {
        if !extra.trim().is_empty() {
            return Err(r.err(format!("unexpected content '{extra}'")));
        }
    }
    HqmmModel::new(ModelParts {
        config,
        mode,
        tensor,
        obs_map,
        history_map,
        future_map,
        initial_state,
        density_samples,
        obs_mean,
        marginalizer,
        refined,
    })
}

pub fn save_model(model: &HqmmModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_text(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<HqmmModel> {
    model_from_text(&std::fs::read_to_string(path)?)
}
