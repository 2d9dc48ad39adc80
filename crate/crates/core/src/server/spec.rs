//! `.acpo` model specs and `ACPOW` weight files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::features::{FeatureType, SCHEMA_VERSION};
use crate::mlif::format_number;
use crate::mlp::{argmax, Mlp, MlpError, HIDDEN_WIDTHS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("spec line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("weights line {line}: {msg}")]
    Weights { line: usize, msg: String },
    #[error("weights do not fit the spec: {0}")]
    Dims(String),
}

impl SpecError {
    /// Short, stable tag for protocol error messages.
    pub fn tag(&self) -> &'static str {
        match self {
            SpecError::Io { .. } => "not found",
            SpecError::Syntax { .. } | SpecError::Invalid(_) => "bad spec",
            SpecError::Version { .. } => "schema version",
            SpecError::Weights { .. } => "bad weights",
            SpecError::Dims(_) => "dimension mismatch",
        }
    }
}

impl From<MlpError> for SpecError {
    fn from(e: MlpError) -> Self {
        SpecError::Dims(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputType {
    Int,
    Bool,
}

impl OutputType {
    pub fn name(self) -> &'static str {
        match self {
            OutputType::Int => "int",
            OutputType::Bool => "bool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "int" => Some(OutputType::Int),
            "bool" => Some(OutputType::Bool),
            _ => None,
        }
    }
}

/// Outputs a server knows how to derive from class probabilities.
pub const KNOWN_OUTPUTS: [(&str, OutputType); 4] = [
    ("LU-Type", OutputType::Int),
    ("LU-Count", OutputType::Int),
    ("FI-ShouldInline", OutputType::Bool),
    ("Class", OutputType::Int),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Bool(bool),
}

impl Value {
    pub fn wire(&self) -> String {
        match self {
            Value::Int(v) => v.to_string(),
            Value::Bool(b) => u8::from(*b).to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub schema_version: u32,
    pub features: Vec<(String, FeatureType)>,
    pub outputs: Vec<(String, OutputType)>,
    pub classes: Vec<i64>,
    pub mean: Vec<f64>,
    /// Zero entries are stored as 1 so standardization never divides by 0.
    pub std: Vec<f64>,
    pub weights: String,
}

fn parse_list<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<Vec<T>, SpecError> {
    s.split(',')
        .map(|t| {
            t.trim().parse().map_err(|_| SpecError::Syntax {
                line,
                msg: format!("bad {what} value `{}`", t.trim()),
            })
        })
        .collect()
}

pub fn parse_spec_text(text: &str) -> Result<ModelSpec, SpecError> {
    let mut name = None;
    let mut schema = None;
    let mut nfeatures: Option<usize> = None;
    let mut features: Vec<(usize, String, FeatureType)> = Vec::new();
    let mut outputs: Vec<(usize, String, OutputType)> = Vec::new();
    let mut classes = None;
    let mut mean = None;
    let mut std = None;
    let mut weights = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let syntax = |msg: String| SpecError::Syntax { line, msg };
        let (key, value) = l
            .split_once('=')
            .ok_or_else(|| syntax("expected key=value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let typed = |v: &str| -> Result<(String, String), SpecError> {
            let (n, t) = v
                .rsplit_once(':')
                .ok_or_else(|| syntax(format!("expected name:type, got `{v}`")))?;
            if n.is_empty() || n.contains([' ', ',', '=']) {
                return Err(syntax(format!("bad name `{n}`")));
            }
            Ok((n.to_string(), t.to_string()))
        };
        if let Some(idx) = key.strip_prefix("feature.") {
            let idx: usize = idx.parse().map_err(|_| syntax(format!("bad index `{idx}`")))?;
            let (n, t) = typed(value)?;
            let ty = FeatureType::parse(&t).ok_or_else(|| syntax(format!("bad type `{t}`")))?;
            features.push((idx, n, ty));
            continue;
        }
        if let Some(idx) = key.strip_prefix("output.") {
            let idx: usize = idx.parse().map_err(|_| syntax(format!("bad index `{idx}`")))?;
            let (n, t) = typed(value)?;
            let ty = OutputType::parse(&t).ok_or_else(|| syntax(format!("bad type `{t}`")))?;
            outputs.push((idx, n, ty));
            continue;
        }
        match key {
            "name" => name = Some(value.to_string()),
            "schema" => {
                schema = Some(value.parse::<u32>().map_err(|_| syntax("bad schema".into()))?)
            }
            "features" => {
                nfeatures = Some(value.parse().map_err(|_| syntax("bad feature count".into()))?)
            }
            "classes" => classes = Some(parse_list::<i64>(value, line, "class")?),
            "standardize.mean" => mean = Some(parse_list::<f64>(value, line, "mean")?),
            "standardize.std" => std = Some(parse_list::<f64>(value, line, "std")?),
            "weights" => weights = Some(value.to_string()),
            other => return Err(syntax(format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| SpecError::Invalid(format!("missing `{k}`"));
    let name = name.ok_or_else(|| missing("name"))?;
    if name.is_empty() || name.contains([' ', ',', '=']) {
        return Err(SpecError::Invalid(format!("bad model name `{name}`")));
    }
    let schema_version = schema.ok_or_else(|| missing("schema"))?;
    if schema_version != SCHEMA_VERSION {
        return Err(SpecError::Version {
            found: schema_version,
        });
    }
    let n = nfeatures.ok_or_else(|| missing("features"))?;
    features.sort_by_key(|f| f.0);
    let indices: Vec<usize> = features.iter().map(|f| f.0).collect();
    if indices != (0..n).collect::<Vec<_>>() {
        return Err(SpecError::Invalid(format!(
            "feature indices must be exactly 0..{n}"
        )));
    }
    let names: BTreeSet<&str> = features.iter().map(|f| f.1.as_str()).collect();
    if names.len() != n {
        return Err(SpecError::Invalid("duplicate feature name".into()));
    }
    outputs.sort_by_key(|o| o.0);
    if outputs.iter().map(|o| o.0).ne(0..outputs.len()) {
        return Err(SpecError::Invalid("output indices must be contiguous from 0".into()));
    }
    let onames: BTreeSet<&str> = outputs.iter().map(|o| o.1.as_str()).collect();
    if onames.len() != outputs.len() || outputs.is_empty() {
        return Err(SpecError::Invalid("outputs must be non-empty and unique".into()));
    }
    for (_, o, t) in &outputs {
        match KNOWN_OUTPUTS.iter().find(|k| k.0 == o) {
            Some((_, kt)) if kt == t => {}
            Some(_) => return Err(SpecError::Invalid(format!("output `{o}` has the wrong type"))),
            None => return Err(SpecError::Invalid(format!("unsupported output `{o}`"))),
        }
    }
    let classes = classes.ok_or_else(|| missing("classes"))?;
    if classes.len() < 2 || classes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SpecError::Invalid(
            "classes must be at least two strictly increasing labels".into(),
        ));
    }
    if onames.contains("FI-ShouldInline") && !classes.contains(&1) {
        return Err(SpecError::Invalid("FI-ShouldInline needs class 1".into()));
    }
    let mean = mean.unwrap_or_else(|| vec![0.0; n]);
    let std: Vec<f64> = std
        .unwrap_or_else(|| vec![1.0; n])
        .into_iter()
        .map(|s| if s == 0.0 { 1.0 } else { s })
        .collect();
    if mean.len() != n || std.len() != n {
        return Err(SpecError::Invalid(format!(
            "standardization vectors need {n} entries"
        )));
    }
    if mean.iter().chain(&std).any(|v| !v.is_finite()) {
        return Err(SpecError::Invalid("non-finite standardization value".into()));
    }
    Ok(ModelSpec {
        name,
        schema_version,
        features: features.into_iter().map(|(_, n, t)| (n, t)).collect(),
        outputs: outputs.into_iter().map(|(_, n, t)| (n, t)).collect(),
        classes,
        mean,
        std,
        weights: weights.ok_or_else(|| missing("weights"))?,
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format_number(*x)).collect::<Vec<_>>().join(",")
}

pub fn write_spec(spec: &ModelSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name={}", spec.name);
    let _ = writeln!(out, "schema={}", spec.schema_version);
    let _ = writeln!(out, "features={}", spec.features.len());
    for (i, (n, t)) in spec.features.iter().enumerate() {
        let _ = writeln!(out, "feature.{i}={n}:{}", t.name());
    }
    for (i, (n, t)) in spec.outputs.iter().enumerate() {
        let _ = writeln!(out, "output.{i}={n}:{}", t.name());
    }
    let classes: Vec<String> = spec.classes.iter().map(i64::to_string).collect();
    let _ = writeln!(out, "classes={}", classes.join(","));
    let _ = writeln!(out, "standardize.mean={}", join(&spec.mean));
    let _ = writeln!(out, "standardize.std={}", join(&spec.std));
    let _ = writeln!(out, "weights={}", spec.weights);
    out
}

pub fn write_weights(net: &Mlp) -> String {
    let mut out = String::from("ACPOW 1\n");
    for l in &net.layers {
        let _ = writeln!(out, "LAYER {} {}", l.rows, l.cols);
        for r in 0..l.rows {
            let row: Vec<String> = l.w[r * l.cols..(r + 1) * l.cols]
                .iter()
                .map(|v| format_number(*v))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        let bias: Vec<String> = l.b.iter().map(|v| format_number(*v)).collect();
        let _ = writeln!(out, "BIAS {}", bias.join(" "));
    }
    out
}

pub fn parse_weights(text: &str) -> Result<Mlp, SpecError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let werr = |line: usize, msg: &str| SpecError::Weights {
        line,
        msg: msg.to_string(),
    };
    match lines.next() {
        Some((_, "ACPOW 1")) => {}
        Some((n, _)) => return Err(werr(n, "expected header `ACPOW 1`")),
        None => return Err(werr(1, "empty weights file")),
    }
    let num = |line: usize, t: &str| -> Result<f64, SpecError> {
        let v: f64 = t
            .parse()
            .map_err(|_| werr(line, &format!("bad number `{t}`")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(werr(line, "non-finite value"))
        }
    };
    let mut layers = Vec::new();
    let mut current: Option<(usize, usize, Vec<f64>)> = None;
    for (n, l) in lines {
        if l.is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix("LAYER ") {
            if current.is_some() {
                return Err(werr(n, "LAYER before BIAS"));
            }
            let dims: Vec<&str> = rest.split_whitespace().collect();
            let [r, c] = dims[..] else {
                return Err(werr(n, "expected `LAYER <rows> <cols>`"));
            };
            let r: usize = r.parse().map_err(|_| werr(n, "bad rows"))?;
            let c: usize = c.parse().map_err(|_| werr(n, "bad cols"))?;
            current = Some((r, c, Vec::with_capacity(r * c)));
        } else if let Some(rest) = l.strip_prefix("BIAS") {
            let (rows, cols, w) = current.take().ok_or_else(|| werr(n, "BIAS before LAYER"))?;
            if w.len() != rows * cols {
                return Err(werr(n, &format!("expected {} weights, got {}", rows * cols, w.len())));
            }
            let b = rest
                .split_whitespace()
                .map(|t| num(n, t))
                .collect::<Result<Vec<_>, _>>()?;
            if b.len() != rows {
                return Err(werr(n, &format!("expected {rows} biases, got {}", b.len())));
            }
            layers.push(crate::mlp::Layer { rows, cols, w, b });
        } else {
            let (_, _, w) = current
                .as_mut()
                .ok_or_else(|| werr(n, "values outside a layer"))?;
            for t in l.split_whitespace() {
                w.push(num(n, t)?);
            }
        }
    }
    if current.is_some() {
        return Err(werr(0, "missing final BIAS"));
    }
    let net = Mlp { layers };
    net.validate()?;
    Ok(net)
}

/// A spec together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub spec: ModelSpec,
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class_index: usize,
    pub outputs: Vec<(String, Value)>,
}

impl LoadedModel {
    pub fn new(spec: ModelSpec, net: Mlp) -> Result<Self, SpecError> {
        net.validate()?;
        let expected = Mlp::standard_dims(spec.features.len(), spec.classes.len());
        if net.dims() != expected {
            return Err(SpecError::Dims(format!(
                "layer sizes {:?}, expected {:?} (hidden widths {:?})",
                net.dims(),
                expected,
                HIDDEN_WIDTHS
            )));
        }
        Ok(LoadedModel { spec, net })
    }

    /// Read a spec file and the weights it names (relative to the spec's
    /// directory).
    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let io = |p: &Path, e: std::io::Error| SpecError::Io {
            path: p.display().to_string(),
            msg: e.to_string(),
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let spec = parse_spec_text(&text)?;
        let wpath: PathBuf = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&spec.weights);
        let wtext = std::fs::read_to_string(&wpath).map_err(|e| io(&wpath, e))?;
        LoadedModel::new(spec, parse_weights(&wtext)?)
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.spec.mean)
            .zip(&self.spec.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Forward pass on raw (unstandardized) features and derived outputs.
    pub fn predict(&self, raw: &[f64]) -> Result<Prediction, MlpError> {
        let probs = self.net.forward(&self.standardize(raw))?;
        let k = argmax(&probs);
        let count = self.spec.classes[k];
        let trip = self
            .spec
            .features
            .iter()
            .position(|(n, _)| n == "TripCount")
            .map(|i| raw[i]);
        let outputs = self
            .spec
            .outputs
            .iter()
            .map(|(name, _)| {
                let v = match name.as_str() {
                    "LU-Count" => Value::Int(count),
                    "LU-Type" => Value::Int(lu_type(count, trip)),
                    "FI-ShouldInline" => {
                        let one = self.spec.classes.iter().position(|c| *c == 1).expect("validated");
                        Value::Bool(probs[one] >= 0.5)
                    }
                    _ => Value::Int(count),
                };
                (name.clone(), v)
            })
            .collect();
        Ok(Prediction {
            probabilities: probs,
            class_index: k,
            outputs,
        })
    }
}

/// Unroll type code implied by a predicted count and the `TripCount`
/// feature (0 or absent meaning unknown).
pub fn lu_type(count: i64, trip: Option<f64>) -> i64 {
    let trip = trip.filter(|t| *t > 0.0);
    match (count, trip) {
        (c, _) if c <= 1 => 0,
        (c, Some(t)) if c as f64 >= t => 1,
        (_, Some(_)) => 2,
        (_, None) => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lu_spec() -> ModelSpec {
        ModelSpec {
            name: "LU".into(),
            schema_version: SCHEMA_VERSION,
            features: crate::features::LU_FEATURES
                .iter()
                .map(|(n, t)| (n.to_string(), *t))
                .collect(),
            outputs: vec![
                ("LU-Type".into(), OutputType::Int),
                ("LU-Count".into(), OutputType::Int),
            ],
            classes: vec![0, 2, 4, 8, 16, 32, 64],
            mean: vec![0.5; 30],
            std: vec![2.0; 30],
            weights: "w.txt".into(),
        }
    }

    #[test]
    fn spec_round_trip_and_validation() {
        let spec = lu_spec();
        let text = write_spec(&spec);
        assert_eq!(parse_spec_text(&text).unwrap(), spec);
        let gap = text.replace("feature.7=", "feature.31=");
        assert!(matches!(parse_spec_text(&gap), Err(SpecError::Invalid(_))));
        let ver = text.replace("schema=1", "schema=9");
        assert_eq!(parse_spec_text(&ver), Err(SpecError::Version { found: 9 }));
        let labels = text.replace("classes=0,2,4", "classes=0,4,2");
        assert!(parse_spec_text(&labels).is_err());
        let zero_std = text.replace("standardize.std=2,", "standardize.std=0,");
        assert_eq!(parse_spec_text(&zero_std).unwrap().std[0], 1.0);
    }

    #[test]
    fn weights_round_trip_exactly() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::he_init(&[4, 3, 2], &mut rng);
        let back = parse_weights(&write_weights(&net)).unwrap();
        assert_eq!(back, net);
        let broken = write_weights(&net).replacen("LAYER 3 4", "LAYER 3 5", 1);
        assert!(matches!(parse_weights(&broken), Err(SpecError::Weights { .. })));
        assert!(parse_weights("garbage").is_err());
    }

    #[test]
    fn type_rule() {
        assert_eq!(lu_type(0, Some(8.0)), 0);
        assert_eq!(lu_type(8, Some(8.0)), 1);
        assert_eq!(lu_type(4, Some(8.0)), 2);
        assert_eq!(lu_type(4, Some(0.0)), 3);
        assert_eq!(lu_type(4, None), 3);
    }

    #[test]
    fn stub_model_predicts_bias_class() {
        let spec = lu_spec();
        let mut net = Mlp::zeros(&Mlp::standard_dims(30, 7));
        net.layers.last_mut().unwrap().b[2] = 1.0;
        let model = LoadedModel::new(spec, net).unwrap();
        let mut x = vec![0.0; 30];
        x[5] = 10.0;
        let p = model.predict(&x).unwrap();
        assert_eq!(p.outputs[1], ("LU-Count".to_string(), Value::Int(4)));
        assert_eq!(p.outputs[0].1, Value::Int(2));
        assert!(LoadedModel::new(lu_spec(), Mlp::zeros(&[30, 7])).is_err());
    }
}
