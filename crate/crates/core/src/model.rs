//! Per-pass model handles: gather features, ask the server, return typed
//! advice.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::features::{FeatureError, FeatureVector, ModelKind};
use crate::mlif::MlInterface;
use crate::server::{OutputType, Value};

/// Result fields a handle must retrieve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdviceSpec {
    pub fields: Vec<(String, OutputType)>,
}

impl AdviceSpec {
    pub fn for_kind(kind: ModelKind) -> Self {
        let fields = match kind {
            ModelKind::LU => vec![
                ("LU-Type".to_string(), OutputType::Int),
                ("LU-Count".to_string(), OutputType::Int),
            ],
            ModelKind::FI => vec![("FI-ShouldInline".to_string(), OutputType::Bool)],
        };
        AdviceSpec { fields }
    }

    /// Extra fields, as with `addRequiredResultField`.
    pub fn add_required_result_field(&mut self, name: &str, ty: OutputType) -> bool {
        if self.fields.iter().any(|(n, _)| n == name) {
            return false;
        }
        self.fields.push((name.to_string(), ty));
        true
    }
}

/// Wall time of each protocol phase of one `get_advice`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdviceTimings {
    pub set: Duration,
    /// LOAD (first call only), RUN and the GETs.
    pub inference: Duration,
}

/// All-or-nothing inference result.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Advice {
    pub present: bool,
    pub fields: Vec<(String, Value)>,
    pub diagnostic: Option<String>,
    pub timings: AdviceTimings,
}

impl Advice {
    fn absent(diagnostic: String, timings: AdviceTimings) -> Self {
        Advice {
            present: false,
            fields: Vec::new(),
            diagnostic: Some(diagnostic),
            timings,
        }
    }

    pub fn get(&self, name: &str) -> Option<Value> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        match self.get(name)? {
            Value::Int(v) => Some(v),
            Value::Bool(_) => None,
        }
    }

    pub fn bool(&self, name: &str) -> Option<bool> {
        match self.get(name)? {
            Value::Bool(b) => Some(b),
            Value::Int(_) => None,
        }
    }
}

#[derive(Debug)]
pub struct AcpoModel {
    kind: ModelKind,
    spec_path: String,
    mlif: Arc<MlInterface>,
    advice_spec: AdviceSpec,
    /// Server-side name, known once LOAD succeeded.
    model_name: Option<String>,
    features: Option<FeatureVector>,
}

impl AcpoModel {
    pub fn new(kind: ModelKind, mlif: Arc<MlInterface>, spec_path: impl Into<String>) -> Self {
        AcpoModel {
            kind,
            spec_path: spec_path.into(),
            mlif,
            advice_spec: AdviceSpec::for_kind(kind),
            model_name: None,
            features: None,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn spec_path(&self) -> &str {
        &self.spec_path
    }

    pub fn model_name(&self) -> Option<&str> {
        self.model_name.as_deref()
    }

    pub fn mlif(&self) -> &Arc<MlInterface> {
        &self.mlif
    }

    pub fn advice_spec_mut(&mut self) -> &mut AdviceSpec {
        &mut self.advice_spec
    }

    pub fn expected_features(&self) -> usize {
        self.kind.len()
    }

    /// Replace the stored features.
    pub fn set_custom_features(&mut self, fv: FeatureVector) -> Result<(), FeatureError> {
        if fv.kind != self.kind {
            return Err(FeatureError::Kind {
                expected: self.kind,
                got: fv.kind,
            });
        }
        fv.validate()?;
        self.features = Some(fv);
        Ok(())
    }

    /// Change one stored feature. Prefer `set_custom_features`.
    pub fn add_feature(&mut self, name: &str, value: f64) -> bool {
        self.features.as_mut().is_some_and(|f| f.set(name, value))
    }

    /// LOAD (once per handle), SET, RUN, then one GET per required field.
    pub fn get_advice(&mut self) -> Advice {
        let mut timings = AdviceTimings::default();
        let Some(fv) = &self.features else {
            return Advice::absent("no features set".into(), timings);
        };
        let t0 = Instant::now();
        let name = match &self.model_name {
            Some(n) => n.clone(),
            None => match self.mlif.load_model(&self.spec_path) {
                Ok(n) => {
                    self.model_name = Some(n.clone());
                    n
                }
                Err(e) => {
                    timings.inference = t0.elapsed();
                    return Advice::absent(format!("loading {}: {e}", self.spec_path), timings);
                }
            },
        };
        let load_time = t0.elapsed();
        let t1 = Instant::now();
        let set = self.mlif.set_custom_features(&name, &fv.values);
        timings.set = t1.elapsed();
        if let Err(e) = set {
            timings.inference = load_time;
            return Advice::absent(format!("setting features: {e}"), timings);
        }
        let t2 = Instant::now();
        let result = (|| {
            self.mlif.run_model(&name)?;
            self.advice_spec
                .fields
                .iter()
                .map(|(field, ty)| {
                    self.mlif
                        .get_model_result(&name, field, *ty)
                        .map(|v| (field.clone(), v))
                })
                .collect::<Result<Vec<_>, _>>()
        })();
        timings.inference = load_time + t2.elapsed();
        match result {
            Ok(fields) => Advice {
                present: true,
                fields,
                diagnostic: None,
                timings,
            },
            Err(e) => Advice::absent(format!("inference: {e}"), timings),
        }
    }

    /// Release the model on the server, e.g. at the end of a module.
    pub fn free(&mut self) {
        if let Some(n) = self.model_name.take() {
            let _ = self.mlif.free_model(&n);
        }
    }
}
