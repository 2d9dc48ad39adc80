//! Model server: hosts loaded models and answers the line protocol.

mod spec;
mod transcript;

pub use spec::*;
pub use transcript::*;

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::features::FeatureType;
use crate::mlif::{parse_request, ErrCode, ProtocolError, Request, Response};

/// Which registrations a model has received; weights may be absent.
#[derive(Debug, Clone, Default)]
struct Registry {
    nfeatures: usize,
    noutputs: usize,
    features: BTreeMap<usize, (String, FeatureType)>,
    outputs: Vec<(String, OutputType)>,
}

#[derive(Debug, Clone)]
struct Entry {
    model: Option<Arc<LoadedModel>>,
    path: Option<PathBuf>,
    registry: Registry,
    buffer: Option<HashMap<String, f64>>,
    outputs: Option<Vec<(String, Value)>>,
}

impl Entry {
    fn feature_names(&self) -> Vec<String> {
        match &self.model {
            Some(m) => m.spec.features.iter().map(|f| f.0.clone()).collect(),
            None => self.registry.features.values().map(|f| f.0.clone()).collect(),
        }
    }
}

/// Server state; one instance serves one session at a time.
#[derive(Debug, Default)]
pub struct InferenceServer {
    models: BTreeMap<String, Entry>,
    cache: HashMap<PathBuf, Arc<LoadedModel>>,
    load_count: usize,
    log: Vec<(String, String)>,
    closed: bool,
    base: Option<PathBuf>,
}

impl InferenceServer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Resolve relative LOAD paths against `dir` instead of the working
    /// directory.
    pub fn with_base_dir(dir: impl Into<PathBuf>) -> Self {
        InferenceServer {
            base: Some(dir.into()),
            ..Self::default()
        }
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = match &self.base {
            Some(b) if Path::new(path).is_relative() => b.join(path),
            _ => PathBuf::from(path),
        };
        std::fs::canonicalize(&p).unwrap_or(p)
    }

    /// Number of spec files actually read from disk.
    pub fn load_count(&self) -> usize {
        self.load_count
    }

    /// `(request, response)` lines in arrival order.
    pub fn log(&self) -> &[(String, String)] {
        &self.log
    }

    pub fn close_count(&self) -> usize {
        self.log.iter().filter(|(r, _)| r == "CLOSE").count()
    }

    pub fn loaded_models(&self) -> Vec<String> {
        self.models
            .iter()
            .filter(|(_, e)| e.model.is_some())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Start a new session on the same state (after a client reconnects).
    pub fn reopen(&mut self) {
        self.closed = false;
    }

    /// Handle one request line, recording it in the log.
    pub fn handle_line(&mut self, line: &str) -> Response {
        let resp = match parse_request(line) {
            Ok(req) => self.handle(&req),
            Err(e) => parse_error(&e),
        };
        self.log.push((line.to_string(), resp.to_string()));
        resp
    }

    pub fn handle(&mut self, req: &Request) -> Response {
        match req {
            Request::Load(path) => self.load(path),
            Request::RegisterModel {
                model,
                features,
                outputs,
            } => self.register_model(model, *features, *outputs),
            Request::RegisterFeature {
                model,
                index,
                name,
                ty,
            } => self.register_feature(model, *index, name, ty),
            Request::RegisterOutput { model, name, ty } => self.register_output(model, name, ty),
            Request::Set { model, pairs } => self.set(model, pairs),
            Request::Run(model) => self.run(model),
            Request::Get { model, output } => self.get(model, output),
            Request::Free(model) => match self.models.remove(model) {
                Some(e) => {
                    if let Some(p) = e.path {
                        self.cache.remove(&p);
                    }
                    Response::ok()
                }
                None => no_model(model),
            },
            Request::Status => Response::value("0"),
            Request::Close => {
                self.closed = true;
                Response::ok()
            }
        }
    }

    fn load(&mut self, path: &str) -> Response {
        let key = self.resolve(path);
        let model = match self.cache.get(&key) {
            Some(m) => m.clone(),
            None => match LoadedModel::load(&key) {
                Ok(m) => {
                    self.load_count += 1;
                    let m = Arc::new(m);
                    self.cache.insert(key.clone(), m.clone());
                    m
                }
                Err(e) => {
                    return Response::err(
                        ErrCode::Parse,
                        format!("cannot load {path}: {}", e.tag()),
                    )
                }
            },
        };
        let name = model.spec.name.clone();
        let entry = Entry {
            registry: Registry {
                nfeatures: model.spec.features.len(),
                noutputs: model.spec.outputs.len(),
                ..Registry::default()
            },
            model: Some(model),
            path: Some(key.clone()),
            buffer: None,
            outputs: None,
        };
        match self.models.get_mut(&name) {
            Some(e) if e.path.as_ref() == Some(&key) => e.outputs = None,
            _ => {
                self.models.insert(name.clone(), entry);
            }
        }
        Response::value(name)
    }

    fn register_model(&mut self, model: &str, nf: usize, no: usize) -> Response {
        match self.models.get_mut(model) {
            Some(Entry { model: Some(m), .. }) => {
                if m.spec.features.len() != nf {
                    return Response::err(
                        ErrCode::Feature,
                        format!("model {model} has {} features", m.spec.features.len()),
                    );
                }
                if m.spec.outputs.len() != no {
                    return Response::err(
                        ErrCode::Output,
                        format!("model {model} has {} outputs", m.spec.outputs.len()),
                    );
                }
                Response::ok()
            }
            _ => {
                self.models.insert(
                    model.to_string(),
                    Entry {
                        model: None,
                        path: None,
                        registry: Registry {
                            nfeatures: nf,
                            noutputs: no,
                            ..Registry::default()
                        },
                        buffer: None,
                        outputs: None,
                    },
                );
                Response::ok()
            }
        }
    }

    fn register_feature(&mut self, model: &str, index: usize, name: &str, ty: &str) -> Response {
        let Some(e) = self.models.get_mut(model) else {
            return no_model(model);
        };
        let Some(ty) = FeatureType::parse(ty) else {
            return Response::err(ErrCode::Feature, format!("unknown type {ty}"));
        };
        if let Some(m) = &e.model {
            return match m.spec.features.get(index) {
                Some((n, t)) if n == name && *t == ty => Response::ok(),
                Some((n, t)) => Response::err(
                    ErrCode::Feature,
                    format!("feature {index} of {model} is {n}:{}", t.name()),
                ),
                None => Response::err(
                    ErrCode::Feature,
                    format!("feature index {index} out of range"),
                ),
            };
        }
        if index >= e.registry.nfeatures {
            return Response::err(
                ErrCode::Feature,
                format!("feature index {index} out of range"),
            );
        }
        if e
            .registry
            .features
            .iter()
            .any(|(i, (n, _))| *i != index && n == name)
        {
            return Response::err(ErrCode::Feature, format!("duplicate feature {name}"));
        }
        e.registry.features.insert(index, (name.to_string(), ty));
        Response::ok()
    }

    fn register_output(&mut self, model: &str, name: &str, ty: &str) -> Response {
        let Some(e) = self.models.get_mut(model) else {
            return no_model(model);
        };
        let Some(ty) = OutputType::parse(ty) else {
            return Response::err(ErrCode::Output, format!("unsupported output type {ty}"));
        };
        if let Some(m) = &e.model {
            return match m.spec.outputs.iter().find(|o| o.0 == name) {
                Some((_, t)) if *t == ty => Response::ok(),
                Some((_, t)) => Response::err(
                    ErrCode::Output,
                    format!("output {name} has type {}", t.name()),
                ),
                None => Response::err(ErrCode::Output, format!("unknown output {name}")),
            };
        }
        if e.registry.outputs.iter().any(|o| o.0 == name) {
            return Response::err(ErrCode::Output, format!("duplicate output {name}"));
        }
        if e.registry.outputs.len() >= e.registry.noutputs {
            return Response::err(ErrCode::Output, "too many outputs".to_string());
        }
        e.registry.outputs.push((name.to_string(), ty));
        Response::ok()
    }

    fn set(&mut self, model: &str, pairs: &[(String, String)]) -> Response {
        let Some(e) = self.models.get_mut(model) else {
            return no_model(model);
        };
        e.buffer = None;
        e.outputs = None;
        let names = e.feature_names();
        let mut buf = HashMap::with_capacity(pairs.len());
        for (n, v) in pairs {
            if !names.contains(n) {
                return Response::err(ErrCode::Feature, format!("unknown feature {n}"));
            }
            let x: f64 = match v.parse() {
                Ok(x) if f64::is_finite(x) => x,
                _ => {
                    return Response::err(ErrCode::Feature, format!("bad value {v} for {n}"))
                }
            };
            if buf.insert(n.clone(), x).is_some() {
                return Response::err(ErrCode::Feature, format!("duplicate feature {n}"));
            }
        }
        e.buffer = Some(buf);
        Response::ok()
    }

    fn run(&mut self, model: &str) -> Response {
        let Some(e) = self.models.get_mut(model) else {
            return no_model(model);
        };
        let Some(m) = e.model.clone() else {
            return Response::err(ErrCode::NoModel, format!("model {model} has no weights"));
        };
        let Some(buf) = e.buffer.take() else {
            return Response::err(ErrCode::NoFeatures, "no features set".to_string());
        };
        let mut x = Vec::with_capacity(m.spec.features.len());
        for (n, _) in &m.spec.features {
            match buf.get(n) {
                Some(v) => x.push(*v),
                None => {
                    return Response::err(ErrCode::NoFeatures, format!("missing feature {n}"))
                }
            }
        }
        match m.predict(&x) {
            Ok(p) if p.probabilities.iter().all(|v| v.is_finite()) => {
                e.outputs = Some(p.outputs);
                Response::ok()
            }
            Ok(_) => Response::err(ErrCode::Internal, "non-finite probabilities".to_string()),
            Err(err) => Response::err(ErrCode::Internal, err.to_string()),
        }
    }

    fn get(&mut self, model: &str, output: &str) -> Response {
        let Some(e) = self.models.get(model) else {
            return no_model(model);
        };
        let Some(outs) = &e.outputs else {
            return Response::err(ErrCode::NoFeatures, "no result; RUN first".to_string());
        };
        match outs.iter().find(|o| o.0 == output) {
            Some((_, v)) => Response::value(v.wire()),
            None => Response::err(ErrCode::Output, format!("unknown output {output}")),
        }
    }
}

fn no_model(model: &str) -> Response {
    Response::err(ErrCode::NoModel, format!("unknown model {model}"))
}

fn parse_error(e: &ProtocolError) -> Response {
    Response::err(ErrCode::Parse, e.to_string())
}

/// How a `serve` call ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    Closed,
    Eof,
}

/// Answer requests from `input` until CLOSE or end of input.
pub fn serve<R: BufRead, W: Write>(
    server: &mut InferenceServer,
    mut input: R,
    mut output: W,
) -> io::Result<SessionEnd> {
    server.reopen();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if input.read_until(b'\n', &mut buf)? == 0 {
            return Ok(SessionEnd::Eof);
        }
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        let resp = match std::str::from_utf8(&buf) {
            Ok(line) => server.handle_line(line),
            Err(_) => Response::err(ErrCode::Parse, "request is not UTF-8".to_string()),
        };
        writeln!(output, "{resp}")?;
        output.flush()?;
        if server.is_closed() {
            return Ok(SessionEnd::Closed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Mlp;

    fn write_stub(dir: &Path) -> PathBuf {
        let spec = ModelSpec {
            name: "FI".into(),
            schema_version: crate::features::SCHEMA_VERSION,
            features: vec![("a".into(), FeatureType::Int), ("b".into(), FeatureType::Float)],
            outputs: vec![("FI-ShouldInline".into(), OutputType::Bool)],
            classes: vec![0, 1],
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
            weights: "fi.w".into(),
        };
        let mut net = Mlp::zeros(&Mlp::standard_dims(2, 2));
        net.layers.last_mut().unwrap().b[1] = 1.0;
        std::fs::write(dir.join("fi.w"), write_weights(&net)).unwrap();
        let p = dir.join("fi.acpo");
        std::fs::write(&p, write_spec(&spec)).unwrap();
        p
    }

    #[test]
    fn session_state_machine() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_stub(dir.path());
        let mut s = InferenceServer::new();
        let mut say = |l: &str| s.handle_line(l).to_string();
        assert_eq!(say("STATUS"), "OK 0");
        assert_eq!(say(&format!("LOAD {}", p.display())), "OK FI");
        assert_eq!(say(&format!("LOAD {}", p.display())), "OK FI");
        assert_eq!(say("GET FI FI-ShouldInline"), "ERR NOFEATURES no result; RUN first");
        assert_eq!(say("RUN FI"), "ERR NOFEATURES no features set");
        assert_eq!(say("SET FI a=1,Bogus=2"), "ERR FEATURE unknown feature Bogus");
        assert_eq!(say("SET FI a=1"), "OK");
        assert_eq!(say("RUN FI"), "ERR NOFEATURES missing feature b");
        assert_eq!(say("SET FI a=1,b=0.5"), "OK");
        assert_eq!(say("RUN FI"), "OK");
        assert_eq!(say("GET FI FI-ShouldInline"), "OK 1");
        assert_eq!(say("GET FI FI-ShouldInline"), "OK 1");
        assert_eq!(say("GET FI Nope"), "ERR OUTPUT unknown output Nope");
        assert_eq!(say("RUN FI"), "ERR NOFEATURES no features set");
        assert_eq!(say("FROB"), "ERR PARSE unknown verb `FROB`");
        assert_eq!(say("FREE FI"), "OK");
        assert_eq!(say("RUN FI"), "ERR NOMODEL unknown model FI");
        assert_eq!(say("LOAD /nonexistent.acpo"), "ERR PARSE cannot load /nonexistent.acpo: not found");
        assert_eq!(say("CLOSE"), "OK");
        assert_eq!(s.load_count(), 1);
        assert_eq!(s.close_count(), 1);
    }

    #[test]
    fn registration_checks_loaded_spec() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_stub(dir.path());
        let mut s = InferenceServer::new();
        s.handle_line(&format!("LOAD {}", p.display()));
        let mut say = |l: &str| s.handle_line(l).to_string();
        assert_eq!(say("REGISTER MODEL FI 2 1"), "OK");
        assert!(say("REGISTER MODEL FI 3 1").starts_with("ERR FEATURE"));
        assert_eq!(say("REGISTER FEATURE FI 1 b float"), "OK");
        assert!(say("REGISTER FEATURE FI 1 b int").starts_with("ERR FEATURE"));
        assert_eq!(say("REGISTER OUTPUT FI FI-ShouldInline bool"), "OK");
        assert!(say("REGISTER OUTPUT FI LU-Count int").starts_with("ERR OUTPUT"));
        assert!(say("REGISTER FEATURE XX 0 a int").starts_with("ERR NOMODEL"));
        assert_eq!(say("REGISTER MODEL P 1 1"), "OK");
        assert_eq!(say("REGISTER FEATURE P 0 a int"), "OK");
        assert_eq!(say("SET P a=3"), "OK");
        assert!(say("RUN P").starts_with("ERR NOMODEL"));
    }

    #[test]
    fn serve_loop_survives_garbage() {
        let mut s = InferenceServer::new();
        let input: &[u8] = b"STATUS\n\xff\xfe\nRUN\nCLOSE\nSTATUS\n";
        let mut out = Vec::new();
        assert_eq!(serve(&mut s, input, &mut out).unwrap(), SessionEnd::Closed);
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "OK 0");
        assert!(lines[1].starts_with("ERR PARSE"));
        assert!(lines[2].starts_with("ERR PARSE"));
        assert_eq!(lines[3], "OK");
    }
}
