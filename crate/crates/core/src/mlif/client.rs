//! Compiler-side protocol client.

use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::protocol::{format_number, parse_response, ErrCode, Request, Response};
use super::transport::{open_transport, Endpoint, Transport, TransportError};
use crate::server::{InferenceServer, OutputType, Value};

#[derive(Debug, Error)]
pub enum MlError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("server: ERR {code} {msg}")]
    Server { code: ErrCode, msg: String },
    #[error("interface is closed")]
    Closed,
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl MlError {
    pub fn code(&self) -> Option<ErrCode> {
        match self {
            MlError::Server { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// Command used to launch a server when none is listening.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpawnCommand {
    pub program: String,
    /// The endpoint string is appended after these.
    pub args: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub connect_timeout: Duration,
    pub read_timeout: Duration,
    pub spawn: Option<SpawnCommand>,
    /// Shared state for the in-process transport.
    pub server: Option<Arc<Mutex<InferenceServer>>>,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        ConnectOptions {
            connect_timeout: Duration::from_secs(10),
            read_timeout: Duration::from_secs(30),
            spawn: None,
            server: None,
        }
    }
}

struct Inner {
    transport: Option<Box<dyn Transport>>,
    child: Option<Child>,
    transcript: Vec<(String, String)>,
}

/// Internally synchronized: one request in flight at a time.
pub struct MlInterface {
    endpoint: Endpoint,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for MlInterface {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MlInterface")
            .field("endpoint", &self.endpoint)
            .finish()
    }
}

impl MlInterface {
    pub fn connect(endpoint: &Endpoint, opts: ConnectOptions) -> Result<Arc<Self>, MlError> {
        let quick = Duration::from_millis(100).min(opts.connect_timeout);
        let (transport, child) = match (&opts.spawn, endpoint) {
            (Some(cmd), Endpoint::Pipe(_) | Endpoint::Unix(_)) => {
                match open_transport(endpoint, None, quick, opts.read_timeout) {
                    Ok(t) => (t, None),
                    Err(_) => {
                        let mut child = Command::new(&cmd.program)
                            .args(&cmd.args)
                            .arg(endpoint.to_string())
                            .stdin(Stdio::null())
                            .stdout(Stdio::null())
                            .spawn()
                            .map_err(TransportError::Io)?;
                        match open_transport(endpoint, None, opts.connect_timeout, opts.read_timeout)
                        {
                            Ok(t) => (t, Some(child)),
                            Err(e) => {
                                let _ = child.kill();
                                let _ = child.wait();
                                return Err(e.into());
                            }
                        }
                    }
                }
            }
            _ => (
                open_transport(
                    endpoint,
                    opts.server.clone(),
                    opts.connect_timeout,
                    opts.read_timeout,
                )?,
                None,
            ),
        };
        let client = Arc::new(MlInterface {
            endpoint: endpoint.clone(),
            inner: Mutex::new(Inner {
                transport: Some(transport),
                child,
                transcript: Vec::new(),
            }),
        });
        match client.request(&Request::Status)? {
            Response::Ok(_) => Ok(client),
            Response::Err { code, msg } => Err(MlError::Server { code, msg }),
        }
    }

    /// An in-process client over `server`.
    pub fn in_process(server: Arc<Mutex<InferenceServer>>) -> Arc<Self> {
        let opts = ConnectOptions {
            server: Some(server),
            ..ConnectOptions::default()
        };
        Self::connect(&Endpoint::InProcess, opts).expect("in-process server always answers")
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Every `(request, response)` exchanged so far.
    pub fn transcript(&self) -> Vec<(String, String)> {
        self.lock().transcript.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Send one request and wait for its response.
    pub fn request(&self, req: &Request) -> Result<Response, MlError> {
        let line = req.to_string();
        let mut inner = self.lock();
        let t = inner.transport.as_mut().ok_or(MlError::Closed)?;
        let reply = match t.round_trip(&line) {
            Ok(r) => r,
            Err(e) => {
                inner.transport = None;
                return Err(e.into());
            }
        };
        inner.transcript.push((line, reply.clone()));
        parse_response(&reply).ok_or_else(|| MlError::Protocol(format!("bad response `{reply}`")))
    }

    fn expect_ok(&self, req: &Request) -> Result<Option<String>, MlError> {
        match self.request(req)? {
            Response::Ok(v) => Ok(v),
            Response::Err { code, msg } => Err(MlError::Server { code, msg }),
        }
    }

    /// Load a spec; returns the model name the server reports.
    pub fn load_model(&self, spec_path: &str) -> Result<String, MlError> {
        self.expect_ok(&Request::Load(spec_path.to_string()))?
            .ok_or_else(|| MlError::Protocol("LOAD reply without a model name".into()))
    }

    pub fn register_model(&self, model: &str, features: usize, outputs: usize) -> Result<(), MlError> {
        self.expect_ok(&Request::RegisterModel {
            model: model.into(),
            features,
            outputs,
        })
        .map(drop)
    }

    pub fn register_feature(&self, model: &str, index: usize, name: &str, ty: &str) -> Result<(), MlError> {
        self.expect_ok(&Request::RegisterFeature {
            model: model.into(),
            index,
            name: name.into(),
            ty: ty.into(),
        })
        .map(drop)
    }

    pub fn register_output(&self, model: &str, name: &str, ty: &str) -> Result<(), MlError> {
        self.expect_ok(&Request::RegisterOutput {
            model: model.into(),
            name: name.into(),
            ty: ty.into(),
        })
        .map(drop)
    }

    pub fn set_custom_features(&self, model: &str, pairs: &[(String, f64)]) -> Result<(), MlError> {
        let pairs = pairs
            .iter()
            .map(|(n, v)| (n.clone(), format_number(*v)))
            .collect();
        self.expect_ok(&Request::Set {
            model: model.into(),
            pairs,
        })
        .map(drop)
    }

    pub fn run_model(&self, model: &str) -> Result<(), MlError> {
        self.expect_ok(&Request::Run(model.into())).map(drop)
    }

    pub fn get_model_result(&self, model: &str, output: &str, ty: OutputType) -> Result<Value, MlError> {
        let v = self
            .expect_ok(&Request::Get {
                model: model.into(),
                output: output.into(),
            })?
            .ok_or_else(|| MlError::Protocol(format!("GET {output} returned no value")))?;
        let bad = || MlError::Protocol(format!("output {output} value `{v}` is not {}", ty.name()));
        match ty {
            OutputType::Int => v.parse().map(Value::Int).map_err(|_| bad()),
            OutputType::Bool => match v.as_str() {
                "0" => Ok(Value::Bool(false)),
                "1" => Ok(Value::Bool(true)),
                _ => Err(bad()),
            },
        }
    }

    pub fn get_model_result_i(&self, model: &str, output: &str) -> Result<i64, MlError> {
        match self.get_model_result(model, output, OutputType::Int)? {
            Value::Int(v) => Ok(v),
            Value::Bool(b) => Ok(i64::from(b)),
        }
    }

    pub fn get_model_result_b(&self, model: &str, output: &str) -> Result<bool, MlError> {
        match self.get_model_result(model, output, OutputType::Bool)? {
            Value::Bool(b) => Ok(b),
            Value::Int(v) => Ok(v != 0),
        }
    }

    pub fn free_model(&self, model: &str) -> Result<(), MlError> {
        self.expect_ok(&Request::Free(model.into())).map(drop)
    }

    pub fn status(&self) -> Result<String, MlError> {
        Ok(self.expect_ok(&Request::Status)?.unwrap_or_default())
    }

    pub fn is_closed(&self) -> bool {
        self.lock().transport.is_none()
    }

    /// Send CLOSE and release the channel. A second call does nothing.
    pub fn close(&self) {
        let mut inner = self.lock();
        if let Some(mut t) = inner.transport.take() {
            if let Ok(r) = t.round_trip("CLOSE") {
                inner.transcript.push(("CLOSE".into(), r));
            }
        }
        if let Some(mut child) = inner.child.take() {
            let deadline = Instant::now() + Duration::from_secs(5);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(10))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}

impl Drop for MlInterface {
    fn drop(&mut self) {
        self.close();
    }
}
