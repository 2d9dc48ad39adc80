//! Line grammar shared by the client and the server.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Load(String),
    RegisterModel {
        model: String,
        features: usize,
        outputs: usize,
    },
    RegisterFeature {
        model: String,
        index: usize,
        name: String,
        ty: String,
    },
    RegisterOutput {
        model: String,
        name: String,
        ty: String,
    },
    Set {
        model: String,
        pairs: Vec<(String, String)>,
    },
    Run(String),
    Get {
        model: String,
        output: String,
    },
    Free(String),
    Status,
    Close,
}

impl Request {
    pub fn verb(&self) -> &'static str {
        match self {
            Request::Load(_) => "LOAD",
            Request::RegisterModel { .. } => "REGISTER MODEL",
            Request::RegisterFeature { .. } => "REGISTER FEATURE",
            Request::RegisterOutput { .. } => "REGISTER OUTPUT",
            Request::Set { .. } => "SET",
            Request::Run(_) => "RUN",
            Request::Get { .. } => "GET",
            Request::Free(_) => "FREE",
            Request::Status => "STATUS",
            Request::Close => "CLOSE",
        }
    }

    pub fn model(&self) -> Option<&str> {
        match self {
            Request::RegisterModel { model, .. }
            | Request::RegisterFeature { model, .. }
            | Request::RegisterOutput { model, .. }
            | Request::Set { model, .. }
            | Request::Get { model, .. } => Some(model),
            Request::Run(m) | Request::Free(m) => Some(m),
            Request::Load(_) | Request::Status | Request::Close => None,
        }
    }
}

/// Shortest decimal that reads back as the same `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::Load(p) => write!(f, "LOAD {p}"),
            Request::RegisterModel {
                model,
                features,
                outputs,
            } => write!(f, "REGISTER MODEL {model} {features} {outputs}"),
            Request::RegisterFeature {
                model,
                index,
                name,
                ty,
            } => write!(f, "REGISTER FEATURE {model} {index} {name} {ty}"),
            Request::RegisterOutput { model, name, ty } => {
                write!(f, "REGISTER OUTPUT {model} {name} {ty}")
            }
            Request::Set { model, pairs } => {
                write!(f, "SET {model} ")?;
                for (i, (n, v)) in pairs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{n}={v}")?;
                }
                Ok(())
            }
            Request::Run(m) => write!(f, "RUN {m}"),
            Request::Get { model, output } => write!(f, "GET {model} {output}"),
            Request::Free(m) => write!(f, "FREE {m}"),
            Request::Status => f.write_str("STATUS"),
            Request::Close => f.write_str("CLOSE"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("empty request")]
    Empty,
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("usage: {0}")]
    Usage(&'static str),
    #[error("malformed pair `{0}`")]
    Pair(String),
}

fn usage(verb: &str) -> &'static str {
    match verb {
        "LOAD" => "LOAD <path>",
        "REGISTER MODEL" => "REGISTER MODEL <name> <nfeatures> <noutputs>",
        "REGISTER FEATURE" => "REGISTER FEATURE <model> <index> <name> <type>",
        "REGISTER OUTPUT" => "REGISTER OUTPUT <model> <name> <type>",
        "REGISTER" => "REGISTER MODEL|FEATURE|OUTPUT ...",
        "SET" => "SET <model> <name>=<value>(,<name>=<value>)*",
        "RUN" => "RUN <model>",
        "GET" => "GET <model> <output>",
        "FREE" => "FREE <model>",
        "STATUS" => "STATUS",
        _ => "CLOSE",
    }
}

/// Parse one request line (without its newline).
pub fn parse_request(line: &str) -> Result<Request, ProtocolError> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let (verb, rest) = match line.split_once(' ') {
        Some((v, r)) => (v, r),
        None => (line, ""),
    };
    if verb.is_empty() {
        return Err(ProtocolError::Empty);
    }
    let args: Vec<&str> = rest.split(' ').filter(|s| !s.is_empty()).collect();
    let bad = |v: &str| ProtocolError::Usage(usage(v));
    match verb {
        "LOAD" => {
            let path = rest.trim();
            if path.is_empty() {
                return Err(bad("LOAD"));
            }
            Ok(Request::Load(path.to_string()))
        }
        "REGISTER" => match args.as_slice() {
            ["MODEL", model, nf, no] => Ok(Request::RegisterModel {
                model: model.to_string(),
                features: nf.parse().map_err(|_| bad("REGISTER MODEL"))?,
                outputs: no.parse().map_err(|_| bad("REGISTER MODEL"))?,
            }),
            ["MODEL", ..] => Err(bad("REGISTER MODEL")),
            ["FEATURE", model, idx, name, ty] => Ok(Request::RegisterFeature {
                model: model.to_string(),
                index: idx.parse().map_err(|_| bad("REGISTER FEATURE"))?,
                name: name.to_string(),
                ty: ty.to_string(),
            }),
            ["FEATURE", ..] => Err(bad("REGISTER FEATURE")),
            ["OUTPUT", model, name, ty] => Ok(Request::RegisterOutput {
                model: model.to_string(),
                name: name.to_string(),
                ty: ty.to_string(),
            }),
            ["OUTPUT", ..] => Err(bad("REGISTER OUTPUT")),
            _ => Err(bad("REGISTER")),
        },
        "SET" => {
            let [model, payload] = args.as_slice() else {
                return Err(bad("SET"));
            };
            let mut pairs = Vec::new();
            for item in payload.split(',') {
                match item.split_once('=') {
                    Some((n, v)) if !n.is_empty() && !v.is_empty() => {
                        pairs.push((n.to_string(), v.to_string()))
                    }
                    _ => return Err(ProtocolError::Pair(item.to_string())),
                }
            }
            Ok(Request::Set {
                model: model.to_string(),
                pairs,
            })
        }
        "RUN" | "FREE" => {
            let [model] = args.as_slice() else {
                return Err(bad(verb));
            };
            Ok(if verb == "RUN" {
                Request::Run(model.to_string())
            } else {
                Request::Free(model.to_string())
            })
        }
        "GET" => {
            let [model, output] = args.as_slice() else {
                return Err(bad("GET"));
            };
            Ok(Request::Get {
                model: model.to_string(),
                output: output.to_string(),
            })
        }
        "STATUS" | "CLOSE" => {
            if !args.is_empty() {
                return Err(bad(verb));
            }
            Ok(if verb == "STATUS" {
                Request::Status
            } else {
                Request::Close
            })
        }
        other => Err(ProtocolError::UnknownVerb(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrCode {
    Parse,
    Feature,
    Output,
    NoFeatures,
    NoModel,
    Internal,
}

impl ErrCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrCode::Parse => "PARSE",
            ErrCode::Feature => "FEATURE",
            ErrCode::Output => "OUTPUT",
            ErrCode::NoFeatures => "NOFEATURES",
            ErrCode::NoModel => "NOMODEL",
            ErrCode::Internal => "INTERNAL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "PARSE" => ErrCode::Parse,
            "FEATURE" => ErrCode::Feature,
            "OUTPUT" => ErrCode::Output,
            "NOFEATURES" => ErrCode::NoFeatures,
            "NOMODEL" => ErrCode::NoModel,
            "INTERNAL" => ErrCode::Internal,
            _ => return None,
        })
    }

    pub const ALL: [ErrCode; 6] = [
        ErrCode::Parse,
        ErrCode::Feature,
        ErrCode::Output,
        ErrCode::NoFeatures,
        ErrCode::NoModel,
        ErrCode::Internal,
    ];
}

impl fmt::Display for ErrCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok(Option<String>),
    Err { code: ErrCode, msg: String },
}

impl Response {
    pub fn ok() -> Self {
        Response::Ok(None)
    }

    pub fn value(v: impl Into<String>) -> Self {
        Response::Ok(Some(v.into()))
    }

    pub fn err(code: ErrCode, msg: impl Into<String>) -> Self {
        Response::Err {
            code,
            msg: msg.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Response::Ok(_))
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Ok(None) => f.write_str("OK"),
            Response::Ok(Some(v)) => write!(f, "OK {v}"),
            Response::Err { code, msg } => write!(f, "ERR {code} {msg}"),
        }
    }
}

pub fn parse_response(line: &str) -> Option<Response> {
    if line == "OK" {
        return Some(Response::Ok(None));
    }
    if let Some(v) = line.strip_prefix("OK ") {
        return Some(Response::Ok(Some(v.to_string())));
    }
    let rest = line.strip_prefix("ERR ")?;
    let (code, msg) = rest.split_once(' ').unwrap_or((rest, ""));
    Some(Response::Err {
        code: ErrCode::parse(code)?,
        msg: msg.to_string(),
    })
}
