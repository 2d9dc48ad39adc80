//! Recorded sessions: `> request` and `< response` lines, strictly
//! alternating. Blank lines and lines starting with `#` are skipped.

use thiserror::Error;

use super::InferenceServer;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("line {0}: expected a request (`> ...`)")]
    ExpectedRequest(usize),
    #[error("line {0}: expected a response (`< ...`)")]
    ExpectedResponse(usize),
    #[error("line {0}: request after CLOSE")]
    AfterClose(usize),
    #[error("transcript ends after a request")]
    Dangling,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub line: usize,
    pub request: String,
    pub response: String,
}

pub fn parse_transcript(text: &str) -> Result<Vec<Exchange>, TranscriptError> {
    let mut out = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    let mut closed = false;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        match pending.take() {
            None => {
                let Some(req) = raw.strip_prefix("> ") else {
                    return Err(TranscriptError::ExpectedRequest(n));
                };
                if closed {
                    return Err(TranscriptError::AfterClose(n));
                }
                closed = req == "CLOSE";
                pending = Some((n, req.to_string()));
            }
            Some((line, request)) => {
                let Some(resp) = raw.strip_prefix("< ") else {
                    return Err(TranscriptError::ExpectedResponse(n));
                };
                out.push(Exchange {
                    line,
                    request,
                    response: resp.to_string(),
                });
            }
        }
    }
    match pending {
        Some(_) => Err(TranscriptError::Dangling),
        None => Ok(out),
    }
}

/// Render exchanges back to transcript text.
pub fn write_transcript(ex: &[Exchange]) -> String {
    ex.iter().map(|e| format!("> {}\n< {}\n", e.request, e.response)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub line: usize,
    pub request: String,
    pub expected: String,
    pub actual: String,
}

/// Feed each request to `server`; report every response that differs.
pub fn replay(server: &mut InferenceServer, ex: &[Exchange]) -> Vec<Mismatch> {
    server.reopen();
    ex.iter()
        .filter_map(|e| {
            let actual = server.handle_line(&e.request).to_string();
            (actual != e.response).then(|| Mismatch {
                line: e.line,
                request: e.request.clone(),
                expected: e.response.clone(),
                actual,
            })
        })
        .collect()
}
