//! Byte-stream channels carrying the line protocol: a named-pipe pair, a
//! local socket, or a direct in-process call.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::os::fd::AsRawFd;
use std::os::unix::fs::{FileTypeExt, OpenOptionsExt};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::server::{serve, InferenceServer, SessionEnd};

pub const ENDPOINT_ENV: &str = "ACPO_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `<base>.req` and `<base>.resp` fifos.
    Pipe(PathBuf),
    Unix(PathBuf),
    InProcess,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("bad endpoint `{0}` (expected pipe:<base>, unix:<path> or inproc)")]
pub struct EndpointError(pub String);

impl FromStr for Endpoint {
    type Err = EndpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EndpointError(s.to_string());
        if s == "inproc" || s == "inproc:" {
            return Ok(Endpoint::InProcess);
        }
        let (kind, addr) = s.split_once(':').ok_or_else(bad)?;
        if addr.is_empty() {
            return Err(bad());
        }
        match kind {
            "pipe" => Ok(Endpoint::Pipe(addr.into())),
            "unix" => Ok(Endpoint::Unix(addr.into())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Pipe(p) => write!(f, "pipe:{}", p.display()),
            Endpoint::Unix(p) => write!(f, "unix:{}", p.display()),
            Endpoint::InProcess => f.write_str("inproc"),
        }
    }
}

impl Endpoint {
    /// The endpoint named by `ACPO_ENDPOINT`, if set.
    pub fn from_env() -> Option<Result<Endpoint, EndpointError>> {
        std::env::var(ENDPOINT_ENV).ok().map(|s| s.parse())
    }

    pub fn pipe_paths(base: &Path) -> (PathBuf, PathBuf) {
        let mut req = base.as_os_str().to_owned();
        req.push(".req");
        let mut resp = base.as_os_str().to_owned();
        resp.push(".resp");
        (req.into(), resp.into())
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("timed out after {0:?} {1}")]
    Timeout(Duration, &'static str),
    #[error("server closed the connection")]
    Eof,
    #[error("response is not UTF-8")]
    Encoding,
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// One request line out, one response line back.
pub trait Transport: Send {
    fn round_trip(&mut self, line: &str) -> Result<String, TransportError>;
}

pub struct InProcess {
    server: Arc<Mutex<InferenceServer>>,
}

impl InProcess {
    pub fn new(server: Arc<Mutex<InferenceServer>>) -> Self {
        InProcess { server }
    }
}

impl Transport for InProcess {
    fn round_trip(&mut self, line: &str) -> Result<String, TransportError> {
        let mut s = self.server.lock().unwrap_or_else(|e| e.into_inner());
        s.reopen();
        Ok(s.handle_line(line).to_string())
    }
}

fn wait_readable(fd: i32, timeout: Duration) -> Result<(), TransportError> {
    let deadline = Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let ms = left.as_millis().min(i32::MAX as u128) as i32;
        let mut pfd = libc::pollfd {
            fd,
            events: libc::POLLIN,
            revents: 0,
        };
        // SAFETY: one valid pollfd for the duration of the call.
        let r = unsafe { libc::poll(&mut pfd, 1, ms) };
        if r > 0 {
            return Ok(());
        }
        if r == 0 {
            return Err(TransportError::Timeout(timeout, "waiting for a response"));
        }
        let e = io::Error::last_os_error();
        if e.kind() != io::ErrorKind::Interrupted {
            return Err(e.into());
        }
    }
}

/// Read one LF-terminated line with a per-line timeout.
fn read_line_fd(
    file: &mut File,
    pending: &mut Vec<u8>,
    timeout: Duration,
) -> Result<String, TransportError> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(pos) = pending.iter().position(|b| *b == b'\n') {
            let line: Vec<u8> = pending.drain(..=pos).take(pos).collect();
            return String::from_utf8(line).map_err(|_| TransportError::Encoding);
        }
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(TransportError::Timeout(timeout, "waiting for a response"));
        }
        wait_readable(file.as_raw_fd(), left)?;
        let mut buf = [0u8; 4096];
        match file.read(&mut buf) {
            Ok(0) => return Err(TransportError::Eof),
            Ok(n) => pending.extend_from_slice(&buf[..n]),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
}

pub struct PipeClient {
    req: File,
    resp: File,
    pending: Vec<u8>,
    read_timeout: Duration,
}

impl PipeClient {
    pub fn connect(
        base: &Path,
        connect_timeout: Duration,
        read_timeout: Duration,
    ) -> Result<Self, TransportError> {
        let (req_path, resp_path) = Endpoint::pipe_paths(base);
        let deadline = Instant::now() + connect_timeout;
        // a non-blocking write open fails until the server has the read end
        let req = loop {
            match OpenOptions::new()
                .write(true)
                .custom_flags(libc::O_NONBLOCK)
                .open(&req_path)
            {
                Ok(f) => break f,
                Err(e)
                    if matches!(e.raw_os_error(), Some(libc::ENXIO) | Some(libc::ENOENT)) =>
                {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout(connect_timeout, "connecting"));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        };
        set_blocking(&req)?;
        let resp = OpenOptions::new()
            .read(true)
            .custom_flags(libc::O_NONBLOCK)
            .open(&resp_path)?;
        Ok(PipeClient {
            req,
            resp,
            pending: Vec::new(),
            read_timeout,
        })
    }
}

fn set_blocking(f: &File) -> io::Result<()> {
    let fd = f.as_raw_fd();
    // SAFETY: fcntl on a descriptor we own.
    unsafe {
        let flags = libc::fcntl(fd, libc::F_GETFL);
        if flags < 0 || libc::fcntl(fd, libc::F_SETFL, flags & !libc::O_NONBLOCK) < 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

impl Transport for PipeClient {
    fn round_trip(&mut self, line: &str) -> Result<String, TransportError> {
        let mut msg = Vec::with_capacity(line.len() + 1);
        msg.extend_from_slice(line.as_bytes());
        msg.push(b'\n');
        match self.req.write_all(&msg) {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Err(TransportError::Eof),
            r => r?,
        }
        read_line_fd(&mut self.resp, &mut self.pending, self.read_timeout)
    }
}

pub struct UnixClient {
    reader: BufReader<UnixStream>,
    writer: UnixStream,
    read_timeout: Duration,
}

impl UnixClient {
    pub fn connect(
        path: &Path,
        connect_timeout: Duration,
        read_timeout: Duration,
    ) -> Result<Self, TransportError> {
        let deadline = Instant::now() + connect_timeout;
        let stream = loop {
            match UnixStream::connect(path) {
                Ok(s) => break s,
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::NotFound | io::ErrorKind::ConnectionRefused
                    ) =>
                {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout(connect_timeout, "connecting"));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_read_timeout(Some(read_timeout))?;
        Ok(UnixClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            read_timeout,
        })
    }
}

impl Transport for UnixClient {
    fn round_trip(&mut self, line: &str) -> Result<String, TransportError> {
        let mut msg = Vec::with_capacity(line.len() + 1);
        msg.extend_from_slice(line.as_bytes());
        msg.push(b'\n');
        match self.writer.write_all(&msg) {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Err(TransportError::Eof),
            r => r?,
        }
        let mut buf = Vec::new();
        match self.reader.read_until(b'\n', &mut buf) {
            Ok(0) => Err(TransportError::Eof),
            Ok(_) => {
                if buf.pop() != Some(b'\n') {
                    return Err(TransportError::Eof);
                }
                String::from_utf8(buf).map_err(|_| TransportError::Encoding)
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Err(TransportError::Timeout(self.read_timeout, "waiting for a response"))
            }
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => Err(TransportError::Eof),
            Err(e) => Err(e.into()),
        }
    }
}

/// Open a client transport. For [`Endpoint::InProcess`] a fresh server is
/// created unless one is supplied.
pub fn open_transport(
    endpoint: &Endpoint,
    server: Option<Arc<Mutex<InferenceServer>>>,
    connect_timeout: Duration,
    read_timeout: Duration,
) -> Result<Box<dyn Transport>, TransportError> {
    Ok(match endpoint {
        Endpoint::InProcess => Box::new(InProcess::new(server.unwrap_or_default())),
        Endpoint::Pipe(base) => Box::new(PipeClient::connect(base, connect_timeout, read_timeout)?),
        Endpoint::Unix(p) => Box::new(UnixClient::connect(p, connect_timeout, read_timeout)?),
    })
}

fn make_fifo(path: &Path) -> io::Result<bool> {
    match std::fs::metadata(path) {
        Ok(m) if m.file_type().is_fifo() => return Ok(false),
        Ok(_) => {
            return Err(io::Error::new(
                io::ErrorKind::AlreadyExists,
                format!("{} exists and is not a fifo", path.display()),
            ))
        }
        Err(_) => {}
    }
    let c = std::ffi::CString::new(path.as_os_str().as_encoded_bytes())
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    // SAFETY: valid NUL-terminated path.
    if unsafe { libc::mkfifo(c.as_ptr(), 0o600) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(true)
}

/// Serve sessions on `endpoint` until a client sends CLOSE. A client that
/// disconnects without CLOSE lets the next one connect to the same state.
pub fn serve_endpoint(server: &mut InferenceServer, endpoint: &Endpoint) -> io::Result<()> {
    serve_endpoint_then(server, endpoint, || {})
}

/// As [`serve_endpoint`], calling `ready` once clients can connect.
pub fn serve_endpoint_then(
    server: &mut InferenceServer,
    endpoint: &Endpoint,
    ready: impl FnOnce(),
) -> io::Result<()> {
    match endpoint {
        Endpoint::InProcess => {
            ready();
            let stdin = io::stdin();
            serve(server, stdin.lock(), io::stdout().lock()).map(|_| ())
        }
        Endpoint::Pipe(base) => {
            let (req, resp) = Endpoint::pipe_paths(base);
            let made = (make_fifo(&req)?, make_fifo(&resp)?);
            ready();
            let result = (|| loop {
                let input = File::open(&req)?;
                let output = OpenOptions::new().write(true).open(&resp)?;
                if serve(server, BufReader::new(input), output)? == SessionEnd::Closed {
                    return Ok(());
                }
            })();
            if made.0 {
                let _ = std::fs::remove_file(&req);
            }
            if made.1 {
                let _ = std::fs::remove_file(&resp);
            }
            result
        }
        Endpoint::Unix(path) => {
            if std::fs::symlink_metadata(path).is_ok_and(|m| m.file_type().is_socket()) {
                if UnixStream::connect(path).is_ok() {
                    return Err(io::Error::new(
                        io::ErrorKind::AddrInUse,
                        format!("{} already has a listening server", path.display()),
                    ));
                }
                std::fs::remove_file(path)?;
            }
            let listener = UnixListener::bind(path)?;
            ready();
            let result = (|| loop {
                let (stream, _) = listener.accept()?;
                let reader = BufReader::new(stream.try_clone()?);
                match serve(server, reader, &stream) {
                    Ok(SessionEnd::Closed) => return Ok(()),
                    Ok(SessionEnd::Eof) => {}
                    Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
                    Err(e) => return Err(e),
                }
            })();
            let _ = std::fs::remove_file(path);
            result
        }
    }
}
