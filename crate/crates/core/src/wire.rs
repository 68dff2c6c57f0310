//! Length-prefixed request/response framing over TCP.
//!
//! ```text
//! <u32 big-endian payload length><payload>
//! payload = "REQ <method> <id>\n\n<body>" | "RESP <status> <id>\n\n<body>"
//! ```
//!
//! Bodies are usually an [`Envelope`]: one field line followed by named
//! document sections. See `docs/protocol.md`.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use crate::codec::{format_fields, parse_fields};

pub const METHODS: [&str; 13] = [
    "sync_resources",
    "negotiate_preliminary",
    "negotiate_modify",
    "negotiate_confirm",
    "negotiate_delete",
    "provision_start",
    "provision_stop",
    "provision_powercycle",
    "console_lookup",
    "submit_cloudnet",
    "cloudnet_status",
    "cloudnet_delete",
    "migrate_analyze",
];

pub const STATUS_OK: &str = "ok";
pub const MAX_BODY: usize = 1 << 31;

pub fn is_registered(method: &str) -> bool {
    METHODS.contains(&method)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Header {
    Request { method: String },
    Response { status: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub correlation_id: u64,
    pub header: Header,
    pub body: Vec<u8>,
}

impl Message {
    pub fn request(correlation_id: u64, method: impl Into<String>, body: Vec<u8>) -> Self {
        Message {
            correlation_id,
            header: Header::Request { method: method.into() },
            body,
        }
    }

    pub fn response(correlation_id: u64, status: impl Into<String>, body: Vec<u8>) -> Self {
        Message {
            correlation_id,
            header: Header::Response { status: status.into() },
            body,
        }
    }

    pub fn method(&self) -> Option<&str> {
        match &self.header {
            Header::Request { method } => Some(method),
            Header::Response { .. } => None,
        }
    }

    pub fn status(&self) -> Option<&str> {
        match &self.header {
            Header::Response { status } => Some(status),
            Header::Request { .. } => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("body of {0} bytes exceeds the frame limit")]
    BodyTooLarge(usize),
    #[error("truncated frame")]
    Truncated,
    #[error("bad frame header: {0}")]
    BadHeader(String),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub fn encode_frame(m: &Message) -> Result<Vec<u8>, FrameError> {
    if m.body.len() >= MAX_BODY {
        return Err(FrameError::BodyTooLarge(m.body.len()));
    }
    let head = match &m.header {
        Header::Request { method } => format!("REQ {method} {}\n\n", m.correlation_id),
        Header::Response { status } => format!("RESP {status} {}\n\n", m.correlation_id),
    };
    let len = head.len() + m.body.len();
    let len = u32::try_from(len).map_err(|_| FrameError::BodyTooLarge(m.body.len()))?;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(head.as_bytes());
    out.extend_from_slice(&m.body);
    Ok(out)
}

fn decode_payload(payload: &[u8]) -> Result<Message, FrameError> {
    let split = payload
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| FrameError::BadHeader("missing blank line".into()))?;
    let head = std::str::from_utf8(&payload[..split]).map_err(|_| FrameError::BadHeader("not UTF-8".into()))?;
    let parts: Vec<&str> = head.split(' ').collect();
    let [kind, word, id] = parts[..] else {
        return Err(FrameError::BadHeader(head.to_string()));
    };
    if !is_token(word) {
        return Err(FrameError::BadHeader(format!("bad token {word:?}")));
    }
    let correlation_id = id
        .parse::<u64>()
        .map_err(|_| FrameError::BadHeader(format!("bad correlation id {id:?}")))?;
    let header = match kind {
        "REQ" => Header::Request { method: word.into() },
        "RESP" => Header::Response { status: word.into() },
        _ => return Err(FrameError::BadHeader(format!("bad kind {kind:?}"))),
    };
    Ok(Message {
        correlation_id,
        header,
        body: payload[split + 2..].to_vec(),
    })
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<Message, FrameError> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::TrailingBytes(bytes.len() - used));
    }
    Ok(m)
}

/// Decodes the first frame in `bytes` and returns it with the bytes used.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::Truncated);
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len >= MAX_BODY {
        return Err(FrameError::BodyTooLarge(len));
    }
    let payload = bytes.get(4..4 + len).ok_or(FrameError::Truncated)?;
    Ok((decode_payload(payload)?, 4 + len))
}

pub fn read_frame(r: &mut impl Read) -> Result<Message, FrameError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(eof_is_truncation)?;
    let len = u32::from_be_bytes(len) as usize;
    if len >= MAX_BODY {
        return Err(FrameError::BodyTooLarge(len));
    }
    let mut payload = Vec::new();
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(FrameError::Truncated);
    }
    decode_payload(&payload)
}

fn eof_is_truncation(e: io::Error) -> FrameError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FrameError::Truncated
    } else {
        FrameError::Io(e)
    }
}

pub fn write_frame(w: &mut impl Write, m: &Message) -> Result<(), FrameError> {
    w.write_all(&encode_frame(m)?)?;
    w.flush()?;
    Ok(())
}

/// Request and response body: a field line plus named documents.
///
/// ```text
/// key=value;key=value
/// @<name> <byte length>
/// <bytes>
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Envelope {
    pub fields: BTreeMap<String, String>,
    pub docs: BTreeMap<String, Vec<u8>>,
}

impl Envelope {
    pub fn new() -> Self {
        Envelope::default()
    }

    pub fn field(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.fields.insert(key.into(), value.to_string());
        self
    }

    pub fn doc(mut self, name: impl Into<String>, bytes: Vec<u8>) -> Self {
        self.docs.insert(name.into(), bytes);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing field {key:?}"))
    }

    pub fn get_doc(&self, name: &str) -> Option<&[u8]> {
        self.docs.get(name).map(Vec::as_slice)
    }

    pub fn require_doc(&self, name: &str) -> Result<&[u8], String> {
        self.get_doc(name).ok_or_else(|| format!("missing document {name:?}"))
    }

    /// Fields whose key starts with `prefix`, with the prefix stripped.
    pub fn prefixed<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.fields
            .iter()
            .filter_map(move |(k, v)| Some((k.strip_prefix(prefix)?, v.as_str())))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format_fields(self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))).into_bytes();
        out.push(b'\n');
        for (name, bytes) in &self.docs {
            out.extend_from_slice(format!("@{name} {}\n", bytes.len()).as_bytes());
            out.extend_from_slice(bytes);
            out.push(b'\n');
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Envelope, String> {
        if bytes.is_empty() {
            return Ok(Envelope::default());
        }
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing field line")?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| "field line is not UTF-8")?;
        let mut env = Envelope {
            fields: parse_fields(line)?.into_iter().collect(),
            docs: BTreeMap::new(),
        };
        let mut rest = &bytes[nl + 1..];
        while !rest.is_empty() {
            let nl = rest.iter().position(|&b| b == b'\n').ok_or("unterminated section header")?;
            let head = std::str::from_utf8(&rest[..nl]).map_err(|_| "section header is not UTF-8")?;
            let (name, len) = head
                .strip_prefix('@')
                .and_then(|h| h.split_once(' '))
                .ok_or_else(|| format!("bad section header {head:?}"))?;
            let len: usize = len.parse().map_err(|_| format!("bad section length {len:?}"))?;
            let start = nl + 1;
            if rest.len() < start + len + 1 || rest[start + len] != b'\n' {
                return Err(format!("section {name:?} is truncated"));
            }
            if env.docs.insert(name.to_string(), rest[start..start + len].to_vec()).is_some() {
                return Err(format!("duplicate section {name:?}"));
            }
            rest = &rest[start + len + 1..];
        }
        Ok(env)
    }
}

/// Application-level failure, sent back as a non-`ok` status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteFailure {
    pub code: String,
    pub message: String,
}

impl RemoteFailure {
    pub fn new(code: impl Into<String>, message: impl ToString) -> Self {
        RemoteFailure {
            code: code.into(),
            message: message.to_string(),
        }
    }

    pub fn bad_request(message: impl ToString) -> Self {
        RemoteFailure::new("bad_request", message)
    }
}

pub trait Handler: Send + Sync + 'static {
    fn serves(&self, method: &str) -> bool;
    fn handle(&self, method: &str, body: &[u8]) -> Result<Vec<u8>, RemoteFailure>;
}

fn respond(handler: &dyn Handler, req: &Message) -> Message {
    let method = req.method().unwrap_or_default();
    let result = if !is_registered(method) || !handler.serves(method) {
        Err(RemoteFailure::new("unknown_method", method))
    } else {
        handler.handle(method, &req.body)
    };
    match result {
        Ok(body) => Message::response(req.correlation_id, STATUS_OK, body),
        Err(f) => Message::response(req.correlation_id, f.code, f.message.into_bytes()),
    }
}

fn serve_connection(mut stream: TcpStream, handler: Arc<dyn Handler>, stop: Arc<AtomicBool>) {
    loop {
        let req = match read_frame(&mut stream) {
            Ok(m) => m,
            Err(FrameError::Truncated) => return,
            Err(e) => {
                debug!("dropping connection: {e}");
                return;
            }
        };
        if stop.load(Ordering::SeqCst) {
            return;
        }
        if req.method().is_none() {
            debug!("ignoring response frame from client");
            return;
        }
        let resp = respond(handler.as_ref(), &req);
        if let Err(e) = write_frame(&mut stream, &resp) {
            debug!("write failed: {e}");
            return;
        }
    }
}

/// A TCP listener handling each connection on its own thread.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, handler: Arc<dyn Handler>) -> io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                for conn in listener.incoming() {
                    if flag.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let (h, f) = (handler.clone(), flag.clone());
                            let _ = std::thread::Builder::new()
                                .name("conn".into())
                                .spawn(move || serve_connection(stream, h, f));
                        }
                        Err(e) => warn!("accept failed: {e}"),
                    }
                }
            })?;
        Ok(Server {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        if let Ok(s) = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200)) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

#[derive(Debug, Error)]
pub enum CallError {
    #[error("timed out")]
    Timeout,
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

impl CallError {
    pub fn is_transport(&self) -> bool {
        !matches!(self, CallError::Remote { .. })
    }

    pub fn code(&self) -> &str {
        match self {
            CallError::Timeout => "timeout",
            CallError::ConnectionRefused(_) => "connection_refused",
            CallError::Frame(_) => "frame_error",
            CallError::Remote { code, .. } => code,
            CallError::Io(_) => "io",
        }
    }
}

fn io_to_call(e: io::Error, addr: &str) -> CallError {
    match e.kind() {
        io::ErrorKind::ConnectionRefused => CallError::ConnectionRefused(addr.to_string()),
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => CallError::Timeout,
        _ => CallError::Io(e.to_string()),
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Sends one request on a fresh connection and waits for its response.
/// Any method string is accepted; the server rejects unknown ones.
pub fn call(addr: &str, method: &str, body: Vec<u8>, timeout: Duration) -> Result<Vec<u8>, CallError> {
    let targets: Vec<SocketAddr> = addr.to_socket_addrs().map_err(|e| io_to_call(e, addr))?.collect();
    let mut last = CallError::ConnectionRefused(addr.to_string());
    let mut stream = None;
    for t in targets {
        match TcpStream::connect_timeout(&t, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = io_to_call(e, addr),
        }
    }
    let mut stream = stream.ok_or(last)?;
    stream.set_read_timeout(Some(timeout)).map_err(|e| io_to_call(e, addr))?;
    stream.set_write_timeout(Some(timeout)).map_err(|e| io_to_call(e, addr))?;
    let _ = stream.set_nodelay(true);

    let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
    write_frame(&mut stream, &Message::request(id, method, body)).map_err(|e| match e {
        FrameError::Io(io) => io_to_call(io, addr),
        other => CallError::Frame(other),
    })?;
    let resp = read_frame(&mut stream).map_err(|e| match e {
        FrameError::Io(io) => io_to_call(io, addr),
        other => CallError::Frame(other),
    })?;
    if resp.correlation_id != id {
        return Err(CallError::Frame(FrameError::BadHeader(format!(
            "response id {} does not match request id {id}",
            resp.correlation_id
        ))));
    }
    match resp.status() {
        Some(STATUS_OK) => Ok(resp.body),
        Some(code) => Err(CallError::Remote {
            code: code.to_string(),
            message: String::from_utf8_lossy(&resp.body).into_owned(),
        }),
        None => Err(CallError::Frame(FrameError::BadHeader("expected a response".into()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_payload_layout() {
        let frame = encode_frame(&Message::request(7, "negotiate_preliminary", Vec::new())).unwrap();
        let payload = b"REQ negotiate_preliminary 7\n\n";
        assert_eq!(&frame[..4], &(payload.len() as u32).to_be_bytes());
        assert_eq!(&frame[4..], payload);
    }

    #[test]
    fn response_round_trips() {
        let m = Message::response(7, "ok", b"x=1\n".to_vec());
        assert_eq!(decode(&encode_frame(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn truncated_frames_fail() {
        let frame = encode_frame(&Message::request(1, "sync_resources", b"abc".to_vec())).unwrap();
        for cut in 0..frame.len() {
            assert!(matches!(decode(&frame[..cut]), Err(FrameError::Truncated)), "cut {cut}");
        }
    }

    #[test]
    fn envelope_round_trips_binary_docs() {
        let env = Envelope::new()
            .field("contract", "pip1-0001")
            .field("odd;key", "a=b")
            .doc("partial", b"line\n\n@fake 3\n".to_vec())
            .doc("empty", Vec::new());
        assert_eq!(Envelope::decode(&env.encode()).unwrap(), env);
        assert_eq!(Envelope::decode(b"").unwrap(), Envelope::default());
        assert!(Envelope::decode(b"a=1\n@doc 10\nshort\n").is_err());
    }
}
