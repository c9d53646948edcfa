//! TCPROS-style transport: connection-header handshake and length-prefixed
//! messages over a reliable byte stream.
//!
//! Header wire format: 4-byte LE total length, then per field a 4-byte LE
//! length followed by ASCII `key=value`. Messages: 4-byte LE length + body.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use thiserror::Error;

/// Keys every header must carry, in wire order.
pub const REQUIRED_KEYS: [&str; 4] = ["callerid", "topic", "type", "md5sum"];

pub const MAX_MESSAGE_LEN: usize = 64 * 1024 * 1024;

/// Upper bound on a connection header; headers are small.
const MAX_HEADER_LEN: usize = 1024 * 1024;

pub const DEFAULT_QUEUE_SIZE: usize = 30;

#[derive(Debug, Error)]
pub enum TcprosError {
    #[error("header is missing required key '{0}'")]
    MissingKey(&'static str),
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("malformed header field {0:?}")]
    MalformedField(String),
    #[error("duplicate header key '{0}'")]
    DuplicateKey(String),
    #[error("header keys and values must be ASCII without '=' in keys: {0:?}")]
    NonAscii(String),
    #[error("handshake mismatch on '{key}': local '{local}', remote '{remote}'")]
    HandshakeMismatch { key: &'static str, local: String, remote: String },
    #[error("remote rejected handshake: {0}")]
    Rejected(String),
    #[error("message of {0} bytes exceeds the 64 MiB limit")]
    MessageTooLarge(usize),
    #[error("delivery failed to {failed:?} ({delivered} succeeded)")]
    DeliveryFailed { failed: Vec<String>, delivered: usize },
    #[error("empty topic")]
    EmptyTopic,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Key/value connection header.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConnectionHeader {
    fields: BTreeMap<String, String>,
}

impl ConnectionHeader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Header for a topic carrying `msg_type`; md5sum derived from the type name.
    pub fn for_topic(callerid: &str, topic: &str, msg_type: &str) -> Self {
        let mut h = Self::new();
        h.insert("callerid", callerid);
        h.insert("topic", topic);
        h.insert("type", msg_type);
        h.insert("md5sum", &md5sum_of_type(msg_type));
        h
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Option<String> {
        self.fields.insert(key.to_string(), value.to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn check_required(&self) -> Result<(), TcprosError> {
        for key in REQUIRED_KEYS {
            if !self.fields.contains_key(key) {
                return Err(TcprosError::MissingKey(key));
            }
        }
        Ok(())
    }

    /// Fields in wire order: required keys first, then the rest by key.
    pub fn ordered_fields(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<(&str, &str)> =
            REQUIRED_KEYS.iter().filter_map(|k| self.fields.get_key_value(*k)).map(|(k, v)| (k.as_str(), v.as_str())).collect();
        out.extend(
            self.fields.iter().filter(|(k, _)| !REQUIRED_KEYS.contains(&k.as_str())).map(|(k, v)| (k.as_str(), v.as_str())),
        );
        out
    }
}

/// Hex md5 of the message type name, used for type-compatibility checks.
pub fn md5sum_of_type(msg_type: &str) -> String {
    format!("{:x}", md5::compute(msg_type.as_bytes()))
}

/// Encodes fields verbatim, in the given order, without required-key checks.
pub fn encode_fields<'a>(fields: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Vec<u8>, TcprosError> {
    let mut body = Vec::new();
    for (k, v) in fields {
        if k.is_empty() || !k.is_ascii() || !v.is_ascii() || k.contains('=') {
            return Err(TcprosError::NonAscii(format!("{k}={v}")));
        }
        let field = format!("{k}={v}");
        body.extend_from_slice(&(field.len() as u32).to_le_bytes());
        body.extend_from_slice(field.as_bytes());
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn encode_header(h: &ConnectionHeader) -> Result<Vec<u8>, TcprosError> {
    h.check_required()?;
    encode_fields(h.ordered_fields())
}

/// Decodes a complete header (length prefix included).
pub fn decode_header(bytes: &[u8]) -> Result<ConnectionHeader, TcprosError> {
    if bytes.len() < 4 {
        return Err(TcprosError::Truncated("header length prefix".into()));
    }
    let total = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() - 4 < total {
        return Err(TcprosError::Truncated(format!("header declares {total} bytes, {} present", bytes.len() - 4)));
    }
    decode_header_body(&bytes[4..4 + total])
}

fn decode_header_body(mut body: &[u8]) -> Result<ConnectionHeader, TcprosError> {
    let mut h = ConnectionHeader::new();
    while !body.is_empty() {
        if body.len() < 4 {
            return Err(TcprosError::Truncated("field length prefix".into()));
        }
        let len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
        body = &body[4..];
        if body.len() < len {
            return Err(TcprosError::Truncated(format!("field declares {len} bytes, {} remain", body.len())));
        }
        let field = std::str::from_utf8(&body[..len])
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| TcprosError::MalformedField(String::from_utf8_lossy(&body[..len]).into_owned()))?;
        body = &body[len..];
        let (k, v) = field.split_once('=').ok_or_else(|| TcprosError::MalformedField(field.to_string()))?;
        if k.is_empty() {
            return Err(TcprosError::MalformedField(field.to_string()));
        }
        if h.insert(k, v).is_some() {
            return Err(TcprosError::DuplicateKey(k.to_string()));
        }
    }
    Ok(h)
}

/// Frames a message body: 4-byte LE length + bytes.
pub fn frame_message(payload: &[u8]) -> Result<Vec<u8>, TcprosError> {
    if payload.len() > MAX_MESSAGE_LEN {
        return Err(TcprosError::MessageTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

fn read_prefixed<R: Read>(r: &mut R, limit: usize) -> Result<Option<Vec<u8>>, TcprosError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > limit {
        return Err(TcprosError::MessageTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TcprosError::Truncated(format!("stream ended inside a {len}-byte frame")),
        _ => e.into(),
    })?;
    Ok(Some(buf))
}

/// Reads one framed message; `None` on a clean end of stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, TcprosError> {
    read_prefixed(r, MAX_MESSAGE_LEN)
}

pub fn write_message<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), TcprosError> {
    w.write_all(&frame_message(payload)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<ConnectionHeader, TcprosError> {
    let body = read_prefixed(r, MAX_HEADER_LEN)?.ok_or_else(|| TcprosError::Truncated("stream closed before header".into()))?;
    decode_header_body(&body)
}

fn error_header(reason: &str) -> Vec<u8> {
    encode_fields([("error", reason)]).unwrap_or_else(|_| encode_fields([("error", "handshake rejected")]).unwrap())
}

/// Checks the fields a publisher and subscriber must agree on.
pub fn check_compatible(local: &ConnectionHeader, remote: &ConnectionHeader) -> Result<(), TcprosError> {
    remote.check_required()?;
    for key in ["topic", "type", "md5sum"] {
        let (l, r) = (local.get(key).unwrap_or(""), remote.get(key).unwrap_or(""));
        if l != r {
            return Err(TcprosError::HandshakeMismatch { key, local: l.into(), remote: r.into() });
        }
    }
    Ok(())
}

/// Publisher side: read the subscriber header, validate, reply.
pub fn publisher_handshake<S: Read + Write>(stream: &mut S, local: &ConnectionHeader) -> Result<ConnectionHeader, TcprosError> {
    let remote = read_header(stream)?;
    if let Err(e) = check_compatible(local, &remote) {
        stream.write_all(&error_header(&e.to_string()))?;
        stream.flush()?;
        return Err(e);
    }
    stream.write_all(&encode_header(local)?)?;
    stream.flush()?;
    Ok(remote)
}

/// Subscriber side: send our header, read and validate the publisher's.
pub fn subscriber_handshake<S: Read + Write>(stream: &mut S, local: &ConnectionHeader) -> Result<ConnectionHeader, TcprosError> {
    if local.get("topic").is_none_or(str::is_empty) {
        return Err(TcprosError::EmptyTopic);
    }
    stream.write_all(&encode_header(local)?)?;
    stream.flush()?;
    let remote = read_header(stream)?;
    if let Some(reason) = remote.get("error") {
        return Err(TcprosError::Rejected(reason.to_string()));
    }
    check_compatible(local, &remote)?;
    Ok(remote)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Publisher,
    Subscriber,
}

/// One side of an established connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcprosEndpoint {
    pub role: Role,
    pub topic: String,
    pub peer: String,
    /// The remote side's header.
    pub negotiated: ConnectionHeader,
}

struct SubscriberLink<W> {
    callerid: String,
    stream: Mutex<W>,
}

/// Fan-out publisher for one topic.
pub struct Publisher<W: Write> {
    header: ConnectionHeader,
    links: RwLock<Vec<Arc<SubscriberLink<W>>>>,
}

impl<W: Write> Publisher<W> {
    pub fn new(header: ConnectionHeader) -> Result<Self, TcprosError> {
        header.check_required()?;
        Ok(Publisher { header, links: RwLock::new(Vec::new()) })
    }

    pub fn topic(&self) -> &str {
        self.header.get("topic").unwrap_or_default()
    }

    pub fn header(&self) -> &ConnectionHeader {
        &self.header
    }

    pub fn subscriber_count(&self) -> usize {
        self.links.read().unwrap().len()
    }

    /// Runs the handshake on `stream` and registers it.
    pub fn accept<S>(&self, mut stream: S, peer: &str) -> Result<TcprosEndpoint, TcprosError>
    where
        S: Read + Write + Into<W>,
    {
        let remote = publisher_handshake(&mut stream, &self.header)?;
        let callerid = remote.get("callerid").unwrap_or_default().to_string();
        self.links.write().unwrap().push(Arc::new(SubscriberLink { callerid, stream: Mutex::new(stream.into()) }));
        Ok(TcprosEndpoint { role: Role::Publisher, topic: self.topic().to_string(), peer: peer.to_string(), negotiated: remote })
    }

    /// Sends `payload` to every connected subscriber. Returns the number of
    /// deliveries; failed connections are dropped and reported.
    pub fn publish(&self, payload: &[u8]) -> Result<usize, TcprosError> {
        let framed = frame_message(payload)?;
        let snapshot: Vec<_> = self.links.read().unwrap().clone();
        let mut failed: Vec<Arc<SubscriberLink<W>>> = Vec::new();
        let mut delivered = 0;
        for link in &snapshot {
            let mut s = link.stream.lock().unwrap();
            match s.write_all(&framed).and_then(|_| s.flush()) {
                Ok(()) => delivered += 1,
                Err(_) => failed.push(link.clone()),
            }
        }
        if failed.is_empty() {
            return Ok(delivered);
        }
        self.links.write().unwrap().retain(|l| !failed.iter().any(|f| Arc::ptr_eq(f, l)));
        let failed = failed.iter().map(|l| l.callerid.clone()).collect();
        Err(TcprosError::DeliveryFailed { failed, delivered })
    }
}

/// A running subscription; callbacks run sequentially on a dedicated thread.
pub struct Subscription {
    pub endpoint: TcprosEndpoint,
    reader: JoinHandle<Result<u64, TcprosError>>,
    dispatcher: JoinHandle<()>,
}

impl Subscription {
    /// Waits for the publisher to close; returns the number of messages read.
    pub fn join(self) -> Result<u64, TcprosError> {
        let r = self.reader.join().unwrap_or_else(|_| Err(TcprosError::Truncated("reader panicked".into())));
        let _ = self.dispatcher.join();
        r
    }
}

/// Connects a subscriber on an established stream.
///
/// Messages are queued (at most `queue_size`, the reader blocks when full)
/// and handed to `on_message` in arrival order.
pub fn subscribe<S, F>(
    mut stream: S,
    header: &ConnectionHeader,
    peer: &str,
    queue_size: usize,
    mut on_message: F,
) -> Result<Subscription, TcprosError>
where
    S: Read + Write + Send + 'static,
    F: FnMut(Vec<u8>) + Send + 'static,
{
    let remote = subscriber_handshake(&mut stream, header)?;
    let endpoint = TcprosEndpoint {
        role: Role::Subscriber,
        topic: header.get("topic").unwrap_or_default().to_string(),
        peer: peer.to_string(),
        negotiated: remote,
    };
    let (tx, rx) = mpsc::sync_channel::<Vec<u8>>(queue_size.max(1));
    let reader = thread::spawn(move || {
        let mut n = 0;
        while let Some(msg) = read_message(&mut stream)? {
            n += 1;
            if tx.send(msg).is_err() {
                break;
            }
        }
        Ok(n)
    });
    let dispatcher = thread::spawn(move || {
        for msg in rx {
            on_message(msg);
        }
    });
    Ok(Subscription { endpoint, reader, dispatcher })
}

/// Accepts subscriber connections on `listener` for `publisher` until
/// `max_connections` have been handled.
pub fn serve(
    listener: TcpListener,
    publisher: Arc<Publisher<TcpStream>>,
    max_connections: usize,
) -> JoinHandle<Vec<Result<TcprosEndpoint, TcprosError>>> {
    thread::spawn(move || {
        let mut results = Vec::new();
        for conn in listener.incoming().take(max_connections) {
            let r = conn.map_err(TcprosError::from).and_then(|s| {
                s.set_nodelay(true)?;
                let peer = s.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                publisher.accept(s, &peer)
            });
            results.push(r);
        }
        results
    })
}

/// Reliable, ordered delivery over a lossy emulated link.
///
/// The sender numbers every message; lost segments are resent by the
/// caller after a retransmission timeout, and the receiver releases
/// messages strictly in sequence (head-of-line blocking).
#[derive(Debug, Clone)]
pub struct SimStream<T> {
    next_seq: u64,
    expected: u64,
    reorder: BTreeMap<u64, T>,
}

impl<T> Default for SimStream<T> {
    fn default() -> Self {
        SimStream { next_seq: 0, expected: 0, reorder: BTreeMap::new() }
    }
}

impl<T> SimStream<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sequence number for the next outbound message.
    pub fn next_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// Accepts a segment; returns the messages now deliverable in order.
    pub fn receive(&mut self, seq: u64, msg: T) -> Vec<T> {
        if seq < self.expected {
            return Vec::new();
        }
        self.reorder.entry(seq).or_insert(msg);
        let mut out = Vec::new();
        while let Some(m) = self.reorder.remove(&self.expected) {
            out.push(m);
            self.expected += 1;
        }
        out
    }

    pub fn buffered(&self) -> usize {
        self.reorder.len()
    }
}
