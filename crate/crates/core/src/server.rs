//! Network endpoint for the bus: newline-delimited JSON over TCP, and a
//! WebSocket bridge on a sibling port that carries the same text, one
//! message per text frame. The bridge port also answers
//! `GET /scenario/geometry` with the scenario's geometry document.
//!
//! Client requests, one JSON object per line/frame:
//!
//! ```text
//! {"op":"sub","topic":"twin_pose"}
//! {"op":"unsub","topic":"twin_pose"}
//! {"op":"pub","topic":"actuation","payload":{...}}
//! ```
//!
//! The server sends envelopes (see [`Envelope::to_line`]) and control
//! messages, which always carry a `control` key:
//! `{"control":"ack",...}`, `{"control":"error","message":...}`,
//! `{"control":"end","topic":...}` when a subscription stops (unsubscribed or
//! dropped for falling behind) and `{"control":"eos"}` on shutdown.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::Deserialize;
use serde_json::json;
use serde_json::value::RawValue;
use tungstenite::Message;

use crate::bus::{Bus, Subscription, Topic, SUBSCRIBER_QUEUE};

pub const GEOMETRY_PATH: &str = "/scenario/geometry";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    op: String,
    topic: String,
    #[serde(default)]
    payload: Option<Box<RawValue>>,
}

enum Outgoing {
    Line(String),
    Eos,
}

fn control_error(message: impl std::fmt::Display) -> String {
    json!({"control": "error", "message": message.to_string()}).to_string()
}

/// Per-connection state shared by the transport-specific loops.
struct Session {
    bus: Bus,
    out: Sender<Outgoing>,
    subs: HashMap<Topic, u64>,
}

impl Session {
    fn handle_line(&mut self, line: &str) {
        let line = line.trim();
        if line.is_empty() {
            return;
        }
        let reply = match serde_json::from_str::<Request>(line) {
            Err(e) => control_error(format!("malformed request: {e}")),
            Ok(req) => self.handle(req),
        };
        let _ = self.out.send(Outgoing::Line(reply));
    }

    fn handle(&mut self, req: Request) -> String {
        match req.op.as_str() {
            "pub" => {
                let Some(payload) = req.payload else {
                    return control_error("pub needs a payload");
                };
                match self.bus.publish_raw(&req.topic, payload.get()) {
                    Ok(seq) => {
                        json!({"control": "ack", "op": "pub", "topic": req.topic, "seq": seq})
                            .to_string()
                    }
                    Err(e) => control_error(e),
                }
            }
            "sub" => {
                let Some(topic) = Topic::from_name(&req.topic) else {
                    return control_error(format!("unregistered topic {:?}", req.topic));
                };
                if !self.subs.contains_key(&topic) {
                    match self.bus.subscribe(topic) {
                        Ok(sub) => {
                            self.subs.insert(topic, sub.id());
                            spawn_forwarder(sub, self.out.clone());
                        }
                        Err(e) => return control_error(e),
                    }
                }
                json!({"control": "ack", "op": "sub", "topic": req.topic}).to_string()
            }
            "unsub" => {
                let Some(topic) = Topic::from_name(&req.topic) else {
                    return control_error(format!("unregistered topic {:?}", req.topic));
                };
                if let Some(id) = self.subs.remove(&topic) {
                    self.bus.unsubscribe(topic, id);
                }
                json!({"control": "ack", "op": "unsub", "topic": req.topic}).to_string()
            }
            other => control_error(format!("unknown op {other:?}")),
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        for (topic, id) in self.subs.drain() {
            self.bus.unsubscribe(topic, id);
        }
    }
}

fn spawn_forwarder(sub: Subscription, out: Sender<Outgoing>) {
    thread::spawn(move || {
        let topic = sub.topic();
        while let Some(env) = sub.recv() {
            if out.send(Outgoing::Line(env.to_line())).is_err() {
                return;
            }
        }
        // unsubscribed, or dropped by the bus for falling behind
        let _ = out.try_send(Outgoing::Line(
            json!({"control": "end", "topic": topic.name()}).to_string(),
        ));
    });
}

struct Connections {
    next: AtomicU64,
    live: Mutex<HashMap<u64, (Sender<Outgoing>, TcpStream)>>,
}

impl Connections {
    fn register(&self, out: Sender<Outgoing>, stream: &TcpStream) -> io::Result<u64> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        self.live
            .lock()
            .unwrap()
            .insert(id, (out, stream.try_clone()?));
        Ok(id)
    }

    fn remove(&self, id: u64) {
        self.live.lock().unwrap().remove(&id);
    }
}

/// Running bus endpoint.
pub struct BusServer {
    tcp_addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    conns: Arc<Connections>,
    acceptors: Vec<JoinHandle<()>>,
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Also start the WebSocket bridge on `tcp_port + 1`.
    pub websocket: bool,
    /// Document served at `GET /scenario/geometry` on the bridge port.
    pub geometry_json: Option<String>,
}

pub fn serve(bus: Bus, addr: impl ToSocketAddrs, opts: ServeOptions) -> Result<BusServer, ServeError> {
    let addr_str = addr
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .map(|a| a.to_string())
        .unwrap_or_else(|| "<unresolvable>".into());
    let bind_err = |addr: String| move |source| ServeError::Bind { addr, source };
    let listener = TcpListener::bind(&addr_str).map_err(bind_err(addr_str.clone()))?;
    let tcp_addr = listener.local_addr().map_err(bind_err(addr_str.clone()))?;
    listener
        .set_nonblocking(true)
        .map_err(bind_err(addr_str.clone()))?;

    let stop = Arc::new(AtomicBool::new(false));
    let conns = Arc::new(Connections {
        next: AtomicU64::new(0),
        live: Mutex::new(HashMap::new()),
    });
    let mut acceptors = Vec::new();

    let mut ws_addr = None;
    if opts.websocket {
        let ws_bind = SocketAddr::new(tcp_addr.ip(), tcp_addr.port().wrapping_add(1));
        let ws_listener =
            TcpListener::bind(ws_bind).map_err(bind_err(ws_bind.to_string()))?;
        ws_listener
            .set_nonblocking(true)
            .map_err(bind_err(ws_bind.to_string()))?;
        ws_addr = Some(ws_listener.local_addr().map_err(bind_err(ws_bind.to_string()))?);
        let geometry = Arc::new(opts.geometry_json.clone());
        let (bus, stop, conns) = (bus.clone(), stop.clone(), conns.clone());
        acceptors.push(thread::spawn(move || {
            accept_loop(ws_listener, &stop, |stream| {
                let (bus, conns, geometry) = (bus.clone(), conns.clone(), geometry.clone());
                thread::spawn(move || {
                    if let Err(e) = handle_bridge(stream, bus, &conns, &geometry) {
                        log::debug!("bridge connection ended: {e}");
                    }
                });
            })
        }));
    }

    {
        let (stop, conns) = (stop.clone(), conns.clone());
        acceptors.push(thread::spawn(move || {
            accept_loop(listener, &stop, |stream| {
                let (bus, conns) = (bus.clone(), conns.clone());
                thread::spawn(move || {
                    if let Err(e) = handle_tcp(stream, bus, &conns) {
                        log::debug!("tcp connection ended: {e}");
                    }
                });
            })
        }));
    }

    Ok(BusServer {
        tcp_addr,
        ws_addr,
        stop,
        conns,
        acceptors,
    })
}

fn accept_loop(listener: TcpListener, stop: &AtomicBool, mut on_conn: impl FnMut(TcpStream)) {
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                on_conn(stream);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

impl BusServer {
    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    /// Stops accepting, sends every client an end-of-stream marker and closes
    /// the connections.
    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::Release);
        for h in self.acceptors.drain(..) {
            let _ = h.join();
        }
        let live: Vec<_> = self.conns.live.lock().unwrap().drain().collect();
        for (_, (out, stream)) in live {
            if out.send_timeout(Outgoing::Eos, Duration::from_millis(200)).is_err() {
                let _ = stream.shutdown(Shutdown::Both);
            }
        }
    }
}

impl Drop for BusServer {
    fn drop(&mut self) {
        if !self.acceptors.is_empty() {
            self.stop_all();
        }
    }
}

fn outgoing_channel() -> (Sender<Outgoing>, Receiver<Outgoing>) {
    bounded(SUBSCRIBER_QUEUE)
}

fn handle_tcp(stream: TcpStream, bus: Bus, conns: &Connections) -> io::Result<()> {
    let (out_tx, out_rx) = outgoing_channel();
    let id = conns.register(out_tx.clone(), &stream)?;
    let mut writer = stream.try_clone()?;
    let writer_thread = thread::spawn(move || {
        for msg in out_rx {
            let ok = match msg {
                Outgoing::Line(l) => writer
                    .write_all(l.as_bytes())
                    .and_then(|_| writer.write_all(b"\n")),
                Outgoing::Eos => {
                    let _ = writer.write_all(b"{\"control\":\"eos\"}\n");
                    let _ = writer.flush();
                    let _ = writer.shutdown(Shutdown::Both);
                    break;
                }
            };
            if ok.is_err() {
                let _ = writer.shutdown(Shutdown::Both);
                break;
            }
        }
    });

    let mut session = Session {
        bus,
        out: out_tx,
        subs: HashMap::new(),
    };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    let result = loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break Ok(()),
            Ok(_) => session.handle_line(&line),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                let _ = session
                    .out
                    .send(Outgoing::Line(control_error("request is not valid UTF-8")));
            }
            Err(e) => break Err(e),
        }
    };
    conns.remove(id);
    drop(session);
    let _ = writer_thread.join();
    result
}

fn handle_bridge(
    mut stream: TcpStream,
    bus: Bus,
    conns: &Connections,
    geometry: &Option<String>,
) -> io::Result<()> {
    let head = peek_request_head(&stream)?;
    let first_line = head.lines().next().unwrap_or_default();
    let mut parts = first_line.split_whitespace();
    let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    if method == "GET" && path == GEOMETRY_PATH {
        // consume the request head, then answer plainly
        let mut buf = vec![0u8; head.len()];
        stream.read_exact(&mut buf)?;
        let (status, body) = match geometry {
            Some(g) => ("200 OK", g.as_str()),
            None => ("404 Not Found", "{\"error\":\"no geometry loaded\"}"),
        };
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nAccess-Control-Allow-Origin: *\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )?;
        stream.flush()?;
        return Ok(());
    }

    let raw = stream.try_clone()?;
    let mut ws = tungstenite::accept(stream)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    raw.set_read_timeout(Some(Duration::from_millis(2)))?;

    let (out_tx, out_rx) = outgoing_channel();
    let id = conns.register(out_tx.clone(), &raw)?;
    let mut session = Session {
        bus,
        out: out_tx,
        subs: HashMap::new(),
    };
    let ws_err = |e: tungstenite::Error| io::Error::new(io::ErrorKind::Other, e.to_string());
    let result = 'outer: loop {
        for msg in out_rx.try_iter() {
            match msg {
                Outgoing::Line(l) => {
                    if let Err(e) = ws.send(Message::text(l)) {
                        break 'outer Err(ws_err(e));
                    }
                }
                Outgoing::Eos => {
                    let _ = ws.send(Message::text("{\"control\":\"eos\"}"));
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    break 'outer Ok(());
                }
            }
        }
        match ws.read() {
            Ok(Message::Text(t)) => session.handle_line(t.as_str()),
            Ok(Message::Binary(b)) => match std::str::from_utf8(&b) {
                Ok(t) => session.handle_line(t),
                Err(_) => {
                    let _ = session
                        .out
                        .send(Outgoing::Line(control_error("request is not valid UTF-8")));
                }
            },
            Ok(Message::Close(_)) => break Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                break Ok(())
            }
            Err(e) => break Err(ws_err(e)),
        }
    };
    conns.remove(id);
    result
}

/// Peeks (without consuming) until the end of the HTTP request head.
fn peek_request_head(stream: &TcpStream) -> io::Result<String> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut buf = vec![0u8; 8192];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
        }
        if let Some(end) = buf[..n].windows(4).position(|w| w == b"\r\n\r\n") {
            stream.set_read_timeout(None)?;
            return Ok(String::from_utf8_lossy(&buf[..end + 4]).into_owned());
        }
        if n == buf.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "request head too large"));
        }
        thread::sleep(Duration::from_millis(1));
    }
}
