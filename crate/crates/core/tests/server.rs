use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use fluorotwin::bus::{Bus, Envelope, Topic};
use fluorotwin::server::{serve, ServeOptions, GEOMETRY_PATH};
use fluorotwin::world::ActuationCommand;
use fluorotwin::TwinPose;
use serde_json::Value;
use tungstenite::Message;

fn pose(x: f64) -> TwinPose {
    TwinPose {
        x_mm: x,
        y_mm: 0.0,
        v_inst: 0.0,
        v_1s: 0.0,
        v_10s: 0.0,
        mismatch_px: 0.0,
        latency_us: 0,
    }
}

struct LineClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl LineClient {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        Self {
            reader: BufReader::new(s.try_clone().unwrap()),
            writer: s,
        }
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn recv(&mut self) -> Value {
        let mut l = String::new();
        self.reader.read_line(&mut l).unwrap();
        serde_json::from_str(&l).unwrap_or_else(|e| panic!("{e}: {l:?}"))
    }

    fn recv_raw(&mut self) -> String {
        let mut l = String::new();
        self.reader.read_line(&mut l).unwrap();
        l
    }
}

fn wait_for_subscribers(bus: &Bus, topic: Topic, n: usize) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while bus.subscriber_count(topic) < n {
        assert!(Instant::now() < deadline, "subscribers never arrived");
        std::thread::sleep(Duration::from_millis(2));
    }
}

#[test]
fn tcp_subscribe_receives_envelopes_in_order() {
    let bus = Bus::new();
    let srv = serve(bus.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
    let mut c = LineClient::connect(srv.tcp_addr());
    c.send(r#"{"op":"sub","topic":"twin_pose"}"#);
    assert_eq!(c.recv()["control"], "ack");
    wait_for_subscribers(&bus, Topic::TwinPose, 1);
    for k in 0..50 {
        bus.publish(Topic::TwinPose, &pose(k as f64)).unwrap();
    }
    for k in 0..50u64 {
        let env = Envelope::from_line(c.recv_raw().trim_end()).unwrap();
        assert_eq!(env.topic, "twin_pose");
        assert_eq!(env.seq, k);
        assert_eq!(env.decode::<TwinPose>().unwrap().x_mm, k as f64);
    }
    srv.shutdown();
}

#[test]
fn tcp_publish_reaches_local_subscriber_verbatim() {
    let bus = Bus::new();
    let sub = bus.subscribe(Topic::Actuation).unwrap();
    let srv = serve(bus.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
    let mut c = LineClient::connect(srv.tcp_addr());
    let payload = r#"{"axis_angle":0.5,"frequency":12.0,"enabled":true}"#;
    c.send(&format!(r#"{{"op":"pub","topic":"actuation","payload":{payload}}}"#));
    let ack = c.recv();
    assert_eq!(ack["control"], "ack");
    assert_eq!(ack["seq"], 0);
    let env = sub.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(env.payload_str(), payload);
    assert_eq!(
        env.decode::<ActuationCommand>().unwrap(),
        ActuationCommand::new(0.5, 12.0, true).unwrap()
    );
    srv.shutdown();
}

#[test]
fn malformed_and_invalid_requests_get_errors_and_connection_survives() {
    let bus = Bus::new();
    let sub = bus.subscribe(Topic::Actuation).unwrap();
    let srv = serve(bus.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
    let mut c = LineClient::connect(srv.tcp_addr());
    for bad in [
        "not json",
        r#"{"op":"sub","topic":"nope"}"#,
        r#"{"op":"pub","topic":"actuation","payload":{"axis_angle":0,"frequency":500,"enabled":true}}"#,
        r#"{"op":"pub","topic":"actuation","payload":{"axis_angle":0}}"#,
        r#"{"op":"launch","topic":"actuation"}"#,
    ] {
        c.send(bad);
        let r = c.recv();
        assert_eq!(r["control"], "error", "{bad} -> {r}");
    }
    assert!(sub.try_recv().unwrap().is_none());
    c.send(r#"{"op":"pub","topic":"actuation","payload":{"axis_angle":0,"frequency":1,"enabled":false}}"#);
    assert_eq!(c.recv()["control"], "ack");
    assert!(sub.recv_timeout(Duration::from_secs(5)).is_ok());
    srv.shutdown();
}

#[test]
fn unsubscribe_ends_stream() {
    let bus = Bus::new();
    let srv = serve(bus.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
    let mut c = LineClient::connect(srv.tcp_addr());
    c.send(r#"{"op":"sub","topic":"telemetry"}"#);
    assert_eq!(c.recv()["control"], "ack");
    wait_for_subscribers(&bus, Topic::Telemetry, 1);
    c.send(r#"{"op":"unsub","topic":"telemetry"}"#);
    let mut seen = Vec::new();
    for _ in 0..2 {
        seen.push(c.recv()["control"].as_str().unwrap().to_string());
    }
    seen.sort();
    assert_eq!(seen, vec!["ack", "end"]);
    assert_eq!(bus.subscriber_count(Topic::Telemetry), 0);
    srv.shutdown();
}

#[test]
fn shutdown_sends_eos_and_closes() {
    let bus = Bus::new();
    let srv = serve(bus.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
    let mut c = LineClient::connect(srv.tcp_addr());
    c.send(r#"{"op":"sub","topic":"twin_pose"}"#);
    assert_eq!(c.recv()["control"], "ack");
    srv.shutdown();
    assert_eq!(c.recv()["control"], "eos");
    let mut rest = String::new();
    assert_eq!(c.reader.read_to_string(&mut rest).unwrap_or(0), 0);
}

fn ws_server(geometry: Option<&str>) -> (Bus, fluorotwin::BusServer) {
    let bus = Bus::new();
    let srv = serve(
        bus.clone(),
        "127.0.0.1:0",
        ServeOptions {
            websocket: true,
            geometry_json: geometry.map(str::to_string),
        },
    )
    .unwrap();
    (bus, srv)
}

#[test]
fn bridge_is_on_next_port() {
    let (_bus, srv) = ws_server(None);
    assert_eq!(srv.ws_addr().unwrap().port(), srv.tcp_addr().port() + 1);
}

#[test]
fn websocket_bridge_round_trip() {
    let (bus, srv) = ws_server(None);
    let act = bus.subscribe(Topic::Actuation).unwrap();
    let url = format!("ws://{}/", srv.ws_addr().unwrap());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let text = |m: Message| -> Value { serde_json::from_str(m.to_text().unwrap()).unwrap() };

    ws.send(Message::text(r#"{"op":"sub","topic":"twin_pose"}"#)).unwrap();
    assert_eq!(text(ws.read().unwrap())["control"], "ack");
    wait_for_subscribers(&bus, Topic::TwinPose, 1);
    bus.publish(Topic::TwinPose, &pose(3.5)).unwrap();
    let env = Envelope::from_line(ws.read().unwrap().to_text().unwrap()).unwrap();
    assert_eq!(env.decode::<TwinPose>().unwrap().x_mm, 3.5);

    ws.send(Message::text(
        r#"{"op":"pub","topic":"actuation","payload":{"axis_angle":1.0,"frequency":2.0,"enabled":true}}"#,
    ))
    .unwrap();
    assert_eq!(text(ws.read().unwrap())["control"], "ack");
    let env = act.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(env.decode::<ActuationCommand>().unwrap().frequency, 2.0);

    ws.send(Message::text("{oops")).unwrap();
    assert_eq!(text(ws.read().unwrap())["control"], "error");

    srv.shutdown();
    assert_eq!(text(ws.read().unwrap())["control"], "eos");
}

fn http_get(addr: std::net::SocketAddr, path: &str) -> (String, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let (head, body) = resp.split_once("\r\n\r\n").unwrap();
    (head.lines().next().unwrap().to_string(), body.to_string())
}

#[test]
fn geometry_endpoint_serves_document() {
    let doc = fluorotwin::world::bundled::BRANCHED_PHANTOM;
    let (_bus, srv) = ws_server(Some(doc));
    let (status, body) = http_get(srv.ws_addr().unwrap(), GEOMETRY_PATH);
    assert!(status.contains("200"), "{status}");
    assert_eq!(body, doc);
    let parsed = fluorotwin::WorldGeometry::from_json(&body).unwrap();
    assert_eq!(parsed.channels.len(), 4);
}

#[test]
fn geometry_endpoint_without_document_is_404() {
    let (_bus, srv) = ws_server(None);
    let (status, _) = http_get(srv.ws_addr().unwrap(), GEOMETRY_PATH);
    assert!(status.contains("404"), "{status}");
}
