//! Topic-based publish/subscribe with per-topic sequencing and dual
//! timestamps.
//!
//! Every publish is validated against the topic schema, stamped with the
//! next per-topic `seq`, a monotonic and a wall timestamp, and then offered
//! to each subscriber's bounded queue while the topic lock is held, so all
//! subscribers observe the same order. A subscriber whose queue is full is
//! dropped and a `telemetry` event is published; publishers never block.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TryRecvError, TrySendError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::clock::{mono_us, wall_us};
use crate::detect::Detection;
use crate::messages::{FrameMeta, Telemetry, TwinPose};
use crate::world::ActuationCommand;

/// Pending envelopes a subscriber may hold before it is dropped.
pub const SUBSCRIBER_QUEUE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    Detection,
    TwinPose,
    Actuation,
    Telemetry,
    FrameMeta,
}

impl Topic {
    pub const ALL: [Topic; 5] = [
        Topic::Detection,
        Topic::TwinPose,
        Topic::Actuation,
        Topic::Telemetry,
        Topic::FrameMeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topic::Detection => "detection",
            Topic::TwinPose => "twin_pose",
            Topic::Actuation => "actuation",
            Topic::Telemetry => "telemetry",
            Topic::FrameMeta => "frame_meta",
        }
    }

    pub fn from_name(name: &str) -> Option<Topic> {
        Topic::ALL.into_iter().find(|t| t.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Checks `payload` against this topic's schema.
    pub fn validate(self, payload: &str) -> Result<(), String> {
        fn check<T: DeserializeOwned>(payload: &str) -> Result<T, String> {
            serde_json::from_str(payload).map_err(|e| e.to_string())
        }
        match self {
            Topic::Detection => {
                let d: Detection = check(payload)?;
                if !(0.0..=1.0).contains(&d.confidence) {
                    return Err("confidence outside [0, 1]".into());
                }
            }
            Topic::TwinPose => {
                check::<TwinPose>(payload)?;
            }
            Topic::Actuation => {
                let c: ActuationCommand = check(payload)?;
                c.validate().map_err(|e| e.to_string())?;
            }
            Topic::Telemetry => {
                check::<Telemetry>(payload)?;
            }
            Topic::FrameMeta => {
                check::<FrameMeta>(payload)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BusError {
    #[error("unregistered topic {0:?}")]
    UnregisteredTopic(String),
    #[error("payload rejected by `{topic}` schema: {reason}")]
    Schema { topic: Topic, reason: String },
    #[error("bus is closed")]
    Closed,
}

/// Wire message. Serialized field order is fixed:
/// `topic, seq, t_mono_us, t_wall_us, payload`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    pub seq: u64,
    pub t_mono_us: u64,
    pub t_wall_us: u64,
    pub payload: Box<RawValue>,
}

impl Envelope {
    /// Canonical single-line encoding, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn payload_str(&self) -> &str {
        self.payload.get()
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_str(self.payload.get())
    }
}

impl PartialEq for Envelope {
    fn eq(&self, other: &Self) -> bool {
        self.topic == other.topic
            && self.seq == other.seq
            && self.t_mono_us == other.t_mono_us
            && self.t_wall_us == other.t_wall_us
            && self.payload.get() == other.payload.get()
    }
}

struct Subscriber {
    id: u64,
    tx: Sender<Arc<Envelope>>,
}

#[derive(Default)]
struct TopicState {
    next_seq: u64,
    last_mono_us: u64,
    subscribers: Vec<Subscriber>,
}

struct BusInner {
    topics: [Mutex<TopicState>; 5],
    next_sub_id: AtomicU64,
    dropped_subscribers: AtomicU64,
    closed: AtomicBool,
    queue_capacity: usize,
}

/// In-process bus handle; cheap to clone and safe to use from any thread.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<BusInner>,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bus")
            .field("dropped_subscribers", &self.dropped_subscribers())
            .finish()
    }
}

impl Bus {
    pub fn new() -> Self {
        Self::with_queue_capacity(SUBSCRIBER_QUEUE)
    }

    pub fn with_queue_capacity(queue_capacity: usize) -> Self {
        Self {
            inner: Arc::new(BusInner {
                topics: Default::default(),
                next_sub_id: AtomicU64::new(0),
                dropped_subscribers: AtomicU64::new(0),
                closed: AtomicBool::new(false),
                queue_capacity,
            }),
        }
    }

    pub fn dropped_subscribers(&self) -> u64 {
        self.inner.dropped_subscribers.load(Ordering::Relaxed)
    }

    pub fn subscriber_count(&self, topic: Topic) -> usize {
        self.inner.topics[topic.index()]
            .lock()
            .unwrap()
            .subscribers
            .len()
    }

    /// Publishes a typed payload.
    pub fn publish<T: Serialize>(&self, topic: Topic, payload: &T) -> Result<u64, BusError> {
        let text = serde_json::to_string(payload).map_err(|e| BusError::Schema {
            topic,
            reason: e.to_string(),
        })?;
        self.publish_text(topic, text)
    }

    /// Publishes pre-encoded JSON to a topic named on the wire. The payload
    /// bytes are delivered verbatim.
    pub fn publish_raw(&self, topic: &str, payload: &str) -> Result<u64, BusError> {
        let topic =
            Topic::from_name(topic).ok_or_else(|| BusError::UnregisteredTopic(topic.to_string()))?;
        self.publish_text(topic, payload.to_string())
    }

    fn publish_text(&self, topic: Topic, text: String) -> Result<u64, BusError> {
        if self.inner.closed.load(Ordering::Acquire) {
            return Err(BusError::Closed);
        }
        topic
            .validate(&text)
            .map_err(|reason| BusError::Schema { topic, reason })?;
        let payload = RawValue::from_string(text).map_err(|e| BusError::Schema {
            topic,
            reason: e.to_string(),
        })?;

        let (seq, dropped) = {
            let mut st = self.inner.topics[topic.index()].lock().unwrap();
            let seq = st.next_seq;
            st.next_seq += 1;
            let t_mono_us = mono_us().max(st.last_mono_us);
            st.last_mono_us = t_mono_us;
            let env = Arc::new(Envelope {
                topic: topic.name().to_string(),
                seq,
                t_mono_us,
                t_wall_us: wall_us(),
                payload,
            });
            let mut dropped = Vec::new();
            st.subscribers.retain(|s| match s.tx.try_send(Arc::clone(&env)) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    dropped.push(s.id);
                    false
                }
                Err(TrySendError::Disconnected(_)) => false,
            });
            (seq, dropped)
        };

        for id in dropped {
            let total = self.inner.dropped_subscribers.fetch_add(1, Ordering::Relaxed) + 1;
            log::warn!("bus: dropped slow subscriber {id} on `{topic}`");
            let mut ev = Telemetry::event(format!("subscriber_dropped topic={topic} id={id}"));
            ev.dropped_subscribers = total;
            // best effort; the bus may be closing
            let _ = self.publish(Topic::Telemetry, &ev);
        }
        Ok(seq)
    }

    pub fn subscribe(&self, topic: Topic) -> Result<Subscription, BusError> {
        if self.inner.closed.load(Ordering::Acquire) {
            return Err(BusError::Closed);
        }
        let (tx, rx) = bounded(self.inner.queue_capacity);
        let id = self.inner.next_sub_id.fetch_add(1, Ordering::Relaxed);
        self.inner.topics[topic.index()]
            .lock()
            .unwrap()
            .subscribers
            .push(Subscriber { id, tx });
        Ok(Subscription { topic, id, rx })
    }

    pub fn subscribe_name(&self, topic: &str) -> Result<Subscription, BusError> {
        let t =
            Topic::from_name(topic).ok_or_else(|| BusError::UnregisteredTopic(topic.to_string()))?;
        self.subscribe(t)
    }

    /// Removes a subscription; its receiver then sees end-of-stream once
    /// drained.
    pub fn unsubscribe(&self, topic: Topic, id: u64) {
        self.inner.topics[topic.index()]
            .lock()
            .unwrap()
            .subscribers
            .retain(|s| s.id != id);
    }

    /// Rejects further publishes and ends every subscription.
    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::Release);
        for t in &self.inner.topics {
            t.lock().unwrap().subscribers.clear();
        }
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::Acquire)
    }
}

/// Ordered live stream of one topic.
#[derive(Debug)]
pub struct Subscription {
    topic: Topic,
    id: u64,
    rx: Receiver<Arc<Envelope>>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum RecvError {
    Timeout,
    /// The bus dropped or closed this subscription and the queue is empty.
    Closed,
}

impl Subscription {
    pub fn topic(&self) -> Topic {
        self.topic
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn pending(&self) -> usize {
        self.rx.len()
    }

    /// Blocks until the next envelope; `None` at end of stream.
    pub fn recv(&self) -> Option<Arc<Envelope>> {
        self.rx.recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Arc<Envelope>, RecvError> {
        self.rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => RecvError::Timeout,
            RecvTimeoutError::Disconnected => RecvError::Closed,
        })
    }

    /// `Ok(None)` when nothing is pending.
    pub fn try_recv(&self) -> Result<Option<Arc<Envelope>>, RecvError> {
        match self.rx.try_recv() {
            Ok(e) => Ok(Some(e)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(RecvError::Closed),
        }
    }

    pub fn drain(&self) -> impl Iterator<Item = Arc<Envelope>> + '_ {
        self.rx.try_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmd(f: f64) -> ActuationCommand {
        ActuationCommand::new(0.5, f, true).unwrap()
    }

    #[test]
    fn first_seq_is_zero_and_gapless() {
        let bus = Bus::new();
        let sub = bus.subscribe(Topic::Actuation).unwrap();
        for i in 0..100 {
            assert_eq!(bus.publish(Topic::Actuation, &cmd(1.0)).unwrap(), i);
        }
        let seqs: Vec<u64> = sub.drain().map(|e| e.seq).collect();
        assert_eq!(seqs, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn sequences_are_per_topic() {
        let bus = Bus::new();
        bus.publish(Topic::Actuation, &cmd(1.0)).unwrap();
        bus.publish(Topic::Actuation, &cmd(1.0)).unwrap();
        let meta = FrameMeta {
            seq: 0,
            t_mono_us: 0,
            mode: crate::frame::FrameMode::Cine,
        };
        assert_eq!(bus.publish(Topic::FrameMeta, &meta).unwrap(), 0);
    }

    #[test]
    fn unregistered_and_invalid_are_rejected_before_delivery() {
        let bus = Bus::new();
        let sub = bus.subscribe(Topic::Actuation).unwrap();
        assert_eq!(
            bus.publish_raw("pose", "{}"),
            Err(BusError::UnregisteredTopic("pose".into()))
        );
        assert!(matches!(
            bus.publish_raw("actuation", r#"{"axis_angle":0,"frequency":150,"enabled":true}"#),
            Err(BusError::Schema { .. })
        ));
        assert!(matches!(
            bus.publish_raw("actuation", r#"{"axis_angle":0,"frequency":1}"#),
            Err(BusError::Schema { .. })
        ));
        assert_eq!(sub.try_recv(), Ok(None));
        // rejected publishes do not consume sequence numbers
        assert_eq!(bus.publish(Topic::Actuation, &cmd(1.0)).unwrap(), 0);
    }

    #[test]
    fn payload_bytes_are_preserved() {
        let bus = Bus::new();
        let sub = bus.subscribe(Topic::Actuation).unwrap();
        let text = r#"{ "enabled": true, "frequency": 20.0, "axis_angle": 1.5707963267948966 }"#;
        bus.publish_raw("actuation", text).unwrap();
        assert_eq!(sub.recv().unwrap().payload_str(), text);
    }

    #[test]
    fn no_replay_for_late_subscribers() {
        let bus = Bus::new();
        bus.publish(Topic::Actuation, &cmd(1.0)).unwrap();
        let sub = bus.subscribe(Topic::Actuation).unwrap();
        assert_eq!(sub.try_recv(), Ok(None));
    }

    #[test]
    fn fan_out_to_two_subscribers() {
        let bus = Bus::new();
        let a = bus.subscribe(Topic::Actuation).unwrap();
        let b = bus.subscribe(Topic::Actuation).unwrap();
        for _ in 0..50 {
            bus.publish(Topic::Actuation, &cmd(2.0)).unwrap();
        }
        assert_eq!(a.drain().count(), 50);
        assert_eq!(b.drain().count(), 50);
    }

    #[test]
    fn overflow_drops_subscriber_and_emits_telemetry() {
        let bus = Bus::new();
        let telemetry = bus.subscribe(Topic::Telemetry).unwrap();
        let stalled = bus.subscribe(Topic::Actuation).unwrap();
        for _ in 0..SUBSCRIBER_QUEUE + 1 {
            bus.publish(Topic::Actuation, &cmd(1.0)).unwrap();
        }
        assert_eq!(bus.dropped_subscribers(), 1);
        assert_eq!(bus.subscriber_count(Topic::Actuation), 0);
        let ev: Telemetry = telemetry.recv().unwrap().decode().unwrap();
        assert!(ev.event.unwrap().starts_with("subscriber_dropped"));
        assert_eq!(ev.dropped_subscribers, 1);
        // the stalled subscriber keeps what it had, then sees end of stream
        assert_eq!(stalled.drain().count(), SUBSCRIBER_QUEUE);
        assert_eq!(stalled.try_recv(), Err(RecvError::Closed));
    }

    #[test]
    fn close_ends_streams() {
        let bus = Bus::new();
        let sub = bus.subscribe(Topic::TwinPose).unwrap();
        bus.close();
        assert_eq!(sub.recv(), None);
        assert_eq!(bus.publish(Topic::Actuation, &cmd(1.0)), Err(BusError::Closed));
    }

    #[test]
    fn envelope_field_order() {
        let bus = Bus::new();
        let sub = bus.subscribe(Topic::Actuation).unwrap();
        bus.publish(Topic::Actuation, &cmd(1.0)).unwrap();
        let line = sub.recv().unwrap().to_line();
        let keys = ["\"topic\"", "\"seq\"", "\"t_mono_us\"", "\"t_wall_us\"", "\"payload\""];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
        let back = Envelope::from_line(&line).unwrap();
        assert_eq!(back.to_line(), line);
    }
}
