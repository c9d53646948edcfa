//! MQTT 3.1.1 subset: QoS 0/1, clean sessions, `#` wildcard only.
//!
//! The broker and client are sans-IO state machines driven with explicit
//! timestamps, so the simulator and the loopback server share one
//! implementation.

mod broker;
mod client;
pub mod live;
mod packet;

use std::collections::BTreeMap;
use std::io;

use thiserror::Error;

use crate::types::{Nanos, NANOS_PER_MS};

pub use broker::{Broker, BrokerStats, Delivery, SessionId};
pub use client::{ClientEvent, ClientStats, MqttClient};
pub use packet::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, read_packet, MqttPacket, Publish,
    QoS, MAX_REMAINING_LENGTH,
};

pub const DEFAULT_RETRY_TIMEOUT: Nanos = 200 * NANOS_PER_MS;
pub const DEFAULT_RETRY_CAP: u32 = 10;

#[derive(Debug, Error)]
pub enum MqttError {
    #[error("remaining length {0} outside 0..=268435455")]
    RemainingLengthOutOfRange(u64),
    #[error("malformed remaining-length varint")]
    MalformedVarint,
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("packet truncated")]
    Truncated,
    #[error("packet id missing or zero")]
    MissingPacketId,
    #[error("reserved flag bits set: {0:#06b}")]
    ReservedFlags(u8),
    #[error("unknown packet type {0}")]
    UnknownPacketType(u8),
    #[error("session {0} is not connected")]
    NotConnected(u32),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub timeout: Nanos,
    /// `None` retries forever.
    pub cap: Option<u32>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { timeout: DEFAULT_RETRY_TIMEOUT, cap: Some(DEFAULT_RETRY_CAP) }
    }
}

/// Topic scheme used by the experiment harness.
pub fn topic(robot: u32, stream: &str) -> String {
    format!("robot/{robot}/{stream}")
}

/// A filter is valid when `#` appears only as the whole final level and
/// `+` does not appear at all.
pub fn valid_filter(filter: &str) -> bool {
    if filter.is_empty() || filter.contains('+') {
        return false;
    }
    let levels: Vec<&str> = filter.split('/').collect();
    levels.iter().enumerate().all(|(i, l)| !l.contains('#') || (*l == "#" && i == levels.len() - 1))
}

pub fn topic_matches(filter: &str, topic: &str) -> bool {
    if !valid_filter(filter) || topic.contains('#') || topic.contains('+') {
        return false;
    }
    match filter.strip_suffix('#') {
        None => filter == topic,
        Some("") => true,
        Some(prefix) => {
            // "a/#" matches "a" and everything below it
            let parent = &prefix[..prefix.len() - 1];
            topic == parent || topic.starts_with(prefix)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InflightEntry {
    pub publish: Publish,
    pub deadline: Nanos,
    pub retries: u32,
}

/// Outstanding QoS1 publishes of one sender, keyed by packet id.
#[derive(Debug, Clone, Default)]
pub struct Inflight {
    entries: BTreeMap<u16, InflightEntry>,
    last_id: u16,
}

/// What a retransmission sweep did.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RetrySweep {
    pub resend: Vec<Publish>,
    pub dropped: Vec<u16>,
}

impl Inflight {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u16) -> Option<&InflightEntry> {
        self.entries.get(&id)
    }

    /// Next free nonzero id, or `None` when all 65535 are in flight.
    pub fn allocate_id(&mut self) -> Option<u16> {
        if self.entries.len() >= u16::MAX as usize {
            return None;
        }
        loop {
            self.last_id = self.last_id.wrapping_add(1);
            if self.last_id != 0 && !self.entries.contains_key(&self.last_id) {
                return Some(self.last_id);
            }
        }
    }

    pub fn insert(&mut self, publish: Publish, deadline: Nanos) {
        let id = publish.packet_id.expect("QoS1 publish carries an id");
        self.entries.insert(id, InflightEntry { publish, deadline, retries: 0 });
    }

    pub fn ack(&mut self, id: u16) -> Option<InflightEntry> {
        self.entries.remove(&id)
    }

    pub fn next_deadline(&self) -> Option<Nanos> {
        self.entries.values().map(|e| e.deadline).min()
    }

    /// Entries past their deadline are resent with dup=1, or dropped once
    /// they already used `cap` retries.
    pub fn sweep(&mut self, now: Nanos, policy: RetryPolicy) -> RetrySweep {
        let mut out = RetrySweep::default();
        let due: Vec<u16> = self.entries.iter().filter(|(_, e)| e.deadline <= now).map(|(id, _)| *id).collect();
        for id in due {
            let entry = self.entries.get_mut(&id).unwrap();
            if policy.cap.is_some_and(|cap| entry.retries >= cap) {
                self.entries.remove(&id);
                out.dropped.push(id);
                continue;
            }
            entry.retries += 1;
            entry.deadline = now + policy.timeout;
            entry.publish.dup = true;
            out.resend.push(entry.publish.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcard_matching() {
        assert!(topic_matches("robot/1/rgb", "robot/1/rgb"));
        assert!(topic_matches("robot/#", "robot/1/rgb"));
        assert!(topic_matches("robot/#", "robot/2/depth"));
        assert!(topic_matches("robot/#", "robot"));
        assert!(topic_matches("#", "anything/at/all"));
        assert!(!topic_matches("robot/1/rgb", "robot/1/depth"));
        assert!(!topic_matches("robot/#", "robots/1"));
        assert!(!topic_matches("robot/#/rgb", "robot/1/rgb"));
        assert!(!topic_matches("robot/+/rgb", "robot/1/rgb"));
    }

    #[test]
    fn ids_skip_zero_and_in_use() {
        let mut f = Inflight { last_id: u16::MAX - 1, ..Default::default() };
        let a = f.allocate_id().unwrap();
        assert_eq!(a, u16::MAX);
        f.insert(Publish::qos1("t", a, vec![]), 0);
        assert_eq!(f.allocate_id(), Some(1));
    }

    #[test]
    fn sweep_respects_cap() {
        let mut f = Inflight::default();
        f.insert(Publish::qos1("t", 1, vec![]), 10);
        let policy = RetryPolicy { timeout: 10, cap: Some(2) };
        assert!(f.sweep(9, policy).resend.is_empty());
        let s = f.sweep(10, policy);
        assert_eq!(s.resend.len(), 1);
        assert!(s.resend[0].dup);
        assert_eq!(f.get(1).unwrap().deadline, 20);
        assert_eq!(f.sweep(20, policy).resend.len(), 1);
        let s = f.sweep(30, policy);
        assert_eq!(s.dropped, vec![1]);
        assert!(f.is_empty());
    }
}
