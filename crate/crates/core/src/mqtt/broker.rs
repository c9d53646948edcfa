use std::collections::BTreeMap;

use log::{debug, warn};

use super::{valid_filter, topic_matches, Inflight, MqttPacket, Publish, QoS, RetryPolicy};
use crate::types::Nanos;

pub type SessionId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub to: SessionId,
    pub packet: MqttPacket,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BrokerStats {
    /// PUBLISH packets accepted from connected sessions.
    pub received: u64,
    /// Delivery attempts to subscribers, first sends only.
    pub routed: u64,
    /// Publishes that matched no subscription.
    pub unmatched: u64,
    /// Packets from sessions that never sent CONNECT (or already left).
    pub not_connected: u64,
    pub retransmissions: u64,
    pub retry_exhausted: u64,
}

#[derive(Debug, Default)]
struct Session {
    client_id: String,
    connected: bool,
    inflight: Inflight,
}

#[derive(Debug, Clone)]
struct Subscription {
    filter: String,
    session: SessionId,
    qos: QoS,
}

/// Broker state: sessions, the subscription table, and per-session
/// outbound QoS1 windows.
#[derive(Debug, Default)]
pub struct Broker {
    sessions: BTreeMap<SessionId, Session>,
    subscriptions: Vec<Subscription>,
    policy: RetryPolicy,
    stats: BrokerStats,
    next_session: SessionId,
}

impl Broker {
    pub fn new(policy: RetryPolicy) -> Self {
        Broker { policy, ..Default::default() }
    }

    pub fn stats(&self) -> BrokerStats {
        self.stats
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    /// Registers a transport connection; it becomes usable after CONNECT.
    pub fn open_session(&mut self) -> SessionId {
        self.next_session += 1;
        self.sessions.insert(self.next_session, Session::default());
        self.next_session
    }

    /// Clean-session teardown: subscriptions and in-flight state are discarded.
    pub fn close_session(&mut self, id: SessionId) {
        if let Some(s) = self.sessions.remove(&id) {
            debug!("session {id} ({}) closed with {} in flight", s.client_id, s.inflight.len());
        }
        self.subscriptions.retain(|s| s.session != id);
    }

    pub fn is_connected(&self, id: SessionId) -> bool {
        self.sessions.get(&id).is_some_and(|s| s.connected)
    }

    pub fn inflight_len(&self, id: SessionId) -> usize {
        self.sessions.get(&id).map_or(0, |s| s.inflight.len())
    }

    pub fn total_inflight(&self) -> usize {
        self.sessions.values().map(|s| s.inflight.len()).sum()
    }

    pub fn subscription_count(&self) -> usize {
        self.subscriptions.len()
    }

    pub fn next_deadline(&self) -> Option<Nanos> {
        self.sessions.values().filter_map(|s| s.inflight.next_deadline()).min()
    }

    /// Processes one packet received from `from` at `now`.
    pub fn handle(&mut self, from: SessionId, packet: MqttPacket, now: Nanos) -> Vec<Delivery> {
        let connected = self.is_connected(from);
        let reply = |packet| vec![Delivery { to: from, packet }];
        match packet {
            MqttPacket::Connect { client_id, .. } => {
                let Some(s) = self.sessions.get_mut(&from) else {
                    self.stats.not_connected += 1;
                    return Vec::new();
                };
                if s.connected {
                    warn!("second CONNECT on session {from}; closing");
                    self.close_session(from);
                    return Vec::new();
                }
                s.connected = true;
                s.client_id = client_id;
                reply(MqttPacket::Connack { session_present: false, return_code: 0 })
            }
            _ if !connected => {
                self.stats.not_connected += 1;
                Vec::new()
            }
            MqttPacket::Publish(p) => {
                self.stats.received += 1;
                let mut out = Vec::new();
                if let (QoS::AtLeastOnce, Some(id)) = (p.qos, p.packet_id) {
                    out.push(Delivery { to: from, packet: MqttPacket::Puback { packet_id: id } });
                }
                out.extend(self.route(&p, now));
                out
            }
            MqttPacket::Puback { packet_id } => {
                if let Some(s) = self.sessions.get_mut(&from) {
                    s.inflight.ack(packet_id);
                }
                Vec::new()
            }
            MqttPacket::Subscribe { packet_id, filters } => {
                let mut return_codes = Vec::with_capacity(filters.len());
                for (filter, qos) in filters {
                    if !valid_filter(&filter) {
                        return_codes.push(0x80);
                        continue;
                    }
                    match self.subscriptions.iter_mut().find(|s| s.session == from && s.filter == filter) {
                        Some(existing) => existing.qos = qos,
                        None => self.subscriptions.push(Subscription { filter, session: from, qos }),
                    }
                    return_codes.push(qos as u8);
                }
                reply(MqttPacket::Suback { packet_id, return_codes })
            }
            MqttPacket::Pingreq => reply(MqttPacket::Pingresp),
            MqttPacket::Disconnect => {
                self.close_session(from);
                Vec::new()
            }
            MqttPacket::Connack { .. } | MqttPacket::Suback { .. } | MqttPacket::Pingresp => {
                warn!("session {from} sent a server-only packet; ignored");
                Vec::new()
            }
        }
    }

    /// Fans a publish out to every matching session, once per session at
    /// the highest granted QoS capped by the publish QoS. A retransmitted
    /// inbound publish is forwarded with its dup flag kept.
    pub fn route(&mut self, publish: &Publish, now: Nanos) -> Vec<Delivery> {
        let mut targets: BTreeMap<SessionId, QoS> = BTreeMap::new();
        for s in &self.subscriptions {
            if topic_matches(&s.filter, &publish.topic) {
                let q = targets.entry(s.session).or_insert(s.qos);
                *q = (*q).max(s.qos);
            }
        }
        if targets.is_empty() {
            self.stats.unmatched += 1;
            return Vec::new();
        }
        let mut out = Vec::with_capacity(targets.len());
        for (to, sub_qos) in targets {
            let qos = sub_qos.min(publish.qos);
            let Some(session) = self.sessions.get_mut(&to) else { continue };
            let packet = match qos {
                QoS::AtMostOnce => Publish::qos0(&publish.topic, publish.payload.clone()),
                QoS::AtLeastOnce => {
                    let Some(id) = session.inflight.allocate_id() else {
                        warn!("session {to} has no free packet ids; delivery dropped");
                        self.stats.retry_exhausted += 1;
                        continue;
                    };
                    let mut p = Publish::qos1(&publish.topic, id, publish.payload.clone());
                    p.dup = publish.dup;
                    session.inflight.insert(p.clone(), now + self.policy.timeout);
                    p
                }
            };
            self.stats.routed += 1;
            out.push(Delivery { to, packet: MqttPacket::Publish(packet) });
        }
        out
    }

    /// Resends overdue QoS1 deliveries with dup=1 and drops those at the cap.
    pub fn retransmit(&mut self, now: Nanos) -> Vec<Delivery> {
        let mut out = Vec::new();
        for (&to, session) in self.sessions.iter_mut() {
            let sweep = session.inflight.sweep(now, self.policy);
            self.stats.retry_exhausted += sweep.dropped.len() as u64;
            self.stats.retransmissions += sweep.resend.len() as u64;
            out.extend(sweep.resend.into_iter().map(|p| Delivery { to, packet: MqttPacket::Publish(p) }));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::NANOS_PER_MS;

    fn connected(b: &mut Broker, name: &str) -> SessionId {
        let s = b.open_session();
        let out = b.handle(s, MqttPacket::Connect { client_id: name.into(), keep_alive: 0 }, 0);
        assert_eq!(out[0].packet, MqttPacket::Connack { session_present: false, return_code: 0 });
        s
    }

    fn subscribe(b: &mut Broker, s: SessionId, filter: &str, qos: QoS) {
        let out = b.handle(s, MqttPacket::Subscribe { packet_id: 1, filters: vec![(filter.into(), qos)] }, 0);
        assert_eq!(out[0].packet, MqttPacket::Suback { packet_id: 1, return_codes: vec![qos as u8] });
    }

    #[test]
    fn unmatched_publish_is_counted() {
        let mut b = Broker::default();
        let p = connected(&mut b, "p");
        assert!(b.handle(p, MqttPacket::Publish(Publish::qos0("robot/1/rgb", vec![1])), 0).is_empty());
        assert_eq!(b.stats().unmatched, 1);
    }

    #[test]
    fn publish_before_connect_is_dropped() {
        let mut b = Broker::default();
        let s = b.open_session();
        assert!(b.handle(s, MqttPacket::Publish(Publish::qos0("t", vec![])), 0).is_empty());
        assert_eq!(b.stats().not_connected, 1);
    }

    #[test]
    fn qos1_ack_empties_inflight() {
        let mut b = Broker::default();
        let sub = connected(&mut b, "edge");
        let pubr = connected(&mut b, "robot");
        subscribe(&mut b, sub, "robot/#", QoS::AtLeastOnce);
        let out = b.handle(pubr, MqttPacket::Publish(Publish::qos1("robot/1/rgb", 9, vec![7])), 0);
        assert_eq!(out[0], Delivery { to: pubr, packet: MqttPacket::Puback { packet_id: 9 } });
        let MqttPacket::Publish(fwd) = &out[1].packet else { panic!() };
        assert_eq!(out[1].to, sub);
        assert_eq!(b.inflight_len(sub), 1);
        b.handle(sub, MqttPacket::Puback { packet_id: fwd.packet_id.unwrap() }, 1);
        assert_eq!(b.inflight_len(sub), 0);
    }

    #[test]
    fn delivery_qos_is_the_minimum() {
        let mut b = Broker::default();
        let sub = connected(&mut b, "s");
        let p = connected(&mut b, "p");
        subscribe(&mut b, sub, "a", QoS::AtMostOnce);
        let out = b.handle(p, MqttPacket::Publish(Publish::qos1("a", 1, vec![])), 0);
        assert!(matches!(&out[1].packet, MqttPacket::Publish(x) if x.qos == QoS::AtMostOnce && x.packet_id.is_none()));
        assert_eq!(b.total_inflight(), 0);
    }

    #[test]
    fn overlapping_filters_deliver_once() {
        let mut b = Broker::default();
        let sub = connected(&mut b, "s");
        let p = connected(&mut b, "p");
        subscribe(&mut b, sub, "robot/#", QoS::AtMostOnce);
        subscribe(&mut b, sub, "robot/1/rgb", QoS::AtLeastOnce);
        let out = b.handle(p, MqttPacket::Publish(Publish::qos1("robot/1/rgb", 1, vec![])), 0);
        assert_eq!(out.len(), 2);
        assert!(matches!(&out[1].packet, MqttPacket::Publish(x) if x.qos == QoS::AtLeastOnce));
    }

    #[test]
    fn retransmit_until_cap() {
        let policy = RetryPolicy { timeout: 200 * NANOS_PER_MS, cap: Some(5) };
        let mut b = Broker::new(policy);
        let sub = connected(&mut b, "s");
        let p = connected(&mut b, "p");
        subscribe(&mut b, sub, "t", QoS::AtLeastOnce);
        b.handle(p, MqttPacket::Publish(Publish::qos1("t", 1, vec![])), 0);
        let mut resent = 0;
        let mut t = 0;
        for _ in 0..10 {
            t += policy.timeout;
            for d in b.retransmit(t) {
                assert!(matches!(d.packet, MqttPacket::Publish(ref x) if x.dup));
                resent += 1;
            }
        }
        assert_eq!(resent, 5);
        assert_eq!(b.stats().retry_exhausted, 1);
        assert_eq!(b.total_inflight(), 0);
    }

    #[test]
    fn invalid_filter_gets_failure_code() {
        let mut b = Broker::default();
        let s = connected(&mut b, "s");
        let out = b.handle(s, MqttPacket::Subscribe { packet_id: 3, filters: vec![("a/+/b".into(), QoS::AtMostOnce)] }, 0);
        assert_eq!(out[0].packet, MqttPacket::Suback { packet_id: 3, return_codes: vec![0x80] });
        assert_eq!(b.subscription_count(), 0);
    }

    #[test]
    fn disconnect_removes_subscriptions() {
        let mut b = Broker::default();
        let s = connected(&mut b, "s");
        subscribe(&mut b, s, "#", QoS::AtMostOnce);
        b.handle(s, MqttPacket::Disconnect, 0);
        assert_eq!(b.subscription_count(), 0);
        assert!(!b.is_connected(s));
    }
}
