use super::{Inflight, MqttError, MqttPacket, Publish, QoS, RetryPolicy};
use crate::types::Nanos;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Connected { return_code: u8 },
    Subscribed { packet_id: u16, return_codes: Vec<u8> },
    Message(Publish),
    Acked(u16),
    Pong,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub published: u64,
    pub acked: u64,
    pub retransmissions: u64,
    pub retry_exhausted: u64,
    pub received: u64,
    pub received_dup: u64,
}

/// Client side of a session: QoS1 outbound window and inbound acks.
#[derive(Debug)]
pub struct MqttClient {
    client_id: String,
    policy: RetryPolicy,
    inflight: Inflight,
    next_sub_id: u16,
    connected: bool,
    stats: ClientStats,
}

impl MqttClient {
    pub fn new(client_id: &str, policy: RetryPolicy) -> Self {
        MqttClient {
            client_id: client_id.into(),
            policy,
            inflight: Inflight::default(),
            next_sub_id: 0,
            connected: false,
            stats: ClientStats::default(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    pub fn inflight(&self) -> &Inflight {
        &self.inflight
    }

    pub fn connect(&self, keep_alive: u16) -> MqttPacket {
        MqttPacket::Connect { client_id: self.client_id.clone(), keep_alive }
    }

    pub fn subscribe(&mut self, filter: &str, qos: QoS) -> MqttPacket {
        self.next_sub_id = self.next_sub_id.checked_add(1).unwrap_or(1);
        MqttPacket::Subscribe { packet_id: self.next_sub_id, filters: vec![(filter.into(), qos)] }
    }

    pub fn publish(&mut self, topic: &str, payload: Vec<u8>, qos: QoS, now: Nanos) -> Result<MqttPacket, MqttError> {
        let p = match qos {
            QoS::AtMostOnce => Publish::qos0(topic, payload),
            QoS::AtLeastOnce => {
                let id = self.inflight.allocate_id().ok_or(MqttError::MissingPacketId)?;
                let p = Publish::qos1(topic, id, payload);
                self.inflight.insert(p.clone(), now + self.policy.timeout);
                p
            }
        };
        self.stats.published += 1;
        Ok(MqttPacket::Publish(p))
    }

    /// Returns the application event, if any, and the packet to send back.
    pub fn handle(&mut self, packet: MqttPacket) -> (Option<ClientEvent>, Option<MqttPacket>) {
        match packet {
            MqttPacket::Connack { return_code, .. } => {
                self.connected = return_code == 0;
                (Some(ClientEvent::Connected { return_code }), None)
            }
            MqttPacket::Suback { packet_id, return_codes } => {
                (Some(ClientEvent::Subscribed { packet_id, return_codes }), None)
            }
            MqttPacket::Publish(p) => {
                self.stats.received += 1;
                if p.dup {
                    self.stats.received_dup += 1;
                }
                let ack = p.packet_id.map(|packet_id| MqttPacket::Puback { packet_id });
                (Some(ClientEvent::Message(p)), ack)
            }
            MqttPacket::Puback { packet_id } => match self.inflight.ack(packet_id) {
                Some(_) => {
                    self.stats.acked += 1;
                    (Some(ClientEvent::Acked(packet_id)), None)
                }
                None => (None, None),
            },
            MqttPacket::Pingresp => (Some(ClientEvent::Pong), None),
            MqttPacket::Connect { .. } | MqttPacket::Subscribe { .. } | MqttPacket::Pingreq | MqttPacket::Disconnect => {
                (None, None)
            }
        }
    }

    pub fn next_deadline(&self) -> Option<Nanos> {
        self.inflight.next_deadline()
    }

    pub fn retransmit(&mut self, now: Nanos) -> Vec<MqttPacket> {
        let sweep = self.inflight.sweep(now, self.policy);
        self.stats.retry_exhausted += sweep.dropped.len() as u64;
        self.stats.retransmissions += sweep.resend.len() as u64;
        sweep.resend.into_iter().map(MqttPacket::Publish).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qos1_publish_tracks_until_ack() {
        let mut c = MqttClient::new("r", RetryPolicy::default());
        let MqttPacket::Publish(p) = c.publish("t", vec![1], QoS::AtLeastOnce, 0).unwrap() else { panic!() };
        assert_eq!(c.inflight().len(), 1);
        let (ev, reply) = c.handle(MqttPacket::Puback { packet_id: p.packet_id.unwrap() });
        assert_eq!(ev, Some(ClientEvent::Acked(p.packet_id.unwrap())));
        assert!(reply.is_none());
        assert!(c.inflight().is_empty());
    }

    #[test]
    fn inbound_qos1_is_acked() {
        let mut c = MqttClient::new("r", RetryPolicy::default());
        let (_, reply) = c.handle(MqttPacket::Publish(Publish::qos1("t", 4, vec![])));
        assert_eq!(reply, Some(MqttPacket::Puback { packet_id: 4 }));
        let (_, reply) = c.handle(MqttPacket::Publish(Publish::qos0("t", vec![])));
        assert_eq!(reply, None);
    }
}
