//! MQTT 3.1.1 wire codec for the packet subset used here.

use std::io::{self, Read};

use super::MqttError;

pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_bits(b: u8) -> Result<Self, MqttError> {
        match b {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            other => Err(MqttError::Malformed(format!("unsupported QoS {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub topic: String,
    /// Present exactly when `qos` is 1; never zero.
    pub packet_id: Option<u16>,
    pub payload: Vec<u8>,
}

impl Publish {
    pub fn qos0(topic: &str, payload: Vec<u8>) -> Self {
        Publish { dup: false, qos: QoS::AtMostOnce, topic: topic.into(), packet_id: None, payload }
    }

    pub fn qos1(topic: &str, packet_id: u16, payload: Vec<u8>) -> Self {
        Publish { dup: false, qos: QoS::AtLeastOnce, topic: topic.into(), packet_id: Some(packet_id), payload }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MqttPacket {
    Connect { client_id: String, keep_alive: u16 },
    Connack { session_present: bool, return_code: u8 },
    Publish(Publish),
    Puback { packet_id: u16 },
    Subscribe { packet_id: u16, filters: Vec<(String, QoS)> },
    /// Return codes: 0x00/0x01 granted QoS, 0x80 failure.
    Suback { packet_id: u16, return_codes: Vec<u8> },
    Pingreq,
    Pingresp,
    Disconnect,
}

impl MqttPacket {
    pub fn type_nibble(&self) -> u8 {
        match self {
            MqttPacket::Connect { .. } => 1,
            MqttPacket::Connack { .. } => 2,
            MqttPacket::Publish(_) => 3,
            MqttPacket::Puback { .. } => 4,
            MqttPacket::Subscribe { .. } => 8,
            MqttPacket::Suback { .. } => 9,
            MqttPacket::Pingreq => 12,
            MqttPacket::Pingresp => 13,
            MqttPacket::Disconnect => 14,
        }
    }
}

/// Base-128 little-endian varint with continuation bit 0x80.
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, MqttError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(MqttError::RemainingLengthOutOfRange(n as u64));
    }
    let mut out = Vec::with_capacity(4);
    let mut x = n;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if x == 0 {
            return Ok(out);
        }
    }
}

/// Returns the value and the number of bytes consumed.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<(u32, usize), MqttError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for (i, &b) in bytes.iter().enumerate().take(4) {
        value += (b & 0x7F) as u32 * multiplier;
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
        multiplier *= 128;
    }
    if bytes.len() >= 4 {
        Err(MqttError::MalformedVarint)
    } else {
        Err(MqttError::Truncated)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), MqttError> {
    let len = u16::try_from(s.len()).map_err(|_| MqttError::Malformed("string longer than 65535 bytes".into()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn nonzero_id(id: u16) -> Result<u16, MqttError> {
    if id == 0 {
        Err(MqttError::MissingPacketId)
    } else {
        Ok(id)
    }
}

pub fn encode_packet(p: &MqttPacket) -> Result<Vec<u8>, MqttError> {
    let mut flags = 0u8;
    let mut body = Vec::new();
    match p {
        MqttPacket::Connect { client_id, keep_alive } => {
            put_str(&mut body, "MQTT")?;
            body.push(4);
            body.push(0x02);
            body.extend_from_slice(&keep_alive.to_be_bytes());
            put_str(&mut body, client_id)?;
        }
        MqttPacket::Connack { session_present, return_code } => {
            body.push(*session_present as u8);
            body.push(*return_code);
        }
        MqttPacket::Publish(publish) => {
            match (publish.qos, publish.packet_id) {
                (QoS::AtLeastOnce, None) => return Err(MqttError::MissingPacketId),
                (QoS::AtLeastOnce, Some(0)) => return Err(MqttError::MissingPacketId),
                (QoS::AtMostOnce, Some(_)) => {
                    return Err(MqttError::Malformed("QoS 0 PUBLISH carries no packet id".into()));
                }
                _ => {}
            }
            if publish.dup && publish.qos == QoS::AtMostOnce {
                return Err(MqttError::Malformed("DUP set on a QoS 0 PUBLISH".into()));
            }
            flags = ((publish.dup as u8) << 3) | ((publish.qos as u8) << 1);
            put_str(&mut body, &publish.topic)?;
            if let Some(id) = publish.packet_id {
                body.extend_from_slice(&id.to_be_bytes());
            }
            body.extend_from_slice(&publish.payload);
        }
        MqttPacket::Puback { packet_id } => body.extend_from_slice(&nonzero_id(*packet_id)?.to_be_bytes()),
        MqttPacket::Subscribe { packet_id, filters } => {
            flags = 0x02;
            if filters.is_empty() {
                return Err(MqttError::Malformed("SUBSCRIBE without filters".into()));
            }
            body.extend_from_slice(&nonzero_id(*packet_id)?.to_be_bytes());
            for (f, q) in filters {
                put_str(&mut body, f)?;
                body.push(*q as u8);
            }
        }
        MqttPacket::Suback { packet_id, return_codes } => {
            body.extend_from_slice(&nonzero_id(*packet_id)?.to_be_bytes());
            body.extend_from_slice(return_codes);
        }
        MqttPacket::Pingreq | MqttPacket::Pingresp | MqttPacket::Disconnect => {}
    }
    let len = u32::try_from(body.len()).map_err(|_| MqttError::RemainingLengthOutOfRange(body.len() as u64))?;
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push((p.type_nibble() << 4) | flags);
    out.extend(encode_remaining_length(len)?);
    out.extend(body);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MqttError> {
        if self.pos + n > self.buf.len() {
            return Err(MqttError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MqttError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MqttError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn string(&mut self) -> Result<String, MqttError> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| MqttError::Malformed("string is not UTF-8".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decodes exactly one packet occupying all of `bytes`.
pub fn decode_packet(bytes: &[u8]) -> Result<MqttPacket, MqttError> {
    let (&first, rest) = bytes.split_first().ok_or(MqttError::Truncated)?;
    let (len, used) = decode_remaining_length(rest)?;
    let body = &rest[used..];
    if body.len() < len as usize {
        return Err(MqttError::Truncated);
    }
    if body.len() > len as usize {
        return Err(MqttError::Malformed(format!("{} bytes after the packet", body.len() - len as usize)));
    }
    decode_body(first, body)
}

fn expect_flags(flags: u8, want: u8) -> Result<(), MqttError> {
    if flags == want {
        Ok(())
    } else {
        Err(MqttError::ReservedFlags(flags))
    }
}

fn decode_body(first: u8, body: &[u8]) -> Result<MqttPacket, MqttError> {
    let kind = first >> 4;
    let flags = first & 0x0F;
    let mut c = Cursor { buf: body, pos: 0 };
    let packet = match kind {
        1 => {
            expect_flags(flags, 0)?;
            let proto = c.string()?;
            let level = c.u8()?;
            if proto != "MQTT" || level != 4 {
                return Err(MqttError::Malformed(format!("unsupported protocol {proto} level {level}")));
            }
            let connect_flags = c.u8()?;
            if connect_flags != 0x02 {
                return Err(MqttError::Malformed(format!(
                    "connect flags {connect_flags:#04x}: only clean session without will/credentials is supported"
                )));
            }
            let keep_alive = c.u16()?;
            let client_id = c.string()?;
            MqttPacket::Connect { client_id, keep_alive }
        }
        2 => {
            expect_flags(flags, 0)?;
            let ack_flags = c.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(MqttError::Malformed("reserved CONNACK bits set".into()));
            }
            MqttPacket::Connack { session_present: ack_flags == 1, return_code: c.u8()? }
        }
        3 => {
            if flags & 0x01 != 0 {
                return Err(MqttError::ReservedFlags(flags));
            }
            let qos = QoS::from_bits((flags >> 1) & 0x03)?;
            let dup = flags & 0x08 != 0;
            if dup && qos == QoS::AtMostOnce {
                return Err(MqttError::Malformed("DUP set on a QoS 0 PUBLISH".into()));
            }
            let topic = c.string()?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(nonzero_id(c.u16()?)?),
            };
            MqttPacket::Publish(Publish { dup, qos, topic, packet_id, payload: c.rest().to_vec() })
        }
        4 => {
            expect_flags(flags, 0)?;
            MqttPacket::Puback { packet_id: nonzero_id(c.u16()?)? }
        }
        8 => {
            expect_flags(flags, 0x02)?;
            let packet_id = nonzero_id(c.u16()?)?;
            let mut filters = Vec::new();
            while !c.done() {
                let f = c.string()?;
                let q = c.u8()?;
                if q & 0xFC != 0 {
                    return Err(MqttError::Malformed("reserved bits in requested QoS".into()));
                }
                filters.push((f, QoS::from_bits(q)?));
            }
            if filters.is_empty() {
                return Err(MqttError::Malformed("SUBSCRIBE without filters".into()));
            }
            MqttPacket::Subscribe { packet_id, filters }
        }
        9 => {
            expect_flags(flags, 0)?;
            let packet_id = nonzero_id(c.u16()?)?;
            MqttPacket::Suback { packet_id, return_codes: c.rest().to_vec() }
        }
        12 | 13 | 14 => {
            expect_flags(flags, 0)?;
            match kind {
                12 => MqttPacket::Pingreq,
                13 => MqttPacket::Pingresp,
                _ => MqttPacket::Disconnect,
            }
        }
        other => return Err(MqttError::UnknownPacketType(other)),
    };
    if !c.done() {
        return Err(MqttError::Malformed("trailing bytes in packet body".into()));
    }
    Ok(packet)
}

/// Reads one packet from a stream; `None` on a clean end of stream.
pub fn read_packet<R: Read>(r: &mut R) -> Result<Option<MqttPacket>, MqttError> {
    let mut first = [0u8; 1];
    match r.read_exact(&mut first) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let mut len_bytes = Vec::with_capacity(4);
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        len_bytes.push(b[0]);
        if b[0] & 0x80 == 0 {
            break;
        }
        if len_bytes.len() == 4 {
            return Err(MqttError::MalformedVarint);
        }
    }
    let (len, _) = decode_remaining_length(&len_bytes)?;
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    decode_body(first[0], &body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn remaining_length_boundaries() {
        assert_eq!(encode_remaining_length(0).unwrap(), [0x00]);
        assert_eq!(encode_remaining_length(127).unwrap(), [0x7F]);
        assert_eq!(encode_remaining_length(128).unwrap(), [0x80, 0x01]);
        assert_eq!(encode_remaining_length(321).unwrap(), [0xC1, 0x02]);
        assert_eq!(encode_remaining_length(16_383).unwrap(), [0xFF, 0x7F]);
        assert_eq!(encode_remaining_length(16_384).unwrap(), [0x80, 0x80, 0x01]);
        assert_eq!(encode_remaining_length(MAX_REMAINING_LENGTH).unwrap(), [0xFF, 0xFF, 0xFF, 0x7F]);
        assert!(matches!(encode_remaining_length(MAX_REMAINING_LENGTH + 1), Err(MqttError::RemainingLengthOutOfRange(_))));
    }

    #[test]
    fn remaining_length_decode_errors() {
        assert!(matches!(decode_remaining_length(&[0xFF, 0xFF, 0xFF, 0xFF, 0x01]), Err(MqttError::MalformedVarint)));
        assert!(matches!(decode_remaining_length(&[0x80]), Err(MqttError::Truncated)));
        assert_eq!(decode_remaining_length(&[0xC1, 0x02, 0x99]).unwrap(), (321, 2));
    }

    #[test]
    fn qos0_publish_golden() {
        let bytes = encode_packet(&MqttPacket::Publish(Publish::qos0("t", b"x".to_vec()))).unwrap();
        assert_eq!(bytes, [0x30, 0x04, 0x00, 0x01, b't', b'x']);
    }

    #[test]
    fn qos1_publish_golden() {
        let mut p = Publish::qos1("a/b", 0x0102, vec![9]);
        p.dup = true;
        let bytes = encode_packet(&MqttPacket::Publish(p)).unwrap();
        assert_eq!(bytes, [0x3A, 0x08, 0x00, 0x03, b'a', b'/', b'b', 0x01, 0x02, 9]);
    }

    #[test]
    fn qos3_flags_rejected() {
        assert!(matches!(decode_packet(&[0x36, 0x04, 0x00, 0x01, b't', b'x']), Err(MqttError::Malformed(_))));
        // QoS 2 is outside the subset as well
        assert!(matches!(decode_packet(&[0x34, 0x06, 0x00, 0x01, b't', 0, 1, b'x']), Err(MqttError::Malformed(_))));
    }

    #[test]
    fn retain_and_reserved_bits_rejected() {
        assert!(matches!(decode_packet(&[0x31, 0x04, 0x00, 0x01, b't', b'x']), Err(MqttError::ReservedFlags(_))));
        assert!(matches!(decode_packet(&[0x41, 0x02, 0x00, 0x01]), Err(MqttError::ReservedFlags(_))));
        assert!(matches!(decode_packet(&[0x80, 0x06, 0, 1, 0, 1, b'a', 0]), Err(MqttError::ReservedFlags(_))));
    }

    #[test]
    fn qos1_needs_packet_id() {
        let p = Publish { dup: false, qos: QoS::AtLeastOnce, topic: "t".into(), packet_id: None, payload: vec![] };
        assert!(matches!(encode_packet(&MqttPacket::Publish(p)), Err(MqttError::MissingPacketId)));
        assert!(matches!(decode_packet(&[0x32, 0x05, 0x00, 0x01, b't', 0x00, 0x00]), Err(MqttError::MissingPacketId)));
        assert!(matches!(encode_packet(&MqttPacket::Puback { packet_id: 0 }), Err(MqttError::MissingPacketId)));
    }

    #[test]
    fn control_packets_golden() {
        assert_eq!(encode_packet(&MqttPacket::Pingreq).unwrap(), [0xC0, 0x00]);
        assert_eq!(encode_packet(&MqttPacket::Disconnect).unwrap(), [0xE0, 0x00]);
        assert_eq!(encode_packet(&MqttPacket::Puback { packet_id: 7 }).unwrap(), [0x40, 0x02, 0x00, 0x07]);
        assert_eq!(
            encode_packet(&MqttPacket::Connack { session_present: false, return_code: 0 }).unwrap(),
            [0x20, 0x02, 0x00, 0x00]
        );
        let connect = encode_packet(&MqttPacket::Connect { client_id: "r1".into(), keep_alive: 60 }).unwrap();
        assert_eq!(connect, [0x10, 14, 0, 4, b'M', b'Q', b'T', b'T', 4, 0x02, 0, 60, 0, 2, b'r', b'1']);
    }

    #[test]
    fn stream_reader_splits_packets() {
        let mut buf = encode_packet(&MqttPacket::Pingreq).unwrap();
        buf.extend(encode_packet(&MqttPacket::Publish(Publish::qos1("x", 3, vec![1; 300]))).unwrap());
        let mut r = io::Cursor::new(buf);
        assert_eq!(read_packet(&mut r).unwrap(), Some(MqttPacket::Pingreq));
        assert!(matches!(read_packet(&mut r).unwrap(), Some(MqttPacket::Publish(p)) if p.payload.len() == 300));
        assert_eq!(read_packet(&mut r).unwrap(), None);
    }

    fn arb_qos() -> impl Strategy<Value = QoS> {
        prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)]
    }

    fn arb_packet() -> impl Strategy<Value = MqttPacket> {
        let topic = "[a-z0-9/#]{0,20}";
        prop_oneof![
            ("[a-zA-Z0-9]{0,23}", any::<u16>()).prop_map(|(client_id, keep_alive)| MqttPacket::Connect { client_id, keep_alive }),
            (any::<bool>(), 0u8..6).prop_map(|(session_present, return_code)| MqttPacket::Connack { session_present, return_code }),
            (topic, arb_qos(), any::<bool>(), 1u16.., proptest::collection::vec(any::<u8>(), 0..300)).prop_map(
                |(topic, qos, dup, id, payload)| {
                    let (dup, packet_id) = match qos {
                        QoS::AtMostOnce => (false, None),
                        QoS::AtLeastOnce => (dup, Some(id)),
                    };
                    MqttPacket::Publish(Publish { dup, qos, topic, packet_id, payload })
                }
            ),
            (1u16..).prop_map(|packet_id| MqttPacket::Puback { packet_id }),
            (1u16.., proptest::collection::vec((topic, arb_qos()), 1..4))
                .prop_map(|(packet_id, filters)| MqttPacket::Subscribe { packet_id, filters }),
            (1u16.., proptest::collection::vec(prop_oneof![Just(0u8), Just(1), Just(0x80)], 0..4))
                .prop_map(|(packet_id, return_codes)| MqttPacket::Suback { packet_id, return_codes }),
            Just(MqttPacket::Pingreq),
            Just(MqttPacket::Pingresp),
            Just(MqttPacket::Disconnect),
        ]
    }

    proptest! {
        #[test]
        fn packet_round_trip(p in arb_packet()) {
            let bytes = encode_packet(&p).unwrap();
            prop_assert_eq!(decode_packet(&bytes).unwrap(), p.clone());
            let mut r = io::Cursor::new(bytes);
            prop_assert_eq!(read_packet(&mut r).unwrap(), Some(p));
        }

        #[test]
        fn remaining_length_round_trip(n in 0u32..=MAX_REMAINING_LENGTH) {
            let enc = encode_remaining_length(n).unwrap();
            prop_assert!((1..=4).contains(&enc.len()));
            prop_assert_eq!(decode_remaining_length(&enc).unwrap(), (n, enc.len()));
        }
    }
}
