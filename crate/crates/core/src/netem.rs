//! Link emulation and the virtual-time event scheduler.
//!
//! A [`Link`] delays, rate-limits and drops messages according to a
//! [`NetworkProfile`]. Delivery times are computed at send time, so links
//! never reorder: each delivery is at or after the previous one.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ms_to_nanos, Nanos, VirtualClock, NANOS_PER_SEC};

#[derive(Debug, Error)]
pub enum NetemError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("unknown profile '{0}' (expected 5g, wifi or ideal)")]
    UnknownProfile(String),
    #[error("reading profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing profile: {0}")]
    Json(#[from] serde_json::Error),
}

/// One-way delay distribution, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelayDist {
    Constant(f64),
    /// Mean and standard deviation; samples below zero are floored to zero.
    Normal { mean: f64, std: f64 },
    /// Parameters of the underlying normal of ln(ms).
    LogNormal { mu: f64, sigma: f64 },
}

impl DelayDist {
    pub fn validate(&self) -> Result<(), NetemError> {
        let ok = match *self {
            DelayDist::Constant(ms) => ms.is_finite() && ms >= 0.0,
            DelayDist::Normal { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            DelayDist::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(NetemError::InvalidProfile(format!("bad delay parameters {self:?}")))
        }
    }

    /// Draws one delay in milliseconds, never negative.
    pub fn sample_ms<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayDist::Constant(ms) => ms,
            DelayDist::Normal { mean, std } => {
                if std == 0.0 {
                    mean.max(0.0)
                } else {
                    Normal::new(mean, std).expect("validated").sample(rng).max(0.0)
                }
            }
            DelayDist::LogNormal { mu, sigma } => {
                if sigma == 0.0 {
                    mu.exp()
                } else {
                    LogNormal::new(mu, sigma).expect("validated").sample(rng)
                }
            }
        }
    }

    /// Maps a standard-normal deviate to a delay, so paired runs can share
    /// their randomness.
    pub fn from_standard_normal(&self, z: f64) -> f64 {
        match *self {
            DelayDist::Constant(ms) => ms,
            DelayDist::Normal { mean, std } => (mean + std * z).max(0.0),
            DelayDist::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
        }
    }

    /// Distribution mean in milliseconds (ignoring the zero floor).
    pub fn mean_ms(&self) -> f64 {
        match *self {
            DelayDist::Constant(ms) => ms,
            DelayDist::Normal { mean, .. } => mean.max(0.0),
            DelayDist::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        }
    }
}

/// Link parameters. Serialized as
/// `{"name", "delay": {"kind", "params"}, "bandwidth_kbps", "loss", "seed", "metadata"}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkProfile {
    pub name: String,
    pub one_way_delay: DelayDist,
    /// Kilobytes per second; `None` is unlimited.
    pub bandwidth_kbps: Option<f64>,
    pub loss_prob: f64,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct DelayJson {
    kind: String,
    params: Vec<f64>,
}

impl Serialize for DelayDist {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let (kind, params) = match *self {
            DelayDist::Constant(ms) => ("constant", vec![ms]),
            DelayDist::Normal { mean, std } => ("normal", vec![mean, std]),
            DelayDist::LogNormal { mu, sigma } => ("lognormal", vec![mu, sigma]),
        };
        DelayJson { kind: kind.into(), params }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DelayDist {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let j = DelayJson::deserialize(d)?;
        let p = &j.params;
        let want = |n: usize| -> Result<(), D::Error> {
            if p.len() == n {
                Ok(())
            } else {
                Err(D::Error::custom(format!("delay kind '{}' takes {n} params, got {}", j.kind, p.len())))
            }
        };
        let dist = match j.kind.to_ascii_lowercase().as_str() {
            "constant" => {
                want(1)?;
                DelayDist::Constant(p[0])
            }
            "normal" => {
                want(2)?;
                DelayDist::Normal { mean: p[0], std: p[1] }
            }
            "lognormal" => {
                want(2)?;
                DelayDist::LogNormal { mu: p[0], sigma: p[1] }
            }
            other => return Err(D::Error::custom(format!("unknown delay kind '{other}'"))),
        };
        dist.validate().map_err(D::Error::custom)?;
        Ok(dist)
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileJson {
    name: String,
    delay: DelayDist,
    #[serde(default)]
    bandwidth_kbps: Option<f64>,
    #[serde(default)]
    loss: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

impl Serialize for NetworkProfile {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ProfileJson {
            name: self.name.clone(),
            delay: self.one_way_delay,
            bandwidth_kbps: self.bandwidth_kbps,
            loss: self.loss_prob,
            seed: self.seed,
            metadata: self.metadata.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NetworkProfile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let j = ProfileJson::deserialize(d)?;
        let profile = NetworkProfile {
            name: j.name,
            one_way_delay: j.delay,
            bandwidth_kbps: j.bandwidth_kbps,
            loss_prob: j.loss,
            seed: j.seed,
            metadata: j.metadata,
        };
        profile.validate().map_err(D::Error::custom)?;
        Ok(profile)
    }
}

impl NetworkProfile {
    /// Private 5G stand-alone: low, tight one-way delay.
    pub fn five_g() -> Self {
        let metadata = [
            ("band", "N77 3800MHz-4100MHz"),
            ("carrier_bandwidth", "100MHz"),
            ("modulation", "256(DL)/64(UL) QAM"),
            ("transmit_power", "5W per Tx path (4Tx paths)"),
            ("mimo_layers", "4x2 closed-loop MIMO"),
            ("tdd_ul_dl_ratio", "3/7"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        NetworkProfile {
            name: "5g".into(),
            one_way_delay: DelayDist::Normal { mean: 4.0, std: 1.0 },
            bandwidth_kbps: None,
            loss_prob: 0.001,
            seed: 0x5a5a_0005,
            metadata,
        }
    }

    /// Outdoor WiFi: higher median, heavy tail.
    pub fn wifi() -> Self {
        NetworkProfile {
            name: "wifi".into(),
            one_way_delay: DelayDist::LogNormal { mu: 8.0f64.ln(), sigma: 0.8 },
            bandwidth_kbps: None,
            loss_prob: 0.01,
            seed: 0x5a5a_0011,
            metadata: BTreeMap::new(),
        }
    }

    /// Zero delay, no loss, unlimited bandwidth.
    pub fn ideal() -> Self {
        NetworkProfile {
            name: "ideal".into(),
            one_way_delay: DelayDist::Constant(0.0),
            bandwidth_kbps: None,
            loss_prob: 0.0,
            seed: 0,
            metadata: BTreeMap::new(),
        }
    }

    pub fn named(name: &str) -> Result<Self, NetemError> {
        match name {
            "5g" => Ok(Self::five_g()),
            "wifi" => Ok(Self::wifi()),
            "ideal" => Ok(Self::ideal()),
            other => Err(NetemError::UnknownProfile(other.into())),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self, NetemError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, NetemError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), NetemError> {
        self.one_way_delay.validate()?;
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(NetemError::InvalidProfile(format!("loss {} outside [0, 1]", self.loss_prob)));
        }
        if let Some(bw) = self.bandwidth_kbps {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(NetemError::InvalidProfile(format!("bandwidth {bw} must be positive")));
            }
        }
        Ok(())
    }

    pub fn with_loss(mut self, loss: f64) -> Self {
        self.loss_prob = loss;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Mean round trip over a symmetric pair of links, in milliseconds.
    pub fn mean_rtt_ms(&self) -> f64 {
        2.0 * self.one_way_delay.mean_ms()
    }

    /// Time to clock `bytes` onto the link.
    pub fn transmission_ns(&self, bytes: usize) -> Nanos {
        match self.bandwidth_kbps {
            None => 0,
            Some(kbps) => ((bytes as f64 / (kbps * 1000.0)) * NANOS_PER_SEC as f64).round() as Nanos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LinkCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_queue: u64,
    pub bytes_sent: u64,
    pub bytes_delivered: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    /// The message reaches the far end at this time.
    Deliver(Nanos),
    Dropped,
}

/// One direction of an emulated link.
#[derive(Debug, Clone)]
pub struct Link {
    profile: NetworkProfile,
    rng: ChaCha8Rng,
    last_delivery: Nanos,
    counters: LinkCounters,
}

impl Link {
    /// `stream` separates the random sequences of links sharing a profile.
    pub fn new(profile: NetworkProfile, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
        rng.set_stream(stream);
        Link { profile, rng, last_delivery: 0, counters: LinkCounters::default() }
    }

    pub fn profile(&self) -> &NetworkProfile {
        &self.profile
    }

    pub fn counters(&self) -> LinkCounters {
        self.counters
    }

    /// Schedules `bytes` sent at `now`, or drops it.
    pub fn send(&mut self, bytes: usize, now: Nanos) -> SendOutcome {
        self.counters.sent += 1;
        self.counters.bytes_sent += bytes as u64;
        if self.profile.loss_prob > 0.0 && self.rng.random::<f64>() < self.profile.loss_prob {
            self.counters.dropped += 1;
            return SendOutcome::Dropped;
        }
        let delay = ms_to_nanos(self.profile.one_way_delay.sample_ms(&mut self.rng));
        let at = (now + delay).max(self.last_delivery) + self.profile.transmission_ns(bytes);
        self.last_delivery = at;
        self.counters.in_queue += 1;
        SendOutcome::Deliver(at)
    }

    /// Records that a scheduled message arrived.
    pub fn mark_delivered(&mut self, bytes: usize) {
        debug_assert!(self.counters.in_queue > 0);
        self.counters.in_queue -= 1;
        self.counters.delivered += 1;
        self.counters.bytes_delivered += bytes as u64;
    }
}

/// Result of one echo exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RttSample {
    Ms(f64),
    Timeout,
}

impl RttSample {
    pub fn ms(self) -> Option<f64> {
        match self {
            RttSample::Ms(v) => Some(v),
            RttSample::Timeout => None,
        }
    }
}

/// Runs `n` sequential echo exchanges of `probe_bytes` over `up` then `down`.
///
/// A lost probe or reply is a [`RttSample::Timeout`]; the next probe
/// starts `timeout` later.
pub fn rtt_probe(up: &mut Link, down: &mut Link, n: usize, probe_bytes: usize, timeout: Nanos) -> Vec<RttSample> {
    let mut t: Nanos = up.last_delivery.max(down.last_delivery);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let start = t;
        let sample = match up.send(probe_bytes, start) {
            SendOutcome::Dropped => RttSample::Timeout,
            SendOutcome::Deliver(at_server) => {
                up.mark_delivered(probe_bytes);
                match down.send(probe_bytes, at_server) {
                    SendOutcome::Dropped => RttSample::Timeout,
                    SendOutcome::Deliver(back) => {
                        down.mark_delivered(probe_bytes);
                        t = back;
                        RttSample::Ms((back - start) as f64 / 1e6)
                    }
                }
            }
        };
        if sample == RttSample::Timeout {
            t = start + timeout;
        }
        out.push(sample);
    }
    out
}

struct Scheduled<E> {
    due: Nanos,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

/// Discrete-event queue that owns a virtual clock.
///
/// Events fire in (due time, submission order). The clock never moves
/// backward; scheduling in the past schedules at `now`.
pub struct EventScheduler<E> {
    queue: BinaryHeap<Scheduled<E>>,
    next_seq: u64,
    clock: VirtualClock,
}

impl<E> Default for EventScheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventScheduler<E> {
    pub fn new() -> Self {
        EventScheduler { queue: BinaryHeap::new(), next_seq: 0, clock: VirtualClock::default() }
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock.clone()
    }

    pub fn now(&self) -> Nanos {
        self.clock.now()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn schedule_at(&mut self, due: Nanos, event: E) {
        let due = due.max(self.now());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { due, seq, event });
    }

    pub fn schedule_in(&mut self, delay: Nanos, event: E) {
        self.schedule_at(self.now() + delay, event);
    }

    pub fn peek_due(&self) -> Option<Nanos> {
        self.queue.peek().map(|s| s.due)
    }

    /// Pops the next event and moves the clock to its due time.
    pub fn pop(&mut self) -> Option<(Nanos, E)> {
        let s = self.queue.pop()?;
        self.clock.set(s.due);
        Some((s.due, s.event))
    }

    /// Fires every event due at or before `until`; the clock ends at `until`.
    pub fn advance(&mut self, until: Nanos) -> Vec<(Nanos, E)> {
        let until = until.max(self.now());
        let mut fired = Vec::new();
        while self.peek_due().is_some_and(|d| d <= until) {
            fired.extend(self.pop());
        }
        self.clock.set(until);
        fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::NANOS_PER_MS;

    fn constant(ms: f64) -> NetworkProfile {
        NetworkProfile {
            name: "c".into(),
            one_way_delay: DelayDist::Constant(ms),
            bandwidth_kbps: None,
            loss_prob: 0.0,
            seed: 1,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn constant_delay_delivery() {
        let mut link = Link::new(constant(5.0), 0);
        assert_eq!(link.send(100, 0), SendOutcome::Deliver(5 * NANOS_PER_MS));
    }

    #[test]
    fn fifo_max_rule_prevents_reordering() {
        // 9 ms then 3 ms sampled delays, 1 MB/s: second message waits for the first
        let mut p = constant(0.0);
        p.bandwidth_kbps = Some(1000.0);
        let mut link = Link::new(p, 0);
        link.profile.one_way_delay = DelayDist::Constant(9.0);
        let a = link.send(1000, 0);
        link.profile.one_way_delay = DelayDist::Constant(3.0);
        let b = link.send(1000, 0);
        assert_eq!(a, SendOutcome::Deliver(10 * NANOS_PER_MS));
        assert_eq!(b, SendOutcome::Deliver(11 * NANOS_PER_MS));
    }

    #[test]
    fn bandwidth_adds_transmission_time() {
        let mut p = constant(0.0);
        p.bandwidth_kbps = Some(100.0);
        let mut link = Link::new(p, 0);
        assert_eq!(link.send(50_000, 0), SendOutcome::Deliver(500 * NANOS_PER_MS));
    }

    #[test]
    fn rtt_of_constant_links() {
        let mut up = Link::new(constant(5.0), 0);
        let mut down = Link::new(constant(5.0), 1);
        let s = rtt_probe(&mut up, &mut down, 10, 64, NANOS_PER_SEC);
        assert!(s.iter().all(|r| *r == RttSample::Ms(10.0)));
    }

    #[test]
    fn lost_probe_times_out() {
        let mut up = Link::new(constant(5.0).with_loss(1.0), 0);
        let mut down = Link::new(constant(5.0), 1);
        let s = rtt_probe(&mut up, &mut down, 3, 64, NANOS_PER_SEC);
        assert_eq!(s, vec![RttSample::Timeout; 3]);
        assert_eq!(up.counters().dropped, 3);
    }

    #[test]
    fn profile_json_round_trip() {
        for p in [NetworkProfile::five_g(), NetworkProfile::wifi(), NetworkProfile::ideal()] {
            let s = serde_json::to_string(&p).unwrap();
            assert_eq!(NetworkProfile::from_json_str(&s).unwrap(), p);
        }
        let p = NetworkProfile::from_json_str(
            r#"{"name":"lab","delay":{"kind":"normal","params":[4,1]},"bandwidth_kbps":2500,"loss":0.01,"seed":7,"metadata":{"band":"n77"}}"#,
        )
        .unwrap();
        assert_eq!(p.one_way_delay, DelayDist::Normal { mean: 4.0, std: 1.0 });
        assert_eq!(p.bandwidth_kbps, Some(2500.0));
        assert!(NetworkProfile::from_json_str(r#"{"name":"x","delay":{"kind":"normal","params":[1]}}"#).is_err());
        assert!(NetworkProfile::from_json_str(r#"{"name":"x","delay":{"kind":"constant","params":[1]},"loss":1.5}"#).is_err());
    }

    #[test]
    fn scheduler_orders_by_time_then_submission() {
        let mut s = EventScheduler::new();
        s.schedule_at(10, "b1");
        s.schedule_at(5, "a");
        s.schedule_at(10, "b2");
        let fired: Vec<_> = s.advance(20).into_iter().map(|(_, e)| e).collect();
        assert_eq!(fired, ["a", "b1", "b2"]);
        assert_eq!(s.now(), 20);
    }

    #[test]
    fn empty_advance_moves_clock() {
        let mut s: EventScheduler<()> = EventScheduler::new();
        assert!(s.advance(1_000).is_empty());
        assert_eq!(s.now(), 1_000);
        // never backward
        s.advance(10);
        assert_eq!(s.now(), 1_000);
        s.schedule_at(3, ());
        assert_eq!(s.pop(), Some((1_000, ())));
    }
}
