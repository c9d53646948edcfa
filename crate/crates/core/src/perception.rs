//! Segmentation service: RGB/depth synchronization, the action goal state
//! machine, segmentation backends and the compute latency model.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netem::DelayDist;
use crate::types::{
    ms_to_nanos, quantize_confidence, ClassId, Frame, LabeledMask, ModelKind, Nanos, Platform, NANOS_PER_MS,
};

pub const DEFAULT_SYNC_DEPTH: usize = 30;
pub const DEFAULT_SYNC_TOLERANCE: Nanos = 10 * NANOS_PER_MS;
pub const DEFAULT_WORKERS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("no synchronized frame pair available")]
    NotReady,
    #[error("goal {goal_id} aborted: {reason}")]
    Aborted { goal_id: u64, reason: String },
    #[error("no latency entry for {0}/{1}")]
    UnknownLatencyKey(ModelKind, Platform),
    #[error("illegal status transition {from:?} -> {to:?}")]
    InvalidTransition { from: ActionStatus, to: ActionStatus },
    #[error("bad latency model: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncChannel {
    Rgb,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncPair<T> {
    pub rgb_ts: Nanos,
    pub rgb: T,
    pub depth_ts: Nanos,
    pub depth: T,
}

/// Pairs RGB and depth messages whose timestamps differ by at most the
/// tolerance. Queues are bounded; the oldest entry is evicted on overflow.
#[derive(Debug)]
pub struct FrameSynchronizer<T> {
    rgb: VecDeque<(Nanos, T)>,
    depth: VecDeque<(Nanos, T)>,
    capacity: usize,
    tolerance: Nanos,
    evictions: u64,
    pairs: u64,
}

impl<T> Default for FrameSynchronizer<T> {
    fn default() -> Self {
        Self::new(DEFAULT_SYNC_DEPTH, DEFAULT_SYNC_TOLERANCE)
    }
}

impl<T> FrameSynchronizer<T> {
    pub fn new(capacity: usize, tolerance: Nanos) -> Self {
        assert!(capacity > 0, "synchronizer queues need room for one item");
        FrameSynchronizer {
            rgb: VecDeque::with_capacity(capacity),
            depth: VecDeque::with_capacity(capacity),
            capacity,
            tolerance,
            evictions: 0,
            pairs: 0,
        }
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn pairs(&self) -> u64 {
        self.pairs
    }

    pub fn queued(&self) -> (usize, usize) {
        (self.rgb.len(), self.depth.len())
    }

    pub fn push(&mut self, channel: SyncChannel, ts: Nanos, item: T) -> Option<SyncPair<T>> {
        let q = match channel {
            SyncChannel::Rgb => &mut self.rgb,
            SyncChannel::Depth => &mut self.depth,
        };
        if q.len() == self.capacity {
            q.pop_front();
            self.evictions += 1;
        }
        q.push_back((ts, item));
        self.try_pair()
    }

    // Oldest RGB first; for it, the closest depth (earliest on ties).
    fn try_pair(&mut self) -> Option<SyncPair<T>> {
        let (ri, di) = self.rgb.iter().enumerate().find_map(|(ri, (rts, _))| {
            self.depth
                .iter()
                .enumerate()
                .map(|(di, (dts, _))| (rts.abs_diff(*dts), di))
                .filter(|(d, _)| *d <= self.tolerance)
                .min()
                .map(|(_, di)| (ri, di))
        })?;
        let (rgb_ts, rgb) = self.rgb.remove(ri).unwrap();
        let (depth_ts, depth) = self.depth.remove(di).unwrap();
        self.pairs += 1;
        Some(SyncPair { rgb_ts, rgb, depth_ts, depth })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionStatus {
    Pending,
    Active,
    Succeeded,
    Aborted,
}

impl ActionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, ActionStatus::Succeeded | ActionStatus::Aborted)
    }

    pub fn can_become(self, next: ActionStatus) -> bool {
        matches!(
            (self, next),
            (ActionStatus::Pending, ActionStatus::Active)
                | (ActionStatus::Active, ActionStatus::Succeeded)
                | (ActionStatus::Active, ActionStatus::Aborted)
        )
    }
}

#[derive(Debug, Clone)]
pub struct ActionGoal<T> {
    pub goal_id: u64,
    pub payload: T,
    status: ActionStatus,
    history: Vec<ActionStatus>,
}

impl<T> ActionGoal<T> {
    pub fn new(goal_id: u64, payload: T) -> Self {
        ActionGoal { goal_id, payload, status: ActionStatus::Pending, history: vec![ActionStatus::Pending] }
    }

    pub fn status(&self) -> ActionStatus {
        self.status
    }

    pub fn history(&self) -> &[ActionStatus] {
        &self.history
    }

    pub fn transition(&mut self, next: ActionStatus) -> Result<(), PerceptionError> {
        if !self.status.can_become(next) {
            return Err(PerceptionError::InvalidTransition { from: self.status, to: next });
        }
        self.status = next;
        self.history.push(next);
        Ok(())
    }
}

pub const PALETTE: [(ClassId, [u8; 3]); 4] = [
    (ClassId::Strawberry, [200, 30, 40]),
    (ClassId::Canopy, [40, 140, 50]),
    (ClassId::RigidObstacle, [120, 120, 130]),
    (ClassId::Background, [230, 230, 220]),
];

pub fn palette_color(c: ClassId) -> [u8; 3] {
    PALETTE[c.index()].1
}

/// Nearest palette colour and its confidence for one pixel.
pub fn classify_pixel(px: [u8; 3]) -> (ClassId, f64) {
    let mut d = [0.0f64; 4];
    for (i, (_, c)) in PALETTE.iter().enumerate() {
        d[i] = (0..3).map(|k| (px[k] as f64 - c[k] as f64).powi(2)).sum::<f64>().sqrt();
    }
    let mut best = 0;
    for i in 1..4 {
        if d[i] < d[best] {
            best = i;
        }
    }
    let second = (0..4).filter(|&i| i != best).map(|i| d[i]).fold(f64::INFINITY, f64::min);
    let conf = if d[best] + second == 0.0 { 1.0 } else { 1.0 - d[best] / (d[best] + second) };
    (PALETTE[best].0, conf)
}

/// Nearest-palette-colour classifier.
pub fn heuristic_segment(frame: &Frame) -> LabeledMask {
    let n = frame.rgb.len() / 3;
    let mut classes = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for px in frame.rgb.chunks_exact(3) {
        let (c, conf) = classify_pixel([px[0], px[1], px[2]]);
        classes.push(c);
        confidence.push(quantize_confidence(conf));
    }
    LabeledMask { width: frame.width(), height: frame.height(), classes, confidence }
}

/// Per (model, platform) compute delay distributions, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatencyModel {
    /// Keyed "model/platform", e.g. "detectron2/edge".
    entries: BTreeMap<String, DelayDist>,
}

fn latency_key(model: ModelKind, platform: Platform) -> String {
    format!("{model}/{platform}")
}

impl Default for LatencyModel {
    /// Normal(mean, 0.1 mean) around the measured per-frame means.
    fn default() -> Self {
        let mut m = LatencyModel { entries: BTreeMap::new() };
        for (model, edge, njxn) in [
            (ModelKind::Detectron2, 82.0, 82.0 * 18.7),
            (ModelKind::D2go8, 30.0, 30.0 * 4.3),
            (ModelKind::D2go32, 32.0, 32.0 * 4.3),
        ] {
            m.set(model, Platform::Edge, DelayDist::Normal { mean: edge, std: 0.1 * edge });
            m.set(model, Platform::Njxn, DelayDist::Normal { mean: njxn, std: 0.1 * njxn });
        }
        m
    }
}

impl LatencyModel {
    pub fn empty() -> Self {
        LatencyModel { entries: BTreeMap::new() }
    }

    /// Every entry is a constant delay of `ms`.
    pub fn constant(ms: f64) -> Self {
        let mut m = Self::empty();
        for model in [ModelKind::Detectron2, ModelKind::D2go8, ModelKind::D2go32] {
            for platform in [Platform::Edge, Platform::Njxn] {
                m.set(model, platform, DelayDist::Constant(ms));
            }
        }
        m
    }

    pub fn set(&mut self, model: ModelKind, platform: Platform, dist: DelayDist) {
        self.entries.insert(latency_key(model, platform), dist);
    }

    pub fn get(&self, model: ModelKind, platform: Platform) -> Result<DelayDist, PerceptionError> {
        self.entries.get(&latency_key(model, platform)).copied().ok_or(PerceptionError::UnknownLatencyKey(model, platform))
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        for (k, d) in &self.entries {
            let mut parts = k.split('/');
            let ok = matches!((parts.next(), parts.next(), parts.next()), (Some(m), Some(p), None)
                if m.parse::<ModelKind>().is_ok() && p.parse::<Platform>().is_ok());
            if !ok {
                return Err(PerceptionError::Config(format!("bad key '{k}', expected model/platform")));
            }
            d.validate().map_err(|e| PerceptionError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn mean_ms(&self, model: ModelKind, platform: Platform) -> Result<f64, PerceptionError> {
        Ok(self.get(model, platform)?.mean_ms())
    }

    /// One compute delay drawn with `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, model: ModelKind, platform: Platform, rng: &mut R) -> Result<Nanos, PerceptionError> {
        let z: f64 = rng.sample(StandardNormal);
        self.from_deviate(model, platform, z)
    }

    /// Delay for a given standard-normal deviate.
    pub fn from_deviate(&self, model: ModelKind, platform: Platform, z: f64) -> Result<Nanos, PerceptionError> {
        Ok(ms_to_nanos(self.get(model, platform)?.from_standard_normal(z)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Heuristic,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => Ok(BackendKind::Oracle),
            "heuristic" => Ok(BackendKind::Heuristic),
            other => Err(format!("unknown backend '{other}' (expected oracle or heuristic)")),
        }
    }
}

/// A segmentation backend; `Delayed` adds a compute-time model.
#[derive(Debug, Clone)]
pub enum SegmentationBackend {
    Oracle,
    Heuristic,
    Delayed { inner: Box<SegmentationBackend>, latency: Arc<LatencyModel>, model: ModelKind, platform: Platform },
}

impl From<BackendKind> for SegmentationBackend {
    fn from(k: BackendKind) -> Self {
        match k {
            BackendKind::Oracle => SegmentationBackend::Oracle,
            BackendKind::Heuristic => SegmentationBackend::Heuristic,
        }
    }
}

impl SegmentationBackend {
    pub fn delayed(self, latency: Arc<LatencyModel>, model: ModelKind, platform: Platform) -> Self {
        SegmentationBackend::Delayed { inner: Box::new(self), latency, model, platform }
    }

    /// Segments `frame`; the oracle needs the ground truth.
    pub fn segment(&self, goal_id: u64, frame: &Frame, ground_truth: Option<&LabeledMask>) -> Result<LabeledMask, PerceptionError> {
        match self {
            SegmentationBackend::Oracle => {
                let gt = ground_truth.ok_or_else(|| PerceptionError::Aborted {
                    goal_id,
                    reason: "oracle backend has no ground truth for this frame".into(),
                })?;
                if (gt.width, gt.height) != (frame.width(), frame.height()) {
                    return Err(PerceptionError::Aborted { goal_id, reason: "ground truth size differs from frame".into() });
                }
                let mut m = gt.clone();
                m.confidence.fill(255);
                Ok(m)
            }
            SegmentationBackend::Heuristic => Ok(heuristic_segment(frame)),
            SegmentationBackend::Delayed { inner, .. } => inner.segment(goal_id, frame, ground_truth),
        }
    }

    /// Compute time for one goal; zero without a latency model.
    pub fn compute_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Nanos, PerceptionError> {
        match self {
            SegmentationBackend::Delayed { latency, model, platform, .. } => latency.sample(*model, *platform, rng),
            _ => Ok(0),
        }
    }
}

/// Server-side worker pool in virtual time: each goal takes the worker that
/// frees up first and waits for it if all are busy.
#[derive(Debug, Clone)]
pub struct WorkerPool {
    free_at: Vec<Nanos>,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Self {
        WorkerPool { free_at: vec![0; workers.max(1)] }
    }

    pub fn workers(&self) -> usize {
        self.free_at.len()
    }

    /// Returns (start, end) of a goal arriving at `arrival`.
    pub fn assign(&mut self, arrival: Nanos, service: Nanos) -> (Nanos, Nanos) {
        let (idx, _) = self.free_at.iter().enumerate().min_by_key(|(i, t)| (**t, *i)).unwrap();
        let start = arrival.max(self.free_at[idx]);
        let end = start + service;
        self.free_at[idx] = end;
        (start, end)
    }
}

/// Result of one trigger round trip.
#[derive(Debug, Clone)]
pub struct TriggerOutcome {
    pub goal_id: u64,
    pub mask: LabeledMask,
    pub frame_id: u64,
    pub status: ActionStatus,
    pub compute: Nanos,
}

/// Edge-side action client: keeps the latest synchronized pair and turns a
/// trigger into a goal for the backend.
pub struct ActionClient {
    sync: FrameSynchronizer<Arc<Frame>>,
    latest: Option<Arc<Frame>>,
    backend: SegmentationBackend,
}

impl ActionClient {
    pub fn new(backend: SegmentationBackend) -> Self {
        ActionClient { sync: FrameSynchronizer::default(), latest: None, backend }
    }

    pub fn synchronizer(&self) -> &FrameSynchronizer<Arc<Frame>> {
        &self.sync
    }

    /// Feeds one stream message; RGB and depth share a frame here, the
    /// synchronizer only pairs them by timestamp. A pair older than the
    /// current latest frame (a late redelivery) is ignored.
    pub fn on_frame(&mut self, channel: SyncChannel, frame: Arc<Frame>) {
        if let Some(pair) = self.sync.push(channel, frame.capture_ts, frame) {
            if self.latest.as_ref().is_some_and(|l| l.capture_ts > pair.rgb.capture_ts) {
                return;
            }
            let merged = if Arc::ptr_eq(&pair.rgb, &pair.depth) {
                pair.rgb
            } else {
                Arc::new(Frame { depth: pair.depth.depth.clone(), ..(*pair.rgb).clone() })
            };
            self.latest = Some(merged);
        }
    }

    pub fn latest(&self) -> Option<&Arc<Frame>> {
        self.latest.as_ref()
    }

    pub fn trigger<R: Rng + ?Sized>(
        &mut self,
        goal_id: u64,
        ground_truth: Option<&LabeledMask>,
        rng: &mut R,
    ) -> Result<TriggerOutcome, PerceptionError> {
        let frame = self.latest.clone().ok_or(PerceptionError::NotReady)?;
        let mut goal = ActionGoal::new(goal_id, frame);
        goal.transition(ActionStatus::Active)?;
        let compute = self.backend.compute_delay(rng)?;
        match self.backend.segment(goal_id, &goal.payload, ground_truth) {
            Ok(mask) => {
                goal.transition(ActionStatus::Succeeded)?;
                Ok(TriggerOutcome { goal_id, mask, frame_id: goal.payload.frame_id, status: goal.status(), compute })
            }
            Err(e) => {
                goal.transition(ActionStatus::Aborted)?;
                Err(e)
            }
        }
    }
}

/// Trigger request body: the goal id, 8 bytes little-endian.
pub fn encode_trigger(goal_id: u64) -> [u8; 8] {
    goal_id.to_le_bytes()
}

pub fn decode_trigger(bytes: &[u8]) -> Option<u64> {
    Some(u64::from_le_bytes(bytes.try_into().ok()?))
}

/// Reply body: goal id followed by a mask envelope.
pub fn encode_reply(goal_id: u64, envelope: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + envelope.len());
    out.extend_from_slice(&goal_id.to_le_bytes());
    out.extend_from_slice(envelope);
    out
}

pub fn decode_reply(bytes: &[u8]) -> Option<(u64, &[u8])> {
    if bytes.len() < 8 {
        return None;
    }
    Some((u64::from_le_bytes(bytes[..8].try_into().unwrap()), &bytes[8..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CameraIntrinsics;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ms(x: u64) -> Nanos {
        x * NANOS_PER_MS
    }

    #[test]
    fn pairs_within_tolerance() {
        let mut s = FrameSynchronizer::default();
        assert!(s.push(SyncChannel::Rgb, ms(100), 'a').is_none());
        let p = s.push(SyncChannel::Depth, ms(104), 'b').unwrap();
        assert_eq!((p.rgb, p.depth), ('a', 'b'));
        assert_eq!(s.queued(), (0, 0));
    }

    #[test]
    fn no_pair_outside_tolerance() {
        let mut s = FrameSynchronizer::default();
        s.push(SyncChannel::Rgb, ms(100), 1);
        assert!(s.push(SyncChannel::Depth, ms(150), 2).is_none());
        assert_eq!(s.queued(), (1, 1));
    }

    #[test]
    fn overflow_evicts_oldest() {
        let mut s = FrameSynchronizer::new(2, 0);
        for t in 0..3 {
            s.push(SyncChannel::Rgb, ms(t * 100), t);
        }
        assert_eq!(s.evictions(), 1);
        let p = s.push(SyncChannel::Depth, ms(100), 9).unwrap();
        assert_eq!(p.rgb, 1);
    }

    proptest! {
        #[test]
        fn thirty_fps_with_skew_pairs_every_frame(skews in proptest::collection::vec(-2_000_000i64..=2_000_000, 1..200), depth_first in any::<bool>()) {
            let mut s = FrameSynchronizer::default();
            let mut pairs = 0;
            for (i, skew) in skews.iter().enumerate() {
                let t = i as u64 * 33_333_333 + 5_000_000;
                let d = (t as i64 + skew) as u64;
                let order = if depth_first { [(SyncChannel::Depth, d), (SyncChannel::Rgb, t)] } else { [(SyncChannel::Rgb, t), (SyncChannel::Depth, d)] };
                for (c, ts) in order {
                    if let Some(p) = s.push(c, ts, i) {
                        prop_assert_eq!(p.rgb, p.depth);
                        prop_assert!(p.rgb_ts.abs_diff(p.depth_ts) <= DEFAULT_SYNC_TOLERANCE);
                        pairs += 1;
                    }
                }
            }
            prop_assert_eq!(pairs, skews.len());
            prop_assert_eq!(s.evictions(), 0);
        }
    }

    #[test]
    fn status_machine_only_moves_forward() {
        let mut g = ActionGoal::new(1, ());
        assert!(g.transition(ActionStatus::Succeeded).is_err());
        g.transition(ActionStatus::Active).unwrap();
        assert!(g.transition(ActionStatus::Pending).is_err());
        g.transition(ActionStatus::Aborted).unwrap();
        assert!(g.transition(ActionStatus::Succeeded).is_err());
        assert_eq!(g.history(), [ActionStatus::Pending, ActionStatus::Active, ActionStatus::Aborted]);
    }

    #[test]
    fn palette_pixels_classify_exactly() {
        for (c, rgb) in PALETTE {
            assert_eq!(classify_pixel(rgb), (c, 1.0));
        }
    }

    #[test]
    fn equidistant_pixel_takes_palette_order() {
        // squared distance 12500 to both red and green, farther from the rest
        let mid = [100u8, 60, 0];
        let (c, conf) = classify_pixel(mid);
        assert_eq!(c, ClassId::Strawberry);
        assert!((conf - 0.5).abs() < 1e-12);
    }

    fn tiny_frame(rgb: [u8; 3]) -> Frame {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 2, 1).unwrap();
        Frame::new(7, 3, [rgb, rgb].concat(), vec![1000, 1000], k).unwrap()
    }

    #[test]
    fn late_redelivery_does_not_replace_newer_frame() {
        let mut c = ActionClient::new(SegmentationBackend::Oracle);
        let at = |id, ts| Arc::new(Frame { frame_id: id, capture_ts: ts, ..tiny_frame([9, 9, 9]) });
        let (old, new) = (at(1, ms(100)), at(2, ms(200)));
        c.on_frame(SyncChannel::Rgb, new.clone());
        c.on_frame(SyncChannel::Depth, new);
        c.on_frame(SyncChannel::Rgb, old.clone());
        c.on_frame(SyncChannel::Depth, old);
        assert_eq!(c.latest().unwrap().frame_id, 2);
    }

    #[test]
    fn trigger_before_frames_is_not_ready() {
        let mut c = ActionClient::new(SegmentationBackend::Oracle);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(c.trigger(1, None, &mut rng).unwrap_err(), PerceptionError::NotReady);
    }

    #[test]
    fn oracle_trigger_returns_ground_truth() {
        let mut c = ActionClient::new(SegmentationBackend::Oracle);
        let f = Arc::new(tiny_frame([1, 2, 3]));
        c.on_frame(SyncChannel::Rgb, f.clone());
        c.on_frame(SyncChannel::Depth, f);
        let mut gt = LabeledMask::filled(2, 1, ClassId::Canopy);
        gt.set(1, 0, ClassId::Strawberry, 255);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = c.trigger(5, Some(&gt), &mut rng).unwrap();
        assert_eq!(out.mask, gt);
        assert_eq!(out.status, ActionStatus::Succeeded);
        assert_eq!(out.compute, 0);
        let err = c.trigger(6, None, &mut rng).unwrap_err();
        assert!(matches!(err, PerceptionError::Aborted { goal_id: 6, .. }));
    }

    #[test]
    fn default_latency_means() {
        let m = LatencyModel::default();
        assert_eq!(m.mean_ms(ModelKind::Detectron2, Platform::Edge).unwrap(), 82.0);
        assert!((m.mean_ms(ModelKind::Detectron2, Platform::Njxn).unwrap() - 1533.4).abs() < 1e-9);
        assert_eq!(m.mean_ms(ModelKind::D2go8, Platform::Edge).unwrap(), 30.0);
        assert!((m.mean_ms(ModelKind::D2go8, Platform::Njxn).unwrap() - 129.0).abs() < 1e-9);
        assert!(LatencyModel::empty().get(ModelKind::D2go8, Platform::Edge).is_err());
        m.validate().unwrap();
    }

    #[test]
    fn latency_model_json_round_trip() {
        let m = LatencyModel::default();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"detectron2/edge\":{\"kind\":\"normal\",\"params\":[82.0,8.2"));
        let back: LatencyModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn delayed_sample_is_near_mean() {
        let m = Arc::new(LatencyModel::default());
        let b = SegmentationBackend::Oracle.delayed(m, ModelKind::Detectron2, Platform::Edge);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000;
        let mean = (0..n).map(|_| b.compute_delay(&mut rng).unwrap() as f64).sum::<f64>() / n as f64;
        assert!((mean / 1e6 - 82.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn pool_serves_min_k_w_in_parallel() {
        let mut p = WorkerPool::new(3);
        let ends: Vec<_> = (0..4).map(|_| p.assign(0, 10).1).collect();
        assert_eq!(ends, [10, 10, 10, 20]);
    }

    #[test]
    fn trigger_and_reply_bodies() {
        assert_eq!(decode_trigger(&encode_trigger(0x0102)), Some(0x0102));
        assert_eq!(decode_trigger(&[1, 2]), None);
        let r = encode_reply(9, b"E5SH");
        assert_eq!(decode_reply(&r), Some((9, &b"E5SH"[..])));
    }
}
