//! Domain types shared across the pipeline.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds on some clock.
pub type Nanos = u64;

pub const NANOS_PER_MS: u64 = 1_000_000;
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

pub fn ms_to_nanos(ms: f64) -> Nanos {
    (ms * NANOS_PER_MS as f64).round().max(0.0) as Nanos
}

pub fn nanos_to_ms(ns: Nanos) -> f64 {
    ns as f64 / NANOS_PER_MS as f64
}

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("buffer size mismatch: expected {expected} elements, got {actual}")]
    BufferSize { expected: usize, actual: usize },
    #[error("unknown class byte {0}")]
    UnknownClass(u8),
}

/// The four segmentation classes. The discriminant is the wire byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    Strawberry = 0,
    Canopy = 1,
    RigidObstacle = 2,
    Background = 3,
}

impl ClassId {
    pub const ALL: [ClassId; 4] = [
        ClassId::Strawberry,
        ClassId::Canopy,
        ClassId::RigidObstacle,
        ClassId::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_byte(b: u8) -> Result<Self, TypeError> {
        match b {
            0 => Ok(ClassId::Strawberry),
            1 => Ok(ClassId::Canopy),
            2 => Ok(ClassId::RigidObstacle),
            3 => Ok(ClassId::Background),
            other => Err(TypeError::UnknownClass(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Strawberry => "strawberry",
            ClassId::Canopy => "canopy",
            ClassId::RigidObstacle => "rigid_obstacle",
            ClassId::Background => "background",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pinhole camera parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u16,
    pub height: u16,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u16, height: u16) -> Result<Self, TypeError> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and the
    /// given horizontal field of view.
    pub fn centered(width: u16, height: u16, hfov_deg: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(TypeError::Intrinsics(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(TypeError::Intrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A timestamped RGB-D sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub capture_ts: Nanos,
    /// Row-major, 3 bytes per pixel.
    pub rgb: Vec<u8>,
    /// Row-major millimeters; 0 means no measurement.
    pub depth: Vec<u16>,
    pub intrinsics: CameraIntrinsics,
}

impl Frame {
    pub fn new(
        frame_id: u64,
        capture_ts: Nanos,
        rgb: Vec<u8>,
        depth: Vec<u16>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, TypeError> {
        intrinsics.validate()?;
        let n = intrinsics.pixel_count();
        if rgb.len() != n * 3 {
            return Err(TypeError::BufferSize { expected: n * 3, actual: rgb.len() });
        }
        if depth.len() != n {
            return Err(TypeError::BufferSize { expected: n, actual: depth.len() });
        }
        Ok(Frame { frame_id, capture_ts, rgb, depth, intrinsics })
    }

    pub fn width(&self) -> u16 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u16 {
        self.intrinsics.height
    }

    pub fn rgb_at(&self, u: usize, v: usize) -> [u8; 3] {
        let i = (v * self.width() as usize + u) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Per-pixel class labels with 8-bit quantized confidence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledMask {
    pub width: u16,
    pub height: u16,
    pub classes: Vec<ClassId>,
    /// `q` encodes confidence `q / 255`.
    pub confidence: Vec<u8>,
}

impl LabeledMask {
    pub fn new(width: u16, height: u16, classes: Vec<ClassId>, confidence: Vec<u8>) -> Result<Self, TypeError> {
        let n = width as usize * height as usize;
        if classes.len() != n {
            return Err(TypeError::BufferSize { expected: n, actual: classes.len() });
        }
        if confidence.len() != n {
            return Err(TypeError::BufferSize { expected: n, actual: confidence.len() });
        }
        Ok(LabeledMask { width, height, classes, confidence })
    }

    /// A mask with every pixel set to `class` at full confidence.
    pub fn filled(width: u16, height: u16, class: ClassId) -> Self {
        let n = width as usize * height as usize;
        LabeledMask { width, height, classes: vec![class; n], confidence: vec![u8::MAX; n] }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> ClassId {
        self.classes[v * self.width as usize + u]
    }

    pub fn set(&mut self, u: usize, v: usize, class: ClassId, confidence: u8) {
        let i = v * self.width as usize + u;
        self.classes[i] = class;
        self.confidence[i] = confidence;
    }

    pub fn class_counts(&self) -> [u64; 4] {
        let mut counts = [0u64; 4];
        for c in &self.classes {
            counts[c.index()] += 1;
        }
        counts
    }
}

/// Quantizes a confidence in `[0, 1]` to a byte.
pub fn quantize_confidence(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize_confidence(q: u8) -> f64 {
    q as f64 / 255.0
}

/// Source of timestamps.
///
/// A virtual clock is only ever moved by the event scheduler that owns it;
/// every other holder sees a constant value between events.
#[derive(Debug, Clone)]
pub enum Clock {
    Wall(Instant),
    Virtual(VirtualClock),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn now(&self) -> Nanos {
        match self {
            Clock::Wall(epoch) => epoch.elapsed().as_nanos() as Nanos,
            Clock::Virtual(v) => v.now(),
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }
}

/// Shared read handle onto simulated time.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicU64>);

impl VirtualClock {
    pub fn now(&self) -> Nanos {
        self.0.load(Ordering::Acquire)
    }

    pub(crate) fn set(&self, t: Nanos) {
        self.0.store(t, Ordering::Release);
    }
}

/// Transport under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "tcpros")]
    Tcpros,
    #[serde(rename = "mqtt-qos0")]
    MqttQos0,
    #[serde(rename = "mqtt-qos1")]
    MqttQos1,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::MqttQos0, Protocol::MqttQos1, Protocol::Tcpros];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tcpros => "tcpros",
            Protocol::MqttQos0 => "mqtt-qos0",
            Protocol::MqttQos1 => "mqtt-qos1",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcpros" => Ok(Protocol::Tcpros),
            "mqtt-qos0" | "qos0" => Ok(Protocol::MqttQos0),
            "mqtt-qos1" | "qos1" => Ok(Protocol::MqttQos1),
            other => Err(format!("unknown protocol '{other}'")),
        }
    }
}

/// Segmentation model whose latency is being modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Detectron2,
    D2go8,
    D2go32,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Detectron2 => "detectron2",
            ModelKind::D2go8 => "d2go8",
            ModelKind::D2go32 => "d2go32",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detectron2" => Ok(ModelKind::Detectron2),
            "d2go8" => Ok(ModelKind::D2go8),
            "d2go32" => Ok(ModelKind::D2go32),
            other => Err(format!("unknown model '{other}'")),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where segmentation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Edge,
    Njxn,
}

impl Platform {
    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Edge => "edge",
            Platform::Njxn => "njxn",
        }
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edge" => Ok(Platform::Edge),
            "njxn" => Ok(Platform::Njxn),
            other => Err(format!("unknown platform '{other}'")),
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_bytes_round_trip() {
        for c in ClassId::ALL {
            assert_eq!(ClassId::from_byte(c as u8).unwrap(), c);
        }
        assert_eq!(ClassId::from_byte(4), Err(TypeError::UnknownClass(4)));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(500.0, 500.0, 424.0, 240.0, 848, 480).is_ok());
        assert!(CameraIntrinsics::new(0.0, 500.0, 424.0, 240.0, 848, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 848.0, 240.0, 848, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, -1.0, 240.0, 848, 480).is_err());
    }

    #[test]
    fn frame_rejects_mismatched_buffers() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 2, 1).unwrap();
        assert!(Frame::new(0, 0, vec![0; 6], vec![0; 2], k).is_ok());
        assert_eq!(
            Frame::new(0, 0, vec![0; 5], vec![0; 2], k).unwrap_err(),
            TypeError::BufferSize { expected: 6, actual: 5 }
        );
        assert!(Frame::new(0, 0, vec![0; 6], vec![0; 3], k).is_err());
    }

    #[test]
    fn virtual_clock_reads_are_constant_until_set() {
        let v = VirtualClock::default();
        let clock = Clock::Virtual(v.clone());
        assert_eq!(clock.now(), 0);
        assert_eq!(clock.now(), 0);
        v.set(42);
        assert_eq!(clock.now(), 42);
        assert!(clock.is_virtual());
    }

    #[test]
    fn confidence_quantization_endpoints() {
        assert_eq!(quantize_confidence(1.0), 255);
        assert_eq!(quantize_confidence(0.0), 0);
        assert_eq!(quantize_confidence(0.5), 128);
        assert_eq!(dequantize_confidence(255), 1.0);
    }
}
