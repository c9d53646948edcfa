//! Experiment orchestration: dataset generation, simulated and loopback
//! runs of the robot/edge pipeline, and report emission.

pub mod dataset;
mod live;
pub mod report;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, HEADER_LEN};
use crate::metrics::{config_name, ExperimentRecord, MetricsError};
use crate::mqtt::{MqttError, QoS, RetryPolicy};
use crate::netem::{LinkCounters, NetemError, NetworkProfile};
use crate::occmap::OccmapError;
use crate::perception::{BackendKind, LatencyModel, PerceptionError};
use crate::stats::StatsError;
use crate::tcpros::TcprosError;
use crate::types::{ms_to_nanos, ModelKind, Nanos, Platform, Protocol, TypeError};

pub use dataset::{gen_dataset, generate, Dataset, GenSummary, Scene, SceneSpec};

/// Uplink frame size used with `paper_sizes`.
pub const PAPER_UP_BYTES: usize = 80_000;
/// Downlink mask size used with `paper_sizes`.
pub const PAPER_DOWN_BYTES: usize = 16_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("unsatisfiable scene spec: {0}")]
    Unsatisfiable(String),
    #[error("run: {0}")]
    Run(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Mqtt(#[from] MqttError),
    #[error(transparent)]
    Tcpros(#[from] TcprosError),
    #[error(transparent)]
    Netem(#[from] NetemError),
    #[error(transparent)]
    Occmap(#[from] OccmapError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Sim,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyPreset {
    /// The built-in per model/platform table.
    Default,
    /// Segmentation takes no time.
    None,
}

/// Either a preset name or an explicit `"model/platform"` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencyChoice {
    Preset(LatencyPreset),
    Table(LatencyModel),
}

impl Default for LatencyChoice {
    fn default() -> Self {
        LatencyChoice::Preset(LatencyPreset::Default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub robots: u32,
    pub frames_per_robot: u32,
    #[serde(alias = "protocol")]
    pub transport: Protocol,
    /// Profile name: 5g, wifi or ideal.
    pub network: String,
    /// Inline profile; its name replaces `network` in the records.
    pub network_profile: Option<NetworkProfile>,
    /// Overrides the profile's loss probability.
    pub loss: Option<f64>,
    pub backend: BackendKind,
    pub model: ModelKind,
    pub platform: Platform,
    pub latency: LatencyChoice,
    pub mode: Mode,
    pub seed: u64,
    pub pad_up_bytes: Option<usize>,
    pub pad_down_bytes: Option<usize>,
    /// Pads to 80 kB up and 16 kB down unless explicit pads are given.
    pub paper_sizes: bool,
    pub workers: usize,
    /// Target non-segmentation time per frame. The gap above the profile's
    /// mean RTT is added as a fixed bridge delay before each goal starts.
    pub network_overhead_ms: Option<f64>,
    pub map_stride: usize,
    pub resolution: f64,
    pub per_frame_timeout_ms: f64,
    pub retry_timeout_ms: f64,
    pub retry_cap: Option<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            robots: 1,
            frames_per_robot: 100,
            transport: Protocol::MqttQos1,
            network: "5g".into(),
            network_profile: None,
            loss: None,
            backend: BackendKind::Oracle,
            model: ModelKind::Detectron2,
            platform: Platform::Edge,
            latency: LatencyChoice::default(),
            mode: Mode::Sim,
            seed: 0,
            pad_up_bytes: None,
            pad_down_bytes: None,
            paper_sizes: false,
            workers: crate::perception::DEFAULT_WORKERS,
            network_overhead_ms: None,
            map_stride: 8,
            resolution: 0.05,
            per_frame_timeout_ms: 10_000.0,
            retry_timeout_ms: 200.0,
            retry_cap: Some(crate::mqtt::DEFAULT_RETRY_CAP),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.robots == 0 {
            return bad("robots must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.map_stride == 0 {
            return bad("map_stride must be at least 1");
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return bad("resolution must be positive");
        }
        if !(self.per_frame_timeout_ms.is_finite() && self.per_frame_timeout_ms > 0.0) {
            return bad("per_frame_timeout_ms must be positive");
        }
        if !(self.retry_timeout_ms.is_finite() && self.retry_timeout_ms > 0.0) {
            return bad("retry_timeout_ms must be positive");
        }
        if let Some(o) = self.network_overhead_ms {
            if !(o.is_finite() && o >= 0.0) {
                return bad("network_overhead_ms must be non-negative");
            }
        }
        let profile = self.profile()?;
        if self.transport == Protocol::Tcpros && profile.loss_prob >= 1.0 {
            return bad("tcpros cannot make progress over a link that drops everything");
        }
        if let Some(m) = self.latency_model() {
            m.validate()?;
            m.get(self.model, self.platform)?;
        }
        if self.mode == Mode::Live {
            let virtual_only = profile.one_way_delay.mean_ms() > 0.0
                || profile.loss_prob > 0.0
                || profile.bandwidth_kbps.is_some()
                || self.network_overhead_ms.is_some();
            if self.platform == Platform::Edge && virtual_only {
                return bad("live mode runs on loopback only; use the ideal network without overhead");
            }
        }
        Ok(())
    }

    /// Link profile with overrides applied and its randomness tied to `seed`.
    pub fn profile(&self) -> Result<NetworkProfile, HarnessError> {
        let mut p = match &self.network_profile {
            Some(p) => p.clone(),
            None => NetworkProfile::named(&self.network)?,
        };
        if let Some(l) = self.loss {
            p = p.with_loss(l);
        }
        p.validate()?;
        let seed = mix(self.seed, p.seed);
        Ok(p.with_seed(seed))
    }

    pub fn network_name(&self) -> String {
        match &self.network_profile {
            Some(p) => p.name.clone(),
            None => self.network.clone(),
        }
    }

    pub fn latency_model(&self) -> Option<LatencyModel> {
        match &self.latency {
            LatencyChoice::Preset(LatencyPreset::Default) => Some(LatencyModel::default()),
            LatencyChoice::Preset(LatencyPreset::None) => None,
            LatencyChoice::Table(t) => Some(t.clone()),
        }
    }

    pub fn pad_up(&self) -> usize {
        self.pad_up_bytes.unwrap_or(if self.paper_sizes { PAPER_UP_BYTES } else { 0 })
    }

    pub fn pad_down(&self) -> usize {
        self.pad_down_bytes.unwrap_or(if self.paper_sizes { PAPER_DOWN_BYTES } else { 0 })
    }

    pub fn qos(&self) -> QoS {
        match self.transport {
            Protocol::MqttQos0 => QoS::AtMostOnce,
            _ => QoS::AtLeastOnce,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { timeout: ms_to_nanos(self.retry_timeout_ms), cap: self.retry_cap }
    }

    /// Fixed extra delay per goal so the mean non-segmentation time reaches
    /// `network_overhead_ms`.
    pub fn bridge_ns(&self, profile: &NetworkProfile) -> Nanos {
        match self.network_overhead_ms {
            Some(target) => ms_to_nanos((target - profile.mean_rtt_ms()).max(0.0)),
            None => 0,
        }
    }

    pub fn config_name(&self) -> String {
        config_name(self.transport, &self.network_name(), self.model, self.platform)
    }
}

/// Parses either one config object or an array of them.
pub fn parse_configs(json: &str) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let v: serde_json::Value = serde_json::from_str(json)?;
    let configs = match v {
        serde_json::Value::Array(items) => {
            items.into_iter().map(serde_json::from_value).collect::<Result<Vec<ExperimentConfig>, _>>()?
        }
        other => vec![serde_json::from_value(other)?],
    };
    if configs.is_empty() {
        return Err(HarnessError::Config("no configurations given".into()));
    }
    Ok(configs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config: String,
    pub frames: u64,
    pub successes: u64,
    pub failures: u64,
    pub link_up: LinkCounters,
    pub link_down: LinkCounters,
    pub retransmissions: u64,
    pub duplicates_received: u64,
    /// Returned masks compared against ground truth, and pixels that differed.
    pub masks_compared: u64,
    pub mask_mismatch_pixels: u64,
    pub obstacle_voxels: u64,
    pub strawberry_voxels: u64,
    pub end_ns: Nanos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<ExperimentRecord>,
    pub summary: RunSummary,
}

pub fn run_experiment(config: &ExperimentConfig, data: &Dataset) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    if data.scenes.is_empty() {
        return Err(HarnessError::Dataset("dataset has no scenes".into()));
    }
    match config.mode {
        Mode::Sim => sim::run(config, data),
        Mode::Live => live::run(config, data),
    }
}

/// splitmix64 finalizer over the pair.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard-normal deviate shared by every run with the same seed, robot,
/// frame and model, whatever the platform.
pub fn frame_deviate(seed: u64, robot: u32, frame: u64, model: ModelKind) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix(mix(seed, robot as u64), frame));
    rng.set_stream(model as u64);
    StandardNormal.sample(&mut rng)
}

/// Scene shown to `robot` at `frame`.
pub(crate) fn scene_index(robot: u32, frame: u64, frames_per_robot: u32, scenes: usize) -> usize {
    ((robot as u64 * frames_per_robot as u64 + frame) % scenes as u64) as usize
}

pub(crate) fn pad(mut bytes: Vec<u8>, target: usize) -> Vec<u8> {
    if bytes.len() < target {
        bytes.resize(target, 0);
    }
    bytes
}

/// Strips padding after an envelope.
pub(crate) fn unpad_envelope(bytes: &[u8]) -> Result<&[u8], CodecError> {
    let h = crate::codec::decode_header(bytes)?;
    let end = HEADER_LEN + h.payload_len as usize;
    if bytes.len() < end {
        return Err(CodecError::Truncated { needed: end, available: bytes.len() });
    }
    Ok(&bytes[..end])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_uses_snake_case_fields() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"robots": 3, "transport": "mqtt-qos0", "network": "wifi", "paper_sizes": true, "latency": "none"}"#,
        )
        .unwrap();
        assert_eq!(c.robots, 3);
        assert_eq!(c.transport, Protocol::MqttQos0);
        assert_eq!(c.pad_up(), PAPER_UP_BYTES);
        assert_eq!(c.latency_model(), None);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"robot": 3}"#).is_err());
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn array_or_object() {
        assert_eq!(parse_configs("{}").unwrap().len(), 1);
        assert_eq!(parse_configs(r#"[{}, {"platform": "njxn"}]"#).unwrap().len(), 2);
        assert!(parse_configs("[]").is_err());
    }

    #[test]
    fn bridge_fills_gap_above_rtt() {
        let c = ExperimentConfig { network_overhead_ms: Some(34.3), ..Default::default() };
        let p = c.profile().unwrap();
        assert_eq!(c.bridge_ns(&p), ms_to_nanos(34.3 - p.mean_rtt_ms()));
        let c = ExperimentConfig { network_overhead_ms: Some(1.0), ..Default::default() };
        assert_eq!(c.bridge_ns(&p), 0);
    }

    #[test]
    fn deviate_ignores_platform_but_not_frame() {
        let a = frame_deviate(1, 0, 5, ModelKind::Detectron2);
        assert_eq!(a, frame_deviate(1, 0, 5, ModelKind::Detectron2));
        assert_ne!(a, frame_deviate(1, 0, 6, ModelKind::Detectron2));
    }

    #[test]
    fn live_mode_rejects_emulated_links() {
        let c = ExperimentConfig { mode: Mode::Live, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { mode: Mode::Live, network: "ideal".into(), ..Default::default() };
        c.validate().unwrap();
    }
}
