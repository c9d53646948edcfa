//! Summaries computed from record logs and datasets.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{Dataset, HarnessError};
use crate::metrics::{
    ap_ar, confusion, default_thresholds, distribution_stats, median, scores, speedup, throughput, ApAr,
    ClassScore, DistStats, ExperimentRecord, PixelConfusion,
};
use crate::perception::BackendKind;
use crate::perception::SegmentationBackend;
use crate::stats::{
    factor_analysis_2x3, protocol_contrast, shapiro_wilk, Contrast, FactorAnalysis, Observation, ShapiroWilk,
    DEFAULT_PERMUTATIONS,
};
use crate::types::{ClassId, ModelKind, Platform, Protocol, NANOS_PER_SEC};

const MS_PER_NS: f64 = 1e-6;

/// Seed for the permutation tests in reports.
pub const REPORT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Serialize)]
pub struct ConfigSummary {
    pub config: String,
    pub protocol: Protocol,
    pub network: String,
    pub model: ModelKind,
    pub platform: Platform,
    pub robots: usize,
    pub frames: usize,
    pub successes: usize,
    pub failures: usize,
    /// Send to result, per successful frame.
    pub rtt_ms: Option<DistStats<f64>>,
    pub seg_ms: Option<DistStats<f64>>,
    pub overhead_ms: Option<DistStats<f64>>,
    pub total_ms: Option<DistStats<f64>>,
    pub mean_bytes_up: f64,
    pub mean_bytes_down: f64,
    /// Completed frames over the span from first capture to last map.
    pub fps: Option<f64>,
    /// `robots / (mean t_seg + mean t_overhead)`.
    pub fps_identity: Option<f64>,
    pub up_kbps: Option<f64>,
    pub down_kbps: Option<f64>,
    /// Median over matched (robot, frame) pairs of baseline seg / this seg.
    pub seg_speedup: Option<f64>,
    pub fps_speedup: Option<f64>,
    pub shapiro: BTreeMap<String, Option<ShapiroWilk>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorReport {
    /// Per-frame upload rate, KB/s.
    pub response: String,
    pub networks: [String; 2],
    pub protocols: [Protocol; 3],
    pub model: ModelKind,
    pub table: FactorAnalysis,
    pub qos0_vs_qos1: Contrast,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub baseline: Option<String>,
    pub configs: Vec<ConfigSummary>,
    pub factor_analysis: Vec<FactorReport>,
    /// Why no factor table was produced, when none was.
    pub notes: Vec<String>,
}

fn ns_ms(a: Option<u64>, b: Option<u64>) -> Option<f64> {
    Some((b?.checked_sub(a?)?) as f64 * MS_PER_NS)
}

fn dist(v: &[f64]) -> Option<DistStats<f64>> {
    distribution_stats(v).ok()
}

fn group(records: &[ExperimentRecord]) -> BTreeMap<String, Vec<&ExperimentRecord>> {
    let mut m: BTreeMap<String, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.config_name()).or_default().push(r);
    }
    m
}

fn rtt_ms(r: &ExperimentRecord) -> Option<f64> {
    ns_ms(r.t_sent, r.t_result)
}

fn summarize(name: &str, recs: &[&ExperimentRecord]) -> ConfigSummary {
    let first = recs[0];
    let ok: Vec<&&ExperimentRecord> = recs.iter().filter(|r| r.is_success()).collect();
    let robots = recs.iter().map(|r| r.robot_id).collect::<std::collections::BTreeSet<_>>().len();
    let rtt: Vec<f64> = ok.iter().filter_map(|r| rtt_ms(r)).collect();
    let seg: Vec<f64> = ok.iter().filter_map(|r| r.seg_seconds()).map(|s| s * 1e3).collect();
    let over: Vec<f64> = ok.iter().filter_map(|r| r.overhead_seconds()).map(|s| s * 1e3).collect();
    let total: Vec<f64> = ok.iter().filter_map(|r| r.total_seconds()).map(|s| s * 1e3).collect();
    let n = recs.len().max(1) as f64;
    let mean_up = recs.iter().map(|r| r.bytes_up as f64).sum::<f64>() / n;
    let mean_down = recs.iter().map(|r| r.bytes_down as f64).sum::<f64>() / n;

    let start = recs.iter().filter_map(|r| r.t_capture).min();
    let end = ok.iter().filter_map(|r| r.t_map_done).max();
    let fps = match (start, end) {
        (Some(s), Some(e)) if e > s => Some(ok.len() as f64 * NANOS_PER_SEC as f64 / (e - s) as f64),
        _ => None,
    };
    let fps_identity = if seg.is_empty() {
        None
    } else {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64 / 1e3;
        crate::metrics::cumulative_fps(mean(&seg), mean(&over)).ok().map(|f| f * robots as f64)
    };
    let mut shapiro = BTreeMap::new();
    shapiro.insert("rtt_ms".to_string(), shapiro_wilk(&rtt).ok());
    shapiro.insert("seg_ms".to_string(), shapiro_wilk(&seg).ok());
    ConfigSummary {
        config: name.to_string(),
        protocol: first.protocol,
        network: first.network.clone(),
        model: first.model,
        platform: first.platform,
        robots,
        frames: recs.len(),
        successes: ok.len(),
        failures: recs.len() - ok.len(),
        rtt_ms: dist(&rtt),
        seg_ms: dist(&seg),
        overhead_ms: dist(&over),
        total_ms: dist(&total),
        mean_bytes_up: mean_up,
        mean_bytes_down: mean_down,
        fps,
        fps_identity,
        up_kbps: fps.map(|f| throughput(f, mean_up)),
        down_kbps: fps.map(|f| throughput(f, mean_down)),
        seg_speedup: None,
        fps_speedup: None,
        shapiro,
    }
}

fn paired_seg_speedup(base: &[&ExperimentRecord], cfg: &[&ExperimentRecord]) -> Option<f64> {
    let b: BTreeMap<(u32, u64), f64> =
        base.iter().filter_map(|r| Some(((r.robot_id, r.frame_id), r.seg_seconds()?))).collect();
    let ratios: Vec<f64> = cfg
        .iter()
        .filter_map(|r| {
            let s = r.seg_seconds()?;
            let bs = *b.get(&(r.robot_id, r.frame_id))?;
            (s > 0.0).then(|| bs / s)
        })
        .collect();
    median(&ratios).ok()
}

/// Per-configuration summary, speedups against `baseline` (a config name)
/// and factor tables over network × protocol.
pub fn report(records: &[ExperimentRecord], baseline: Option<&str>) -> Result<Report, HarnessError> {
    let groups = group(records);
    if let Some(b) = baseline {
        if !groups.contains_key(b) {
            return Err(HarnessError::Config(format!("baseline configuration {b:?} not in log")));
        }
    }
    let mut configs: Vec<ConfigSummary> = groups.iter().map(|(k, v)| summarize(k, v)).collect();
    if let Some(b) = baseline {
        let base_recs = &groups[b];
        let base_fps = configs.iter().find(|c| c.config == b).and_then(|c| c.fps);
        for c in &mut configs {
            c.seg_speedup = paired_seg_speedup(base_recs, &groups[&c.config]);
            c.fps_speedup = match (c.fps, base_fps) {
                (Some(a), Some(b)) => speedup(a, b).ok(),
                _ => None,
            };
        }
    }
    let (factor_analysis, notes) = factor_tables(records, DEFAULT_PERMUTATIONS)?;
    Ok(Report { baseline: baseline.map(str::to_string), configs, factor_analysis, notes })
}

fn per_frame_up_kbps(r: &ExperimentRecord) -> Option<f64> {
    let s = r.total_seconds()?;
    (s > 0.0).then(|| r.bytes_up as f64 / s / 1000.0)
}

/// Order networks so that "5g" comes first when present.
fn network_levels(mut names: Vec<String>) -> Option<[String; 2]> {
    names.sort_by_key(|n| (n != "5g", n.clone()));
    names.dedup();
    match names.as_slice() {
        [a, b] => Some([a.clone(), b.clone()]),
        _ => None,
    }
}

/// One 2×3 table per model among edge records.
pub fn factor_tables(records: &[ExperimentRecord], permutations: usize) -> Result<(Vec<FactorReport>, Vec<String>), HarnessError> {
    let mut out = Vec::new();
    let mut notes = Vec::new();
    let mut by_model: BTreeMap<ModelKind, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.platform == Platform::Edge) {
        by_model.entry(r.model).or_default().push(r);
    }
    for (model, recs) in by_model {
        let names: Vec<String> = recs.iter().map(|r| r.network.clone()).collect();
        let Some(networks) = network_levels(names) else {
            notes.push(format!("{model}: factor analysis needs exactly two networks"));
            continue;
        };
        let obs: Vec<Observation> = recs
            .iter()
            .filter_map(|r| {
                let a = networks.iter().position(|n| *n == r.network)?;
                let b = Protocol::ALL.iter().position(|p| *p == r.protocol)?;
                Some(Observation { a, b, value: per_frame_up_kbps(r)? })
            })
            .collect();
        let table = match factor_analysis_2x3(&obs, permutations, REPORT_SEED) {
            Ok(t) => t,
            Err(e) => {
                notes.push(format!("{model}: {e}"));
                continue;
            }
        };
        let qos0_vs_qos1 = protocol_contrast(&obs, 0, 1, permutations, REPORT_SEED)?;
        out.push(FactorReport {
            response: "up_kbps_per_frame".into(),
            networks,
            protocols: Protocol::ALL,
            model,
            table,
            qos0_vs_qos1,
        });
    }
    Ok((out, notes))
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    /// Per configuration: normality of the RTT series (ms).
    pub shapiro: Option<BTreeMap<String, Option<ShapiroWilk>>>,
    pub anova: Option<Vec<FactorReport>>,
    pub notes: Vec<String>,
}

pub fn stats_report(records: &[ExperimentRecord], shapiro: bool, anova: bool) -> Result<StatsReport, HarnessError> {
    let mut notes = Vec::new();
    let shapiro = shapiro.then(|| {
        group(records)
            .into_iter()
            .map(|(k, v)| {
                let rtt: Vec<f64> = v.iter().filter(|r| r.is_success()).filter_map(|r| rtt_ms(r)).collect();
                (k, shapiro_wilk(&rtt).ok())
            })
            .collect()
    });
    let anova = if anova {
        let (t, n) = factor_tables(records, DEFAULT_PERMUTATIONS)?;
        notes = n;
        Some(t)
    } else {
        None
    };
    Ok(StatsReport { shapiro, anova, notes })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassEval {
    pub class: ClassId,
    /// Scores from the confusion pooled over all images.
    pub pooled: ClassScore<f64>,
    /// Spread of per-image F1.
    pub f1: Option<DistStats<f64>>,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub backend: BackendKind,
    pub images: usize,
    pub confusion: PixelConfusion,
    pub classes: Vec<ClassEval>,
}

/// Segments every scene and scores it against its exact mask.
pub fn eval(data: &Dataset, backend: BackendKind) -> Result<EvalReport, HarnessError> {
    let seg: SegmentationBackend = backend.into();
    let thresholds = default_thresholds();
    let mut pooled = PixelConfusion::default();
    let mut f1s: [Vec<f64>; 4] = Default::default();
    let mut ap = [(0.0, 0.0); 4];
    for (i, scene) in data.scenes.iter().enumerate() {
        let pred = seg.segment(i as u64, &scene.frame, Some(&scene.mask))?;
        let c = confusion(&pred, &scene.mask)?;
        pooled.add(&c);
        let s = scores::<f64>(&c);
        let a: [ApAr<f64>; 4] = ap_ar(&pred, &scene.mask, &thresholds)?;
        for k in 0..4 {
            // classes absent from both prediction and truth carry no score
            if c.tp[k] + c.fp[k] + c.fn_[k] > 0 {
                f1s[k].push(s[k].f1);
            }
            ap[k].0 += a[k].ap;
            ap[k].1 += a[k].ar;
        }
    }
    let n = data.scenes.len().max(1) as f64;
    let pooled_scores = scores::<f64>(&pooled);
    let classes = ClassId::ALL
        .iter()
        .map(|&class| {
            let k = class.index();
            ClassEval { class, pooled: pooled_scores[k], f1: dist(&f1s[k]), ap: ap[k].0 / n, ar: ap[k].1 / n }
        })
        .collect();
    Ok(EvalReport { backend, images: data.scenes.len(), confusion: pooled, classes })
}
