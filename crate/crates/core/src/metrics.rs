//! Segmentation scores, distribution summaries, rate arithmetic and the
//! per-frame experiment record log.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::types::{dequantize_confidence, ClassId, LabeledMask, ModelKind, Nanos, Platform, Protocol, NANOS_PER_SEC};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    Dimensions((u16, u16), (u16, u16)),
    #[error("empty input")]
    Empty,
    #[error("need a positive value, got {0}")]
    NonPositive(String),
    #[error("record log: {0}")]
    Csv(#[from] csv::Error),
    #[error("record log header mismatch: {0}")]
    Schema(String),
}

/// Pixel counts per class, indexed by `ClassId::index`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PixelConfusion {
    pub tp: [u64; 4],
    pub fp: [u64; 4],
    pub fn_: [u64; 4],
}

impl PixelConfusion {
    pub fn add(&mut self, other: &PixelConfusion) {
        for c in 0..4 {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    /// Equals the number of evaluated pixels.
    pub fn total(&self) -> u64 {
        (0..4).map(|c| self.tp[c] + self.fn_[c]).sum()
    }
}

fn same_dims(a: &LabeledMask, b: &LabeledMask) -> Result<(), MetricsError> {
    if (a.width, a.height) != (b.width, b.height) || a.classes.len() != b.classes.len() {
        return Err(MetricsError::Dimensions((a.width, a.height), (b.width, b.height)));
    }
    Ok(())
}

pub fn confusion(pred: &LabeledMask, gt: &LabeledMask) -> Result<PixelConfusion, MetricsError> {
    confusion_at(pred, gt, None)
}

/// With `tau`, predictions below that confidence count as Background.
pub fn confusion_at(pred: &LabeledMask, gt: &LabeledMask, tau: Option<f64>) -> Result<PixelConfusion, MetricsError> {
    same_dims(pred, gt)?;
    let mut c = PixelConfusion::default();
    for i in 0..gt.classes.len() {
        let mut p = pred.classes[i];
        if tau.is_some_and(|t| dequantize_confidence(pred.confidence[i]) < t) {
            p = ClassId::Background;
        }
        let g = gt.classes[i];
        if p == g {
            c.tp[g.index()] += 1;
        } else {
            c.fp[p.index()] += 1;
            c.fn_[g.index()] += 1;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScore<T> {
    pub p: T,
    pub r: T,
    pub f1: T,
    /// Some ratio was 0/0 and was reported as 0.
    pub degenerate: bool,
}

pub fn score_counts<T: Scalar>(tp: u64, fp: u64, fn_: u64) -> ClassScore<T> {
    let frac = |num: u64, den: u64| if den == 0 { (T::zero(), true) } else { (T::ratio(num as i64, den as i64), false) };
    let (p, dp) = frac(tp, tp + fp);
    let (r, dr) = frac(tp, tp + fn_);
    let two = T::from_count(2);
    let (f1, df) = if p + r == T::zero() { (T::zero(), true) } else { (two * p * r / (p + r), false) };
    ClassScore { p, r, f1, degenerate: dp || dr || df }
}

pub fn scores<T: Scalar>(c: &PixelConfusion) -> [ClassScore<T>; 4] {
    [0, 1, 2, 3].map(|i| score_counts(c.tp[i], c.fp[i], c.fn_[i]))
}

/// 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApAr<T> {
    pub ap: T,
    pub ar: T,
}

/// Per-class mean precision and recall over the thresholds.
pub fn ap_ar<T: Scalar>(pred: &LabeledMask, gt: &LabeledMask, thresholds: &[f64]) -> Result<[ApAr<T>; 4], MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sums = [(T::zero(), T::zero()); 4];
    for &tau in thresholds {
        let s = scores::<T>(&confusion_at(pred, gt, Some(tau))?);
        for c in 0..4 {
            sums[c].0 = sums[c].0 + s[c].p;
            sums[c].1 = sums[c].1 + s[c].r;
        }
    }
    let n = T::from_count(thresholds.len() as u64);
    Ok(sums.map(|(p, r)| ApAr { ap: p / n, ar: r / n }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistStats<T> {
    pub n: usize,
    pub median: T,
    pub q1: T,
    pub q3: T,
    pub iqr: T,
}

/// Type-7 quantile `num/den` of sorted data: position (n-1)q, linear
/// interpolation between neighbours. Exact for rationals.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], num: u64, den: u64) -> T {
    let n = sorted.len() as u64;
    let pos_num = (n - 1) * num;
    let lo = (pos_num / den) as usize;
    let rem = pos_num % den;
    if rem == 0 || lo + 1 >= sorted.len() {
        return sorted[lo];
    }
    let frac = T::ratio(rem as i64, den as i64);
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

pub fn sort_values<T: Scalar>(samples: &[T]) -> Vec<T> {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v
}

pub fn median<T: Scalar>(samples: &[T]) -> Result<T, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(quantile_sorted(&sort_values(samples), 1, 2))
}

pub fn distribution_stats<T: Scalar>(samples: &[T]) -> Result<DistStats<T>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let s = sort_values(samples);
    let (q1, q3) = (quantile_sorted(&s, 1, 4), quantile_sorted(&s, 3, 4));
    Ok(DistStats { n: s.len(), median: quantile_sorted(&s, 1, 2), q1, q3, iqr: q3 - q1 })
}

/// KB/s for a frame rate and frame size in bytes.
pub fn throughput<T: Scalar>(fps: T, frame_bytes: T) -> T {
    fps * frame_bytes / T::from_count(1000)
}

/// Frames per second when each frame costs `t_seg + t_overhead` seconds.
pub fn cumulative_fps<T: Scalar>(t_seg: T, t_overhead: T) -> Result<T, MetricsError> {
    if !(t_seg > T::zero()) {
        return Err(MetricsError::NonPositive(format!("t_seg = {t_seg:?}")));
    }
    if t_overhead < T::zero() {
        return Err(MetricsError::NonPositive(format!("t_overhead = {t_overhead:?}")));
    }
    Ok(T::one() / (t_seg + t_overhead))
}

pub fn speedup<T: Scalar>(fps_a: T, fps_b: T) -> Result<T, MetricsError> {
    if !(fps_b > T::zero()) || fps_a < T::zero() {
        return Err(MetricsError::NonPositive(format!("speedup({fps_a:?}, {fps_b:?})")));
    }
    Ok(fps_a / fps_b)
}

pub const EDGE_CYCLE_S: (i64, i64) = (1033, 1000);
pub const ROBOT_PC_CYCLE_S: (i64, i64) = (4, 1);

pub fn picking_cycle_estimate<T: Scalar>(perception_cycles: u64, per_cycle_s: T, fixed_motion_s: T) -> T {
    T::from_count(perception_cycles) * per_cycle_s + fixed_motion_s
}

pub const RECORD_HEADER: &str = "frame_id,robot_id,protocol,network,model,platform,t_capture,t_sent,t_goal,t_seg_start,t_seg_end,t_result,t_map_done,bytes_up,bytes_down";

/// One frame through the pipeline. Failed frames leave the stages they
/// never reached empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub frame_id: u64,
    pub robot_id: u32,
    pub protocol: Protocol,
    pub network: String,
    pub model: ModelKind,
    pub platform: Platform,
    pub t_capture: Option<Nanos>,
    pub t_sent: Option<Nanos>,
    pub t_goal: Option<Nanos>,
    pub t_seg_start: Option<Nanos>,
    pub t_seg_end: Option<Nanos>,
    pub t_result: Option<Nanos>,
    pub t_map_done: Option<Nanos>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl ExperimentRecord {
    pub fn config_name(&self) -> String {
        config_name(self.protocol, &self.network, self.model, self.platform)
    }

    pub fn is_success(&self) -> bool {
        self.t_map_done.is_some()
    }

    pub fn stages(&self) -> [Option<Nanos>; 7] {
        [self.t_capture, self.t_sent, self.t_goal, self.t_seg_start, self.t_seg_end, self.t_result, self.t_map_done]
    }

    pub fn is_monotone(&self) -> bool {
        let s = self.stages();
        s.iter().all(Option::is_some) && s.windows(2).all(|w| w[0] <= w[1])
    }

    /// Segmentation-only time, seconds.
    pub fn seg_seconds(&self) -> Option<f64> {
        Some((self.t_seg_end? - self.t_seg_start?) as f64 / NANOS_PER_SEC as f64)
    }

    /// Capture to map, seconds.
    pub fn total_seconds(&self) -> Option<f64> {
        Some((self.t_map_done? - self.t_capture?) as f64 / NANOS_PER_SEC as f64)
    }

    /// Everything that is not segmentation, seconds.
    pub fn overhead_seconds(&self) -> Option<f64> {
        Some(self.total_seconds()? - self.seg_seconds()?)
    }
}

pub fn config_name(protocol: Protocol, network: &str, model: ModelKind, platform: Platform) -> String {
    format!("{protocol}_{network}_{model}_{platform}")
}

pub fn write_records<W: Write>(w: W, records: &[ExperimentRecord]) -> Result<(), MetricsError> {
    let mut wr = csv::WriterBuilder::new().has_headers(true).from_writer(w);
    if records.is_empty() {
        wr.write_record(RECORD_HEADER.split(','))?;
    }
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<ExperimentRecord>, MetricsError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RECORD_HEADER {
        return Err(MetricsError::Schema(header.join(",")));
    }
    rd.deserialize().map(|r| r.map_err(MetricsError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Rational;
    use proptest::prelude::*;

    fn mask(classes: &[ClassId], conf: &[u8], w: u16) -> LabeledMask {
        LabeledMask::new(w, (classes.len() / w as usize) as u16, classes.to_vec(), conf.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_two_by_two() {
        use ClassId::*;
        let gt = mask(&[Strawberry; 4], &[255; 4], 2);
        let pred = mask(&[Strawberry, Strawberry, Strawberry, Canopy], &[255; 4], 2);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp[0], c.fp[0], c.fn_[0]), (3, 0, 1));
        let s = scores::<Rational>(&c)[0];
        assert_eq!((s.p, s.r, s.f1), (Rational::new(1, 1), Rational::new(3, 4), Rational::new(6, 7)));
        assert!(!s.degenerate);
        let s64 = scores::<f64>(&c)[0];
        assert!((s64.f1 - 6.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_zero_counts() {
        let s = score_counts::<f64>(0, 0, 0);
        assert_eq!((s.p, s.r, s.f1, s.degenerate), (0.0, 0.0, 0.0, true));
    }

    #[test]
    fn disjoint_predictions_have_no_tp() {
        use ClassId::*;
        let gt = mask(&[Strawberry, Canopy, RigidObstacle, Background], &[255; 4], 4);
        let pred = mask(&[Canopy, RigidObstacle, Background, Strawberry], &[255; 4], 4);
        assert_eq!(confusion(&pred, &gt).unwrap().tp, [0; 4]);
    }

    #[test]
    fn three_pixel_ap_ar_by_hand() {
        use ClassId::*;
        // confidences 0.9, 0.6, 0.3 on three strawberry predictions
        let gt = mask(&[Strawberry, Strawberry, Canopy], &[255; 3], 3);
        let pred = mask(&[Strawberry, Strawberry, Strawberry], &[230, 153, 77], 3);
        let r = ap_ar::<Rational>(&pred, &gt, &[0.5, 0.8]).unwrap();
        // tau 0.5: pixels 1,2 kept -> p = 2/2, r = 2/2
        // tau 0.8: pixel 1 kept   -> p = 1/1, r = 1/2
        assert_eq!(r[0].ap, Rational::new(1, 1));
        assert_eq!(r[0].ar, Rational::new(3, 4));
        // Canopy is never predicted; its pixel is Background below tau
        assert_eq!(r[1].ap, Rational::new(0, 1));
        let single = ap_ar::<f64>(&pred, &gt, &[0.5]).unwrap();
        let s = scores::<f64>(&confusion_at(&pred, &gt, Some(0.5)).unwrap());
        assert_eq!((single[0].ap, single[0].ar), (s[0].p, s[0].r));
        assert!(ap_ar::<f64>(&pred, &gt, &[]).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let d = distribution_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((d.median, d.q1, d.q3, d.iqr), (3.0, 2.0, 4.0, 2.0));
        let r = distribution_stats(&[Rational::from(1), Rational::from(2), Rational::from(4), Rational::from(8)]).unwrap();
        assert_eq!(r.q1, Rational::new(7, 4));
        assert_eq!(r.median, Rational::from(3));
        assert_eq!(distribution_stats(&[7.0; 9]).unwrap().iqr, 0.0);
        let one = distribution_stats(&[4.5]).unwrap();
        assert_eq!((one.median, one.q1, one.q3), (4.5, 4.5, 4.5));
        assert!(distribution_stats::<f64>(&[]).is_err());
    }

    #[test]
    fn throughput_identities() {
        assert_eq!(throughput(Rational::from(30), Rational::from(80_000)), Rational::from(2400));
        assert_eq!(throughput(Rational::from(50), Rational::from(25_000)), Rational::from(1250));
        assert_eq!(throughput(30.0f64, 80_000.0), 2400.0);
        assert_eq!(throughput(0.0f64, 1e9), 0.0);
    }

    #[test]
    fn fps_and_speedup() {
        let fps = cumulative_fps(Rational::new(10, 122), Rational::from(0)).unwrap();
        assert_eq!(fps, Rational::new(122, 10));
        let f = cumulative_fps(0.0820f64, 0.0343).unwrap();
        assert!((f - 8.60).abs() < 0.005, "{f}");
        assert_eq!(speedup(3.0f64, 3.0).unwrap(), 1.0);
        assert!(cumulative_fps(0.0f64, 0.1).is_err());
        assert!(speedup(1.0f64, 0.0).is_err());
    }

    #[test]
    fn picking_cycles() {
        let edge = Rational::new(EDGE_CYCLE_S.0, EDGE_CYCLE_S.1);
        let t = picking_cycle_estimate(3, edge, Rational::from(0));
        assert_eq!(t, Rational::new(3099, 1000));
        assert!(t <= Rational::new(31, 10));
        assert_eq!(picking_cycle_estimate(3, Rational::from(4), Rational::from(0)), Rational::from(12));
        assert_eq!(picking_cycle_estimate(0, 1.0f64, 2.5), 2.5);
    }

    fn record(i: u64) -> ExperimentRecord {
        ExperimentRecord {
            frame_id: i,
            robot_id: 1,
            protocol: Protocol::MqttQos1,
            network: "5g".into(),
            model: ModelKind::Detectron2,
            platform: Platform::Edge,
            t_capture: Some(10),
            t_sent: Some(11),
            t_goal: Some(12),
            t_seg_start: Some(13),
            t_seg_end: Some(14),
            t_result: Some(15),
            t_map_done: if i % 2 == 0 { Some(16) } else { None },
            bytes_up: 80_000,
            bytes_down: 16_000,
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let recs: Vec<_> = (0..4).map(record).collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("{RECORD_HEADER}\n")));
        assert!(text.contains("1,1,mqtt-qos1,5g,detectron2,edge,10,11,12,13,14,15,,80000,16000"));
        assert_eq!(read_records(&buf[..]).unwrap(), recs);
        assert_eq!(recs[0].config_name(), "mqtt-qos1_5g_detectron2_edge");
        let mut empty = Vec::new();
        write_records(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), format!("{RECORD_HEADER}\n"));
        assert!(read_records("a,b\n1,2\n".as_bytes()).is_err());
    }

    fn arb_mask_pair() -> impl Strategy<Value = (LabeledMask, LabeledMask)> {
        (1u16..8, 1u16..8).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (proptest::collection::vec(0u8..4, n), proptest::collection::vec(0u8..4, n), proptest::collection::vec(any::<u8>(), n))
                .prop_map(move |(a, b, q)| {
                    let cls = |v: Vec<u8>| v.into_iter().map(|x| ClassId::from_byte(x).unwrap()).collect::<Vec<_>>();
                    (LabeledMask::new(w, h, cls(a), q).unwrap(), LabeledMask::new(w, h, cls(b), vec![255; n]).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn score_bounds((pred, gt) in arb_mask_pair(), tau in 0.0f64..1.0) {
            let c = confusion_at(&pred, &gt, Some(tau)).unwrap();
            prop_assert_eq!(c.total(), gt.len() as u64);
            for s in scores::<f64>(&c) {
                for v in [s.p, s.r, s.f1] { prop_assert!((0.0..=1.0).contains(&v)); }
                prop_assert!(s.f1 <= s.p.max(s.r) + 1e-12);
            }
        }

        #[test]
        fn equal_p_r_gives_f1_p(tp in 1u64..1000, k in 0u64..1000) {
            let s = score_counts::<Rational>(tp, k, k);
            prop_assert_eq!(s.f1, s.p);
        }

        #[test]
        fn fps_decreasing(a in 0.001f64..2.0, b in 0.0f64..2.0, d in 0.001f64..1.0) {
            let base = cumulative_fps(a, b).unwrap();
            prop_assert!(cumulative_fps(a + d, b).unwrap() < base);
            prop_assert!(cumulative_fps(a, b + d).unwrap() < base);
        }

        #[test]
        fn speedup_inverse(a in 1i64..10_000, b in 1i64..10_000) {
            let (x, y) = (Rational::from(a), Rational::from(b));
            prop_assert_eq!(speedup(x, y).unwrap() * speedup(y, x).unwrap(), Rational::from(1));
        }

        #[test]
        fn quantiles_ordered(v in proptest::collection::vec(-1e6f64..1e6, 1..60)) {
            let d = distribution_stats(&v).unwrap();
            prop_assert!(d.q1 <= d.median && d.median <= d.q3 && d.iqr >= 0.0);
        }
    }
}
