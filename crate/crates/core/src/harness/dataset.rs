//! Synthetic RGB-D scenes with exact ground-truth masks, and their on-disk
//! layout: `DIR/intrinsics.json` plus `DIR/test/NNNNNN.{rgb,depth,mask}`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::codec::{decode_mask, encode_frame, encode_mask, frame_from_envelopes, Channel, Encoding};
use crate::perception::palette_color;
use crate::types::{CameraIntrinsics, ClassId, Frame, LabeledMask};

pub const SPLIT: &str = "test";
pub const MAX_ROUNDS: usize = 100;
const ATTEMPTS_PER_CLASS: usize = 400;

/// Scene generator parameters. Class-indexed arrays follow [`ClassId::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: u16,
    pub height: u16,
    pub hfov_deg: f64,
    /// Target pixel share per class, percent.
    pub abundance: [f64; 4],
    /// Allowed per-scene deviation from the target, percentage points.
    pub tolerance: [f64; 4],
    /// Per-scene target jitter, percentage points. Must stay below `tolerance`.
    pub jitter: [f64; 4],
    /// Strawberry semi-axis range as a fraction of the image width.
    pub strawberry_axis: (f64, f64),
    /// Canopy blob radius range as a fraction of the image width.
    pub canopy_radius: (f64, f64),
    /// Depth range per class, millimetres.
    pub depth_mm: [(u16, u16); 4],
    pub unripe_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 848,
            height: 480,
            hfov_deg: 87.0,
            abundance: [2.2, 33.3, 35.9, 28.7],
            tolerance: [1.0, 1.5, 1.5, 1.5],
            jitter: [0.3, 0.5, 0.5, 0.0],
            strawberry_axis: (0.012, 0.03),
            canopy_radius: (0.04, 0.1),
            depth_mm: [(400, 600), (550, 900), (900, 1600), (2500, 4000)],
            unripe_fraction: 0.3,
            noise_sigma: 8.0,
        }
    }
}

impl SceneSpec {
    pub fn with_size(width: u16, height: u16) -> Self {
        SceneSpec { width, height, ..Default::default() }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.width, self.height, self.hfov_deg)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let sum: f64 = self.abundance.iter().sum();
        if self.width == 0 || self.height == 0 {
            return Err(HarnessError::Config("image size must be non-zero".into()));
        }
        // published shares are rounded; background takes the remainder anyway
        if (sum - 100.0).abs() > 0.5 {
            return Err(HarnessError::Config(format!("abundance targets sum to {sum}, not 100")));
        }
        if (0..4).any(|i| self.jitter[i] >= self.tolerance[i] && self.tolerance[i] > 0.0) {
            return Err(HarnessError::Config("jitter must be below tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub frame: Frame,
    pub mask: LabeledMask,
}

impl Scene {
    /// Pixel share per class, percent.
    pub fn abundance(&self) -> [f64; 4] {
        let n = self.mask.len() as f64;
        self.mask.class_counts().map(|c| 100.0 * c as f64 / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn mean_abundance(&self) -> [f64; 4] {
        let mut m = [0.0; 4];
        for s in &self.scenes {
            for (acc, a) in m.iter_mut().zip(s.abundance()) {
                *acc += a;
            }
        }
        m.map(|v| v / self.scenes.len().max(1) as f64)
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let intrinsics: CameraIntrinsics = serde_json::from_str(&fs::read_to_string(dir.join("intrinsics.json"))?)?;
        let mut ids: Vec<u64> = fs::read_dir(dir.join(SPLIT))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "mask").then(|| p.file_stem()?.to_str()?.parse().ok())?
            })
            .collect();
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(HarnessError::Dataset(format!("no scenes under {}", dir.join(SPLIT).display())));
        }
        let mut scenes = Vec::with_capacity(ids.len());
        for id in ids {
            let rgb = fs::read(scene_path(dir, id, "rgb"))?;
            let depth = fs::read(scene_path(dir, id, "depth"))?;
            let mask = fs::read(scene_path(dir, id, "mask"))?;
            let frame = frame_from_envelopes(&rgb, &depth, intrinsics)?;
            let (_, mask) = decode_mask(&mask)?;
            if (mask.width, mask.height) != (intrinsics.width, intrinsics.height) {
                return Err(HarnessError::Dataset(format!("scene {id}: mask size differs from intrinsics")));
            }
            scenes.push(Scene { id, frame, mask });
        }
        Ok(Dataset { intrinsics, scenes })
    }

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir.join(SPLIT))?;
        fs::write(dir.join("intrinsics.json"), serde_json::to_string_pretty(&self.intrinsics)?)?;
        for s in &self.scenes {
            fs::write(scene_path(dir, s.id, "rgb"), encode_frame(&s.frame, Channel::Rgb, Encoding::Raw)?)?;
            fs::write(scene_path(dir, s.id, "depth"), encode_frame(&s.frame, Channel::Depth, Encoding::Raw)?)?;
            fs::write(scene_path(dir, s.id, "mask"), encode_mask(&s.mask, s.id, s.frame.capture_ts, Encoding::Rle)?)?;
        }
        Ok(())
    }
}

fn scene_path(dir: &Path, id: u64, ext: &str) -> PathBuf {
    dir.join(SPLIT).join(format!("{id:06}.{ext}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub count: usize,
    pub width: u16,
    pub height: u16,
    pub seed: u64,
    /// Dataset mean pixel share per class, percent, keyed by class name.
    pub mean_abundance: Vec<(String, f64)>,
}

/// Generates `count` scenes in memory.
pub fn generate(spec: &SceneSpec, count: usize, seed: u64) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let k = spec.intrinsics();
    let scenes = (0..count as u64)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            generate_scene(spec, &k, id, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { intrinsics: k, scenes })
}

/// Generates and writes a dataset; returns its class statistics.
pub fn gen_dataset(spec: &SceneSpec, count: usize, seed: u64, out: &Path) -> Result<GenSummary, HarnessError> {
    let ds = generate(spec, count, seed)?;
    ds.save(out)?;
    let mean = ds.mean_abundance();
    Ok(GenSummary {
        count,
        width: spec.width,
        height: spec.height,
        seed,
        mean_abundance: ClassId::ALL.iter().map(|c| (c.name().to_string(), mean[c.index()])).collect(),
    })
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cu: f64, cv: f64, a: f64, b: f64 },
    Rect { u0: f64, v0: f64, u1: f64, v1: f64 },
    /// Union of circles.
    Blob { circles: [(f64, f64, f64); 4] },
}

impl Shape {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cu, cv, a, b } => (cu - a, cv - b, cu + a, cv + b),
            Shape::Rect { u0, v0, u1, v1 } => (u0, v0, u1, v1),
            Shape::Blob { circles } => circles.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |acc, &(u, v, r)| {
                (acc.0.min(u - r), acc.1.min(v - r), acc.2.max(u + r), acc.3.max(v + r))
            }),
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Ellipse { cu, cv, a, b } => ((u - cu) / a).powi(2) + ((v - cv) / b).powi(2) <= 1.0,
            Shape::Rect { u0, v0, u1, v1 } => u >= u0 && u < u1 && v >= v0 && v < v1,
            Shape::Blob { circles } => circles.iter().any(|&(cu, cv, r)| (u - cu).powi(2) + (v - cv).powi(2) <= r * r),
        }
    }

    fn scaled(&self, s: f64) -> Shape {
        match *self {
            Shape::Ellipse { cu, cv, a, b } => Shape::Ellipse { cu, cv, a: a * s, b: b * s },
            Shape::Rect { u0, v0, u1, v1 } => {
                let (cu, cv) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
                let (hw, hh) = ((u1 - u0) * s / 2.0, (v1 - v0) * s / 2.0);
                Shape::Rect { u0: cu - hw, v0: cv - hh, u1: cu + hw, v1: cv + hh }
            }
            Shape::Blob { circles } => Shape::Blob { circles: circles.map(|(u, v, r)| (u, v, r * s)) },
        }
    }

    /// Unclaimed pixel indices covered by the shape.
    fn free_pixels(&self, owner: &[Option<u32>], w: usize, h: usize) -> Vec<usize> {
        let (u0, v0, u1, v1) = self.bbox();
        let clampu = |x: f64| (x.floor().max(0.0) as usize).min(w);
        let clampv = |x: f64| (x.floor().max(0.0) as usize).min(h);
        let mut out = Vec::new();
        for v in clampv(v0)..clampv(v1 + 1.0) {
            for u in clampu(u0)..clampu(u1 + 1.0) {
                let i = v * w + u;
                if owner[i].is_none() && self.contains(u as f64 + 0.5, v as f64 + 0.5) {
                    out.push(i);
                }
            }
        }
        out
    }
}

fn random_shape(spec: &SceneSpec, class: ClassId, rng: &mut ChaCha8Rng) -> Shape {
    let (w, h) = (spec.width as f64, spec.height as f64);
    match class {
        ClassId::Strawberry => {
            let a = rng.random_range(spec.strawberry_axis.0..=spec.strawberry_axis.1) * w;
            let b = a * rng.random_range(1.1..=1.4);
            Shape::Ellipse { cu: rng.random_range(0.0..w), cv: rng.random_range(0.0..h), a: a.max(1.5), b: b.max(2.0) }
        }
        ClassId::Canopy => {
            let (cu, cv) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
            let mut circles = [(0.0, 0.0, 0.0); 4];
            for c in circles.iter_mut() {
                let r = rng.random_range(spec.canopy_radius.0..=spec.canopy_radius.1) * w;
                *c = (cu + rng.random_range(-r..=r), cv + rng.random_range(-r..=r), r.max(1.5));
            }
            Shape::Blob { circles }
        }
        _ => {
            // horizontal rails and gutters, or vertical posts
            let (rw, rh) = if rng.random_bool(0.6) {
                (rng.random_range(0.3..=1.0) * w, rng.random_range(0.05..=0.2) * h)
            } else {
                (rng.random_range(0.03..=0.1) * w, rng.random_range(0.4..=1.0) * h)
            };
            let (u0, v0) = (rng.random_range(-0.1 * w..w), rng.random_range(-0.1 * h..h));
            Shape::Rect { u0, v0, u1: u0 + rw.max(2.0), v1: v0 + rh.max(2.0) }
        }
    }
}

struct Placed {
    class: ClassId,
    color: [u8; 3],
    depth: u16,
}

const UNRIPE: [u8; 3] = [215, 205, 140];

fn generate_scene(spec: &SceneSpec, k: &CameraIntrinsics, id: u64, rng: &mut ChaCha8Rng) -> Result<Scene, HarnessError> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let n = w * h;
    for _round in 0..MAX_ROUNDS {
        let mut owner: Vec<Option<u32>> = vec![None; n];
        let mut placed: Vec<Placed> = Vec::new();
        let mut ok = true;
        // nearest class first; each later shape only claims pixels still free
        for class in [ClassId::Strawberry, ClassId::Canopy, ClassId::RigidObstacle] {
            let ci = class.index();
            let target = (spec.abundance[ci] + rng.random_range(-spec.jitter[ci]..=spec.jitter[ci])) / 100.0 * n as f64;
            let slack = (spec.tolerance[ci] - spec.jitter[ci]) / 100.0 * n as f64 * 0.5;
            let mut have = 0usize;
            for _ in 0..ATTEMPTS_PER_CLASS {
                if have as f64 >= target - slack {
                    break;
                }
                let base = random_shape(spec, class, rng);
                let mut chosen = None;
                let mut s = 1.0;
                for _ in 0..5 {
                    let px = base.scaled(s).free_pixels(&owner, w, h);
                    if !px.is_empty() && (have + px.len()) as f64 <= target + slack {
                        chosen = Some(px);
                        break;
                    }
                    s *= 0.6;
                }
                let Some(px) = chosen else { continue };
                let color = if class == ClassId::Strawberry && rng.random_bool(spec.unripe_fraction) {
                    UNRIPE
                } else {
                    let tint: i16 = rng.random_range(-10..=10);
                    palette_color(class).map(|c| (c as i16 + tint).clamp(0, 255) as u8)
                };
                let (d0, d1) = spec.depth_mm[ci];
                let shape_id = placed.len() as u32;
                placed.push(Placed { class, color, depth: rng.random_range(d0..=d1) });
                have += px.len();
                for i in px {
                    owner[i] = Some(shape_id);
                }
            }
            if (have as f64 - target).abs() > slack.max(0.5) {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let (d0, d1) = spec.depth_mm[ClassId::Background.index()];
        let bg = Placed { class: ClassId::Background, color: palette_color(ClassId::Background), depth: rng.random_range(d0..=d1) };
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut rgb = Vec::with_capacity(n * 3);
        let mut depth = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        for o in &owner {
            let p = o.map(|i| &placed[i as usize]).unwrap_or(&bg);
            for c in p.color {
                rgb.push((c as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8);
            }
            depth.push(p.depth);
            classes.push(p.class);
        }
        let mask = LabeledMask::new(spec.width, spec.height, classes, vec![255; n])?;
        let frame = Frame::new(id, 0, rgb, depth, *k)?;
        let scene = Scene { id, frame, mask };
        let ab = scene.abundance();
        if (0..4).all(|i| (ab[i] - spec.abundance[i]).abs() <= spec.tolerance[i]) {
            return Ok(scene);
        }
    }
    Err(HarnessError::Unsatisfiable(format!("scene {id}: abundance targets not met after {MAX_ROUNDS} rounds")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abundance_within_tolerance_per_scene() {
        let spec = SceneSpec::with_size(160, 96);
        let ds = generate(&spec, 12, 3).unwrap();
        for s in &ds.scenes {
            let a = s.abundance();
            for i in 0..4 {
                assert!((a[i] - spec.abundance[i]).abs() <= spec.tolerance[i], "scene {}: {:?}", s.id, a);
            }
        }
    }

    #[test]
    fn unreachable_targets_are_reported() {
        let spec = SceneSpec {
            abundance: [90.0, 5.0, 5.0, 0.0],
            tolerance: [1.0, 1.5, 1.5, 1.5],
            strawberry_axis: (0.0, 0.0),
            ..SceneSpec::with_size(128, 96)
        };
        assert!(matches!(generate(&spec, 1, 0), Err(HarnessError::Unsatisfiable(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let ds = generate(&SceneSpec::with_size(64, 40), 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
