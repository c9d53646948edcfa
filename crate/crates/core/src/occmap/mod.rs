//! Labelled depth to per-class point clouds, strawberry instances and the
//! two planning octrees.

mod octree;

use thiserror::Error;

use crate::scalar::Real;
use crate::types::{CameraIntrinsics, ClassId, LabeledMask};

pub use octree::{HitTag, InsertStats, Occupancy, OctreeMap, OctreeParams, Voxel, VoxelKey, DEFAULT_TREE_DEPTH};

pub const DEFAULT_MIN_AREA: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OccmapError {
    #[error("dimension mismatch: mask {mask:?}, depth {depth} px, intrinsics {intrinsics:?}")]
    Dimensions { mask: (u16, u16), depth: usize, intrinsics: (u16, u16) },
}

/// Points of one class in the camera frame, metres.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    pub class: ClassId,
    pub points: Vec<[T; 3]>,
    /// Pixel index each point came from.
    pub pixels: Vec<u32>,
}

impl<T> PointCloud<T> {
    pub fn new(class: ClassId) -> Self {
        PointCloud { class, points: Vec::new(), pixels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_dims(mask: &LabeledMask, depth: &[u16], k: &CameraIntrinsics) -> Result<(), OccmapError> {
    let n = k.width as usize * k.height as usize;
    if (mask.width, mask.height) != (k.width, k.height) || depth.len() != n || mask.classes.len() != n {
        return Err(OccmapError::Dimensions { mask: (mask.width, mask.height), depth: depth.len(), intrinsics: (k.width, k.height) });
    }
    Ok(())
}

/// Pinhole back-projection of one pixel with depth in millimetres.
pub fn back_project<T: Real>(u: usize, v: usize, depth_mm: u16, k: &CameraIntrinsics) -> [T; 3] {
    let f = T::from_f64_lossy;
    let z = T::from_u16(depth_mm).unwrap() / f(1000.0);
    let x = (T::from_usize(u).unwrap() - f(k.cx)) * z / f(k.fx);
    let y = (T::from_usize(v).unwrap() - f(k.cy)) * z / f(k.fy);
    [x, y, z]
}

/// One cloud per class in `ClassId::ALL` order; zero depth is skipped.
/// `stride` > 1 keeps every stride-th pixel in each direction.
pub fn project_depth<T: Real>(
    mask: &LabeledMask,
    depth: &[u16],
    k: &CameraIntrinsics,
    stride: usize,
) -> Result<[PointCloud<T>; 4], OccmapError> {
    check_dims(mask, depth, k)?;
    let stride = stride.max(1);
    let mut clouds = ClassId::ALL.map(PointCloud::new);
    let w = k.width as usize;
    for v in (0..k.height as usize).step_by(stride) {
        for u in (0..w).step_by(stride) {
            let i = v * w + u;
            let d = depth[i];
            if d == 0 {
                continue;
            }
            let cloud = &mut clouds[mask.classes[i].index()];
            cloud.points.push(back_project(u, v, d, k));
            cloud.pixels.push(i as u32);
        }
    }
    Ok(clouds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrawberryInstance {
    pub instance_id: usize,
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<u32>,
    /// (u, v) mean.
    pub centroid: (f64, f64),
    pub area: usize,
    pub is_target: bool,
}

/// 8-connected strawberry components of at least `min_area` pixels. The
/// target is the one whose centroid is closest to the image centre; ties go
/// to the larger area, then the lower id.
pub fn extract_instances(mask: &LabeledMask, min_area: usize) -> Vec<StrawberryInstance> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut seen = vec![false; w * h];
    let mut out: Vec<StrawberryInstance> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || mask.classes[start] != ClassId::Strawberry {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i as u32);
            let (u, v) = ((i % w) as i64, (i / w) as i64);
            for dv in -1..=1 {
                for du in -1..=1 {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                        continue;
                    }
                    let j = nv as usize * w + nu as usize;
                    if !seen[j] && mask.classes[j] == ClassId::Strawberry {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let su: f64 = pixels.iter().map(|&p| (p as usize % w) as f64).sum();
        let sv: f64 = pixels.iter().map(|&p| (p as usize / w) as f64).sum();
        out.push(StrawberryInstance {
            instance_id: out.len(),
            area: pixels.len(),
            centroid: (su / n, sv / n),
            pixels,
            is_target: false,
        });
    }
    let (cu, cv) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let dist = |s: &StrawberryInstance| (s.centroid.0 - cu).powi(2) + (s.centroid.1 - cv).powi(2);
    let target = out
        .iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)).then(b.area.cmp(&a.area)).then(a.instance_id.cmp(&b.instance_id)))
        .map(|s| s.instance_id);
    if let Some(t) = target {
        out[t].is_target = true;
    }
    out
}

#[derive(Debug, Clone)]
pub struct PlanningMaps<T> {
    /// Rigid obstacles, plus canopy voxels flagged soft.
    pub obstacles: OctreeMap<T>,
    /// Target strawberry only.
    pub strawberry: OctreeMap<T>,
    pub obstacle_stats: InsertStats,
    pub strawberry_stats: InsertStats,
}

/// Builds both maps from a labelled depth image seen from the camera
/// origin. Non-target strawberry points go into neither map.
pub fn build_planning_maps<T: Real>(
    mask: &LabeledMask,
    depth: &[u16],
    k: &CameraIntrinsics,
    target: Option<&StrawberryInstance>,
    resolution: T,
    stride: usize,
) -> Result<PlanningMaps<T>, OccmapError> {
    let [straw, canopy, rigid, _background] = project_depth::<T>(mask, depth, k, stride)?;
    let origin = [T::zero(); 3];

    let mut obstacle_points: Vec<([T; 3], HitTag)> = rigid.points.iter().map(|p| (*p, HitTag::Rigid)).collect();
    obstacle_points.extend(canopy.points.iter().map(|p| (*p, HitTag::Soft)));
    let mut obstacles = OctreeMap::new(resolution);
    let obstacle_stats = obstacles.insert_points(origin, &obstacle_points);

    let mut strawberry = OctreeMap::new(resolution);
    let mut strawberry_stats = InsertStats::default();
    if let Some(t) = target {
        let target_points: Vec<([T; 3], HitTag)> = straw
            .points
            .iter()
            .zip(&straw.pixels)
            .filter(|(_, px)| t.pixels.binary_search(px).is_ok())
            .map(|(p, _)| (*p, HitTag::Soft))
            .collect();
        strawberry_stats = strawberry.insert_points(origin, &target_points);
    }
    Ok(PlanningMaps { obstacles, strawberry, obstacle_stats, strawberry_stats })
}
