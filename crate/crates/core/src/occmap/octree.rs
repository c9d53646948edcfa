use std::fmt::Write as _;

use crate::scalar::Real;

pub const DEFAULT_TREE_DEPTH: u32 = 16;

/// Integer voxel coordinates, `0..2^depth` per axis.
pub type VoxelKey = [u32; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OctreeParams<T> {
    pub l_hit: T,
    pub l_miss: T,
    pub clamp_min: T,
    pub clamp_max: T,
    /// Occupancy probability threshold.
    pub threshold: T,
}

impl<T: Real> Default for OctreeParams<T> {
    fn default() -> Self {
        let f = T::from_f64_lossy;
        OctreeParams { l_hit: f(0.85), l_miss: f(-0.4), clamp_min: f(-2.0), clamp_max: f(3.5), threshold: f(0.5) }
    }
}

impl<T: Real> OctreeParams<T> {
    pub fn clamp(&self, l: T) -> T {
        l.max(self.clamp_min).min(self.clamp_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occupancy {
    Occupied,
    Free,
    Unknown,
}

/// Where a hit came from; obstacle maps keep canopy hits flagged soft.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitTag {
    Rigid,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel<T> {
    pub log_odds: T,
    pub rigid_hits: u32,
    pub soft_hits: u32,
}

impl<T: Real> Voxel<T> {
    pub fn probability(&self) -> T {
        T::one() / (T::one() + (-self.log_odds).exp())
    }

    /// Hit only by soft points.
    pub fn is_soft(&self) -> bool {
        self.soft_hits > 0 && self.rigid_hits == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertStats {
    pub points: usize,
    pub skipped_outside: usize,
    pub hit_voxels: usize,
    pub free_voxels: usize,
}

#[derive(Debug, Clone)]
struct Node<T> {
    children: [u32; 8],
    voxel: Option<Voxel<T>>,
}

impl<T> Node<T> {
    fn empty() -> Self {
        Node { children: [0; 8], voxel: None }
    }
}

/// Log-odds occupancy octree over a cube of side `resolution * 2^depth`
/// centred on the origin. Leaves live at full depth; nodes sit in an arena
/// and index 0 is the root.
#[derive(Debug, Clone)]
pub struct OctreeMap<T> {
    resolution: T,
    depth: u32,
    params: OctreeParams<T>,
    nodes: Vec<Node<T>>,
    leaves: usize,
    skipped: usize,
}

impl<T: Real> OctreeMap<T> {
    pub fn new(resolution: T) -> Self {
        Self::with_params(resolution, DEFAULT_TREE_DEPTH, OctreeParams::default())
    }

    pub fn with_params(resolution: T, depth: u32, params: OctreeParams<T>) -> Self {
        assert!(resolution > T::zero(), "resolution must be positive");
        assert!((1..=21).contains(&depth), "tree depth must be in 1..=21");
        OctreeMap { resolution, depth, params, nodes: vec![Node::empty()], leaves: 0, skipped: 0 }
    }

    pub fn resolution(&self) -> T {
        self.resolution
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn params(&self) -> &OctreeParams<T> {
        &self.params
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    /// Points skipped so far because they fell outside the root cube.
    pub fn skipped_points(&self) -> usize {
        self.skipped
    }

    fn half(&self) -> i64 {
        1i64 << (self.depth - 1)
    }

    pub fn key_of(&self, p: [T; 3]) -> Option<VoxelKey> {
        let mut k = [0u32; 3];
        let size = 1i64 << self.depth;
        for i in 0..3 {
            let c = (p[i] / self.resolution).floor().to_i64()?;
            let idx = c.checked_add(self.half())?;
            if !(0..size).contains(&idx) {
                return None;
            }
            k[i] = idx as u32;
        }
        Some(k)
    }

    pub fn center_of(&self, k: VoxelKey) -> [T; 3] {
        let half = self.half();
        let h = T::from_f64_lossy(0.5);
        k.map(|c| (T::from_i64(c as i64 - half).unwrap() + h) * self.resolution)
    }

    fn child_slot(&self, k: VoxelKey, level: u32) -> usize {
        let bit = self.depth - 1 - level;
        (((k[0] >> bit) & 1) | (((k[1] >> bit) & 1) << 1) | (((k[2] >> bit) & 1) << 2)) as usize
    }

    fn find(&self, k: VoxelKey) -> Option<&Voxel<T>> {
        let mut node = 0usize;
        for level in 0..self.depth {
            let c = self.nodes[node].children[self.child_slot(k, level)];
            if c == 0 {
                return None;
            }
            node = c as usize;
        }
        self.nodes[node].voxel.as_ref()
    }

    fn leaf_mut(&mut self, k: VoxelKey) -> &mut Voxel<T> {
        let mut node = 0usize;
        for level in 0..self.depth {
            let slot = self.child_slot(k, level);
            let c = self.nodes[node].children[slot];
            node = if c == 0 {
                self.nodes.push(Node::empty());
                let idx = self.nodes.len() - 1;
                self.nodes[node].children[slot] = idx as u32;
                idx
            } else {
                c as usize
            };
        }
        let leaves = &mut self.leaves;
        self.nodes[node].voxel.get_or_insert_with(|| {
            *leaves += 1;
            Voxel { log_odds: T::zero(), rigid_hits: 0, soft_hits: 0 }
        })
    }

    pub fn voxel(&self, k: VoxelKey) -> Option<Voxel<T>> {
        self.find(k).copied()
    }

    pub fn log_odds(&self, p: [T; 3]) -> Option<T> {
        self.find(self.key_of(p)?).map(|v| v.log_odds)
    }

    pub fn state_of(&self, k: VoxelKey) -> Occupancy {
        match self.find(k) {
            None => Occupancy::Unknown,
            Some(v) if v.probability() > self.params.threshold => Occupancy::Occupied,
            Some(_) => Occupancy::Free,
        }
    }

    pub fn query(&self, p: [T; 3]) -> Occupancy {
        self.key_of(p).map_or(Occupancy::Unknown, |k| self.state_of(k))
    }

    /// Applies one log-odds update to a voxel, creating it if needed.
    pub fn update(&mut self, k: VoxelKey, hit: Option<HitTag>) {
        let params = self.params;
        let v = self.leaf_mut(k);
        match hit {
            Some(tag) => {
                v.log_odds = params.clamp(v.log_odds + params.l_hit);
                match tag {
                    HitTag::Rigid => v.rigid_hits += 1,
                    HitTag::Soft => v.soft_hits += 1,
                }
            }
            None => v.log_odds = params.clamp(v.log_odds + params.l_miss),
        }
    }

    /// Voxels crossed by the segment `origin -> end`, in order, excluding
    /// the voxel containing `end`. `None` if either end is outside the map.
    pub fn ray_keys(&self, origin: [T; 3], end: [T; 3]) -> Option<Vec<VoxelKey>> {
        let start = self.key_of(origin)?;
        let stop = self.key_of(end)?;
        let mut out = Vec::new();
        if start == stop {
            return Some(out);
        }
        let dir: [T; 3] = [end[0] - origin[0], end[1] - origin[1], end[2] - origin[2]];
        let length = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let half_res = self.resolution * T::from_f64_lossy(0.5);
        let center = self.center_of(start);
        let mut step = [0i64; 3];
        let mut t_max = [T::infinity(); 3];
        let mut t_delta = [T::infinity(); 3];
        for i in 0..3 {
            let d = dir[i] / length;
            if d > T::zero() {
                step[i] = 1;
            } else if d < T::zero() {
                step[i] = -1;
            }
            if step[i] != 0 {
                let border = center[i] + T::from_i64(step[i]).unwrap() * half_res;
                t_max[i] = (border - origin[i]) / d;
                t_delta[i] = self.resolution / d.abs();
            }
        }
        let mut cur = start.map(|c| c as i64);
        let goal = stop.map(|c| c as i64);
        let budget: i64 = (0..3).map(|i| (goal[i] - cur[i]).abs()).sum();
        for _ in 0..budget {
            out.push(cur.map(|c| c as u32));
            let mut axis = 0;
            for i in 1..3 {
                if t_max[i] < t_max[axis] {
                    axis = i;
                }
            }
            cur[axis] += step[axis];
            t_max[axis] = t_max[axis] + t_delta[axis];
            if cur == goal {
                return Some(out);
            }
        }
        // Rounding walked us past the end voxel: trust the part we have.
        Some(out)
    }

    /// Integrates tagged points seen from `origin`. Within one call every
    /// voxel gets at most one update: endpoints a hit, other traversed
    /// voxels a miss. A voxel both hit and traversed counts as hit.
    pub fn insert_points(&mut self, origin: [T; 3], points: &[([T; 3], HitTag)]) -> InsertStats {
        use std::collections::BTreeMap;
        let mut stats = InsertStats { points: points.len(), ..Default::default() };
        let mut hits: BTreeMap<VoxelKey, HitTag> = BTreeMap::new();
        let mut free: std::collections::BTreeSet<VoxelKey> = Default::default();
        for &(p, tag) in points {
            let finite = p.iter().all(|c| c.is_finite());
            let (Some(end), Some(ray)) = (finite.then(|| self.key_of(p)).flatten(), self.ray_keys(origin, p)) else {
                stats.skipped_outside += 1;
                continue;
            };
            // Rigid wins when both kinds land in one voxel.
            let e = hits.entry(end).or_insert(tag);
            if tag == HitTag::Rigid {
                *e = HitTag::Rigid;
            }
            free.extend(ray);
        }
        for k in &free {
            if !hits.contains_key(k) {
                self.update(*k, None);
                stats.free_voxels += 1;
            }
        }
        for (k, tag) in &hits {
            self.update(*k, Some(*tag));
        }
        stats.hit_voxels = hits.len();
        self.skipped += stats.skipped_outside;
        stats
    }

    pub fn insert_cloud(&mut self, origin: [T; 3], points: &[[T; 3]]) -> InsertStats {
        let tagged: Vec<_> = points.iter().map(|p| (*p, HitTag::Rigid)).collect();
        self.insert_points(origin, &tagged)
    }

    /// All stored voxels in key order.
    pub fn leaves(&self) -> Vec<(VoxelKey, Voxel<T>)> {
        let mut out = Vec::with_capacity(self.leaves);
        self.collect(0, 0, [0; 3], &mut out);
        out.sort_by_key(|(k, _)| *k);
        out
    }

    fn collect(&self, node: usize, level: u32, prefix: VoxelKey, out: &mut Vec<(VoxelKey, Voxel<T>)>) {
        if level == self.depth {
            if let Some(v) = self.nodes[node].voxel {
                out.push((prefix, v));
            }
            return;
        }
        for (slot, &c) in self.nodes[node].children.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let mut k = prefix;
            for (axis, kk) in k.iter_mut().enumerate() {
                *kk = (*kk << 1) | ((slot as u32 >> axis) & 1);
            }
            self.collect(c as usize, level + 1, k, out);
        }
    }

    pub fn occupied_keys(&self) -> Vec<VoxelKey> {
        self.leaves().into_iter().filter(|(k, _)| self.state_of(*k) == Occupancy::Occupied).map(|(k, _)| k).collect()
    }

    /// One `x y z log_odds` line per leaf, voxel centres, 6 decimals,
    /// ordered by (x, y, z).
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        let mut leaves = self.leaves();
        leaves.sort_by_key(|(k, _)| [k[0], k[1], k[2]]);
        for (k, v) in leaves {
            let c = self.center_of(k);
            let _ = writeln!(
                out,
                "{:.6} {:.6} {:.6} {:.6}",
                c[0].as_f64(),
                c[1].as_f64(),
                c[2].as_f64(),
                v.log_odds.as_f64()
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_map_is_unknown() {
        let m = OctreeMap::<f64>::new(0.1);
        assert_eq!(m.query([0.3, -1.0, 2.0]), Occupancy::Unknown);
        assert!(m.is_empty());
    }

    #[test]
    fn single_point_insert() {
        let mut m = OctreeMap::<f64>::new(0.1);
        m.insert_cloud([0.05, 0.05, 0.05], &[[0.05, 0.05, 0.55]]);
        assert_eq!(m.log_odds([0.05, 0.05, 0.55]), Some(0.85));
        assert_eq!(m.query([0.05, 0.05, 0.55]), Occupancy::Occupied);
        for z in 0..5 {
            let p = [0.05, 0.05, 0.05 + 0.1 * z as f64];
            assert_eq!(m.log_odds(p), Some(-0.4));
            assert_eq!(m.query(p), Occupancy::Free);
        }
        assert_eq!(m.leaf_count(), 6);
        assert_eq!(m.query([0.15, 0.05, 0.55]), Occupancy::Unknown);
    }

    #[test]
    fn repeated_hits_clamp() {
        let mut m = OctreeMap::<f64>::new(0.1);
        for _ in 0..5 {
            m.insert_cloud([0.0; 3], &[[0.0, 0.0, 1.0]]);
        }
        assert_eq!(m.log_odds([0.0, 0.0, 1.0]), Some(3.5));
    }

    #[test]
    fn hit_then_three_misses_is_free() {
        let mut m = OctreeMap::<f64>::new(0.1);
        let k = m.key_of([0.0, 0.0, 1.0]).unwrap();
        m.update(k, Some(HitTag::Rigid));
        assert_eq!(m.state_of(k), Occupancy::Occupied);
        for _ in 0..3 {
            m.update(k, None);
        }
        let l = m.voxel(k).unwrap().log_odds;
        assert!((l + 0.35).abs() < 1e-12);
        assert_eq!(m.state_of(k), Occupancy::Free);
    }

    #[test]
    fn outside_points_are_counted() {
        let mut m = OctreeMap::<f64>::with_params(0.1, 4, OctreeParams::default());
        let s = m.insert_cloud([0.0; 3], &[[5.0, 0.0, 0.0], [0.3, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]);
        assert_eq!(s.skipped_outside, 2);
        assert_eq!(m.skipped_points(), 2);
        assert_eq!(m.query([0.3, 0.0, 0.0]), Occupancy::Occupied);
    }

    #[test]
    fn export_is_sorted_text() {
        let mut m = OctreeMap::<f64>::new(0.5);
        m.insert_cloud([0.1, 0.1, 0.1], &[[1.1, 0.1, 0.1]]);
        assert_eq!(m.export_text(), "0.250000 0.250000 0.250000 -0.400000\n0.750000 0.250000 0.250000 -0.400000\n1.250000 0.250000 0.250000 0.850000\n");
    }

    #[test]
    fn works_in_f32() {
        let mut m = OctreeMap::<f32>::new(0.05);
        m.insert_cloud([0.0; 3], &[[0.2, 0.1, 0.8]]);
        assert_eq!(m.query([0.2, 0.1, 0.8]), Occupancy::Occupied);
    }

    proptest! {
        #[test]
        fn log_odds_stay_clamped(ops in proptest::collection::vec(any::<bool>(), 1..80)) {
            let mut m = OctreeMap::<f64>::new(0.1);
            let k = m.key_of([0.0; 3]).unwrap();
            for hit in ops {
                let before = m.voxel(k).map_or(0.0, |v| v.log_odds);
                m.update(k, hit.then_some(HitTag::Rigid));
                let after = m.voxel(k).unwrap().log_odds;
                prop_assert!((-2.0..=3.5).contains(&after));
                if hit { prop_assert!(after >= before) } else { prop_assert!(after <= before) }
            }
        }

        #[test]
        fn ray_walk_is_face_connected(o in proptest::array::uniform3(-1.0f64..1.0), e in proptest::array::uniform3(-1.0f64..1.0)) {
            let m = OctreeMap::<f64>::new(0.07);
            let keys = m.ray_keys(o, e).unwrap();
            let end = m.key_of(e).unwrap();
            let mut chain = keys.clone();
            chain.push(end);
            if !keys.is_empty() {
                prop_assert_eq!(keys[0], m.key_of(o).unwrap());
            }
            for w in chain.windows(2) {
                let d: u32 = (0..3).map(|i| w[0][i].abs_diff(w[1][i])).sum();
                prop_assert_eq!(d, 1);
            }
            prop_assert!(!keys.contains(&end));
        }
    }
}
