//! Brute-force references shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use e5sh::mqtt::{encode_packet, Broker, ClientEvent, MqttClient, MqttPacket, QoS, RetryPolicy, SessionId};
use e5sh::netem::{DelayDist, EventScheduler, Link, NetworkProfile, SendOutcome};
use e5sh::occmap::{
    back_project, build_planning_maps, extract_instances, Occupancy, OctreeMap, OctreeParams, VoxelKey,
    DEFAULT_MIN_AREA,
};
use e5sh::{CameraIntrinsics, ClassId, LabeledMask, NANOS_PER_MS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- dense occupancy grid ----

pub const DEPTH: u32 = 5;
pub const SIDE: i64 = 1 << DEPTH;
pub const RES: f64 = 0.1;

pub fn oracle_key(p: [f64; 3]) -> Option<VoxelKey> {
    let mut k = [0u32; 3];
    for i in 0..3 {
        let c = (p[i] / RES).floor() as i64 + SIDE / 2;
        if !(0..SIDE).contains(&c) {
            return None;
        }
        k[i] = c as u32;
    }
    Some(k)
}

/// Does the segment pass through the interior of voxel `k`?
pub fn segment_hits_box(o: [f64; 3], e: [f64; 3], k: VoxelKey) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for i in 0..3 {
        let lo = (k[i] as i64 - SIDE / 2) as f64 * RES;
        let hi = lo + RES;
        let d = e[i] - o[i];
        if d == 0.0 {
            if o[i] <= lo || o[i] >= hi {
                return false;
            }
            continue;
        }
        let (a, b) = ((lo - o[i]) / d, (hi - o[i]) / d);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    t1 - t0 > 1e-12
}

/// Voxels crossed by `o -> e`, excluding the end voxel.
pub fn oracle_ray(o: [f64; 3], e: [f64; 3]) -> BTreeSet<VoxelKey> {
    let end = oracle_key(e).unwrap();
    let a = oracle_key(o).unwrap();
    let mut out = BTreeSet::new();
    // only voxels inside the bounding box of the end voxels can be crossed
    for x in a[0].min(end[0])..=a[0].max(end[0]) {
        for y in a[1].min(end[1])..=a[1].max(end[1]) {
            for z in a[2].min(end[2])..=a[2].max(end[2]) {
                let k = [x, y, z];
                if k != end && segment_hits_box(o, e, k) {
                    out.insert(k);
                }
            }
        }
    }
    out
}

pub struct Dense {
    pub cells: Vec<Option<f64>>,
    p: OctreeParams<f64>,
}

impl Dense {
    pub fn new() -> Self {
        Dense { cells: vec![None; (SIDE * SIDE * SIDE) as usize], p: OctreeParams::default() }
    }

    pub fn idx(k: VoxelKey) -> usize {
        ((k[0] as i64 * SIDE + k[1] as i64) * SIDE + k[2] as i64) as usize
    }

    fn apply(&mut self, k: VoxelKey, delta: f64) {
        let c = &mut self.cells[Self::idx(k)];
        *c = Some(self.p.clamp(c.unwrap_or(0.0) + delta));
    }

    pub fn insert(&mut self, o: [f64; 3], points: &[[f64; 3]]) {
        let hits: BTreeSet<VoxelKey> = points.iter().map(|p| oracle_key(*p).unwrap()).collect();
        let mut free = BTreeSet::new();
        for p in points {
            free.extend(oracle_ray(o, *p));
        }
        for k in free.difference(&hits) {
            self.apply(*k, self.p.l_miss);
        }
        for k in &hits {
            self.apply(*k, self.p.l_hit);
        }
    }

    pub fn state(&self, k: VoxelKey) -> Occupancy {
        match self.cells[Self::idx(k)] {
            None => Occupancy::Unknown,
            Some(l) if 1.0 / (1.0 + (-l).exp()) > self.p.threshold => Occupancy::Occupied,
            Some(_) => Occupancy::Free,
        }
    }
}

pub fn random_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let h = SIDE as f64 / 2.0 * RES * 0.999;
    [rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h)]
}

/// Inserts random batches into both the octree and the dense grid and
/// compares every voxel.
pub fn octree_vs_dense(scene: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene);
    let mut tree = OctreeMap::<f64>::with_params(RES, DEPTH, OctreeParams::default());
    let mut dense = Dense::new();
    for _batch in 0..rng.random_range(1..4) {
        let origin = random_point(&mut rng);
        let n = rng.random_range(1..25);
        // clustered surfaces so voxels collect repeated hits and misses
        let centre = random_point(&mut rng);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    random_point(&mut rng)
                } else {
                    let j = |c: f64, r: &mut ChaCha8Rng| (c + r.random_range(-0.3..0.3)).clamp(-1.59, 1.59);
                    [j(centre[0], &mut rng), j(centre[1], &mut rng), j(centre[2], &mut rng)]
                }
            })
            .collect();
        tree.insert_cloud(origin, &pts);
        dense.insert(origin, &pts);
    }
    let leaves: BTreeMap<VoxelKey, f64> = tree.leaves().into_iter().map(|(k, v)| (k, v.log_odds)).collect();
    for x in 0..SIDE as u32 {
        for y in 0..SIDE as u32 {
            for z in 0..SIDE as u32 {
                let k = [x, y, z];
                if tree.state_of(k) != dense.state(k) || leaves.get(&k).copied() != dense.cells[Dense::idx(k)] {
                    return Err(format!("scene {scene}: voxel {k:?} differs"));
                }
            }
        }
    }
    Ok(())
}

// ---- two-strawberry scenes ----

pub const SCENE_W: u16 = 160;
pub const SCENE_H: u16 = 120;

pub struct TwoBerries {
    pub mask: LabeledMask,
    pub depth: Vec<u16>,
    pub target: Vec<usize>,
    pub other: Vec<usize>,
}

fn ellipse(cu: f64, cv: f64, a: f64, b: f64) -> impl Fn(usize, usize) -> bool {
    move |u, v| ((u as f64 - cu) / a).powi(2) + ((v as f64 - cv) / b).powi(2) <= 1.0
}

/// One strawberry near the centre, one off to a side, a rigid bar along
/// the top edge and a canopy patch in the bottom corner opposite the
/// second strawberry.
pub fn two_berries(seed: u64) -> TwoBerries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (SCENE_W as usize, SCENE_H as usize);
    let mut mask = LabeledMask::filled(SCENE_W, SCENE_H, ClassId::Background);
    let mut depth = vec![3000u16; w * h];
    let centre = ellipse(
        79.5 + rng.random_range(-6.0..6.0),
        59.5 + rng.random_range(-6.0..6.0),
        rng.random_range(5.0..10.0),
        rng.random_range(6.0..12.0),
    );
    let left = rng.random_bool(0.5);
    let side_u = if left { rng.random_range(12.0..30.0) } else { rng.random_range(130.0..148.0) };
    let side = ellipse(side_u, rng.random_range(35.0..85.0), rng.random_range(5.0..9.0), rng.random_range(6.0..11.0));
    let (zt, zo) = (rng.random_range(350..700), rng.random_range(350..900));
    let canopy_u = if left { 110..150 } else { 10..50 };
    let mut target = Vec::new();
    let mut other = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if centre(u, v) {
                mask.set(u, v, ClassId::Strawberry, 255);
                depth[i] = zt;
                target.push(i);
            } else if side(u, v) {
                mask.set(u, v, ClassId::Strawberry, 255);
                depth[i] = zo;
                other.push(i);
            } else if v < 8 {
                mask.set(u, v, ClassId::RigidObstacle, 255);
                depth[i] = 1200;
            } else if v >= 100 && canopy_u.contains(&u) {
                mask.set(u, v, ClassId::Canopy, 255);
                depth[i] = 800;
            }
        }
    }
    TwoBerries { mask, depth, target, other }
}

/// Builds the planning maps for a two-strawberry scene and checks that
/// only the target reaches the strawberry map and neither reaches the
/// obstacle map.
pub fn non_target_filtered(seed: u64) -> Result<(), String> {
    let k = CameraIntrinsics::centered(SCENE_W, SCENE_H, 87.0);
    let sc = two_berries(seed);
    let inst = extract_instances(&sc.mask, DEFAULT_MIN_AREA);
    if inst.len() != 2 {
        return Err(format!("scene {seed}: {} instances", inst.len()));
    }
    let t = inst.iter().find(|i| i.is_target).unwrap();
    if !t.pixels.iter().all(|&p| sc.target.contains(&(p as usize))) {
        return Err(format!("scene {seed}: wrong target"));
    }
    let maps = build_planning_maps::<f64>(&sc.mask, &sc.depth, &k, Some(t), 0.02, 1).map_err(|e| e.to_string())?;
    let key = |i: usize| {
        let p = back_project::<f64>(i % SCENE_W as usize, i / SCENE_W as usize, sc.depth[i], &k);
        maps.strawberry.key_of(p).unwrap()
    };
    for &i in &sc.other {
        let k = key(i);
        if maps.strawberry.state_of(k) == Occupancy::Occupied || maps.obstacles.state_of(k) == Occupancy::Occupied {
            return Err(format!("scene {seed}: non-target pixel {i} mapped"));
        }
    }
    for &i in &sc.target {
        let k = key(i);
        if maps.strawberry.state_of(k) != Occupancy::Occupied {
            return Err(format!("scene {seed}: target pixel {i} missing"));
        }
        if maps.obstacles.state_of(k) == Occupancy::Occupied {
            return Err(format!("scene {seed}: target pixel {i} in obstacle map"));
        }
    }
    Ok(())
}

// ---- QoS over a lossy link ----

enum Ev {
    Publish(usize),
    AtBroker(MqttPacket),
    AtPublisher(MqttPacket),
    Tick,
}

pub struct QosTrial {
    /// Per payload index: the dup flag of every copy delivered, in order.
    pub seen: BTreeMap<usize, Vec<bool>>,
}

impl QosTrial {
    pub fn distinct(&self) -> usize {
        self.seen.len()
    }

    pub fn duplicates(&self) -> usize {
        self.seen.values().map(|f| f.len() - 1).sum()
    }

    /// Copies after the first that were not flagged dup.
    pub fn unflagged_repeats(&self) -> usize {
        self.seen.values().map(|f| f[1..].iter().filter(|d| !**d).count()).sum()
    }
}

fn lossy(loss: f64, seed: u64) -> NetworkProfile {
    NetworkProfile { one_way_delay: DelayDist::Constant(5.0), ..NetworkProfile::ideal() }.with_loss(loss).with_seed(seed)
}

/// `n` publishes from a client whose link to the broker (both directions)
/// drops with probability `loss`; the subscriber sits on a clean link.
pub fn qos_trial(qos: QoS, n: usize, loss: f64, seed: u64) -> QosTrial {
    let policy = RetryPolicy::default();
    let mut broker = Broker::new(policy);
    let mut publisher = MqttClient::new("pub", policy);
    let mut subscriber = MqttClient::new("sub", policy);
    let (ps, ss): (SessionId, SessionId) = (broker.open_session(), broker.open_session());
    let mut up = Link::new(lossy(loss, seed), 0);
    let mut down = Link::new(lossy(loss, seed), 1);
    let mut sched: EventScheduler<Ev> = EventScheduler::new();
    let mut seen: BTreeMap<usize, Vec<bool>> = BTreeMap::new();

    // session setup is off the lossy path
    for (id, c) in [(ps, &mut publisher), (ss, &mut subscriber)] {
        for d in broker.handle(id, c.connect(60), 0) {
            c.handle(d.packet);
        }
    }
    let sub = subscriber.subscribe("robot/#", QoS::AtLeastOnce);
    for d in broker.handle(ss, sub, 0) {
        subscriber.handle(d.packet);
    }
    for i in 0..n {
        sched.schedule_at(i as u64 * NANOS_PER_MS, Ev::Publish(i));
    }
    sched.schedule_at(0, Ev::Tick);

    let send = |link: &mut Link, sched: &mut EventScheduler<Ev>, p: MqttPacket, now, to_broker: bool| {
        let len = encode_packet(&p).unwrap().len();
        if let SendOutcome::Deliver(at) = link.send(len, now) {
            link.mark_delivered(len);
            sched.schedule_at(at, if to_broker { Ev::AtBroker(p) } else { Ev::AtPublisher(p) });
        }
    };

    let horizon = (n as u64 + 20_000) * NANOS_PER_MS;
    while let Some((now, ev)) = sched.pop() {
        if now > horizon {
            break;
        }
        let mut to_broker = Vec::new();
        match ev {
            Ev::Publish(i) => {
                to_broker.push(publisher.publish("robot/0/rgb", (i as u32).to_be_bytes().to_vec(), qos, now).unwrap());
            }
            Ev::AtPublisher(p) => {
                let (_, reply) = publisher.handle(p);
                to_broker.extend(reply);
            }
            Ev::AtBroker(p) => {
                let mut queue = broker.handle(ps, p, now);
                while let Some(d) = queue.pop() {
                    if d.to == ps {
                        send(&mut down, &mut sched, d.packet, now, false);
                        continue;
                    }
                    let (ev, reply) = subscriber.handle(d.packet);
                    if let Some(ClientEvent::Message(m)) = ev {
                        let i = u32::from_be_bytes(m.payload[..4].try_into().unwrap()) as usize;
                        seen.entry(i).or_default().push(m.dup);
                    }
                    if let Some(r) = reply {
                        queue.extend(broker.handle(ss, r, now));
                    }
                }
            }
            Ev::Tick => {
                to_broker.extend(publisher.retransmit(now));
                for d in broker.retransmit(now) {
                    if d.to == ps {
                        send(&mut down, &mut sched, d.packet, now, false);
                    }
                }
                if !(sched.is_empty() && publisher.inflight().is_empty()) {
                    sched.schedule_at(now + 50 * NANOS_PER_MS, Ev::Tick);
                }
            }
        }
        for p in to_broker {
            send(&mut up, &mut sched, p, now, true);
        }
    }
    QosTrial { seen }
}
