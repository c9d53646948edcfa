//! Single-executor virtual-time run. Robots talk to the edge over emulated
//! links; the MQTT broker and the segmentation server sit on the edge side
//! and exchange packets with each other without delay.

use std::sync::Arc;

use super::{
    frame_deviate, pad, scene_index, unpad_envelope, Dataset, ExperimentConfig, HarnessError, RunOutput, RunSummary,
};
use crate::codec::{decode_frame, decode_mask, encode_frame, encode_mask, Channel, Encoding, Payload};
use crate::metrics::ExperimentRecord;
use crate::mqtt::{self, encode_packet, Broker, ClientEvent, MqttClient, MqttPacket, QoS, SessionId};
use crate::netem::{EventScheduler, Link, LinkCounters, SendOutcome};
use crate::occmap::{build_planning_maps, extract_instances, DEFAULT_MIN_AREA};
use crate::perception::{
    decode_reply, decode_trigger, encode_reply, encode_trigger, ActionClient, ActionGoal, ActionStatus, LatencyModel,
    SegmentationBackend, SyncChannel, WorkerPool,
};
use crate::tcpros::SimStream;
use crate::types::{ms_to_nanos, Frame, Nanos, Platform, Protocol};

/// Give up on a TCP segment after this many sends.
const TCP_MAX_SENDS: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Up,
    Down,
}

/// Application streams; over TCPROS each is its own connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Rgb = 0,
    Depth = 1,
    Trigger = 2,
    Result = 3,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Depth => "depth",
            Stream::Trigger => "trigger",
            Stream::Result => "result",
        }
    }

    fn from_topic(topic: &str) -> Option<(u32, Stream)> {
        let mut parts = topic.split('/');
        if parts.next()? != "robot" {
            return None;
        }
        let robot = parts.next()?.parse().ok()?;
        let s = match parts.next()? {
            "rgb" => Stream::Rgb,
            "depth" => Stream::Depth,
            "trigger" => Stream::Trigger,
            "result" => Stream::Result,
            _ => return None,
        };
        Some((robot, s))
    }
}

enum Ev {
    Capture(u32),
    Mqtt { robot: u32, dir: Dir, packet: MqttPacket, bytes: usize },
    Tcp { robot: u32, dir: Dir, stream: Stream, seq: u64, payload: Arc<Vec<u8>>, bytes: usize },
    TcpResend { robot: u32, dir: Dir, stream: Stream, seq: u64, payload: Arc<Vec<u8>>, sends: u32 },
    SegDone { robot: u32, reply: Vec<u8> },
    Timeout { robot: u32, frame: u64 },
    Tick,
}

struct Robot {
    up: Link,
    down: Link,
    records: Vec<ExperimentRecord>,
    /// Frame in progress, if any.
    active: Option<u64>,
    next_frame: u64,
    client: MqttClient,
    session: SessionId,
    /// Senders per uplink stream, receiver for the result stream.
    tcp_tx: [SimStream<()>; 3],
    tcp_rx: SimStream<Arc<Vec<u8>>>,
    /// Embedded board, used when segmenting on the robot.
    board: WorkerPool,
}

struct EdgeSide {
    action: ActionClient,
    pending: Option<u64>,
    last_started: Option<u64>,
    tcp_rx: [SimStream<Arc<Vec<u8>>>; 3],
    tcp_tx: SimStream<()>,
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    sched: EventScheduler<Ev>,
    robots: Vec<Robot>,
    edges: Vec<EdgeSide>,
    broker: Broker,
    server: MqttClient,
    server_session: SessionId,
    pool: WorkerPool,
    backend: SegmentationBackend,
    latency: Option<LatencyModel>,
    qos: QoS,
    bridge: Nanos,
    timeout: Nanos,
    rto: Nanos,
    tick_at: Option<Nanos>,
    summary: RunSummary,
}

pub(super) fn run(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutput, HarnessError> {
    let profile = cfg.profile()?;
    let policy = cfg.retry_policy();
    let qos = cfg.qos();
    let mut broker = Broker::new(policy);
    let mut server = MqttClient::new("edge", policy);
    let server_session = connect(&mut broker, &mut server)?;
    let mut robots = Vec::new();
    let mut edges = Vec::new();
    for id in 0..cfg.robots {
        let mut client = MqttClient::new(&format!("robot{id}"), policy);
        let session = connect(&mut broker, &mut client)?;
        subscribe(&mut broker, session, &mut client, &mqtt::topic(id, Stream::Result.name()), qos);
        for s in [Stream::Rgb, Stream::Depth, Stream::Trigger] {
            subscribe(&mut broker, server_session, &mut server, &mqtt::topic(id, s.name()), QoS::AtLeastOnce);
        }
        robots.push(Robot {
            up: Link::new(profile.clone(), 2 * id as u64),
            down: Link::new(profile.clone(), 2 * id as u64 + 1),
            records: Vec::new(),
            active: None,
            next_frame: 0,
            client,
            session,
            tcp_tx: Default::default(),
            tcp_rx: SimStream::new(),
            board: WorkerPool::new(1),
        });
        edges.push(EdgeSide {
            action: ActionClient::new(cfg.backend.into()),
            pending: None,
            last_started: None,
            tcp_rx: Default::default(),
            tcp_tx: SimStream::new(),
        });
    }
    let mut sim = Sim {
        cfg,
        data,
        sched: EventScheduler::new(),
        robots,
        edges,
        broker,
        server,
        server_session,
        pool: WorkerPool::new(cfg.workers),
        backend: cfg.backend.into(),
        latency: cfg.latency_model(),
        qos,
        bridge: cfg.bridge_ns(&profile),
        timeout: ms_to_nanos(cfg.per_frame_timeout_ms),
        rto: ms_to_nanos(cfg.retry_timeout_ms),
        tick_at: None,
        summary: RunSummary {
            config: cfg.config_name(),
            frames: 0,
            successes: 0,
            failures: 0,
            link_up: LinkCounters::default(),
            link_down: LinkCounters::default(),
            retransmissions: 0,
            duplicates_received: 0,
            masks_compared: 0,
            mask_mismatch_pixels: 0,
            obstacle_voxels: 0,
            strawberry_voxels: 0,
            end_ns: 0,
        },
    };
    for r in 0..cfg.robots {
        sim.sched.schedule_at(0, Ev::Capture(r));
    }
    while let Some((now, ev)) = sim.sched.pop() {
        sim.handle(now, ev)?;
    }
    sim.finish()
}

fn connect(broker: &mut Broker, client: &mut MqttClient) -> Result<SessionId, HarnessError> {
    let s = broker.open_session();
    for d in broker.handle(s, client.connect(0), 0) {
        client.handle(d.packet);
    }
    if !client.is_connected() {
        return Err(HarnessError::Run(format!("{} was refused by the broker", client.client_id())));
    }
    Ok(s)
}

fn subscribe(broker: &mut Broker, session: SessionId, client: &mut MqttClient, filter: &str, qos: QoS) {
    let p = client.subscribe(filter, qos);
    for d in broker.handle(session, p, 0) {
        client.handle(d.packet);
    }
}

impl Sim<'_> {
    fn handle(&mut self, now: Nanos, ev: Ev) -> Result<(), HarnessError> {
        match ev {
            Ev::Capture(r) => self.capture(r, now)?,
            Ev::Mqtt { robot, dir, packet, bytes } => {
                let rb = &mut self.robots[robot as usize];
                match dir {
                    Dir::Up => {
                        rb.up.mark_delivered(bytes);
                        let session = rb.session;
                        let out = self.broker.handle(session, packet, now);
                        self.dispatch(out, now)?;
                    }
                    Dir::Down => {
                        rb.down.mark_delivered(bytes);
                        let (ev, reply) = rb.client.handle(packet);
                        if let Some(reply) = reply {
                            self.send_mqtt(robot, Dir::Up, reply, now)?;
                        }
                        if let Some(ClientEvent::Message(p)) = ev {
                            if let Some((_, Stream::Result)) = Stream::from_topic(&p.topic) {
                                self.on_result(robot, &p.payload, now)?;
                            }
                        }
                    }
                }
                self.arm(now);
            }
            Ev::Tcp { robot, dir, stream, seq, payload, bytes } => {
                let rb = &mut self.robots[robot as usize];
                match dir {
                    Dir::Up => {
                        rb.up.mark_delivered(bytes);
                        let ready = self.edges[robot as usize].tcp_rx[stream as usize].receive(seq, payload);
                        for msg in ready {
                            self.on_edge_message(robot, stream, &msg, now)?;
                        }
                    }
                    Dir::Down => {
                        rb.down.mark_delivered(bytes);
                        for msg in rb.tcp_rx.receive(seq, payload) {
                            self.on_result(robot, &msg, now)?;
                        }
                    }
                }
            }
            Ev::TcpResend { robot, dir, stream, seq, payload, sends } => {
                self.summary.retransmissions += 1;
                self.send_tcp_segment(robot, dir, stream, seq, payload, sends, now);
            }
            Ev::SegDone { robot, reply } => {
                if self.cfg.platform == Platform::Njxn {
                    self.on_result(robot, &reply, now)?;
                } else {
                    self.send(robot, Dir::Down, Stream::Result, reply, now)?;
                }
            }
            Ev::Timeout { robot, frame } => {
                let rb = &mut self.robots[robot as usize];
                if rb.active == Some(frame) {
                    rb.active = None;
                    self.summary.failures += 1;
                    self.sched.schedule_at(now, Ev::Capture(robot));
                }
            }
            Ev::Tick => {
                for r in 0..self.robots.len() {
                    let resend = self.robots[r].client.retransmit(now);
                    for p in resend {
                        self.send_mqtt(r as u32, Dir::Up, p, now)?;
                    }
                }
                for p in self.server.retransmit(now) {
                    let out = self.broker.handle(self.server_session, p, now);
                    self.dispatch(out, now)?;
                }
                let out = self.broker.retransmit(now);
                self.dispatch(out, now)?;
                self.arm(now);
            }
        }
        Ok(())
    }

    fn capture(&mut self, r: u32, now: Nanos) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let rb = &mut self.robots[r as usize];
        if rb.next_frame >= cfg.frames_per_robot as u64 {
            return Ok(());
        }
        let k = rb.next_frame;
        rb.next_frame += 1;
        rb.active = Some(k);
        self.summary.frames += 1;
        rb.records.push(ExperimentRecord {
            frame_id: k,
            robot_id: r,
            protocol: cfg.transport,
            network: cfg.network_name(),
            model: cfg.model,
            platform: cfg.platform,
            t_capture: Some(now),
            t_sent: Some(now),
            t_goal: None,
            t_seg_start: None,
            t_seg_end: None,
            t_result: None,
            t_map_done: None,
            bytes_up: 0,
            bytes_down: 0,
        });
        self.sched.schedule_at(now + self.timeout, Ev::Timeout { robot: r, frame: k });
        let scene = &self.data.scenes[scene_index(r, k, cfg.frames_per_robot, self.data.scenes.len())];
        let frame = Frame { frame_id: k, capture_ts: now, ..scene.frame.clone() };

        if cfg.platform == Platform::Njxn {
            // everything stays on the robot
            let compute = self.compute_ns(r, k)?;
            let (start, end) = self.robots[r as usize].board.assign(now, compute);
            let reply = self.segment(r, k, &frame, now, start, end)?;
            self.sched.schedule_at(end, Ev::SegDone { robot: r, reply });
            return Ok(());
        }
        let rgb = pad(encode_frame(&frame, Channel::Rgb, Encoding::Raw)?, cfg.pad_up());
        let depth = encode_frame(&frame, Channel::Depth, Encoding::Raw)?;
        self.send(r, Dir::Up, Stream::Rgb, rgb, now)?;
        self.send(r, Dir::Up, Stream::Depth, depth, now)?;
        self.send(r, Dir::Up, Stream::Trigger, encode_trigger(k).to_vec(), now)?;
        self.arm(now);
        Ok(())
    }

    fn compute_ns(&self, r: u32, k: u64) -> Result<Nanos, HarnessError> {
        match &self.latency {
            None => Ok(0),
            Some(m) => {
                let z = frame_deviate(self.cfg.seed, r, k, self.cfg.model);
                Ok(m.from_deviate(self.cfg.model, self.cfg.platform, z)?)
            }
        }
    }

    /// Runs the backend on `frame`, stamps the record and returns the
    /// (padded) reply body.
    fn segment(&mut self, r: u32, goal: u64, frame: &Frame, t_goal: Nanos, start: Nanos, end: Nanos) -> Result<Vec<u8>, HarnessError> {
        let cfg = self.cfg;
        let scene = &self.data.scenes[scene_index(r, goal, cfg.frames_per_robot, self.data.scenes.len())];
        let mut g = ActionGoal::new(goal, ());
        g.transition(ActionStatus::Active)?;
        let mask = self.backend.segment(goal, frame, Some(&scene.mask));
        g.transition(if mask.is_ok() { ActionStatus::Succeeded } else { ActionStatus::Aborted })?;
        let mask = mask?;
        let rb = &mut self.robots[r as usize];
        if rb.active == Some(goal) {
            let rec = rb.records.last_mut().expect("active frame has a record");
            rec.t_goal = Some(t_goal);
            rec.t_seg_start = Some(start);
            rec.t_seg_end = Some(end);
        }
        let env = encode_mask(&mask, goal, frame.capture_ts, Encoding::Rle)?;
        Ok(pad(encode_reply(goal, &env), cfg.pad_down()))
    }

    fn send(&mut self, r: u32, dir: Dir, stream: Stream, payload: Vec<u8>, now: Nanos) -> Result<(), HarnessError> {
        match self.cfg.transport {
            Protocol::Tcpros => {
                let seq = match dir {
                    Dir::Up => self.robots[r as usize].tcp_tx[stream as usize].next_seq(),
                    Dir::Down => self.edges[r as usize].tcp_tx.next_seq(),
                };
                self.send_tcp_segment(r, dir, stream, seq, Arc::new(payload), 0, now);
            }
            Protocol::MqttQos0 | Protocol::MqttQos1 => {
                let topic = mqtt::topic(r, stream.name());
                match dir {
                    Dir::Up => {
                        let p = self.robots[r as usize].client.publish(&topic, payload, self.qos, now)?;
                        self.send_mqtt(r, Dir::Up, p, now)?;
                    }
                    Dir::Down => {
                        let p = self.server.publish(&topic, payload, self.qos, now)?;
                        let out = self.broker.handle(self.server_session, p, now);
                        self.dispatch(out, now)?;
                        self.arm(now);
                    }
                }
            }
        }
        Ok(())
    }

    fn account(&mut self, r: u32, dir: Dir, bytes: usize) {
        let rb = &mut self.robots[r as usize];
        if let Some(rec) = rb.records.last_mut() {
            match dir {
                Dir::Up => rec.bytes_up += bytes as u64,
                Dir::Down => rec.bytes_down += bytes as u64,
            }
        }
    }

    fn link(&mut self, r: u32, dir: Dir) -> &mut Link {
        let rb = &mut self.robots[r as usize];
        match dir {
            Dir::Up => &mut rb.up,
            Dir::Down => &mut rb.down,
        }
    }

    fn send_mqtt(&mut self, r: u32, dir: Dir, packet: MqttPacket, now: Nanos) -> Result<(), HarnessError> {
        let bytes = encode_packet(&packet)?.len();
        self.account(r, dir, bytes);
        if let SendOutcome::Deliver(at) = self.link(r, dir).send(bytes, now) {
            self.sched.schedule_at(at, Ev::Mqtt { robot: r, dir, packet, bytes });
        }
        Ok(())
    }

    /// Sends one length-prefixed segment; a drop is noticed after the
    /// retransmission timeout.
    #[allow(clippy::too_many_arguments)]
    fn send_tcp_segment(&mut self, r: u32, dir: Dir, stream: Stream, seq: u64, payload: Arc<Vec<u8>>, sends: u32, now: Nanos) {
        let bytes = payload.len() + 4;
        self.account(r, dir, bytes);
        match self.link(r, dir).send(bytes, now) {
            SendOutcome::Deliver(at) => self.sched.schedule_at(at, Ev::Tcp { robot: r, dir, stream, seq, payload, bytes }),
            SendOutcome::Dropped if sends + 1 < TCP_MAX_SENDS => {
                self.sched.schedule_at(now + self.rto, Ev::TcpResend { robot: r, dir, stream, seq, payload, sends: sends + 1 })
            }
            SendOutcome::Dropped => log::warn!("robot {r}: tcp segment {seq} abandoned after {TCP_MAX_SENDS} sends"),
        }
    }

    /// Routes broker output: robot sessions go over the downlink, the
    /// server session is handled in place.
    fn dispatch(&mut self, deliveries: Vec<mqtt::Delivery>, now: Nanos) -> Result<(), HarnessError> {
        let mut queue: std::collections::VecDeque<mqtt::Delivery> = deliveries.into();
        while let Some(d) = queue.pop_front() {
            if d.to == self.server_session {
                let (ev, reply) = self.server.handle(d.packet);
                if let Some(reply) = reply {
                    queue.extend(self.broker.handle(self.server_session, reply, now));
                }
                if let Some(ClientEvent::Message(p)) = ev {
                    if let Some((robot, stream)) = Stream::from_topic(&p.topic) {
                        if (robot as usize) < self.robots.len() {
                            self.on_edge_message(robot, stream, &p.payload, now)?;
                        }
                    }
                }
            } else if let Some(r) = self.robots.iter().position(|rb| rb.session == d.to) {
                self.send_mqtt(r as u32, Dir::Down, d.packet, now)?;
            }
        }
        Ok(())
    }

    fn on_edge_message(&mut self, r: u32, stream: Stream, payload: &[u8], now: Nanos) -> Result<(), HarnessError> {
        let k = self.data.intrinsics;
        let edge = &mut self.edges[r as usize];
        match stream {
            Stream::Rgb | Stream::Depth => {
                let (h, body) = decode_frame(unpad_envelope(payload)?)?;
                let (rgb, depth, channel) = match body {
                    Payload::Rgb(rgb) => (rgb, Vec::new(), SyncChannel::Rgb),
                    Payload::Depth(depth) => (Vec::new(), depth, SyncChannel::Depth),
                    Payload::Mask(_) => return Err(HarnessError::Run("mask on a camera stream".into())),
                };
                let frame = Frame { frame_id: h.frame_id, capture_ts: h.capture_ts, rgb, depth, intrinsics: k };
                edge.action.on_frame(channel, Arc::new(frame));
            }
            Stream::Trigger => {
                let goal = decode_trigger(payload).ok_or_else(|| HarnessError::Run("short trigger".into()))?;
                // a repeated trigger (QoS1 redelivery) is not a new goal
                if edge.last_started.is_some_and(|g| g >= goal) {
                    return Ok(());
                }
                edge.pending = Some(edge.pending.map_or(goal, |p| p.max(goal)));
            }
            Stream::Result => return Ok(()),
        }
        self.try_start(r, now)
    }

    /// Starts the pending goal once its frame has been synchronized.
    fn try_start(&mut self, r: u32, now: Nanos) -> Result<(), HarnessError> {
        let edge = &mut self.edges[r as usize];
        let (Some(goal), Some(frame)) = (edge.pending, edge.action.latest().cloned()) else {
            return Ok(());
        };
        if frame.frame_id > goal {
            edge.pending = None;
            return Ok(());
        }
        if frame.frame_id < goal {
            return Ok(());
        }
        edge.pending = None;
        edge.last_started = Some(goal);
        let t_goal = now + self.bridge;
        let compute = self.compute_ns(r, goal)?;
        let (start, end) = self.pool.assign(t_goal, compute);
        let reply = self.segment(r, goal, &frame, t_goal, start, end)?;
        self.sched.schedule_at(end, Ev::SegDone { robot: r, reply });
        Ok(())
    }

    fn on_result(&mut self, r: u32, body: &[u8], now: Nanos) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let (goal, env) = decode_reply(body).ok_or_else(|| HarnessError::Run("short reply".into()))?;
        if self.robots[r as usize].active != Some(goal) {
            return Ok(());
        }
        let (_, mask) = decode_mask(unpad_envelope(env)?)?;
        let scene = &self.data.scenes[scene_index(r, goal, cfg.frames_per_robot, self.data.scenes.len())];
        self.summary.masks_compared += 1;
        self.summary.mask_mismatch_pixels +=
            mask.classes.iter().zip(&scene.mask.classes).filter(|(a, b)| a != b).count() as u64;
        let instances = extract_instances(&mask, DEFAULT_MIN_AREA);
        let target = instances.iter().find(|i| i.is_target);
        let maps = build_planning_maps::<f64>(&mask, &scene.frame.depth, &self.data.intrinsics, target, cfg.resolution, cfg.map_stride)?;
        self.summary.obstacle_voxels += maps.obstacles.occupied_keys().len() as u64;
        self.summary.strawberry_voxels += maps.strawberry.occupied_keys().len() as u64;

        let rb = &mut self.robots[r as usize];
        let rec = rb.records.last_mut().expect("active frame has a record");
        rec.t_result = Some(now);
        // map building is not charged virtual time
        rec.t_map_done = Some(now);
        rb.active = None;
        self.summary.successes += 1;
        self.sched.schedule_at(now, Ev::Capture(r));
        Ok(())
    }

    /// Schedules a retransmission sweep at the earliest QoS1 deadline.
    fn arm(&mut self, now: Nanos) {
        let next = self
            .robots
            .iter()
            .filter_map(|r| r.client.next_deadline())
            .chain(self.server.next_deadline())
            .chain(self.broker.next_deadline())
            .min();
        if let Some(d) = next {
            let d = d.max(now);
            if self.tick_at.is_none_or(|t| t <= now || d < t) {
                self.tick_at = Some(d);
                self.sched.schedule_at(d, Ev::Tick);
            }
        }
    }

    fn finish(mut self) -> Result<RunOutput, HarnessError> {
        let mut records = Vec::new();
        for rb in &self.robots {
            let (u, d) = (rb.up.counters(), rb.down.counters());
            add(&mut self.summary.link_up, &u);
            add(&mut self.summary.link_down, &d);
            self.summary.retransmissions += rb.client.stats().retransmissions;
            self.summary.duplicates_received += rb.client.stats().received_dup;
            records.extend(rb.records.iter().cloned());
        }
        self.summary.retransmissions += self.server.stats().retransmissions + self.broker.stats().retransmissions;
        self.summary.duplicates_received += self.server.stats().received_dup;
        self.summary.end_ns = self.sched.now();
        Ok(RunOutput { records, summary: self.summary })
    }
}

fn add(acc: &mut LinkCounters, c: &LinkCounters) {
    acc.sent += c.sent;
    acc.delivered += c.delivered;
    acc.dropped += c.dropped;
    acc.in_queue += c.in_queue;
    acc.bytes_sent += c.bytes_sent;
    acc.bytes_delivered += c.bytes_delivered;
}
