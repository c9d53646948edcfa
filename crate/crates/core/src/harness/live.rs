//! Wall-clock smoke runs on loopback: a real broker (or TCPROS sockets),
//! one thread per robot and one edge thread. Compute latency is slept.
//!
//! Byte counts here cover application packets only; acks and
//! retransmissions are not visible to the endpoints.

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    frame_deviate, pad, scene_index, unpad_envelope, Dataset, ExperimentConfig, HarnessError, RunOutput, RunSummary,
};
use crate::codec::{decode_frame, decode_mask, encode_frame, encode_mask, Channel, Encoding, Payload};
use crate::metrics::ExperimentRecord;
use crate::mqtt::live::{BrokerServer, LiveClient};
use crate::mqtt::{self, encode_packet, MqttPacket, Publish, QoS};
use crate::netem::LinkCounters;
use crate::occmap::{build_planning_maps, extract_instances, DEFAULT_MIN_AREA};
use crate::perception::{
    decode_reply, decode_trigger, encode_reply, encode_trigger, ActionClient, LatencyModel, SegmentationBackend,
    SyncChannel,
};
use crate::tcpros::{self, ConnectionHeader, Publisher, DEFAULT_QUEUE_SIZE};
use crate::types::{Frame, Nanos, Platform, Protocol};

const POLL: Duration = Duration::from_millis(10);
const UPLINK_TYPE: &str = "e5sh/CameraBundle";
const RESULT_TYPE: &str = "e5sh/LabeledMask";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Rgb = 0,
    Depth = 1,
    Trigger = 2,
}

impl Stream {
    fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Depth => "depth",
            Stream::Trigger => "trigger",
        }
    }

    fn from_tag(b: u8) -> Option<Stream> {
        match b {
            0 => Some(Stream::Rgb),
            1 => Some(Stream::Depth),
            2 => Some(Stream::Trigger),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct EdgeStamps {
    t_goal: Nanos,
    t_seg_start: Nanos,
    t_seg_end: Nanos,
}

type Stamps = Arc<Mutex<BTreeMap<(u32, u64), EdgeStamps>>>;

fn now_ns(epoch: Instant) -> Nanos {
    epoch.elapsed().as_nanos() as Nanos
}

fn compute_time(cfg: &ExperimentConfig, latency: &Option<LatencyModel>, r: u32, k: u64) -> Result<Nanos, HarnessError> {
    match latency {
        None => Ok(0),
        Some(m) => Ok(m.from_deviate(cfg.model, cfg.platform, frame_deviate(cfg.seed, r, k, cfg.model))?),
    }
}

/// Segmentation server state shared by both transports.
struct Edge<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    backend: SegmentationBackend,
    latency: Option<LatencyModel>,
    clients: Vec<(ActionClient, Option<u64>, Option<u64>)>,
    stamps: Stamps,
    epoch: Instant,
}

impl Edge<'_> {
    /// Returns the reply body once a goal completes.
    fn on_message(&mut self, r: u32, stream: Stream, payload: &[u8]) -> Result<Option<Vec<u8>>, HarnessError> {
        let Some((action, pending, last)) = self.clients.get_mut(r as usize) else { return Ok(None) };
        match stream {
            Stream::Rgb | Stream::Depth => {
                let (h, body) = decode_frame(unpad_envelope(payload)?)?;
                let (rgb, depth, ch) = match body {
                    Payload::Rgb(v) => (v, Vec::new(), SyncChannel::Rgb),
                    Payload::Depth(v) => (Vec::new(), v, SyncChannel::Depth),
                    Payload::Mask(_) => return Ok(None),
                };
                let f = Frame { frame_id: h.frame_id, capture_ts: h.capture_ts, rgb, depth, intrinsics: self.data.intrinsics };
                action.on_frame(ch, Arc::new(f));
            }
            Stream::Trigger => {
                let Some(goal) = decode_trigger(payload) else { return Ok(None) };
                if last.is_some_and(|g| g >= goal) {
                    return Ok(None);
                }
                *pending = Some(pending.map_or(goal, |p| p.max(goal)));
            }
        }
        let (Some(goal), Some(frame)) = (*pending, action.latest().cloned()) else { return Ok(None) };
        if frame.frame_id != goal {
            if frame.frame_id > goal {
                *pending = None;
            }
            return Ok(None);
        }
        *pending = None;
        *last = Some(goal);
        let t_goal = now_ns(self.epoch);
        let compute = compute_time(self.cfg, &self.latency, r, goal)?;
        let scene = &self.data.scenes[scene_index(r, goal, self.cfg.frames_per_robot, self.data.scenes.len())];
        let t_seg_start = now_ns(self.epoch);
        let mask = self.backend.segment(goal, &frame, Some(&scene.mask))?;
        thread::sleep(Duration::from_nanos(compute));
        let t_seg_end = now_ns(self.epoch);
        self.stamps.lock().unwrap().insert((r, goal), EdgeStamps { t_goal, t_seg_start, t_seg_end });
        let env = encode_mask(&mask, goal, frame.capture_ts, Encoding::Rle)?;
        Ok(Some(pad(encode_reply(goal, &env), self.cfg.pad_down())))
    }
}

/// What a robot loop needs from its transport.
trait RobotLink {
    /// Sends one message and returns the bytes put on the wire.
    fn send(&mut self, stream: Stream, payload: Vec<u8>) -> Result<u64, HarnessError>;
    /// Next result body and its wire size.
    fn recv(&mut self, timeout: Duration) -> Option<(Vec<u8>, u64)>;
}

#[derive(Default)]
struct RobotOutcome {
    records: Vec<ExperimentRecord>,
    compared: u64,
    mismatched: u64,
    obstacle_voxels: u64,
    strawberry_voxels: u64,
}

fn robot_loop(
    cfg: &ExperimentConfig,
    data: &Dataset,
    r: u32,
    epoch: Instant,
    link: &mut dyn RobotLink,
) -> Result<RobotOutcome, HarnessError> {
    let mut out = RobotOutcome::default();
    let timeout = Duration::from_secs_f64(cfg.per_frame_timeout_ms / 1000.0);
    let latency = cfg.latency_model();
    let backend: SegmentationBackend = cfg.backend.into();
    for k in 0..cfg.frames_per_robot as u64 {
        let scene = &data.scenes[scene_index(r, k, cfg.frames_per_robot, data.scenes.len())];
        let t_capture = now_ns(epoch);
        let frame = Frame { frame_id: k, capture_ts: t_capture, ..scene.frame.clone() };
        let mut rec = ExperimentRecord {
            frame_id: k,
            robot_id: r,
            protocol: cfg.transport,
            network: cfg.network_name(),
            model: cfg.model,
            platform: cfg.platform,
            t_capture: Some(t_capture),
            t_sent: None,
            t_goal: None,
            t_seg_start: None,
            t_seg_end: None,
            t_result: None,
            t_map_done: None,
            bytes_up: 0,
            bytes_down: 0,
        };
        let mask = if cfg.platform == Platform::Njxn {
            let t = now_ns(epoch);
            rec.t_sent = Some(t);
            rec.t_goal = Some(t);
            rec.t_seg_start = Some(t);
            let m = backend.segment(k, &frame, Some(&scene.mask))?;
            thread::sleep(Duration::from_nanos(compute_time(cfg, &latency, r, k)?));
            let t = now_ns(epoch);
            rec.t_seg_end = Some(t);
            rec.t_result = Some(t);
            Some(m)
        } else {
            rec.t_sent = Some(now_ns(epoch));
            let rgb = pad(encode_frame(&frame, Channel::Rgb, Encoding::Raw)?, cfg.pad_up());
            rec.bytes_up += link.send(Stream::Rgb, rgb)?;
            rec.bytes_up += link.send(Stream::Depth, encode_frame(&frame, Channel::Depth, Encoding::Raw)?)?;
            rec.bytes_up += link.send(Stream::Trigger, encode_trigger(k).to_vec())?;
            let deadline = Instant::now() + timeout;
            let mut got = None;
            while let Some(left) = deadline.checked_duration_since(Instant::now()) {
                let Some((body, bytes)) = link.recv(left.min(POLL)) else { continue };
                rec.bytes_down += bytes;
                let Some((goal, env)) = decode_reply(&body) else { continue };
                if goal == k {
                    rec.t_result = Some(now_ns(epoch));
                    got = Some(decode_mask(unpad_envelope(env)?)?.1);
                    break;
                }
            }
            got
        };
        if let Some(mask) = mask {
            out.compared += 1;
            out.mismatched += mask.classes.iter().zip(&scene.mask.classes).filter(|(a, b)| a != b).count() as u64;
            let inst = extract_instances(&mask, DEFAULT_MIN_AREA);
            let target = inst.iter().find(|i| i.is_target);
            let maps = build_planning_maps::<f64>(&mask, &scene.frame.depth, &data.intrinsics, target, cfg.resolution, cfg.map_stride)?;
            out.obstacle_voxels += maps.obstacles.occupied_keys().len() as u64;
            out.strawberry_voxels += maps.strawberry.occupied_keys().len() as u64;
            rec.t_map_done = Some(now_ns(epoch));
        }
        out.records.push(rec);
    }
    Ok(out)
}

struct MqttRobot {
    client: LiveClient,
    robot: u32,
    qos: QoS,
}

impl RobotLink for MqttRobot {
    fn send(&mut self, stream: Stream, payload: Vec<u8>) -> Result<u64, HarnessError> {
        let topic = mqtt::topic(self.robot, stream.name());
        let size = wire_size(&topic, &payload, self.qos)?;
        self.client.publish(&topic, payload, self.qos)?;
        Ok(size)
    }

    fn recv(&mut self, timeout: Duration) -> Option<(Vec<u8>, u64)> {
        let p = self.client.next_message(timeout)?;
        let size = wire_size(&p.topic, &p.payload, p.qos).unwrap_or(0);
        Some((p.payload, size))
    }
}

fn wire_size(topic: &str, payload: &[u8], qos: QoS) -> Result<u64, HarnessError> {
    let p = match qos {
        QoS::AtMostOnce => Publish::qos0(topic, payload.to_vec()),
        QoS::AtLeastOnce => Publish::qos1(topic, 1, payload.to_vec()),
    };
    Ok(encode_packet(&MqttPacket::Publish(p))?.len() as u64)
}

struct TcpRobot {
    up: Arc<Publisher<TcpStream>>,
    results: Receiver<Vec<u8>>,
}

impl RobotLink for TcpRobot {
    fn send(&mut self, stream: Stream, mut payload: Vec<u8>) -> Result<u64, HarnessError> {
        payload.insert(0, stream as u8);
        self.up.publish(&payload)?;
        Ok(payload.len() as u64 + 4)
    }

    fn recv(&mut self, timeout: Duration) -> Option<(Vec<u8>, u64)> {
        let body = self.results.recv_timeout(timeout).ok()?;
        let n = body.len() as u64 + 4;
        Some((body, n))
    }
}

pub(super) fn run(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutput, HarnessError> {
    let epoch = Instant::now();
    let stamps: Stamps = Arc::new(Mutex::new(BTreeMap::new()));
    let outcomes = if cfg.platform == Platform::Njxn {
        run_local(cfg, data, epoch)?
    } else {
        match cfg.transport {
            Protocol::Tcpros => run_tcpros(cfg, data, epoch, stamps.clone())?,
            Protocol::MqttQos0 | Protocol::MqttQos1 => run_mqtt(cfg, data, epoch, stamps.clone())?,
        }
    };
    let stamps = stamps.lock().unwrap().clone();
    let mut summary = RunSummary {
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
        end_ns: now_ns(epoch),
    };
    let mut records = Vec::new();
    for o in outcomes {
        summary.masks_compared += o.compared;
        summary.mask_mismatch_pixels += o.mismatched;
        summary.obstacle_voxels += o.obstacle_voxels;
        summary.strawberry_voxels += o.strawberry_voxels;
        for mut rec in o.records {
            if let Some(s) = stamps.get(&(rec.robot_id, rec.frame_id)) {
                if rec.t_result.is_some() {
                    rec.t_goal = Some(s.t_goal);
                    rec.t_seg_start = Some(s.t_seg_start);
                    rec.t_seg_end = Some(s.t_seg_end);
                }
            }
            summary.frames += 1;
            if rec.is_success() {
                summary.successes += 1;
            } else {
                summary.failures += 1;
            }
            summary.link_up.bytes_sent += rec.bytes_up;
            summary.link_down.bytes_sent += rec.bytes_down;
            records.push(rec);
        }
    }
    Ok(RunOutput { records, summary })
}

fn join_robots(
    handles: Vec<thread::ScopedJoinHandle<'_, Result<RobotOutcome, HarnessError>>>,
) -> Result<Vec<RobotOutcome>, HarnessError> {
    handles
        .into_iter()
        .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Run("robot thread panicked".into()))))
        .collect()
}

fn run_local(cfg: &ExperimentConfig, data: &Dataset, epoch: Instant) -> Result<Vec<RobotOutcome>, HarnessError> {
    struct NoLink;
    impl RobotLink for NoLink {
        fn send(&mut self, _: Stream, _: Vec<u8>) -> Result<u64, HarnessError> {
            Ok(0)
        }
        fn recv(&mut self, _: Duration) -> Option<(Vec<u8>, u64)> {
            None
        }
    }
    thread::scope(|s| {
        let handles = (0..cfg.robots).map(|r| s.spawn(move || robot_loop(cfg, data, r, epoch, &mut NoLink))).collect();
        join_robots(handles)
    })
}

fn run_mqtt(cfg: &ExperimentConfig, data: &Dataset, epoch: Instant, stamps: Stamps) -> Result<Vec<RobotOutcome>, HarnessError> {
    let policy = cfg.retry_policy();
    let qos = cfg.qos();
    let server = BrokerServer::start("127.0.0.1:0", policy)?;
    let addr = server.addr();
    let stop = AtomicBool::new(false);
    let mut edge_client = LiveClient::connect(addr, "edge", policy)?;
    for r in 0..cfg.robots {
        for s in [Stream::Rgb, Stream::Depth, Stream::Trigger] {
            edge_client.subscribe(&mqtt::topic(r, s.name()), QoS::AtLeastOnce)?;
        }
    }
    let mut robots = Vec::new();
    for r in 0..cfg.robots {
        let mut client = LiveClient::connect(addr, &format!("robot{r}"), policy)?;
        client.subscribe(&mqtt::topic(r, "result"), qos)?;
        robots.push(MqttRobot { client, robot: r, qos });
    }
    let result = thread::scope(|s| {
        let stop = &stop;
        let edge = s.spawn(move || -> Result<(), HarnessError> {
            let mut edge = new_edge(cfg, data, stamps, epoch);
            while !stop.load(Ordering::Relaxed) {
                let Some(p) = edge_client.next_message(POLL) else { continue };
                let mut parts = p.topic.split('/').skip(1);
                let r: Option<u32> = parts.next().and_then(|v| v.parse().ok());
                let stream = match parts.next() {
                    Some("rgb") => Stream::Rgb,
                    Some("depth") => Stream::Depth,
                    Some("trigger") => Stream::Trigger,
                    _ => continue,
                };
                let Some(r) = r else { continue };
                if let Some(reply) = edge.on_message(r, stream, &p.payload)? {
                    edge_client.publish(&mqtt::topic(r, "result"), reply, qos)?;
                }
            }
            let _ = edge_client.disconnect();
            Ok(())
        });
        let handles = robots
            .iter_mut()
            .enumerate()
            .map(|(r, link)| s.spawn(move || robot_loop(cfg, data, r as u32, epoch, link)))
            .collect();
        let out = join_robots(handles);
        stop.store(true, Ordering::Relaxed);
        edge.join().unwrap_or_else(|_| Err(HarnessError::Run("edge thread panicked".into())))?;
        out
    });
    for r in robots {
        let _ = r.client.disconnect();
    }
    server.shutdown();
    result
}

fn new_edge<'a>(cfg: &'a ExperimentConfig, data: &'a Dataset, stamps: Stamps, epoch: Instant) -> Edge<'a> {
    Edge {
        cfg,
        data,
        backend: cfg.backend.into(),
        latency: cfg.latency_model(),
        clients: (0..cfg.robots).map(|_| (ActionClient::new(cfg.backend.into()), None, None)).collect(),
        stamps,
        epoch,
    }
}

fn run_tcpros(cfg: &ExperimentConfig, data: &Dataset, epoch: Instant, stamps: Stamps) -> Result<Vec<RobotOutcome>, HarnessError> {
    let (to_edge, edge_rx): (Sender<(u32, Vec<u8>)>, Receiver<(u32, Vec<u8>)>) = channel();
    let mut robots = Vec::new();
    let mut result_pubs = Vec::new();
    let mut subscriptions = Vec::new();
    let mut servers = Vec::new();
    for r in 0..cfg.robots {
        // robot publishes its camera bundle; the edge subscribes
        let up_topic = format!("/robot{r}/camera");
        let up = Arc::new(Publisher::new(ConnectionHeader::for_topic(&format!("/robot{r}"), &up_topic, UPLINK_TYPE))?);
        let l = TcpListener::bind("127.0.0.1:0")?;
        let up_addr = l.local_addr()?;
        servers.push(tcpros::serve(l, up.clone(), 1));
        let tx = to_edge.clone();
        let sub = tcpros::subscribe(
            TcpStream::connect(up_addr)?,
            &ConnectionHeader::for_topic("/edge", &up_topic, UPLINK_TYPE),
            &up_addr.to_string(),
            DEFAULT_QUEUE_SIZE,
            move |m| {
                let _ = tx.send((r, m));
            },
        )?;
        subscriptions.push(sub);

        // edge publishes results; the robot subscribes
        let down_topic = format!("/robot{r}/result");
        let down = Arc::new(Publisher::new(ConnectionHeader::for_topic("/edge", &down_topic, RESULT_TYPE))?);
        let l = TcpListener::bind("127.0.0.1:0")?;
        let down_addr = l.local_addr()?;
        servers.push(tcpros::serve(l, down.clone(), 1));
        let (rtx, rrx) = channel();
        let sub = tcpros::subscribe(
            TcpStream::connect(down_addr)?,
            &ConnectionHeader::for_topic(&format!("/robot{r}"), &down_topic, RESULT_TYPE),
            &down_addr.to_string(),
            DEFAULT_QUEUE_SIZE,
            move |m| {
                let _ = rtx.send(m);
            },
        )?;
        subscriptions.push(sub);
        result_pubs.push(down);
        robots.push(TcpRobot { up, results: rrx });
    }
    drop(to_edge);
    for s in servers {
        for r in s.join().map_err(|_| HarnessError::Run("accept thread panicked".into()))? {
            r?;
        }
    }
    let stop = AtomicBool::new(false);
    let result = thread::scope(|s| {
        let stop = &stop;
        let pubs = &result_pubs;
        let edge = s.spawn(move || -> Result<(), HarnessError> {
            let mut edge = new_edge(cfg, data, stamps, epoch);
            while !stop.load(Ordering::Relaxed) {
                let (r, msg) = match edge_rx.recv_timeout(POLL) {
                    Ok(m) => m,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break,
                };
                let Some((&tag, body)) = msg.split_first() else { continue };
                let Some(stream) = Stream::from_tag(tag) else { continue };
                if let Some(reply) = edge.on_message(r, stream, body)? {
                    pubs[r as usize].publish(&reply)?;
                }
            }
            Ok(())
        });
        let handles = robots
            .iter_mut()
            .enumerate()
            .map(|(r, link)| s.spawn(move || robot_loop(cfg, data, r as u32, epoch, link)))
            .collect();
        let out = join_robots(handles);
        stop.store(true, Ordering::Relaxed);
        edge.join().unwrap_or_else(|_| Err(HarnessError::Run("edge thread panicked".into())))?;
        out
    });
    // closing the publishers ends the subscriber threads
    drop(robots);
    drop(result_pubs);
    for s in subscriptions {
        let _ = s;
    }
    result
}
