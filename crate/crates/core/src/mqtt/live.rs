//! Loopback TCP broker and blocking client around the sans-IO state machines.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::{
    encode_packet, read_packet, Broker, BrokerStats, ClientEvent, Delivery, MqttClient, MqttError, MqttPacket, QoS,
    RetryPolicy, SessionId,
};
use crate::types::Nanos;

const TICK: Duration = Duration::from_millis(20);

fn elapsed_ns(epoch: Instant) -> Nanos {
    epoch.elapsed().as_nanos() as Nanos
}

struct Shared {
    broker: Mutex<Broker>,
    writers: Mutex<BTreeMap<SessionId, TcpStream>>,
    stop: AtomicBool,
    epoch: Instant,
}

impl Shared {
    // Called with the broker lock held so routing and writes stay in one order.
    fn dispatch(&self, deliveries: Vec<Delivery>) {
        let mut writers = self.writers.lock().unwrap();
        for d in deliveries {
            let Some(w) = writers.get_mut(&d.to) else { continue };
            let bytes = match encode_packet(&d.packet) {
                Ok(b) => b,
                Err(e) => {
                    warn!("cannot encode delivery to {}: {e}", d.to);
                    continue;
                }
            };
            if let Err(e) = w.write_all(&bytes) {
                debug!("write to session {} failed: {e}", d.to);
            }
        }
    }
}

/// A broker listening on a TCP address; one reader thread per connection.
pub struct BrokerServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn start(bind: impl ToSocketAddrs, policy: RetryPolicy) -> Result<Self, MqttError> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            broker: Mutex::new(Broker::new(policy)),
            writers: Mutex::new(BTreeMap::new()),
            stop: AtomicBool::new(false),
            epoch: Instant::now(),
        });
        let accept = {
            let shared = shared.clone();
            thread::spawn(move || accept_loop(listener, shared))
        };
        let ticker = {
            let shared = shared.clone();
            thread::spawn(move || {
                while !shared.stop.load(Ordering::Relaxed) {
                    thread::sleep(TICK);
                    let mut broker = shared.broker.lock().unwrap();
                    let resend = broker.retransmit(elapsed_ns(shared.epoch));
                    shared.dispatch(resend);
                }
            })
        };
        Ok(BrokerServer { addr, shared, threads: vec![accept, ticker] })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> BrokerStats {
        self.shared.broker.lock().unwrap().stats()
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        for w in self.shared.writers.lock().unwrap().values() {
            let _ = w.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut readers = Vec::new();
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                let Ok(writer) = stream.try_clone() else { continue };
                let session = shared.broker.lock().unwrap().open_session();
                shared.writers.lock().unwrap().insert(session, writer);
                debug!("session {session} from {peer}");
                let shared = shared.clone();
                readers.push(thread::spawn(move || serve_session(stream, session, shared)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!("accept failed: {e}");
                break;
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

fn serve_session(mut stream: TcpStream, session: SessionId, shared: Arc<Shared>) {
    loop {
        match read_packet(&mut stream) {
            Ok(Some(packet)) => {
                let disconnect = packet == MqttPacket::Disconnect;
                let mut broker = shared.broker.lock().unwrap();
                let out = broker.handle(session, packet, elapsed_ns(shared.epoch));
                shared.dispatch(out);
                if disconnect {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                debug!("session {session}: {e}");
                break;
            }
        }
    }
    shared.broker.lock().unwrap().close_session(session);
    if let Some(w) = shared.writers.lock().unwrap().remove(&session) {
        let _ = w.shutdown(Shutdown::Both);
    }
}

/// Blocking client connected to a [`BrokerServer`].
pub struct LiveClient {
    writer: Arc<Mutex<TcpStream>>,
    state: Arc<Mutex<MqttClient>>,
    events: Receiver<ClientEvent>,
    pending: VecDeque<ClientEvent>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    epoch: Instant,
}

impl LiveClient {
    pub fn connect(addr: SocketAddr, client_id: &str, policy: RetryPolicy) -> Result<Self, MqttError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let writer = Arc::new(Mutex::new(stream));
        let state = Arc::new(Mutex::new(MqttClient::new(client_id, policy)));
        let stop = Arc::new(AtomicBool::new(false));
        let epoch = Instant::now();
        let (tx, events) = channel();

        let reader_thread = {
            let (writer, state) = (writer.clone(), state.clone());
            thread::spawn(move || {
                while let Ok(Some(packet)) = read_packet(&mut reader) {
                    let (event, reply) = state.lock().unwrap().handle(packet);
                    if let Some(reply) = reply {
                        if let Ok(bytes) = encode_packet(&reply) {
                            let _ = writer.lock().unwrap().write_all(&bytes);
                        }
                    }
                    if let Some(event) = event {
                        if tx.send(event).is_err() {
                            break;
                        }
                    }
                }
            })
        };
        let ticker = {
            let (writer, state, stop) = (writer.clone(), state.clone(), stop.clone());
            thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    thread::sleep(TICK);
                    let resend = state.lock().unwrap().retransmit(elapsed_ns(epoch));
                    let mut w = writer.lock().unwrap();
                    for p in resend {
                        if let Ok(bytes) = encode_packet(&p) {
                            let _ = w.write_all(&bytes);
                        }
                    }
                }
            })
        };
        let mut client = LiveClient {
            writer,
            state,
            events,
            pending: VecDeque::new(),
            stop,
            threads: vec![reader_thread, ticker],
            epoch,
        };
        let connect = client.state.lock().unwrap().connect(60);
        client.send(&connect)?;
        match client.wait_for(|e| matches!(e, ClientEvent::Connected { .. }), Duration::from_secs(5))? {
            ClientEvent::Connected { return_code: 0 } => Ok(client),
            other => Err(MqttError::Malformed(format!("connection refused: {other:?}"))),
        }
    }

    fn send(&self, p: &MqttPacket) -> Result<(), MqttError> {
        let bytes = encode_packet(p)?;
        self.writer.lock().unwrap().write_all(&bytes)?;
        Ok(())
    }

    fn wait_for(&mut self, pred: impl Fn(&ClientEvent) -> bool, timeout: Duration) -> Result<ClientEvent, MqttError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(left) {
                Ok(e) if pred(&e) => return Ok(e),
                Ok(e) => self.pending.push_back(e),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(MqttError::Io(std::io::Error::new(std::io::ErrorKind::TimedOut, "no reply from broker")))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(MqttError::Io(std::io::ErrorKind::ConnectionReset.into()))
                }
            }
        }
    }

    /// Subscribes and waits for the SUBACK; returns the granted codes.
    pub fn subscribe(&mut self, filter: &str, qos: QoS) -> Result<Vec<u8>, MqttError> {
        let p = self.state.lock().unwrap().subscribe(filter, qos);
        let MqttPacket::Subscribe { packet_id: want, .. } = p else { unreachable!() };
        self.send(&p)?;
        match self.wait_for(|e| matches!(e, ClientEvent::Subscribed { packet_id, .. } if *packet_id == want), Duration::from_secs(5))? {
            ClientEvent::Subscribed { return_codes, .. } => Ok(return_codes),
            _ => unreachable!(),
        }
    }

    pub fn publish(&self, topic: &str, payload: Vec<u8>, qos: QoS) -> Result<(), MqttError> {
        let now = elapsed_ns(self.epoch);
        let p = self.state.lock().unwrap().publish(topic, payload, qos, now)?;
        self.send(&p)
    }

    pub fn inflight(&self) -> usize {
        self.state.lock().unwrap().inflight().len()
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Option<ClientEvent> {
        if let Some(e) = self.pending.pop_front() {
            return Some(e);
        }
        self.events.recv_timeout(timeout).ok()
    }

    /// Next application message, skipping acks and pongs.
    pub fn next_message(&mut self, timeout: Duration) -> Option<super::Publish> {
        if let Some(i) = self.pending.iter().position(|e| matches!(e, ClientEvent::Message(_))) {
            if let Some(ClientEvent::Message(p)) = self.pending.remove(i) {
                return Some(p);
            }
        }
        match self.wait_for(|e| matches!(e, ClientEvent::Message(_)), timeout) {
            Ok(ClientEvent::Message(p)) => Some(p),
            _ => None,
        }
    }

    pub fn disconnect(mut self) -> Result<(), MqttError> {
        let r = self.send(&MqttPacket::Disconnect);
        self.close();
        r
    }

    fn close(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.writer.lock().unwrap().shutdown(Shutdown::Both);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for LiveClient {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loopback_pub_sub() {
        let server = BrokerServer::start("127.0.0.1:0", RetryPolicy::default()).unwrap();
        let mut sub = LiveClient::connect(server.addr(), "edge", RetryPolicy::default()).unwrap();
        assert_eq!(sub.subscribe("robot/#", QoS::AtLeastOnce).unwrap(), vec![1]);
        let publisher = LiveClient::connect(server.addr(), "robot1", RetryPolicy::default()).unwrap();
        for i in 0..20u8 {
            let qos = if i % 2 == 0 { QoS::AtMostOnce } else { QoS::AtLeastOnce };
            publisher.publish("robot/1/rgb", vec![i], qos).unwrap();
        }
        let got: Vec<u8> = (0..20).map(|_| sub.next_message(Duration::from_secs(5)).unwrap().payload[0]).collect();
        assert_eq!(got, (0..20).collect::<Vec<u8>>());
        let t0 = Instant::now();
        while publisher.inflight() > 0 && t0.elapsed() < Duration::from_secs(5) {
            thread::sleep(Duration::from_millis(5));
        }
        assert_eq!(publisher.inflight(), 0);
        publisher.disconnect().unwrap();
        sub.disconnect().unwrap();
        assert_eq!(server.stats().received, 20);
        server.shutdown();
    }
}
