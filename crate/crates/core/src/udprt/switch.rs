//! One switch: a UDP socket on its own address and a serial loop that owns
//! the switch state.
//!
//! Admin commands arrive on a separate TCP thread and are handed to the loop
//! over a channel, so the state is only ever touched by the loop. Packets
//! leaving the switch pass its rule table first; a rewrite addressed back to
//! the switch is processed in place.

use std::collections::BTreeSet;
use std::net::{IpAddr, SocketAddr, SocketAddrV4, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::control::{apply_to_switch, ControlCommand};
use crate::dataplane::{Delivery, Emit, Envelope, Intercept, SwitchState, SwitchStatus, MAX_REWRITES};
use crate::placement::{Ring, SwitchId};
use crate::store::Store;
use crate::wire::{Key, Packet, MAX_CHAIN, MAX_VALUE};

use super::admin::{self, Handler};
use super::{Ports, UdpError};

const RECV_POLL: Duration = Duration::from_millis(2);
const MAX_DATAGRAM: usize = 64 + 4 * MAX_CHAIN + 2 * MAX_VALUE;

type AdminMsg = (String, Sender<Result<String, String>>);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeCounters {
    pub datagrams: u64,
    pub malformed: u64,
    pub sent: u64,
    pub send_errors: u64,
    pub loops: u64,
    pub dropped_not_alive: u64,
}

pub struct SwitchNode {
    state: SwitchState,
    ring: Arc<Ring>,
    switches: BTreeSet<SwitchId>,
    sock: UdpSocket,
    ports: Ports,
    busy: Arc<AtomicBool>,
    buf: Vec<u8>,
    pub counters: NodeCounters,
}

impl SwitchNode {
    pub fn bind(ip: SwitchId, ring: Arc<Ring>, ports: Ports, store: Store) -> Result<Self, UdpError> {
        let addr = SocketAddr::V4(SocketAddrV4::new(ip, ports.data));
        let sock = UdpSocket::bind(addr).map_err(|source| UdpError::BindFailure { addr, source })?;
        sock.set_read_timeout(Some(RECV_POLL))?;
        Ok(SwitchNode {
            state: SwitchState::with_store(ip, store),
            switches: ring.all_switches().collect(),
            ring,
            sock,
            ports,
            busy: Arc::new(AtomicBool::new(false)),
            buf: Vec::with_capacity(MAX_DATAGRAM),
            counters: NodeCounters::default(),
        })
    }

    pub fn ip(&self) -> SwitchId {
        self.state.ip
    }

    pub fn state(&self) -> &SwitchState {
        &self.state
    }

    /// Handles one received datagram to completion.
    pub fn on_datagram(&mut self, bytes: &[u8], from: SocketAddr) {
        let busy = self.busy.clone();
        assert!(!busy.swap(true, Ordering::SeqCst), "switch {} re-entered its packet loop", self.ip());
        self.counters.datagrams += 1;
        match (Packet::decode(bytes), from.ip()) {
            (Ok(pkt), IpAddr::V4(src)) => {
                let env = Envelope { src, dst: self.ip(), pkt };
                self.process(env, 0);
            }
            (Err(e), _) => {
                self.counters.malformed += 1;
                log::debug!("switch {}: bad datagram from {from}: {e}", self.ip());
            }
            (Ok(_), IpAddr::V6(_)) => self.counters.malformed += 1,
        }
        busy.store(false, Ordering::SeqCst);
    }

    fn process(&mut self, env: Envelope, depth: usize) {
        if !self.state.is_alive() {
            self.counters.dropped_not_alive += 1;
            return;
        }
        let role = Delivery::for_packet(&env.pkt);
        let emits = match self.state.process(env.pkt, role) {
            Ok(e) => e,
            Err(e) => {
                log::debug!("switch {}: {e}", self.ip());
                return;
            }
        };
        for e in emits {
            self.emit(e, depth);
        }
    }

    fn emit(&mut self, e: Emit, depth: usize) {
        match e {
            Emit::Net(env) if env.dst == self.ip() => self.process(env, depth + 1),
            Emit::Net(env) => self.route(env, depth),
            Emit::ToController(p) => log::info!("switch {}: {} for the controller dropped", self.ip(), p.op.name()),
        }
    }

    /// A packet leaving this switch for another address.
    fn route(&mut self, env: Envelope, depth: usize) {
        if depth > MAX_REWRITES {
            self.counters.loops += 1;
            return;
        }
        let group = self.ring.group_of_key(&env.pkt.key);
        match self.state.intercept(env, group) {
            Intercept::Pass(env) => self.send(&env),
            Intercept::Rewritten(emits) => {
                for e in emits {
                    self.emit(e, depth + 1);
                }
            }
            Intercept::Held | Intercept::Dropped => {}
        }
    }

    fn send(&mut self, env: &Envelope) {
        let port = if self.switches.contains(&env.dst) {
            self.ports.data
        } else {
            self.ports.client
        };
        self.buf.clear();
        env.pkt.encode_into(&mut self.buf);
        match self.sock.send_to(&self.buf, SocketAddrV4::new(env.dst, port)) {
            Ok(_) => self.counters.sent += 1,
            Err(e) => {
                self.counters.send_errors += 1;
                log::debug!("switch {}: send to {}: {e}", self.ip(), env.dst);
            }
        }
    }

    /// Runs one admin command against the switch.
    pub fn on_admin(&mut self, line: &str) -> Result<String, String> {
        let busy = self.busy.clone();
        assert!(!busy.swap(true, Ordering::SeqCst), "switch {} re-entered its packet loop", self.ip());
        let r = self.admin(line);
        busy.store(false, Ordering::SeqCst);
        r
    }

    fn admin(&mut self, line: &str) -> Result<String, String> {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("ping") => Ok(match self.state.status {
                SwitchStatus::Alive => "alive",
                SwitchStatus::Failed => "failed",
                SwitchStatus::Recovered { .. } => "recovered",
            }
            .to_string()),
            Some("snapshot") => {
                let keys: Vec<Key> = words.map(|w| Key::from_hex(w).ok_or_else(|| format!("bad key {w}"))).collect::<Result<_, _>>()?;
                let image = if keys.is_empty() {
                    self.state.store.snapshot()
                } else {
                    self.state.store.snapshot_keys(&keys)
                };
                Ok(hex::encode(image.to_bytes()))
            }
            Some("counters") => {
                let c = self.state.counters;
                Ok(format!(
                    "processed={} stale_drops={} intercepted={} held={} sent={} session={}",
                    c.processed, c.stale_drops, c.intercepted, c.held, self.counters.sent, self.state.session
                ))
            }
            _ => {
                let cmd = ControlCommand::parse_line(line).map_err(|e| e.to_string())?;
                if cmd.target() != self.ip() {
                    return Err(format!("command for {} sent to {}", cmd.target(), self.ip()));
                }
                let released = apply_to_switch(&mut self.state, cmd).map_err(|e| e.to_string())?;
                for env in released {
                    self.route(env, 0);
                }
                Ok(String::new())
            }
        }
    }

    /// Serves packets and admin commands until `stop` is set. Returns the
    /// final switch state.
    pub fn run(mut self, admin_rx: Receiver<AdminMsg>, stop: Arc<AtomicBool>) -> (SwitchState, NodeCounters) {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        while !stop.load(Ordering::Relaxed) {
            while let Ok((line, reply)) = admin_rx.try_recv() {
                let _ = reply.send(self.on_admin(&line));
            }
            match self.sock.recv_from(&mut buf) {
                Ok((n, from)) => self.on_datagram(&buf[..n], from),
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => log::debug!("switch {}: recv: {e}", self.ip()),
            }
        }
        (self.state, self.counters)
    }
}

/// A switch running on its own threads.
pub struct SwitchHandle {
    pub ip: SwitchId,
    worker: JoinHandle<(SwitchState, NodeCounters)>,
    admin: JoinHandle<()>,
}

impl SwitchHandle {
    /// Waits for the threads after the shared stop flag was set.
    pub fn join(self) -> (SwitchState, NodeCounters) {
        let out = self.worker.join().expect("switch loop panicked");
        let _ = self.admin.join();
        out
    }
}

/// Binds both ports of switch `ip` and starts serving.
pub fn spawn_switch(ip: SwitchId, ring: Arc<Ring>, ports: Ports, store: Store, stop: Arc<AtomicBool>) -> Result<SwitchHandle, UdpError> {
    let node = SwitchNode::bind(ip, ring, ports, store)?;
    let listener = admin::bind_listener(SocketAddr::V4(SocketAddrV4::new(ip, ports.admin)))?;
    let (tx, rx) = mpsc::channel::<AdminMsg>();
    let tx = std::sync::Mutex::new(tx);
    let handler: Handler = Arc::new(move |line: &str| {
        let (rtx, rrx) = mpsc::channel();
        tx.lock()
            .map_err(|_| "switch gone".to_string())?
            .send((line.to_string(), rtx))
            .map_err(|_| "switch loop stopped".to_string())?;
        rrx.recv().map_err(|_| "switch loop stopped".to_string())?
    });
    let admin = admin::serve(listener, handler, stop.clone());
    let worker = thread::Builder::new()
        .name(format!("switch-{ip}"))
        .spawn(move || node.run(rx, stop))?;
    Ok(SwitchHandle { ip, worker, admin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::OpCode;
    use std::net::Ipv4Addr;

    #[test]
    fn reentering_the_loop_panics() {
        let ip = Ipv4Addr::new(127, 0, 0, 1);
        let ring = Arc::new(Ring::single_chain(&[ip], 4, 1, 0).unwrap());
        let mut node = SwitchNode::bind(ip, ring, Ports::offset(7), Store::with_capacity(4)).unwrap();
        node.busy.store(true, Ordering::SeqCst);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| node.on_admin("ping")));
        assert!(r.is_err());
    }

    #[test]
    fn admin_read_of_a_fresh_switch() {
        let ip = Ipv4Addr::new(127, 0, 0, 1);
        let ring = Arc::new(Ring::single_chain(&[ip], 4, 1, 0).unwrap());
        let mut node = SwitchNode::bind(ip, ring, Ports::offset(8), Store::with_capacity(4)).unwrap();
        assert_eq!(node.on_admin("ping").unwrap(), "alive");
        let k = Key::from_index(3);
        node.on_admin(&format!("insert {ip} {} 07", k.to_hex())).unwrap();
        assert!(node.on_admin(&format!("insert 127.0.0.9 {} 07", k.to_hex())).is_err());
        assert_eq!(node.state().store.get(&k).unwrap().value, vec![7]);
        assert_eq!(node.on_admin(&format!("status {ip} failed")).unwrap(), "");
        assert_eq!(node.on_admin("ping").unwrap(), "failed");
        let mut pkt = Packet::new(OpCode::Read, k);
        pkt.client_id = 1;
        node.on_datagram(&pkt.encode(), "127.0.0.1:1".parse().unwrap());
        assert_eq!(node.counters.dropped_not_alive, 1);
    }
}
