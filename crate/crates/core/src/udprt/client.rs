//! A blocking client over UDP: one request at a time, retried on timeout
//! along the chain the controller currently reports.

use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::client::{Agent, AgentConfig, Completion, HistoryEvent, Request, TimeoutAction};
use crate::dataplane::Envelope;
use crate::placement::Ring;
use crate::wire::Packet;

use super::controller::ControllerClient;
use super::{Ports, UdpError};

pub struct UdpClient {
    agent: Agent,
    sock: UdpSocket,
    data_port: u16,
    ctl: Option<ControllerClient>,
    epoch: Instant,
    buf: Vec<u8>,
    pub retries: u64,
}

impl UdpClient {
    /// Binds `ip` on the client port. Without a controller, retries resend
    /// along the ring's chain.
    pub fn bind(ip: Ipv4Addr, ring: Arc<Ring>, ports: Ports, controller: Option<SocketAddr>, timeout_us: u64, max_retries: u32) -> Result<Self, UdpError> {
        let addr = SocketAddr::V4(SocketAddrV4::new(ip, ports.client));
        let sock = UdpSocket::bind(addr).map_err(|source| UdpError::BindFailure { addr, source })?;
        let config = AgentConfig {
            client_id: u32::from(ip),
            timeout_us,
            max_retries,
        };
        let agent = Agent::new(config, ring).map_err(|e| UdpError::Config(e.to_string()))?;
        Ok(UdpClient {
            agent,
            sock,
            data_port: ports.data,
            ctl: controller.map(ControllerClient::new),
            epoch: Instant::now(),
            buf: vec![0; 2048],
            retries: 0,
        })
    }

    /// Microseconds since the client was created; history timestamps use
    /// this clock.
    pub fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    /// Shares another client's clock so merged histories line up.
    pub fn with_epoch(mut self, epoch: Instant) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn history(&self) -> &[HistoryEvent] {
        self.agent.history()
    }

    pub fn take_history(&mut self) -> Vec<HistoryEvent> {
        self.agent.take_history()
    }

    fn send(&self, env: &Envelope) {
        if let Err(e) = self.sock.send_to(&env.pkt.encode(), SocketAddrV4::new(env.dst, self.data_port)) {
            log::debug!("client send to {}: {e}", env.dst);
        }
    }

    /// Runs one request to completion or until retries run out.
    pub fn execute(&mut self, request: Request) -> Result<Completion, UdpError> {
        let key = request.key();
        let timeout = Duration::from_micros(self.agent.config().timeout_us);
        let (req_id, env) = self.agent.start(request, self.now_us()).map_err(|e| UdpError::Config(e.to_string()))?;
        self.send(&env);
        let mut timer = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            if now >= timer {
                if let Some(ctl) = self.ctl.as_mut() {
                    match ctl.chain(&key) {
                        Ok(chain) => self.agent.set_route(key, chain),
                        Err(e) => log::debug!("chain refresh: {e}"),
                    }
                }
                let t = self.now_us();
                match self.agent.on_timeout(req_id, t) {
                    TimeoutAction::Retry(env) => {
                        self.retries += 1;
                        self.send(&env);
                        timer = Instant::now() + timeout;
                        continue;
                    }
                    TimeoutAction::GaveUp(c) => return Ok(c),
                    TimeoutAction::Stale => unreachable!("request {req_id} is still pending"),
                }
            }
            self.sock.set_read_timeout(Some(timer - now))?;
            let n = match self.sock.recv(&mut self.buf) {
                Ok(n) => n,
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
                Err(e) => return Err(e.into()),
            };
            let Ok(pkt) = Packet::decode(&self.buf[..n]) else { continue };
            let t = self.now_us();
            if let Some(done) = self.agent.on_reply(&pkt, t) {
                if done.req_id == req_id {
                    return Ok(done);
                }
            }
        }
    }
}
