//! The controller node: a [`Controller`] driving switches through their
//! admin ports, itself reachable over the admin protocol.
//!
//! Commands it accepts:
//!
//! ```text
//! status                      OK session=<n> <ip>=<state> ...
//! mark-failed <ip>
//! failover <ip>               also marks the switch failed
//! recover <failed> <new>      OK groups=<n>
//! insert <key-hex> <value-hex>
//! delete <key-hex>
//! chain <key-hex>             OK <ip> <ip> ...
//! manifest                    OK <ring manifest, hex>
//! shutdown
//! ```

use std::collections::BTreeMap;
use std::net::{SocketAddr, SocketAddrV4};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::control::{ControlCommand, ControlError, Controller, SwitchControl};
use crate::dataplane::SwitchStatus;
use crate::placement::SwitchId;
use crate::store::StoreImage;
use crate::wire::Key;

use super::admin::{AdminClient, Handler};
use super::UdpError;

pub const ADMIN_TIMEOUT: Duration = Duration::from_secs(2);

/// [`SwitchControl`] over the switches' admin ports.
#[derive(Debug)]
pub struct UdpControl {
    admin_port: u16,
    conns: BTreeMap<SwitchId, AdminClient>,
}

impl UdpControl {
    pub fn new(admin_port: u16) -> Self {
        UdpControl {
            admin_port,
            conns: BTreeMap::new(),
        }
    }

    fn conn(&mut self, at: SwitchId) -> &mut AdminClient {
        let port = self.admin_port;
        self.conns
            .entry(at)
            .or_insert_with(|| AdminClient::new(SocketAddr::V4(SocketAddrV4::new(at, port)), ADMIN_TIMEOUT))
    }

    fn call(&mut self, at: SwitchId, line: &str) -> Result<String, ControlError> {
        match self.conn(at).request(line) {
            Ok(Ok(p)) => Ok(p),
            Ok(Err(e)) => Err(ControlError::Transport(format!("{at}: {e}"))),
            Err(e) => {
                self.conns.remove(&at);
                Err(ControlError::Transport(format!("{at}: {e}")))
            }
        }
    }
}

impl SwitchControl for UdpControl {
    fn apply(&mut self, cmd: ControlCommand) -> Result<(), ControlError> {
        let at = cmd.target();
        self.call(at, &cmd.to_string()).map(|_| ())
    }

    fn snapshot_keys(&mut self, at: SwitchId, keys: &[Key]) -> Result<StoreImage, ControlError> {
        let mut line = String::from("snapshot");
        for k in keys {
            line.push(' ');
            line.push_str(&k.to_hex());
        }
        let payload = self.call(at, &line)?;
        let bytes = hex::decode(payload).map_err(|e| ControlError::Transport(format!("{at}: snapshot hex: {e}")))?;
        StoreImage::from_bytes(&bytes).map_err(|e| ControlError::Transport(format!("{at}: snapshot image: {e}")))
    }

    fn is_alive(&mut self, at: SwitchId) -> bool {
        matches!(self.call(at, "ping").as_deref(), Ok("alive"))
    }

    fn wait(&mut self, micros: u64) {
        thread::sleep(Duration::from_micros(micros));
    }
}

pub struct ControllerNode {
    pub controller: Controller,
    pub ctl: UdpControl,
}

fn err(e: ControlError) -> String {
    e.to_string()
}

fn status_word(s: SwitchStatus) -> String {
    match s {
        SwitchStatus::Alive => "alive".into(),
        SwitchStatus::Failed => "failed".into(),
        SwitchStatus::Recovered { write_fwd, .. } => format!("recovered:{write_fwd}"),
    }
}

impl ControllerNode {
    pub fn new(controller: Controller, admin_port: u16) -> Self {
        ControllerNode {
            controller,
            ctl: UdpControl::new(admin_port),
        }
    }

    pub fn handle(&mut self, line: &str) -> Result<String, String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let ip = |i: usize| -> Result<SwitchId, String> {
            words.get(i).ok_or("missing address")?.parse().map_err(|_| format!("bad address {:?}", words[i]))
        };
        let key = |i: usize| -> Result<Key, String> {
            let w = words.get(i).ok_or("missing key")?;
            Key::from_hex(w).ok_or_else(|| format!("bad key {w}"))
        };
        let (c, ctl) = (&mut self.controller, &mut self.ctl);
        match words.first().copied() {
            Some("status") => {
                let mut out = format!("session={}", c.session_counter());
                for (ip, st) in c.statuses() {
                    out.push_str(&format!(" {ip}={}", status_word(*st)));
                }
                Ok(out)
            }
            Some("mark-failed") => c.mark_failed(ip(1)?, ctl).map_err(err).map(|_| String::new()),
            Some("failover") | Some("fail") => c.failover(ip(1)?, ctl).map_err(err).map(|rules| format!("rules={}", rules.len())),
            Some("recover") => c.recover(ip(1)?, ip(2)?, ctl).map_err(err).map(|plan| format!("groups={}", plan.groups.len())),
            Some("insert") => {
                let v = hex::decode(words.get(2).ok_or("missing value")?).map_err(|e| e.to_string())?;
                c.admin_insert(key(1)?, &v, ctl).map_err(err).map(|_| String::new())
            }
            Some("delete") => c.admin_delete(key(1)?, ctl).map_err(err).map(|_| String::new()),
            Some("chain") => {
                let chain = c.effective_chain(&key(1)?);
                Ok(chain.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "))
            }
            Some("manifest") => Ok(hex::encode(c.ring().to_manifest())),
            Some(other) => Err(format!("unknown command {other}")),
            None => Err("empty command".into()),
        }
    }
}

/// Admin handler for a controller node; `shutdown` raises `stop`.
pub fn controller_handler(node: Arc<Mutex<ControllerNode>>, stop: Arc<AtomicBool>) -> Handler {
    Arc::new(move |line: &str| {
        if line.trim() == "shutdown" {
            stop.store(true, Ordering::Relaxed);
            return Ok(String::new());
        }
        node.lock().map_err(|_| "controller poisoned".to_string())?.handle(line)
    })
}

/// Talks to a running controller.
pub struct ControllerClient {
    admin: AdminClient,
}

impl ControllerClient {
    pub fn new(addr: SocketAddr) -> Self {
        ControllerClient {
            admin: AdminClient::new(addr, ADMIN_TIMEOUT * 5),
        }
    }

    pub fn call(&mut self, line: &str) -> Result<String, UdpError> {
        self.admin.call(line)
    }

    pub fn chain(&mut self, key: &Key) -> Result<Vec<SwitchId>, UdpError> {
        let reply = self.call(&format!("chain {}", key.to_hex()))?;
        reply
            .split_whitespace()
            .map(|w| w.parse().map_err(|_| UdpError::AdminProtocol(format!("bad address {w}"))))
            .collect()
    }

    pub fn manifest(&mut self) -> Result<String, UdpError> {
        let reply = self.call("manifest")?;
        let bytes = hex::decode(reply).map_err(|e| UdpError::AdminProtocol(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| UdpError::AdminProtocol(e.to_string()))
    }
}
