//! Closed-loop load against a running cluster. Each client thread keeps one
//! request outstanding; on a timeout it asks the controller for the key's
//! current chain before retrying.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::history::{check_consistency, HistoryViolation};
use crate::client::{HistoryEvent, OpResult, Request, DEFAULT_MAX_RETRIES, DEFAULT_UDP_TIMEOUT_US};
use crate::placement::Ring;
use crate::simnet::report::percentile;
use crate::wire::{Key, MAX_VALUE};

use super::client::UdpClient;
use super::controller::ControllerClient;
use super::{bench_client_ip, default_controller_addr, Ports, UdpError};

pub const CSV_HEADER: &str = "clients,write_ratio,value_size,duration_s,ops,qps,p50_us,p99_us,timeouts,retries";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub controller: SocketAddr,
    pub ports: Ports,
    pub clients: u32,
    pub write_ratio: f64,
    pub value_size: usize,
    pub duration: Duration,
    pub keys: u64,
    pub seed: u64,
    pub timeout_us: u64,
    pub max_retries: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            controller: default_controller_addr(),
            ports: Ports::default(),
            clients: 4,
            write_ratio: 0.5,
            value_size: 16,
            duration: Duration::from_secs(5),
            keys: 16,
            seed: 1,
            timeout_us: DEFAULT_UDP_TIMEOUT_US,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub elapsed: Duration,
    pub ops: u64,
    pub p50_us: u64,
    pub p99_us: u64,
    pub timeouts: u64,
    pub retries: u64,
    pub history: Vec<HistoryEvent>,
}

impl BenchReport {
    pub fn qps(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{:.1},{},{},{},{}",
            c.clients,
            c.write_ratio,
            c.value_size,
            c.duration.as_secs_f64(),
            self.ops,
            self.qps(),
            self.p50_us,
            self.p99_us,
            self.timeouts,
            self.retries
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "{} clients, {:.0}% writes, {}-byte values: {} ops in {:.2} s ({:.0} qps), p50 {} us, p99 {} us, {} timeouts, {} retries",
            self.config.clients,
            self.config.write_ratio * 100.0,
            self.config.value_size,
            self.ops,
            self.elapsed.as_secs_f64(),
            self.qps(),
            self.p50_us,
            self.p99_us,
            self.timeouts,
            self.retries
        )
    }

    /// Per-client version monotonicity over everything the clients saw.
    pub fn check(&self) -> Result<(), HistoryViolation> {
        check_consistency(&self.history)
    }
}

pub fn bench_key(i: u64) -> Key {
    Key::from_index(i)
}

/// Inserts the benchmark keys, leaving ones that already exist alone.
pub fn prepare_keys(ctl: &mut ControllerClient, keys: u64, value_size: usize) -> Result<(), UdpError> {
    let init = hex::encode(vec![0u8; value_size]);
    for i in 0..keys {
        match ctl.call(&format!("insert {} {init}", bench_key(i).to_hex())) {
            Ok(_) => {}
            Err(UdpError::AdminProtocol(m)) if m.contains("already present") => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, UdpError> {
    if cfg.value_size > MAX_VALUE {
        return Err(UdpError::Config(format!("value size {} over {MAX_VALUE}", cfg.value_size)));
    }
    if cfg.clients == 0 || cfg.keys == 0 {
        return Err(UdpError::Config("need at least one client and one key".into()));
    }
    let mut ctl = ControllerClient::new(cfg.controller);
    let ring = Arc::new(Ring::from_manifest(&ctl.manifest()?)?);
    prepare_keys(&mut ctl, cfg.keys, cfg.value_size)?;
    let epoch = Instant::now();
    let deadline = epoch + cfg.duration;
    let mut workers = Vec::new();
    for i in 0..cfg.clients {
        let (cfg, ring) = (cfg.clone(), ring.clone());
        workers.push(thread::spawn(move || client_loop(i, &cfg, ring, epoch, deadline)));
    }
    let mut out = Outcome::default();
    for w in workers {
        let o = w.join().expect("bench client panicked")?;
        out.latencies.extend(o.latencies);
        out.timeouts += o.timeouts;
        out.retries += o.retries;
        out.history.extend(o.history);
    }
    let elapsed = epoch.elapsed();
    out.history.sort_by_key(|e| e.time_us);
    Ok(BenchReport {
        config: cfg.clone(),
        elapsed,
        ops: out.latencies.len() as u64,
        p50_us: percentile(&mut out.latencies, 50.0),
        p99_us: percentile(&mut out.latencies, 99.0),
        timeouts: out.timeouts,
        retries: out.retries,
        history: out.history,
    })
}

#[derive(Default)]
struct Outcome {
    latencies: Vec<u64>,
    timeouts: u64,
    retries: u64,
    history: Vec<HistoryEvent>,
}

fn client_loop(i: u32, cfg: &BenchConfig, ring: Arc<Ring>, epoch: Instant, deadline: Instant) -> Result<Outcome, UdpError> {
    let mut client = UdpClient::bind(bench_client_ip(i), ring, cfg.ports, Some(cfg.controller), cfg.timeout_us, cfg.max_retries)?.with_epoch(epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
    let mut out = Outcome::default();
    let mut counter = 0u64;
    while Instant::now() < deadline {
        let key = bench_key(rng.gen_range(0..cfg.keys));
        let request = if rng.gen_bool(cfg.write_ratio.clamp(0.0, 1.0)) {
            counter += 1;
            let mut v = [i.to_le_bytes().as_slice(), counter.to_le_bytes().as_slice()].concat();
            v.resize(cfg.value_size, 0);
            Request::Write(key, v)
        } else {
            Request::Read(key)
        };
        let started = Instant::now();
        let done = client.execute(request)?;
        if done.result == OpResult::TimedOut {
            out.timeouts += 1;
        } else {
            out.latencies.push(started.elapsed().as_micros() as u64);
        }
    }
    out.retries = client.retries;
    out.history = client.take_history();
    Ok(out)
}
