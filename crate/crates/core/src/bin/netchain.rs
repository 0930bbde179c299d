//! Command-line front end for the simulator, the model explorer, the UDP
//! runtime and the history checkers.
//!
//! Exit status: 0 when everything held, 1 on a safety violation, 2 on any
//! other failure.

use std::fs;
use std::io::BufReader;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use netchain::client::history::{check_consistency, read_history, write_history};
use netchain::client::linearizability::{check_linearizable, LinearizabilityError};
use netchain::dataplane::SwitchStatus;
use netchain::placement::Ring;
use netchain::simnet::explore::{explore, ExploreBounds, ExploreConfig, ModelMutation, Outcome, DEFAULT_STATE_CAP};
use netchain::simnet::{run, ScenarioConfig};
use netchain::udprt::bench::CSV_HEADER as BENCH_CSV_HEADER;
use netchain::udprt::{default_controller_addr, run_bench, BenchConfig, Cluster, ClusterOptions, ControllerClient, Ports};

#[derive(Parser)]
#[command(name = "netchain", version, about = "Chain-replicated coordination on switch-like nodes")]
struct Cli {
    #[command(subcommand)]
    cmd: Top,
}

#[derive(Subcommand)]
enum Top {
    /// Deterministic simulation and exhaustive model exploration.
    #[command(subcommand)]
    Sim(SimCmd),
    /// The UDP runtime.
    #[command(subcommand)]
    Net(NetCmd),
    /// Offline checks.
    #[command(subcommand)]
    Check(CheckCmd),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run a scenario file and write its report into a directory.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
    },
    /// Breadth-first search of the abstract chain model.
    Explore {
        /// max queue length, max failed switches, max version, max buffered ops
        #[arg(long, default_value = "2,1,3,2")]
        bounds: ExploreBounds,
        #[arg(long, default_value_t = 4)]
        switches: u8,
        #[arg(long, default_value_t = 1)]
        keys: u8,
        #[arg(long, default_value_t = 2)]
        values: u8,
        /// Deliberately broken model: drop-seq-guard, skip-session-bump, activate-before-sync.
        #[arg(long)]
        mutation: Option<ModelMutation>,
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: u64,
    },
}

#[derive(Args, Clone, Copy)]
struct Endpoint {
    /// Controller admin address.
    #[arg(long, default_value_t = default_controller_addr())]
    controller: SocketAddr,
    /// Added to every default port.
    #[arg(long, default_value_t = 0)]
    port_offset: u16,
}

#[derive(Subcommand)]
enum NetCmd {
    /// Start every switch of a ring manifest and the controller, in this
    /// process, until `net shutdown` or Ctrl-C.
    Up {
        manifest: PathBuf,
        #[command(flatten)]
        at: Endpoint,
        #[arg(long, default_value_t = 4096)]
        store_capacity: usize,
        /// Preload keys 0..N with a zero value.
        #[arg(long, default_value_t = 0)]
        preload: u64,
    },
    /// Closed-loop load from C clients against a running cluster.
    Bench {
        #[arg(long, default_value_t = 4)]
        clients: u32,
        #[arg(long, default_value_t = 0.5)]
        write_ratio: f64,
        #[arg(long, default_value_t = 16)]
        value_size: usize,
        /// Seconds.
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        #[arg(long, default_value_t = 16)]
        keys: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        timeout_ms: u64,
        /// Also write the observed history here.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        at: Endpoint,
    },
    /// Fail a switch and install bypass rules around it.
    Fail {
        ip: Ipv4Addr,
        #[command(flatten)]
        at: Endpoint,
    },
    /// Move a failed switch's roles onto a new switch.
    Recover {
        ip: Ipv4Addr,
        new_ip: Ipv4Addr,
        #[command(flatten)]
        at: Endpoint,
    },
    /// Print switch states as the controller sees them.
    Status {
        #[command(flatten)]
        at: Endpoint,
    },
    /// Stop a cluster started with `net up`.
    Shutdown {
        #[command(flatten)]
        at: Endpoint,
    },
}

#[derive(Subcommand)]
enum CheckCmd {
    /// Check a recorded history for per-client monotonic versions and, per
    /// key, linearizability.
    History {
        file: PathBuf,
        /// Only the monotonic-version check.
        #[arg(long)]
        no_linearizability: bool,
    },
}

enum Failure {
    Violation(String),
    Error(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Error(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NETCHAIN_LOG", "warn")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Top::Sim(c) => sim(c),
        Top::Net(c) => net(c),
        Top::Check(c) => check(c),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation(m)) => {
            eprintln!("violation: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Error(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn sim(c: SimCmd) -> CmdResult {
    match c {
        SimCmd::Run { scenario, seed, out } => {
            let text = fs::read_to_string(&scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
            let cfg = ScenarioConfig::from_toml(&text)?;
            let report = run(&cfg, seed)?;
            report.write_to_dir(&out)?;
            print!("{}", report.metrics_csv());
            eprintln!("{}", report.summary());
            eprintln!("report written to {}", out.display());
            match &report.violation {
                None => Ok(()),
                Some(v) => Err(Failure::Violation(v.to_string())),
            }
        }
        SimCmd::Explore {
            bounds,
            switches,
            keys,
            values,
            mutation,
            state_cap,
        } => {
            let cfg = ExploreConfig::new(bounds, switches, keys, values)
                .with_mutation(mutation.unwrap_or(ModelMutation::None))
                .with_state_cap(state_cap);
            let started = std::time::Instant::now();
            let outcome = explore(cfg)?;
            let secs = started.elapsed().as_secs_f64();
            println!("bounds,switches,keys,values,outcome,states,transitions,depth,invariant,trace_len,seconds");
            let head = format!("\"{bounds}\",{switches},{keys},{values}");
            match &outcome {
                Outcome::NoViolation { states, transitions, depth } => {
                    println!("{head},no_violation,{states},{transitions},{depth},,,{secs:.2}");
                    eprintln!("no violation in {states} states ({transitions} transitions, depth {depth}), {secs:.1} s");
                    Ok(())
                }
                Outcome::BoundsExceeded { states, depth } => {
                    println!("{head},bounds_exceeded,{states},,{depth},,,{secs:.2}");
                    Err(Failure::Error(format!(
                        "state cap reached after {states} states; levels up to depth {depth} fully covered"
                    )))
                }
                Outcome::Violation { states, counterexample } => {
                    println!(
                        "{head},violation,{states},,,{},{},{secs:.2}",
                        counterexample.invariant,
                        counterexample.steps.len()
                    );
                    eprint!("{counterexample}");
                    Err(Failure::Violation(format!("{} after {states} states", counterexample.invariant)))
                }
            }
        }
    }
}

fn ports(at: &Endpoint) -> Ports {
    Ports::offset(at.port_offset)
}

fn net(c: NetCmd) -> CmdResult {
    match c {
        NetCmd::Up {
            manifest,
            at,
            store_capacity,
            preload,
        } => {
            let text = fs::read_to_string(&manifest).map_err(|e| format!("{}: {e}", manifest.display()))?;
            let ring = Ring::from_manifest(&text)?;
            let options = ClusterOptions {
                ports: ports(&at),
                controller: at.controller,
                store_capacity,
                ..ClusterOptions::default()
            };
            let p = options.ports;
            let cluster = Cluster::start(ring.clone(), options)?;
            let stop = cluster.stop_flag();
            ctrlc::set_handler(move || stop.store(true, std::sync::atomic::Ordering::Relaxed))?;
            if preload > 0 {
                let mut ctl = ControllerClient::new(at.controller);
                netchain::udprt::bench::prepare_keys(&mut ctl, preload, 16)?;
            }
            println!("role,address,data_port,admin_port");
            for s in ring.switches() {
                println!("switch,{s},{},{}", p.data, p.admin);
            }
            for s in ring.spares() {
                println!("spare,{s},{},{}", p.data, p.admin);
            }
            println!("controller,{},,{}", at.controller.ip(), at.controller.port());
            eprintln!("cluster up; stop with `netchain net shutdown` or Ctrl-C");
            cluster.wait();
            let states = cluster.shutdown();
            println!("switch,status,keys,processed,stale_drops,intercepted,datagrams,sent,malformed");
            for (ip, (st, n)) in &states {
                let c = st.counters;
                println!(
                    "{ip},{},{},{},{},{},{},{},{}",
                    match st.status {
                        SwitchStatus::Alive => "alive",
                        SwitchStatus::Failed => "failed",
                        SwitchStatus::Recovered { .. } => "recovered",
                    },
                    st.store.len(),
                    c.processed,
                    c.stale_drops,
                    c.intercepted,
                    n.datagrams,
                    n.sent,
                    n.malformed
                );
            }
            eprintln!("cluster stopped");
            Ok(())
        }
        NetCmd::Bench {
            clients,
            write_ratio,
            value_size,
            duration,
            keys,
            seed,
            timeout_ms,
            history,
            at,
        } => {
            if !(0.0..=1.0).contains(&write_ratio) {
                return Err(Failure::Error("write ratio must be within 0..=1".into()));
            }
            let cfg = BenchConfig {
                controller: at.controller,
                ports: ports(&at),
                clients,
                write_ratio,
                value_size,
                duration: Duration::from_secs_f64(duration),
                keys,
                seed,
                timeout_us: timeout_ms * 1000,
                ..BenchConfig::default()
            };
            let report = run_bench(&cfg)?;
            println!("{BENCH_CSV_HEADER}");
            println!("{}", report.csv_row());
            eprintln!("{}", report.summary());
            if let Some(path) = history {
                let f = fs::File::create(&path)?;
                write_history(std::io::BufWriter::new(f), &report.history)?;
                eprintln!("history written to {}", path.display());
            }
            report.check().map_err(|v| Failure::Violation(v.to_string()))
        }
        NetCmd::Fail { ip, at } => admin_action(&at, "fail", &format!("failover {ip}")),
        NetCmd::Recover { ip, new_ip, at } => admin_action(&at, "recover", &format!("recover {ip} {new_ip}")),
        NetCmd::Status { at } => {
            let reply = ControllerClient::new(at.controller).call("status")?;
            println!("switch,status");
            let mut words = reply.split_whitespace();
            let session = words.next().unwrap_or_default();
            for w in words {
                let (ip, st) = w.split_once('=').unwrap_or((w, ""));
                println!("{ip},{st}");
            }
            eprintln!("{session}");
            Ok(())
        }
        NetCmd::Shutdown { at } => admin_action(&at, "shutdown", "shutdown"),
    }
}

fn admin_action(at: &Endpoint, action: &str, line: &str) -> CmdResult {
    println!("action,command,result");
    match ControllerClient::new(at.controller).call(line) {
        Ok(reply) => {
            println!("{action},\"{line}\",ok {reply}");
            eprintln!("{action}: done {reply}");
            Ok(())
        }
        Err(e) => {
            println!("{action},\"{line}\",error");
            Err(Failure::Error(e.to_string()))
        }
    }
}

fn check(c: CheckCmd) -> CmdResult {
    match c {
        CheckCmd::History { file, no_linearizability } => {
            let f = fs::File::open(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let events = read_history(BufReader::new(f))?;
            println!("check,result,detail");
            let mut violation = None;
            match check_consistency(&events) {
                Ok(()) => println!("monotonic_versions,pass,{} events", events.len()),
                Err(v) => {
                    println!("monotonic_versions,fail,\"{v}\"");
                    violation = Some(v.to_string());
                }
            }
            if !no_linearizability {
                match check_linearizable(&events, None) {
                    Ok(()) => println!("linearizability,pass,"),
                    Err(LinearizabilityError::TooLarge { key, ops }) => {
                        println!("linearizability,skipped,\"key {key} has {ops} operations\"")
                    }
                    Err(e @ LinearizabilityError::NotLinearizable { .. }) => {
                        println!("linearizability,fail,\"{e}\"");
                        violation.get_or_insert(e.to_string());
                    }
                    Err(e) => return Err(Failure::Error(e.to_string())),
                }
            }
            match violation {
                None => {
                    eprintln!("{}: {} events, no violations", file.display(), events.len());
                    Ok(())
                }
                Some(v) => Err(Failure::Violation(v)),
            }
        }
    }
}
