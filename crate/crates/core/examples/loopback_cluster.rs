//! A three-switch chain plus one spare on loopback addresses, driven by the
//! UDP benchmark while the middle switch fails and is replaced.
//!
//! `cargo run --release --example loopback_cluster -- [clients] [seconds-per-phase]`

use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::time::Duration;

use netchain::placement::Ring;
use netchain::udprt::bench::CSV_HEADER;
use netchain::udprt::{run_bench, BenchConfig, Cluster, ClusterOptions, ControllerClient, Ports};

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let clients: u32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let secs: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let sw = |i| Ipv4Addr::new(127, 0, 70, i);
    let ports = Ports::offset(1070);
    let controller = SocketAddr::V4(SocketAddrV4::new(sw(200), ports.admin));
    let ring = Ring::single_chain(&[sw(1), sw(2), sw(3)], 16, 2, 0).expect("ring").with_spares(&[sw(4)]);
    let cluster = Cluster::start(
        ring,
        ClusterOptions {
            ports,
            controller,
            ..ClusterOptions::default()
        },
    )
    .expect("cluster starts");

    let bench = BenchConfig {
        controller,
        ports,
        clients,
        duration: Duration::from_secs_f64(secs),
        ..BenchConfig::default()
    };
    let mut admin = ControllerClient::new(controller);
    println!("phase,{CSV_HEADER}");
    let phases: [(&str, Option<String>); 3] = [
        ("healthy", None),
        ("failed", Some(format!("failover {}", sw(2)))),
        ("recovered", Some(format!("recover {} {}", sw(2), sw(4)))),
    ];
    for (phase, command) in phases {
        if let Some(c) = command {
            admin.call(&c).expect("admin command");
        }
        let report = run_bench(&bench).expect("bench");
        println!("{phase},{}", report.csv_row());
        eprintln!("{phase}: {}", report.summary());
    }
    eprintln!("{}", admin.call("status").expect("status"));

    for (ip, (state, _)) in cluster.shutdown() {
        eprintln!("{ip}: {} keys", state.store.entries().count());
    }
}
