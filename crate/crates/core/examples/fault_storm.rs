//! Mixed workload on a three-switch chain with lossy, duplicating,
//! reordering links while the middle switch fails and is replaced.
//!
//! `cargo run --release --example fault_storm -- [fault-rate] [write-ratio] [ops]`

use netchain::simnet::{run, ScenarioConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rate: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let write_ratio: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let ops: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let text = format!(
        r#"
version = 1
name = "fault-storm"

[ring]
placement = "chain"
members = [0, 1, 2]
groups = 10

[links]
loss = {rate}
dup = {rate}
reorder = {rate}

[workload]
clients = 16
ops = {ops}
write_ratio = {write_ratio}
keys = 1000

[client]
max_retries = 12

[[faults]]
action = "fail"
switch = 1
after_ops = {fail_at}

[[faults]]
action = "recover"
switch = 1
replacement = 3
after_ops = {recover_at}
"#,
        fail_at = ops / 4,
        recover_at = ops / 2,
    );
    let cfg = ScenarioConfig::from_toml(&text).expect("valid scenario");
    let started = std::time::Instant::now();
    let report = run(&cfg, 42).expect("scenario runs");
    println!("{}", report.summary());
    println!("{}", report.metrics_csv());
    for (t, m) in &report.timeline {
        println!("{t:>10} us  {m:?}");
    }
    println!("wall time {:.2?}", started.elapsed());
    if !report.passed() {
        std::process::exit(1);
    }
}
