//! Exhaustive check of one CAS lock shared by two clients, each running
//! `acquire, release, acquire` against a two-switch chain.
//!
//! `cargo run --release --example lock_check -- [drops] [duplicates] [reorders] [retries]`

use std::time::Instant;

use netchain::simnet::lockcheck::{check_lock, LockCheckBounds};

fn main() {
    let args: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let get = |i: usize, d: u32| args.get(i).copied().unwrap_or(d);
    let bounds = LockCheckBounds {
        drops: get(0, 1) as u8,
        duplicates: get(1, 0) as u8,
        reorders: get(2, 0) as u8,
        retries: get(3, 1),
        ..LockCheckBounds::default()
    };
    let started = Instant::now();
    let report = check_lock(bounds).expect("valid bounds");
    println!(
        "{} states, {} transitions, {} terminal, at most {} owner(s), {:.1?}",
        report.states,
        report.transitions,
        report.terminal_states,
        report.max_owners,
        started.elapsed()
    );
    match report.violation {
        None => println!("no violation"),
        Some(v) => {
            println!("{v}");
            std::process::exit(1);
        }
    }
}
