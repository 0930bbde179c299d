//! Exhaustively explores the abstract protocol model.
//!
//! `cargo run --release --example explore_model -- 2,1,3,2 4 1 2 [mutation] [state-cap]`

use std::time::Instant;

use netchain::simnet::explore::{explore, ExploreBounds, ExploreConfig, ModelMutation, Outcome};

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let bounds: ExploreBounds = arg(0, "2,1,3,2").parse().expect("bounds");
    let switches: u8 = arg(1, "4").parse().expect("switches");
    let keys: u8 = arg(2, "1").parse().expect("keys");
    let values: u8 = arg(3, "2").parse().expect("values");
    let mutation: ModelMutation = arg(4, "none").parse().expect("mutation");
    let cap: u64 = arg(5, "10000000").parse().expect("state cap");
    let cfg = ExploreConfig::new(bounds, switches, keys, values)
        .with_mutation(mutation)
        .with_state_cap(cap);
    let start = Instant::now();
    let outcome = explore(cfg).expect("config");
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Outcome::NoViolation { states, transitions, depth } => {
            println!("no violation: {states} states, {transitions} transitions, depth {depth}, {secs:.1}s")
        }
        Outcome::Violation { states, counterexample } => {
            println!("violation after {states} states, {secs:.1}s");
            print!("{counterexample}");
        }
        Outcome::BoundsExceeded { states, depth } => {
            println!("state cap hit at {states} states, depth {depth} complete, {secs:.1}s")
        }
    }
    if matches!(outcome, Outcome::Violation { .. }) {
        std::process::exit(1);
    }
}
