//! What a simulation run produces, and how it is written to disk.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::client::history::{write_history, HistoryEvent};
use crate::placement::SwitchId;
use crate::wire::{Key, Version};

use super::check::Violation;

/// Counters and latency summary of one run. Times are simulated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub ops_started: u64,
    pub ops_completed: u64,
    pub ok: u64,
    pub not_found: u64,
    pub cas_failed: u64,
    pub timeouts: u64,
    pub retries: u64,
    pub duplicate_replies: u64,
    pub packets_sent: u64,
    pub packets_lost: u64,
    pub packets_duplicated: u64,
    pub packets_reordered: u64,
    pub stale_drops: u64,
    /// Requests started while some stop rule was installed.
    pub started_during_stop: u64,
    /// Of those, requests with at least one packet held or dropped by a stop.
    pub blocked: u64,
    pub txn_committed: u64,
    pub txn_aborted: u64,
    pub final_reads: u64,
    pub final_read_timeouts: u64,
    pub p50_us: u64,
    pub p99_us: u64,
    pub sim_time_us: u64,
    pub qps: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "ops_started,ops_completed,ok,not_found,cas_failed,timeouts,retries,duplicate_replies,\
packets_sent,packets_lost,packets_duplicated,packets_reordered,stale_drops,started_during_stop,blocked,\
txn_committed,txn_aborted,final_reads,final_read_timeouts,p50_us,p99_us,sim_time_us,qps";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.1}",
            self.ops_started,
            self.ops_completed,
            self.ok,
            self.not_found,
            self.cas_failed,
            self.timeouts,
            self.retries,
            self.duplicate_replies,
            self.packets_sent,
            self.packets_lost,
            self.packets_duplicated,
            self.packets_reordered,
            self.stale_drops,
            self.started_during_stop,
            self.blocked,
            self.txn_committed,
            self.txn_aborted,
            self.final_reads,
            self.final_read_timeouts,
            self.p50_us,
            self.p99_us,
            self.sim_time_us,
            self.qps
        )
    }

    /// Share of requests started during a stop that the stop delayed.
    pub fn blocked_fraction(&self) -> f64 {
        if self.started_during_stop == 0 {
            0.0
        } else {
            self.blocked as f64 / self.started_during_stop as f64
        }
    }
}

/// Controller-visible milestones of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Milestone {
    Failed(SwitchId),
    FailedOver(SwitchId),
    RecoveryStarted { failed: SwitchId, replacement: SwitchId },
    RecoveryDone { failed: SwitchId, replacement: SwitchId },
}

/// One switch's copy of one key at the end of the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalEntry {
    pub switch: SwitchId,
    pub key: Key,
    pub value: Vec<u8>,
    pub version: Version,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub history: Vec<HistoryEvent>,
    pub final_state: Vec<FinalEntry>,
    pub timeline: Vec<(u64, Milestone)>,
    pub violation: Option<Violation>,
    /// The most recent events before the run stopped.
    pub trace: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }

    pub fn milestone_time(&self, want: impl Fn(&Milestone) -> bool) -> Option<u64> {
        self.timeline.iter().find(|(_, m)| want(m)).map(|(t, _)| *t)
    }

    pub fn metrics_csv(&self) -> String {
        format!("scenario,seed,{}\n{},{},{}\n", Metrics::CSV_HEADER, self.scenario, self.seed, self.metrics.csv_row())
    }

    pub fn final_state_tsv(&self) -> String {
        let mut out = String::from("# switch\tkey\tsession\tseq\tvalid\tvalue\n");
        for e in &self.final_state {
            let value = if e.value.is_empty() { "-".to_string() } else { hex::encode(&e.value) };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.switch,
                e.key.to_hex(),
                e.version.session,
                e.version.seq,
                u8::from(e.valid),
                value
            );
        }
        out
    }

    pub fn timeline_text(&self) -> String {
        let mut out = String::new();
        for (t, m) in &self.timeline {
            let _ = writeln!(out, "{t}\t{m:?}");
        }
        out
    }

    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let verdict = match &self.violation {
            None => "no violations".to_string(),
            Some(v) => format!("VIOLATION: {v}"),
        };
        format!(
            "{} seed {}: {} ops ({} ok, {} timeouts, {} retries), p50 {} us, p99 {} us, {:.0} qps simulated; {}",
            self.scenario, self.seed, m.ops_completed, m.ok, m.timeouts, m.retries, m.p50_us, m.p99_us, m.qps, verdict
        )
    }

    /// Writes metrics.csv, history.tsv, final_state.tsv, timeline.txt and
    /// trace.txt into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let mut hist = Vec::new();
        write_history(&mut hist, &self.history)?;
        fs::write(dir.join("history.tsv"), hist)?;
        fs::write(dir.join("final_state.tsv"), self.final_state_tsv())?;
        fs::write(dir.join("timeline.txt"), self.timeline_text())?;
        let mut trace = self.trace.join("\n");
        if let Some(v) = &self.violation {
            let _ = write!(trace, "\nviolation: {v}");
        }
        trace.push('\n');
        fs::write(dir.join("trace.txt"), trace)
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &mut [u64], p: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    samples.sort_unstable();
    let rank = ((p / 100.0) * samples.len() as f64).ceil() as usize;
    samples[rank.clamp(1, samples.len()) - 1]
}
