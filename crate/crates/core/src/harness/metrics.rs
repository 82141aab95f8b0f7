//! Run metrics and their CSV form.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use crate::model::Matrix;
use crate::{Error, Result, ServerId};

use super::scenario::Mode;

/// One finished request, times relative to run start.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub request: u64,
    pub client: usize,
    pub tokens: usize,
    pub arrival: Duration,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub scenario: String,
    pub mode: Option<Mode>,
    pub servers: usize,
    pub clients: usize,
    pub submitted_requests: usize,
    pub submitted_tokens: usize,
    pub completed_requests: usize,
    pub completed_tokens: usize,
    pub failed_requests: usize,
    pub wall: Duration,
    pub records: Vec<RequestRecord>,
    pub window: Duration,
    pub window_tokens: Vec<u64>,
    /// Time of the first injected fault.
    pub first_fault: Option<Duration>,
    /// Earliest time any client ran out of work.
    pub first_client_done: Option<Duration>,
    pub per_server_rows: BTreeMap<ServerId, u64>,
    pub failovers: u64,
    pub failovers_by_monitor: u64,
    pub failovers_by_timeout: u64,
    pub failovers_by_transport: u64,
    pub sends_to_dead: u64,
    pub group_restarts: u64,
    /// Rows written to servers, resubmissions included.
    pub rows_sent: u64,
    pub rows_processed: u64,
    pub rows_voided: u64,
    pub rows_resubmitted: u64,
    pub bad_crc_slots: u64,
    pub events: Vec<String>,
    pub errors: Vec<String>,
    pub outputs: BTreeMap<u64, Matrix>,
    pub max_oracle_error: Option<f32>,
}

/// Nearest-rank percentile; `p` in [0, 100].
pub fn percentile(sorted: &[Duration], p: f64) -> Option<Duration> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl RunMetrics {
    pub fn completion_ratio(&self) -> f64 {
        if self.submitted_requests == 0 {
            1.0
        } else {
            self.completed_requests as f64 / self.submitted_requests as f64
        }
    }

    /// Completed tokens per second of wall time.
    pub fn throughput(&self) -> f64 {
        let s = self.wall.as_secs_f64();
        if s == 0.0 {
            0.0
        } else {
            self.completed_tokens as f64 / s
        }
    }

    /// Buckets completed tokens by completion time.
    pub fn compute_windows(&mut self) {
        let w = self.window.as_nanos().max(1);
        let end = self.records.iter().map(|r| r.end).max().unwrap_or_default();
        let n = (end.as_nanos() / w) as usize + 1;
        let mut tokens = vec![0u64; if self.records.is_empty() { 0 } else { n }];
        for r in &self.records {
            tokens[(r.end.as_nanos() / w) as usize] += r.tokens as u64;
        }
        self.window_tokens = tokens;
    }

    fn active_windows(&self) -> std::ops::Range<usize> {
        let first = self.window_tokens.iter().position(|&t| t > 0);
        let last = self.window_tokens.iter().rposition(|&t| t > 0);
        match (first, last) {
            (Some(a), Some(b)) => a..b + 1,
            _ => 0..0,
        }
    }

    /// Empty windows between the first and the last completion.
    pub fn zero_windows(&self) -> usize {
        self.window_tokens[self.active_windows()]
            .iter()
            .filter(|&&t| t == 0)
            .count()
    }

    /// Tokens per second over the windows lying entirely inside
    /// `[from, to)`. `None` if no window fits.
    pub fn steady_throughput(&self, from: Duration, to: Duration) -> Option<f64> {
        let w = self.window.as_nanos().max(1);
        let first = from.as_nanos().div_ceil(w) as usize;
        let last = (to.as_nanos() / w) as usize;
        if last <= first || last > self.window_tokens.len() {
            return None;
        }
        let tokens: u64 = self.window_tokens[first..last].iter().sum();
        Some(tokens as f64 / (self.window.as_secs_f64() * (last - first) as f64))
    }

    /// Post-fault over pre-fault steady throughput. Skips the first active
    /// window, `settle` after the fault, and the drain after the first client
    /// finishes.
    pub fn recovery_ratio(&self, settle: Duration) -> Option<f64> {
        let fault = self.first_fault?;
        let active = self.active_windows();
        let start = self.window * (active.start as u32 + 1);
        let end = self.first_client_done.unwrap_or(self.wall);
        let pre = self.steady_throughput(start, fault)?;
        let post = self.steady_throughput(fault + settle, end)?;
        (pre > 0.0).then(|| post / pre)
    }

    pub fn latencies(&self) -> Vec<Duration> {
        let mut v: Vec<Duration> = self.records.iter().map(|r| r.end - r.arrival.min(r.start)).collect();
        v.sort();
        v
    }

    /// Gaps between consecutive completions of each client: the time per
    /// decode step each client's sequences observe.
    pub fn inter_token_latencies(&self) -> Vec<Duration> {
        let mut by_client: BTreeMap<usize, Vec<Duration>> = BTreeMap::new();
        for r in &self.records {
            by_client.entry(r.client).or_default().push(r.end);
        }
        let mut gaps = Vec::new();
        for ends in by_client.values_mut() {
            ends.sort();
            gaps.extend(ends.windows(2).map(|w| w[1] - w[0]));
        }
        gaps.sort();
        gaps
    }

    pub fn itl_percentiles(&self) -> [Option<Duration>; 3] {
        let itl = self.inter_token_latencies();
        [50.0, 90.0, 99.0].map(|p| percentile(&itl, p))
    }

    /// One row per window, then one summary row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "record",
            "window",
            "start_ms",
            "tokens",
            "throughput_tps",
            "completed_requests",
            "submitted_requests",
            "failovers",
            "itl_p50_ms",
            "itl_p90_ms",
            "itl_p99_ms",
        ])
        .map_err(err)?;
        let wsec = self.window.as_secs_f64().max(f64::MIN_POSITIVE);
        for (i, &t) in self.window_tokens.iter().enumerate() {
            w.write_record([
                "window".to_string(),
                i.to_string(),
                format!("{:.1}", ms(self.window * i as u32)),
                t.to_string(),
                format!("{:.1}", t as f64 / wsec),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(err)?;
        }
        let p = self
            .itl_percentiles()
            .map(|d| d.map(|d| format!("{:.3}", ms(d))).unwrap_or_default());
        w.write_record([
            "summary".to_string(),
            String::new(),
            format!("{:.1}", ms(self.wall)),
            self.completed_tokens.to_string(),
            format!("{:.1}", self.throughput()),
            self.completed_requests.to_string(),
            self.submitted_requests.to_string(),
            self.failovers.to_string(),
            p[0].clone(),
            p[1].clone(),
            p[2].clone(),
        ])
        .map_err(err)?;
        w.flush()?;
        Ok(())
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let [p50, _, p99] = self.itl_percentiles();
        let f = |d: Option<Duration>| d.map(|d| format!("{:.2} ms", ms(d))).unwrap_or("-".into());
        let mut s = format!(
            "{}: {} of {} requests ({} tokens) in {:.2} s, {:.1} tokens/s, ITL p50 {} p99 {}, \
             {} failovers, {} zero windows",
            if self.scenario.is_empty() { "run" } else { &self.scenario },
            self.completed_requests,
            self.submitted_requests,
            self.completed_tokens,
            self.wall.as_secs_f64(),
            self.throughput(),
            f(p50),
            f(p99),
            self.failovers,
            self.zero_windows(),
        );
        if let Some(e) = self.max_oracle_error {
            s.push_str(&format!(", max oracle error {e:e}"));
        }
        s
    }
}
