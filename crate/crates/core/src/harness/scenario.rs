//! Scenario files: `key = value` lines under `[section]` headers (TOML).

use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::Deserialize;

use crate::model::ModelSpec;
use crate::monitor::MonitorConfig;
use crate::placement::PlacementStrategy;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub model: ModelSection,
    pub topology: TopologySection,
    pub workload: WorkloadSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub expect: ExpectSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub inner_dim: usize,
    #[serde(default = "one")]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub servers: usize,
    pub clients: usize,
    #[serde(default = "one_usize")]
    pub replication: usize,
    #[serde(default = "round_robin")]
    pub strategy: String,
    #[serde(default = "inproc")]
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub requests: usize,
    pub tokens_per_request: usize,
    /// Requests per second per client; 0 means closed loop.
    #[serde(default)]
    pub arrival_rate: f64,
    #[serde(default)]
    pub skew: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub min_rows: usize,
    pub max_wait_us: u64,
    pub heartbeat_period_ms: u64,
    pub service_us_per_batch: u64,
    pub service_us_per_row: u64,
    pub idle_sleep_us: u64,
    pub max_rows_per_slot: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            min_rows: 1,
            max_wait_us: 200,
            heartbeat_period_ms: 100,
            service_us_per_batch: 0,
            service_us_per_row: 0,
            idle_sleep_us: 50,
            max_rows_per_slot: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSection {
    pub timeout_ms: u64,
    pub micro_batch_split: f64,
    pub pipelined: bool,
    pub local_compute_us: u64,
    pub poll_interval_us: u64,
}

impl Default for ClientSection {
    fn default() -> Self {
        ClientSection {
            timeout_ms: 250,
            micro_batch_split: 0.5,
            pipelined: true,
            local_compute_us: 0,
            poll_interval_us: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSection {
    pub enabled: bool,
    pub heartbeat_period_ms: u64,
    pub timeout_ms: u64,
    pub detection_period_ms: u64,
}

impl Default for MonitorSection {
    fn default() -> Self {
        let d = MonitorConfig::default();
        MonitorSection {
            enabled: true,
            heartbeat_period_ms: d.heartbeat_period.as_millis() as u64,
            timeout_ms: d.timeout.as_millis() as u64,
            detection_period_ms: d.detection_period.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Eaas,
    Monolithic,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eaas" => Ok(Mode::Eaas),
            "monolithic" => Ok(Mode::Monolithic),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: Mode,
    pub seed: u64,
    pub window_ms: u64,
    pub restart_penalty_ms: u64,
    /// Keep outputs and compare them with the oracle after the run.
    pub verify: bool,
    /// Abort the run if it has not drained after this long.
    pub horizon_ms: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            mode: Mode::Eaas,
            seed: 1,
            window_ms: 100,
            restart_penalty_ms: 2000,
            verify: false,
            horizon_ms: 120_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// Crash: the server stops answering transport operations.
    KillServer,
    /// The serve loop and heartbeats stop; memory stays reachable.
    HangServer,
    KillClient,
    AddServer,
    Rebalance,
    KillMonitor,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub at_ms: u64,
    pub kind: EventKind,
    #[serde(default)]
    pub target: u32,
}

impl EventSpec {
    pub fn at(&self) -> Duration {
        Duration::from_millis(self.at_ms)
    }
}

/// Assertions checked after a run; unset keys are not checked.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpectSection {
    pub completion: Option<f64>,
    pub max_oracle_error: Option<f64>,
    pub max_zero_windows: Option<usize>,
    pub min_zero_windows: Option<usize>,
    /// Lower bound on post-fault over pre-fault steady-state throughput.
    pub min_recovery_ratio: Option<f64>,
    pub max_sends_to_dead: Option<u64>,
    pub min_failovers: Option<u64>,
    pub min_throughput: Option<f64>,
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

fn round_robin() -> String {
    "round-robin".into()
}

fn inproc() -> Backend {
    Backend::Inproc
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario =
            toml::from_str(text).map_err(|e| Error::Scenario(format!("parse error: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
        let mut s = Self::parse(&text)?;
        if s.name.is_empty() {
            s.name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(s)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            num_layers: self.model.layers,
            num_experts: self.model.experts,
            top_k: self.model.top_k,
            hidden_dim: self.model.hidden_dim,
            inner_dim: self.model.inner_dim,
            seed: self.model.seed,
        }
    }

    pub fn strategy(&self) -> Result<PlacementStrategy> {
        self.topology.strategy.parse()
    }

    pub fn monitor_config(&self) -> MonitorConfig {
        MonitorConfig {
            heartbeat_period: Duration::from_millis(self.monitor.heartbeat_period_ms),
            timeout: Duration::from_millis(self.monitor.timeout_ms),
            detection_period: Duration::from_millis(self.monitor.detection_period_ms),
        }
    }

    pub fn window(&self) -> Duration {
        Duration::from_millis(self.run.window_ms.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        self.model_spec().validate()?;
        self.strategy()?;
        let t = &self.topology;
        if t.servers == 0 || t.clients == 0 {
            return bad("topology needs at least one server and one client".into());
        }
        if t.replication == 0 || t.replication > t.servers {
            return bad(format!(
                "replication {} must be in 1..={}",
                t.replication, t.servers
            ));
        }
        if self.workload.skew.is_nan() || self.workload.skew < 0.0 {
            return bad("workload skew must be non-negative".into());
        }
        if self.workload.arrival_rate < 0.0 {
            return bad("arrival rate must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.client.micro_batch_split) {
            return bad("micro_batch_split must be in [0, 1]".into());
        }
        let m = &self.monitor;
        if m.enabled {
            let slowest = self.server.heartbeat_period_ms.max(m.heartbeat_period_ms);
            if slowest >= m.timeout_ms {
                return bad(format!(
                    "heartbeat period {slowest} ms must be below the monitor timeout {} ms",
                    m.timeout_ms
                ));
            }
        }
        let mut servers = t.servers as u32;
        for ev in &self.events {
            if ev.at_ms >= self.run.horizon_ms {
                return bad(format!(
                    "event at {} ms is beyond the {} ms horizon",
                    ev.at_ms, self.run.horizon_ms
                ));
            }
            match ev.kind {
                EventKind::KillServer | EventKind::HangServer if ev.target >= servers => {
                    return bad(format!("event targets unknown server {}", ev.target))
                }
                EventKind::KillClient if ev.target as usize >= t.clients => {
                    return bad(format!("event targets unknown client {}", ev.target))
                }
                EventKind::AddServer | EventKind::Rebalance if !self.monitor.enabled => {
                    return bad("placement changes need the monitor".into())
                }
                EventKind::AddServer => {
                    if ev.target != servers {
                        return bad(format!(
                            "added server must take the next id {servers}, got {}",
                            ev.target
                        ));
                    }
                    servers += 1;
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
layers = 2
experts = 8
top_k = 2
hidden_dim = 4
inner_dim = 8

[topology]
servers = 2
clients = 1

[workload]
requests = 4
tokens_per_request = 3
"#;

    #[test]
    fn minimal_scenario_gets_defaults() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.run.mode, Mode::Eaas);
        assert_eq!(s.run.window_ms, 100);
        assert_eq!(s.run.restart_penalty_ms, 2000);
        assert_eq!(s.client.timeout_ms, 250);
        assert_eq!(s.server.max_wait_us, 200);
        assert_eq!(s.topology.backend, Backend::Inproc);
        assert!(s.events.is_empty());
    }

    #[test]
    fn events_and_expectations_parse() {
        let text = format!(
            "{MINIMAL}\n[run]\nmode = \"monolithic\"\n\n[[events]]\nat_ms = 10\nkind = \"kill-server\"\ntarget = 1\n\n[expect]\ncompletion = 1.0\n"
        );
        let s = Scenario::parse(&text).unwrap();
        assert_eq!(s.run.mode, Mode::Monolithic);
        assert_eq!(s.events[0].kind, EventKind::KillServer);
        assert_eq!(s.expect.completion, Some(1.0));
    }

    #[test]
    fn rejects_bad_targets_and_keys() {
        let text = format!("{MINIMAL}\n[[events]]\nat_ms = 10\nkind = \"kill-server\"\ntarget = 5\n");
        assert!(matches!(Scenario::parse(&text), Err(Error::Scenario(_))));
        let text = format!("{MINIMAL}\n[run]\nbogus = 1\n");
        assert!(Scenario::parse(&text).is_err());
        let text = MINIMAL.replace("servers = 2", "servers = 2\nreplication = 3");
        assert!(Scenario::parse(&text).is_err());
    }
}
