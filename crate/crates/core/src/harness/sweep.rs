//! Fault and scale sweeps over a base scenario.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::rng::Stream;
use crate::{Error, ExpertId, Result, ServerId};

use super::metrics::RunMetrics;
use super::run::{initial_placement, run};
use super::scenario::{EventKind, EventSpec, Mode, Scenario};

const FAULT_DOMAIN: u64 = 0x4641_554C;

fn strip_server_faults(s: &mut Scenario) {
    s.events
        .retain(|e| !matches!(e.kind, EventKind::KillServer | EventKind::HangServer));
}

/// Up to `k` distinct servers in seeded random order, skipping any whose loss
/// would leave an expert without a live replica.
pub fn pick_victims(scenario: &Scenario, k: usize) -> Result<Vec<u32>> {
    let table = initial_placement(scenario)?;
    let mut order: Vec<u32> = (0..scenario.topology.servers as u32).collect();
    let mut rng = Stream::new(scenario.run.seed, FAULT_DOMAIN, k as u64);
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    let mut down = BTreeSet::new();
    let mut victims = Vec::new();
    for s in order {
        if victims.len() == k {
            break;
        }
        down.insert(ServerId(s));
        let resolvable = scenario.run.mode == Mode::Monolithic
            || (0..table.num_experts() as ExpertId)
                .all(|e| table.replicas_of(e).iter().any(|r| !down.contains(r)));
        if resolvable {
            victims.push(s);
        } else {
            down.remove(&ServerId(s));
        }
    }
    if victims.len() < k {
        return Err(Error::Scenario(format!(
            "only {} of the requested {k} servers can fail without losing an expert",
            victims.len()
        )));
    }
    Ok(victims)
}

#[derive(Debug, Clone)]
pub struct FaultRow {
    pub kills: usize,
    pub victims: Vec<u32>,
    pub metrics: RunMetrics,
    /// Every request completed in both runs has the same output as in the
    /// failure-free run.
    pub matches_baseline: bool,
}

/// Runs the scenario with 0..=`kills` server crashes, `gap_ms` apart from
/// `start_ms`.
pub fn fault_sweep(base: &Scenario, kills: usize, start_ms: u64, gap_ms: u64) -> Result<Vec<FaultRow>> {
    let mut rows: Vec<FaultRow> = Vec::new();
    for k in 0..=kills {
        let mut s = base.clone();
        strip_server_faults(&mut s);
        let victims = pick_victims(&s, k)?;
        for (i, &v) in victims.iter().enumerate() {
            s.events.push(EventSpec {
                at_ms: start_ms + i as u64 * gap_ms,
                kind: EventKind::KillServer,
                target: v,
            });
        }
        s.validate()?;
        let metrics = run(&s)?;
        let matches_baseline = match rows.first() {
            None => true,
            Some(b) => metrics
                .outputs
                .iter()
                .all(|(id, out)| b.metrics.outputs.get(id).is_none_or(|o| o == out)),
        };
        rows.push(FaultRow {
            kills: k,
            victims,
            metrics,
            matches_baseline,
        });
    }
    Ok(rows)
}

pub fn format_fault_table(rows: &[FaultRow]) -> String {
    let mut out = String::from(
        "kills  victims       completion  tokens/s  zero-windows  failovers  restarts  matches\n",
    );
    for r in rows {
        let victims = r.victims.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            out,
            "{:>5}  {:<12}  {:>10.3}  {:>8.1}  {:>12}  {:>9}  {:>8}  {}",
            r.kills,
            if victims.is_empty() { "-".into() } else { victims },
            r.metrics.completion_ratio(),
            r.metrics.throughput(),
            r.metrics.zero_windows(),
            r.metrics.failovers,
            r.metrics.group_restarts,
            if r.matches_baseline { "yes" } else { "NO" },
        );
    }
    out
}

/// Smallest static-group size `>= servers` that shards `experts` evenly.
pub fn next_even_shard(experts: usize, servers: usize) -> usize {
    (servers.max(1)..=experts.max(1))
        .find(|&d| experts.is_multiple_of(d))
        .unwrap_or(experts.max(servers))
}

#[derive(Debug, Clone)]
pub enum ScaleOutcome {
    Ran(Box<RunMetrics>),
    Unsupported(String),
}

#[derive(Debug, Clone)]
pub struct ScaleRow {
    pub servers: usize,
    pub clients: usize,
    pub requests: usize,
    pub outcome: ScaleOutcome,
    /// Whether a static group of this size shards the experts evenly.
    pub monolithic_supported: bool,
    /// Fraction of servers saved against the next size a static group accepts.
    pub savings: f64,
}

impl ScaleRow {
    pub fn throughput(&self) -> Option<f64> {
        match &self.outcome {
            ScaleOutcome::Ran(m) => Some(m.throughput()),
            ScaleOutcome::Unsupported(_) => None,
        }
    }
}

fn scaled(v: usize, num: usize, den: usize) -> usize {
    ((v * num) as f64 / den as f64).round().max(1.0) as usize
}

/// Weak scaling: clients and requests grow in proportion to the server
/// count. Server faults in the base scenario are dropped.
pub fn scale_sweep(base: &Scenario, counts: &[usize]) -> Result<Vec<ScaleRow>> {
    let experts = base.model.experts;
    let mut rows = Vec::new();
    for &n in counts {
        if n < base.topology.replication {
            return Err(Error::Scenario(format!(
                "server count {n} is below the replication factor {}",
                base.topology.replication
            )));
        }
        let mut s = base.clone();
        strip_server_faults(&mut s);
        s.events.retain(|e| e.kind != EventKind::AddServer);
        s.topology.servers = n;
        s.topology.clients = scaled(base.topology.clients, n, base.topology.servers);
        s.workload.requests = scaled(base.workload.requests, n, base.topology.servers);
        s.events.retain(|e| e.kind != EventKind::KillClient || (e.target as usize) < s.topology.clients);
        let shard = next_even_shard(experts, n);
        let outcome = match run(&s) {
            Ok(m) => ScaleOutcome::Ran(Box::new(m)),
            Err(Error::Unsupported(why)) => ScaleOutcome::Unsupported(why),
            Err(e) => return Err(e),
        };
        rows.push(ScaleRow {
            servers: n,
            clients: s.topology.clients,
            requests: s.workload.requests,
            outcome,
            monolithic_supported: shard == n,
            savings: 1.0 - n as f64 / shard as f64,
        });
    }
    Ok(rows)
}

pub fn format_scale_table(rows: &[ScaleRow]) -> String {
    let mut out = String::from(
        "servers  clients  requests  tokens/s     per-server  static-group  saving\n",
    );
    for r in rows {
        let (tput, per) = match &r.outcome {
            ScaleOutcome::Ran(m) => {
                let t = m.throughput();
                (format!("{t:.1}"), format!("{:.1}", t / r.servers as f64))
            }
            ScaleOutcome::Unsupported(_) => ("unsupported".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{:>7}  {:>7}  {:>8}  {:>11}  {:>10}  {:>12}  {:>5.1}%",
            r.servers,
            r.clients,
            r.requests,
            tput,
            per,
            if r.monolithic_supported { "yes" } else { "no" },
            r.savings * 100.0,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_shards_of_64() {
        let picks: Vec<usize> = [2, 3, 4, 5, 8].iter().map(|&n| next_even_shard(64, n)).collect();
        assert_eq!(picks, vec![2, 4, 4, 8, 8]);
        assert_eq!(1.0 - 5.0 / next_even_shard(64, 5) as f64, 0.375);
    }

    #[test]
    fn victims_keep_a_replica() {
        let s = Scenario::parse(
            "[model]\nlayers = 1\nexperts = 8\ntop_k = 1\nhidden_dim = 4\ninner_dim = 4\n\
             [topology]\nservers = 4\nclients = 1\nreplication = 2\n\
             [workload]\nrequests = 1\ntokens_per_request = 1\n",
        )
        .unwrap();
        let v = pick_victims(&s, 1).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v, pick_victims(&s, 1).unwrap());
        // Four servers with two replicas survive at most two losses.
        assert!(pick_victims(&s, 3).is_err());
    }
}
