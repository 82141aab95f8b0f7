//! Expert to server mapping with replication.
//!
//! A [`PlacementTable`] is an immutable, versioned snapshot. Clients hold an
//! `Arc` to the newest snapshot they have seen and a private
//! [`LivenessMask`]; servers may host different numbers of experts.

use std::collections::{BTreeMap, BTreeSet};

use crate::{Error, ExpertId, Result, ServerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementStrategy {
    /// Expert `e` primaries deal out as `e mod S`; further replicas walk the
    /// ring with a stride that rotates per lap so that one server's replicas
    /// spread over all of its peers.
    RoundRobin,
    /// Contiguous blocks of experts per server; replicas on the following
    /// servers of the ring.
    ContiguousBlocks,
}

impl std::str::FromStr for PlacementStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round-robin" => Ok(PlacementStrategy::RoundRobin),
            "contiguous-blocks" | "contiguous" => Ok(PlacementStrategy::ContiguousBlocks),
            other => Err(Error::Config(format!("unknown placement strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementTable {
    pub version: u64,
    pub replicas: BTreeMap<ExpertId, Vec<ServerId>>,
    pub server_experts: BTreeMap<ServerId, Vec<ExpertId>>,
}

impl PlacementTable {
    /// Builds a table from replica lists; every server in `servers` appears in
    /// `server_experts`, even with no experts.
    pub fn from_replicas(
        version: u64,
        replicas: BTreeMap<ExpertId, Vec<ServerId>>,
        servers: impl IntoIterator<Item = ServerId>,
    ) -> Result<Self> {
        let mut server_experts: BTreeMap<ServerId, Vec<ExpertId>> =
            servers.into_iter().map(|s| (s, Vec::new())).collect();
        for (&e, list) in &replicas {
            for &s in list {
                server_experts.entry(s).or_default().push(e);
            }
        }
        let table = PlacementTable {
            version,
            replicas,
            server_experts,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for (e, list) in &self.replicas {
            if list.is_empty() {
                return Err(Error::Config(format!("expert {e} has no replica")));
            }
            let distinct: BTreeSet<_> = list.iter().collect();
            if distinct.len() != list.len() {
                return Err(Error::Config(format!("expert {e} has duplicate replicas")));
            }
            for s in list {
                let hosted = self.server_experts.get(s).is_some_and(|v| v.contains(e));
                if !hosted {
                    return Err(Error::Config(format!("{s} missing expert {e}")));
                }
            }
        }
        for (s, experts) in &self.server_experts {
            for e in experts {
                let listed = self.replicas.get(e).is_some_and(|v| v.contains(s));
                if !listed {
                    return Err(Error::Config(format!("expert {e} missing replica {s}")));
                }
            }
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.replicas.len()
    }

    pub fn servers(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.server_experts.keys().copied()
    }

    pub fn hosted_by(&self, server: ServerId) -> &[ExpertId] {
        self.server_experts
            .get(&server)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn replicas_of(&self, expert: ExpertId) -> &[ServerId] {
        self.replicas.get(&expert).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Adds an empty server (used when a new server joins before rebalancing).
    pub fn with_server(&self, server: ServerId) -> PlacementTable {
        let mut next = self.clone();
        next.server_experts.entry(server).or_default();
        next.version += 1;
        next
    }

    /// Versioned binary snapshot used by monitor broadcasts.
    ///
    /// `[u64 version][u32 n_servers]{[u32 server]}[u32 n_experts]{[u32 expert][u32 n]{[u32 server]}}`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.server_experts.len() as u32).to_le_bytes());
        for s in self.server_experts.keys() {
            out.extend_from_slice(&s.0.to_le_bytes());
        }
        out.extend_from_slice(&(self.replicas.len() as u32).to_le_bytes());
        for (e, list) in &self.replicas {
            out.extend_from_slice(&e.to_le_bytes());
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for s in list {
                out.extend_from_slice(&s.0.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::protocol("truncated placement snapshot"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        let version = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let n_servers = u32_at(take(4)?);
        let mut servers = Vec::new();
        for _ in 0..n_servers {
            servers.push(ServerId(u32_at(take(4)?)));
        }
        let n_experts = u32_at(take(4)?);
        let mut replicas = BTreeMap::new();
        for _ in 0..n_experts {
            let e = u32_at(take(4)?);
            let n = u32_at(take(4)?);
            let mut list = Vec::new();
            for _ in 0..n {
                list.push(ServerId(u32_at(take(4)?)));
            }
            replicas.insert(e, list);
        }
        PlacementTable::from_replicas(version, replicas, servers)
    }
}

pub fn build_placement(
    num_experts: usize,
    server_ids: &[ServerId],
    replication_factor: usize,
    strategy: PlacementStrategy,
) -> Result<PlacementTable> {
    let s = server_ids.len();
    if replication_factor == 0 {
        return Err(Error::Config("replication factor must be at least 1".into()));
    }
    if replication_factor > s {
        return Err(Error::Config(format!(
            "replication factor {replication_factor} exceeds {s} servers"
        )));
    }
    let distinct: BTreeSet<_> = server_ids.iter().collect();
    if distinct.len() != s {
        return Err(Error::Config("duplicate server ids".into()));
    }

    let mut replicas = BTreeMap::new();
    for e in 0..num_experts {
        let primary = match strategy {
            PlacementStrategy::RoundRobin => e % s,
            PlacementStrategy::ContiguousBlocks => e * s / num_experts,
        };
        let stride = match strategy {
            PlacementStrategy::RoundRobin if s > 1 => 1 + (e / s) % (s - 1),
            _ => 1,
        };
        let mut chosen = vec![primary];
        let mut cursor = primary;
        while chosen.len() < replication_factor {
            cursor = (cursor + stride) % s;
            while chosen.contains(&cursor) {
                cursor = (cursor + 1) % s;
            }
            chosen.push(cursor);
        }
        replicas.insert(
            e as ExpertId,
            chosen.into_iter().map(|i| server_ids[i]).collect(),
        );
    }
    PlacementTable::from_replicas(0, replicas, server_ids.iter().copied())
}

/// Client-local view of which servers are usable. Unknown servers are alive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LivenessMask {
    alive: BTreeMap<ServerId, bool>,
}

impl LivenessMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_alive(&self, server: ServerId) -> bool {
        self.alive.get(&server).copied().unwrap_or(true)
    }

    /// Returns true if this changed the mask.
    pub fn mark_dead(&mut self, server: ServerId) -> bool {
        self.alive.insert(server, false) != Some(false)
    }

    pub fn mark_alive(&mut self, server: ServerId) -> bool {
        self.alive.insert(server, true) == Some(false)
    }

    pub fn dead(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.alive.iter().filter(|(_, a)| !**a).map(|(s, _)| *s)
    }
}

/// Picks replica `token_tag mod alive_count` among the live replicas.
pub fn select_server(
    expert: ExpertId,
    table: &PlacementTable,
    mask: &LivenessMask,
    token_tag: u32,
) -> Result<ServerId> {
    let alive: Vec<ServerId> = table
        .replicas_of(expert)
        .iter()
        .copied()
        .filter(|s| mask.is_alive(*s))
        .collect();
    if alive.is_empty() {
        return Err(Error::ExpertUnavailable { expert });
    }
    Ok(alive[token_tag as usize % alive.len()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RebalancePolicy {
    /// An expert is hot when its tokens per replica exceed this multiple of
    /// the mean tokens per replica.
    pub hot_factor: f64,
    /// An over-replicated expert loses a replica when its tokens per replica
    /// fall below this fraction of the mean.
    pub cold_fraction: f64,
}

impl Default for RebalancePolicy {
    fn default() -> Self {
        RebalancePolicy {
            hot_factor: 2.0,
            cold_fraction: 0.1,
        }
    }
}

/// One greedy rebalancing step over a completed measurement window.
///
/// `server_loads` names the candidate servers (callers pass only live ones)
/// and their observed row counts. At most one replica is added (to the
/// hottest expert, on the least-loaded candidate not already hosting it) and
/// at most one removed (from the coldest expert that has more than one).
pub fn rebalance(
    activation_counts: &BTreeMap<ExpertId, u64>,
    table: &PlacementTable,
    server_loads: &BTreeMap<ServerId, u64>,
    policy: RebalancePolicy,
) -> PlacementTable {
    let mut next = table.clone();
    next.version = table.version + 1;

    let per_replica: BTreeMap<ExpertId, f64> = table
        .replicas
        .iter()
        .map(|(&e, list)| {
            let c = activation_counts.get(&e).copied().unwrap_or(0) as f64;
            (e, c / list.len() as f64)
        })
        .collect();
    if per_replica.is_empty() {
        return next;
    }
    let mean = per_replica.values().sum::<f64>() / per_replica.len() as f64;
    if mean <= 0.0 {
        return next;
    }

    let hottest = per_replica
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&e, &load)| (e, load));
    let mut grown = None;
    if let Some((expert, load)) = hottest {
        if load > policy.hot_factor * mean {
            let hosts = table.replicas_of(expert);
            let target = server_loads
                .iter()
                .filter(|(s, _)| !hosts.contains(s))
                .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
                .map(|(&s, _)| s);
            if let Some(server) = target {
                next.replicas.get_mut(&expert).unwrap().push(server);
                let list = next.server_experts.entry(server).or_default();
                list.push(expert);
                list.sort_unstable();
                grown = Some(expert);
            }
        }
    }

    let coldest = per_replica
        .iter()
        .filter(|(e, _)| Some(**e) != grown && table.replicas_of(**e).len() > 1)
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(&e, &load)| (e, load));
    if let Some((expert, load)) = coldest {
        if load < policy.cold_fraction * mean {
            // Drop the replica on the busiest host.
            let hosts = table.replicas_of(expert);
            let victim = hosts
                .iter()
                .copied()
                .max_by(|a, b| {
                    let la = server_loads.get(a).copied().unwrap_or(0);
                    let lb = server_loads.get(b).copied().unwrap_or(0);
                    la.cmp(&lb).then(b.cmp(a))
                })
                .unwrap();
            next.replicas.get_mut(&expert).unwrap().retain(|s| *s != victim);
            if let Some(list) = next.server_experts.get_mut(&victim) {
                list.retain(|e| *e != expert);
            }
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<ServerId> {
        (0..n).map(ServerId).collect()
    }

    fn counts(table: &PlacementTable) -> Vec<usize> {
        table.server_experts.values().map(Vec::len).collect()
    }

    #[test]
    fn contiguous_block_split() {
        let t = build_placement(4, &ids(2), 1, PlacementStrategy::ContiguousBlocks).unwrap();
        assert_eq!(t.hosted_by(ServerId(0)), &[0, 1]);
        assert_eq!(t.hosted_by(ServerId(1)), &[2, 3]);
    }

    #[test]
    fn full_replication() {
        for strategy in [PlacementStrategy::RoundRobin, PlacementStrategy::ContiguousBlocks] {
            let t = build_placement(4, &ids(2), 2, strategy).unwrap();
            for e in 0..4 {
                let mut r = t.replicas_of(e).to_vec();
                r.sort();
                assert_eq!(r, ids(2));
            }
        }
    }

    #[test]
    fn round_robin_unequal_counts() {
        let t = build_placement(5, &ids(3), 1, PlacementStrategy::RoundRobin).unwrap();
        assert_eq!(counts(&t), vec![2, 2, 1]);
    }

    #[test]
    fn replication_exceeding_servers_is_config_error() {
        assert!(matches!(
            build_placement(4, &ids(2), 3, PlacementStrategy::RoundRobin),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_robin_spreads_a_servers_replicas() {
        let t = build_placement(64, &ids(4), 2, PlacementStrategy::RoundRobin).unwrap();
        for s in 0..4 {
            let mut peers = BTreeMap::new();
            for &e in t.hosted_by(ServerId(s)) {
                for &p in t.replicas_of(e) {
                    if p != ServerId(s) {
                        *peers.entry(p).or_insert(0) += 1;
                    }
                }
            }
            assert_eq!(peers.len(), 3, "server {s} replicas should touch every peer");
            let (lo, hi) = (peers.values().min().unwrap(), peers.values().max().unwrap());
            assert!(hi - lo <= 2, "uneven spread {peers:?}");
        }
        assert!(counts(&t).iter().all(|&c| c == 32));
    }

    #[test]
    fn select_single_and_masked() {
        let t = build_placement(1, &ids(1), 1, PlacementStrategy::RoundRobin).unwrap();
        assert_eq!(select_server(0, &t, &LivenessMask::new(), 17).unwrap(), ServerId(0));

        let mut replicas = BTreeMap::new();
        replicas.insert(0, vec![ServerId(3), ServerId(5)]);
        let t = PlacementTable::from_replicas(0, replicas, [ServerId(3), ServerId(5)]).unwrap();
        let picks: Vec<_> = (0..4)
            .map(|tag| select_server(0, &t, &LivenessMask::new(), tag).unwrap().0)
            .collect();
        assert_eq!(picks, vec![3, 5, 3, 5]);

        let mut mask = LivenessMask::new();
        mask.mark_dead(ServerId(3));
        for tag in 0..8 {
            assert_eq!(select_server(0, &t, &mask, tag).unwrap(), ServerId(5));
        }
        mask.mark_dead(ServerId(5));
        assert!(matches!(
            select_server(0, &t, &mask, 0),
            Err(Error::ExpertUnavailable { expert: 0 })
        ));
    }

    fn loads(table: &PlacementTable, counts: &BTreeMap<ExpertId, u64>) -> BTreeMap<ServerId, u64> {
        table
            .server_experts
            .iter()
            .map(|(&s, experts)| {
                let l = experts
                    .iter()
                    .map(|e| counts[e] / table.replicas_of(*e).len() as u64)
                    .sum();
                (s, l)
            })
            .collect()
    }

    #[test]
    fn rebalance_uniform_only_bumps_version() {
        let t = build_placement(8, &ids(4), 1, PlacementStrategy::RoundRobin).unwrap();
        let c: BTreeMap<_, _> = (0..8).map(|e| (e, 100)).collect();
        let next = rebalance(&c, &t, &loads(&t, &c), RebalancePolicy::default());
        assert_eq!(next.version, t.version + 1);
        assert_eq!(next.replicas, t.replicas);
    }

    #[test]
    fn rebalance_zero_counts_is_noop() {
        let t = build_placement(8, &ids(4), 2, PlacementStrategy::RoundRobin).unwrap();
        let c: BTreeMap<_, _> = (0..8).map(|e| (e, 0)).collect();
        let next = rebalance(&c, &t, &loads(&t, &c), RebalancePolicy::default());
        assert_eq!(next.replicas, t.replicas);
        assert_eq!(next.version, 1);
    }

    #[test]
    fn rebalance_replicates_hot_expert() {
        // 16 experts on 4 servers (e mod 4); expert 7 carries 100 of 160 tokens,
        // i.e. 10x the mean of 10. Loads: s0=16, s1=16, s2=16, s3=112.
        let t = build_placement(16, &ids(4), 1, PlacementStrategy::RoundRobin).unwrap();
        let mut c: BTreeMap<_, _> = (0..16).map(|e| (e, 4)).collect();
        c.insert(7, 100);
        let l = loads(&t, &c);
        assert_eq!(l[&ServerId(3)], 112);
        let next = rebalance(&c, &t, &l, RebalancePolicy::default());
        assert_eq!(next.replicas_of(7), &[ServerId(3), ServerId(0)]);
        assert!(next.hosted_by(ServerId(0)).contains(&7));
        next.validate().unwrap();
    }

    #[test]
    fn rebalance_trims_cold_replica_but_never_the_last() {
        let t = build_placement(4, &ids(2), 2, PlacementStrategy::RoundRobin).unwrap();
        let mut c: BTreeMap<_, _> = (0..4).map(|e| (e, 100)).collect();
        c.insert(2, 0);
        let mut table = t;
        for _ in 0..10 {
            table = rebalance(&c, &table, &loads(&table, &c), RebalancePolicy::default());
            table.validate().unwrap();
        }
        assert_eq!(table.replicas_of(2).len(), 1);
        assert!(table.replicas.values().all(|r| !r.is_empty()));
    }

    #[test]
    fn snapshot_bytes_round_trip() {
        let t = build_placement(5, &ids(3), 2, PlacementStrategy::RoundRobin)
            .unwrap()
            .with_server(ServerId(9));
        assert_eq!(PlacementTable::from_bytes(&t.to_bytes()).unwrap(), t);
        assert!(PlacementTable::from_bytes(&t.to_bytes()[..7]).is_err());
    }
}
