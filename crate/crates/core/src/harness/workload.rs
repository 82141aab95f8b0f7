//! Token batches and the expert-skew profile.

use std::time::Duration;

use crate::model::{dense_stub, gate_logits, route, Matrix, ModelWeights};
use crate::rng::Stream;
use crate::{Result, ExpertId};

use super::scenario::Scenario;

const BIAS_DOMAIN: u64 = 0x4249_4153;
const TOKEN_DOMAIN: u64 = 0x544F_4B4E;

/// Per-expert additive gate bias with a Zipf-shaped profile: the expert of
/// popularity rank `r` (1-based, from a seeded permutation) gets
/// `-skew * ln(r)`, so its softmax weight scales as `r^-skew`.
pub fn gate_bias(num_experts: usize, skew: f64, seed: u64) -> Vec<f32> {
    let mut stream = Stream::new(seed, BIAS_DOMAIN, 0);
    let mut order: Vec<(u64, usize)> = (0..num_experts).map(|e| (stream.next_u64(), e)).collect();
    order.sort_unstable();
    let mut bias = vec![0.0f32; num_experts];
    for (rank0, &(_, e)) in order.iter().enumerate() {
        bias[e] = (-skew * ((rank0 + 1) as f64).ln()) as f32;
    }
    bias
}

/// Tokens of request `id`, uniform in [-1, 1).
pub fn request_tokens(seed: u64, id: u64, n: usize, d: usize) -> Matrix {
    let mut s = Stream::new(seed, TOKEN_DOMAIN, id);
    let data = (0..n * d).map(|_| s.uniform_f32(-1.0, 1.0)).collect();
    Matrix::new(n, d, data).expect("shape matches data")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub client: usize,
    /// Offset from run start; zero for closed-loop clients.
    pub arrival: Duration,
    pub tokens: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub gate_bias: Vec<f32>,
    pub requests: Vec<Request>,
}

impl Workload {
    pub fn for_client(&self, client: usize) -> impl Iterator<Item = &Request> {
        self.requests.iter().filter(move |r| r.client == client)
    }

    pub fn total_tokens(&self) -> usize {
        self.requests.iter().map(|r| r.tokens.rows()).sum()
    }
}

/// Requests dealt round-robin over clients. With a positive arrival rate,
/// each client's `j`-th request arrives at `j / rate` seconds.
pub fn gen_workload(scenario: &Scenario) -> Workload {
    let spec = scenario.model_spec();
    let w = &scenario.workload;
    let clients = scenario.topology.clients;
    let seed = scenario.run.seed;
    let requests = (0..w.requests)
        .map(|i| {
            let client = i % clients;
            let j = i / clients;
            let arrival = if w.arrival_rate > 0.0 {
                Duration::from_secs_f64(j as f64 / w.arrival_rate)
            } else {
                Duration::ZERO
            };
            Request {
                id: i as u64,
                client,
                arrival,
                tokens: request_tokens(seed, i as u64, w.tokens_per_request, spec.hidden_dim),
            }
        })
        .collect();
    Workload {
        gate_bias: gate_bias(spec.num_experts, w.skew, seed),
        requests,
    }
}

/// First-layer expert activation counts for `tokens` under `weights`
/// (including its gate bias).
pub fn activation_histogram(weights: &ModelWeights, tokens: &Matrix) -> Result<Vec<u64>> {
    let mut h = tokens.clone();
    dense_stub(&mut h);
    let layer = weights.layer(0)?;
    let logits = gate_logits(&h, &layer.gate, &weights.gate_bias)?;
    let routing = route(&logits, weights.spec.top_k)?;
    let mut counts = vec![0u64; weights.spec.num_experts];
    for &e in &routing.expert_ids {
        counts[e as usize] += 1;
    }
    Ok(counts)
}

/// Hottest count over the median count.
pub fn hot_to_median(counts: &[u64]) -> f64 {
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 / 2.0
    };
    let max = sorted.last().copied().unwrap_or(0) as f64;
    if median == 0.0 {
        f64::INFINITY
    } else {
        max / median
    }
}

/// Experts ordered from most to least activated.
pub fn hottest_experts(counts: &[u64]) -> Vec<ExpertId> {
    let mut idx: Vec<usize> = (0..counts.len()).collect();
    idx.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    idx.into_iter().map(|e| e as ExpertId).collect()
}
