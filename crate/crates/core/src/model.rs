//! Model definition, deterministic weights, top-k routing and the expert math.
//!
//! The functions here are the ground truth the distributed path is checked
//! against. Accumulation orders are fixed so that the same rows always
//! produce the same bits: matmuls sum over the input dimension in ascending
//! order, and a token's MoE output sums its experts in ascending expert id.

use crate::par::{self, ExecPolicy};
use crate::rng::Stream;
use crate::{Error, ExpertId, Result};

/// Row-major dense f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::rejected(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::rejected(format!(
                    "row {i} has width {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Splits into the first `at` rows and the remainder.
    pub fn split_rows(&self, at: usize) -> (Matrix, Matrix) {
        let at = at.min(self.rows);
        let (a, b) = self.data.split_at(at * self.cols);
        (
            Matrix {
                rows: at,
                cols: self.cols,
                data: a.to_vec(),
            },
            Matrix {
                rows: self.rows - at,
                cols: self.cols,
                data: b.to_vec(),
            },
        )
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(mut self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::rejected("vstack width mismatch"));
        }
        if self.rows == 0 {
            return Ok(other.clone());
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(self)
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        if self.rows != other.rows || self.cols != other.cols {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub inner_dim: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.hidden_dim == 0 || self.inner_dim == 0 {
            return Err(Error::Config(
                "num_experts, hidden_dim and inner_dim must be positive".into(),
            ));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub expert_id: ExpertId,
    /// hidden_dim x inner_dim
    pub w_in: Matrix,
    /// inner_dim x hidden_dim
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// hidden_dim x num_experts
    pub gate: Matrix,
    pub experts: Vec<ExpertWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub layers: Vec<LayerWeights>,
    /// Additive per-expert bias on every layer's gate logits.
    pub gate_bias: Vec<f32>,
}

impl ModelWeights {
    pub fn with_gate_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.spec.num_experts {
            return Err(Error::rejected(format!(
                "gate bias has {} entries for {} experts",
                bias.len(),
                self.spec.num_experts
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::rejected("gate bias must be finite"));
        }
        self.gate_bias = bias;
        Ok(self)
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::rejected(format!("layer {layer} out of range")))
    }

    pub fn expert(&self, layer: usize, expert: ExpertId) -> Result<&ExpertWeights> {
        self.layer(layer)?
            .experts
            .get(expert as usize)
            .ok_or_else(|| Error::rejected(format!("expert {expert} out of range")))
    }
}

const WEIGHT_DOMAIN: u64 = 0x5745_4947;
const GATE_TAG: u64 = u64::MAX;
const WEIGHT_RANGE: f32 = 0.1;

fn random_matrix(stream: &mut Stream, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| stream.uniform_f32(-WEIGHT_RANGE, WEIGHT_RANGE))
        .collect();
    Matrix { rows, cols, data }
}

/// Generates all gate and expert weights. Each matrix is a pure function of
/// `(seed, layer, expert)`.
pub fn init_weights(spec: &ModelSpec) -> Result<ModelWeights> {
    spec.validate()?;
    let (d, inner) = (spec.hidden_dim, spec.inner_dim);
    let layers = (0..spec.num_layers)
        .map(|layer| {
            let stream_index = |tag: u64| ((layer as u64) << 32) ^ tag;
            let gate = random_matrix(
                &mut Stream::new(spec.seed, WEIGHT_DOMAIN, stream_index(GATE_TAG)),
                d,
                spec.num_experts,
            );
            let experts = (0..spec.num_experts)
                .map(|e| {
                    let mut s = Stream::new(spec.seed, WEIGHT_DOMAIN, stream_index(e as u64));
                    let w_in = random_matrix(&mut s, d, inner);
                    let w_out = random_matrix(&mut s, inner, d);
                    ExpertWeights {
                        expert_id: e as ExpertId,
                        w_in,
                        w_out,
                    }
                })
                .collect();
            LayerWeights { gate, experts }
        })
        .collect();
    Ok(ModelWeights {
        spec: *spec,
        layers,
        gate_bias: vec![0.0; spec.num_experts],
    })
}

/// Per-token top-k selection with softmax scores over the selected logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub top_k: usize,
    /// `n * top_k`, ascending within each token.
    pub expert_ids: Vec<ExpertId>,
    /// `n * top_k`, aligned with `expert_ids`.
    pub scores: Vec<f32>,
}

impl RoutingDecision {
    pub fn num_tokens(&self) -> usize {
        self.expert_ids.len().checked_div(self.top_k).unwrap_or(0)
    }

    pub fn experts(&self, token: usize) -> &[ExpertId] {
        &self.expert_ids[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn token_scores(&self, token: usize) -> &[f32] {
        &self.scores[token * self.top_k..(token + 1) * self.top_k]
    }
}

/// `h · gate + bias` with the dot product summed in ascending hidden index.
pub fn gate_logits(hidden: &Matrix, gate: &Matrix, bias: &[f32]) -> Result<Matrix> {
    if hidden.cols() != gate.rows() {
        return Err(Error::rejected(format!(
            "hidden width {} does not match gate rows {}",
            hidden.cols(),
            gate.rows()
        )));
    }
    let experts = gate.cols();
    if bias.len() != experts {
        return Err(Error::rejected("gate bias length mismatch"));
    }
    let mut out = Matrix::zeros(hidden.rows(), experts);
    for t in 0..hidden.rows() {
        let h = hidden.row(t);
        let o = out.row_mut(t);
        for (j, &hj) in h.iter().enumerate() {
            let g = gate.row(j);
            for e in 0..experts {
                o[e] += hj * g[e];
            }
        }
        for e in 0..experts {
            o[e] += bias[e];
        }
    }
    Ok(out)
}

pub fn route(logits: &Matrix, top_k: usize) -> Result<RoutingDecision> {
    route_with(ExecPolicy::default(), logits, top_k)
}

pub fn route_with(policy: ExecPolicy, logits: &Matrix, top_k: usize) -> Result<RoutingDecision> {
    let experts = logits.cols();
    if top_k == 0 || top_k > experts {
        return Err(Error::rejected(format!(
            "top_k {top_k} invalid for {experts} experts"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::rejected("non-finite gate logit"));
    }
    let per_token = par::map_range(policy, logits.rows(), |t| route_token(logits.row(t), top_k));
    let mut expert_ids = Vec::with_capacity(logits.rows() * top_k);
    let mut scores = Vec::with_capacity(logits.rows() * top_k);
    for (ids, s) in per_token {
        expert_ids.extend(ids);
        scores.extend(s);
    }
    Ok(RoutingDecision {
        top_k,
        expert_ids,
        scores,
    })
}

fn route_token(logits: &[f32], top_k: usize) -> (Vec<ExpertId>, Vec<f32>) {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Larger logit first, lower index on ties.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..top_k].to_vec();
    chosen.sort_unstable();

    let max = chosen
        .iter()
        .map(|&e| logits[e] as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = chosen.iter().map(|&e| (logits[e] as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (
        chosen.iter().map(|&e| e as ExpertId).collect(),
        exps.iter().map(|x| (x / sum) as f32).collect(),
    )
}

/// `out = relu(x · w_in) · w_out` for a single row.
pub fn expert_forward_row(w: &ExpertWeights, x: &[f32], out: &mut [f32]) {
    let inner = w.w_in.cols();
    let mut h = vec![0.0f32; inner];
    for (j, &xj) in x.iter().enumerate() {
        let wrow = w.w_in.row(j);
        for i in 0..inner {
            h[i] += xj * wrow[i];
        }
    }
    out.fill(0.0);
    for (i, &hi) in h.iter().enumerate() {
        let hi = hi.max(0.0);
        let wrow = w.w_out.row(i);
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += hi * wv;
        }
    }
}

fn check_expert_shape(w: &ExpertWeights, d: usize) -> Result<()> {
    if w.w_in.rows() != d || w.w_out.cols() != d || w.w_in.cols() != w.w_out.rows() {
        return Err(Error::rejected(format!(
            "expert {} weights do not match hidden width {d}",
            w.expert_id
        )));
    }
    Ok(())
}

pub fn expert_forward(w: &ExpertWeights, x: &Matrix) -> Result<Matrix> {
    expert_forward_with(ExecPolicy::default(), w, x)
}

pub fn expert_forward_with(policy: ExecPolicy, w: &ExpertWeights, x: &Matrix) -> Result<Matrix> {
    check_expert_shape(w, x.cols())?;
    if !x.is_finite() {
        return Err(Error::rejected("non-finite activation"));
    }
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    par::for_each_row(policy, out.as_mut_slice(), d, |t, row| {
        expert_forward_row(w, x.row(t), row)
    });
    Ok(out)
}

pub fn moe_layer_oracle(
    hidden: &Matrix,
    routing: &RoutingDecision,
    layer: &LayerWeights,
) -> Result<Matrix> {
    moe_layer_oracle_with(ExecPolicy::default(), hidden, routing, layer)
}

/// `out[t] = Σ_k score[t,k] · expert(hidden[t])`, experts in ascending id.
pub fn moe_layer_oracle_with(
    policy: ExecPolicy,
    hidden: &Matrix,
    routing: &RoutingDecision,
    layer: &LayerWeights,
) -> Result<Matrix> {
    if routing.num_tokens() != hidden.rows() {
        return Err(Error::rejected(format!(
            "routing covers {} tokens, hidden has {}",
            routing.num_tokens(),
            hidden.rows()
        )));
    }
    if let Some(&bad) = routing
        .expert_ids
        .iter()
        .find(|&&e| e as usize >= layer.experts.len())
    {
        return Err(Error::rejected(format!("expert id {bad} out of range")));
    }
    let d = hidden.cols();
    for w in &layer.experts {
        check_expert_shape(w, d)?;
    }
    let mut out = Matrix::zeros(hidden.rows(), d);
    par::for_each_row(policy, out.as_mut_slice(), d, |t, acc| {
        let mut y = vec![0.0f32; d];
        for (&e, &score) in routing.experts(t).iter().zip(routing.token_scores(t)) {
            expert_forward_row(&layer.experts[e as usize], hidden.row(t), &mut y);
            for (a, &v) in acc.iter_mut().zip(&y) {
                *a += score * v;
            }
        }
    });
    Ok(out)
}

/// Placeholder for the attention block: `h * 0.5 + 0.1` elementwise.
pub fn dense_stub(hidden: &mut Matrix) {
    for v in hidden.as_mut_slice() {
        *v = *v * 0.5 + 0.1;
    }
}

/// Reference forward pass: dense stub, routing, and a residual MoE add per layer.
pub fn full_forward_oracle(weights: &ModelWeights, tokens: &Matrix) -> Result<Matrix> {
    let spec = &weights.spec;
    if tokens.cols() != spec.hidden_dim && tokens.rows() > 0 {
        return Err(Error::rejected(format!(
            "tokens have width {}, model expects {}",
            tokens.cols(),
            spec.hidden_dim
        )));
    }
    let mut h = tokens.clone();
    for layer in &weights.layers {
        dense_stub(&mut h);
        let logits = gate_logits(&h, &layer.gate, &weights.gate_bias)?;
        let routing = route(&logits, spec.top_k)?;
        let moe = moe_layer_oracle(&h, &routing, layer)?;
        for (a, b) in h.as_mut_slice().iter_mut().zip(moe.as_slice()) {
            *a += b;
        }
    }
    Ok(h)
}
