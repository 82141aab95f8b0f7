//! Dynamic batching and the grouped expert computation.
//!
//! [`ragged_iter`] and [`group_shrink`] follow the emission order of the GPU
//! kernels they stand in for: a static grid of lanes striding over
//! variable-length groups, and a prefix-scan compaction that moves active
//! groups to the front so iteration can stop at `active_count`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::model::{expert_forward_row, Matrix, ModelWeights};
use crate::par::{self, ExecPolicy};
use crate::protocol::{RequestRow, SlotHeader};
use crate::transport::Region;
use crate::{ClientId, Error, ExpertId, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub client: ClientId,
    pub index: u8,
}

/// A slot observed in state 1 with a fresh sequence number.
#[derive(Debug, Clone)]
pub struct ReadySlot {
    pub key: SlotKey,
    pub region: Option<Arc<Region>>,
    pub header: SlotHeader,
    pub rows: Vec<RequestRow>,
}

#[derive(Debug, Clone)]
pub struct DynamicBatch {
    /// Ascending by slot key, i.e. by client id first.
    pub entries: Vec<ReadySlot>,
    pub total_rows: usize,
    pub formed_at: Instant,
}

/// Where [`aggregate_batch`] finds ready slots.
pub trait SlotSource {
    /// Ready slots not in `taken`.
    fn scan(&mut self, taken: &BTreeSet<SlotKey>) -> Vec<ReadySlot>;
    /// Called between scans that found nothing new. Returning false aborts
    /// batch formation.
    fn idle(&mut self) -> bool;
}

/// Polls `source` until at least one slot is ready, then keeps collecting
/// until `min_rows` rows are present or `max_wait` has passed since the first
/// ready slot. Returns `None` only when the source asks to stop.
pub fn aggregate_batch(
    source: &mut dyn SlotSource,
    min_rows: usize,
    max_wait: Duration,
) -> Option<DynamicBatch> {
    let mut entries: BTreeMap<SlotKey, ReadySlot> = BTreeMap::new();
    let mut total = 0usize;
    let mut first_ready: Option<Instant> = None;
    loop {
        let taken: BTreeSet<SlotKey> = entries.keys().copied().collect();
        let fresh = source.scan(&taken);
        let found = !fresh.is_empty();
        for slot in fresh {
            total += slot.rows.len();
            entries.insert(slot.key, slot);
        }
        if !entries.is_empty() {
            let start = *first_ready.get_or_insert_with(Instant::now);
            if total >= min_rows || start.elapsed() >= max_wait {
                break;
            }
        }
        if !found && !source.idle() {
            if entries.is_empty() {
                return None;
            }
            break;
        }
    }
    Some(DynamicBatch {
        entries: entries.into_values().collect(),
        total_rows: total,
        formed_at: Instant::now(),
    })
}

/// Lane `b` of a `grid_width`-wide grid visits `(entry, token)` pairs:
/// it starts at token `b`, strides by `grid_width` within an entry, and
/// carries the overshoot into the next entry.
pub fn ragged_iter(counts: &[usize], grid_width: usize) -> Vec<Vec<(usize, usize)>> {
    ragged_iter_with(ExecPolicy::default(), counts, grid_width)
}

pub fn ragged_iter_with(
    policy: ExecPolicy,
    counts: &[usize],
    grid_width: usize,
) -> Vec<Vec<(usize, usize)>> {
    assert!(grid_width >= 1, "grid width must be positive");
    par::map_range(policy, grid_width, |lane| {
        let mut out = Vec::new();
        let mut token = lane;
        for (entry, &count) in counts.iter().enumerate() {
            while token < count {
                out.push((entry, token));
                token += grid_width;
            }
            token -= count;
        }
        out
    })
}

/// Compacts `(index, size)` pairs of the non-empty groups to the front,
/// keeping their original order. Returns the compacted list and its length.
pub fn group_shrink(group_sizes: &[usize]) -> (Vec<(usize, usize)>, usize) {
    // Exclusive prefix scan of the activity flags gives each active group
    // its destination.
    let mut dest = Vec::with_capacity(group_sizes.len());
    let mut active = 0usize;
    for &size in group_sizes {
        dest.push(active);
        active += usize::from(size > 0);
    }
    let mut out = vec![(0, 0); active];
    for (i, &size) in group_sizes.iter().enumerate() {
        if size > 0 {
            out[dest[i]] = (i, size);
        }
    }
    (out, active)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertGroup {
    pub layer: u32,
    pub expert: ExpertId,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOrigin {
    pub entry: usize,
    pub row: usize,
}

/// Active expert groups over a reordered activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGroups {
    pub groups: Vec<ExpertGroup>,
    /// `origin[i]` is where reordered row `i` came from.
    pub origin: Vec<RowOrigin>,
    /// Candidate groups before compaction (layers present x local experts).
    pub candidate_groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reorganized {
    pub groups: ExpertGroups,
    pub activations: Matrix,
    pub scores: Vec<f32>,
}

/// Groups the batch's rows contiguously by `(layer, expert)`, stable by
/// entry then row. `local_experts` is the server's hosted set.
pub fn reorganize(batch: &DynamicBatch, local_experts: &[ExpertId]) -> Result<Reorganized> {
    let locals: Vec<ExpertId> = {
        let mut v = local_experts.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let hidden_dim = batch
        .entries
        .iter()
        .find(|e| !e.rows.is_empty())
        .map(|e| e.header.hidden_dim as usize)
        .unwrap_or(0);
    let layers: Vec<u32> = batch
        .entries
        .iter()
        .map(|e| e.header.layer_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut keys = Vec::with_capacity(batch.total_rows);
    for (ei, entry) in batch.entries.iter().enumerate() {
        let lpos = layers.binary_search(&entry.header.layer_id).unwrap();
        for (ri, row) in entry.rows.iter().enumerate() {
            if row.hidden.len() != hidden_dim {
                return Err(Error::protocol(format!(
                    "entry {ei} row {ri} width {} differs from batch width {hidden_dim}",
                    row.hidden.len()
                )));
            }
            let epos = locals.binary_search(&row.expert_id).map_err(|_| {
                Error::protocol(format!(
                    "entry {ei} row {ri} targets expert {} not hosted here",
                    row.expert_id
                ))
            })?;
            keys.push(lpos * locals.len() + epos);
        }
    }

    let candidate_groups = layers.len() * locals.len();
    let mut sizes = vec![0usize; candidate_groups];
    for &k in &keys {
        sizes[k] += 1;
    }
    let (active, _) = group_shrink(&sizes);
    let mut cursor = vec![0usize; candidate_groups];
    let mut groups = Vec::with_capacity(active.len());
    let mut start = 0;
    for &(g, len) in &active {
        cursor[g] = start;
        groups.push(ExpertGroup {
            layer: layers[g / locals.len()],
            expert: locals[g % locals.len()],
            start,
            len,
        });
        start += len;
    }

    let total = keys.len();
    let mut origin = vec![RowOrigin { entry: 0, row: 0 }; total];
    let mut activations = Matrix::zeros(total, hidden_dim);
    let mut scores = vec![0.0; total];
    let mut k = 0;
    for (ei, entry) in batch.entries.iter().enumerate() {
        for (ri, row) in entry.rows.iter().enumerate() {
            let dest = cursor[keys[k]];
            cursor[keys[k]] += 1;
            origin[dest] = RowOrigin { entry: ei, row: ri };
            activations.row_mut(dest).copy_from_slice(&row.hidden);
            scores[dest] = row.router_score;
            k += 1;
        }
    }
    Ok(Reorganized {
        groups: ExpertGroups {
            groups,
            origin,
            candidate_groups,
        },
        activations,
        scores,
    })
}

pub const DEFAULT_GRID_WIDTH: usize = 8;

/// `score * expert(row)` for every row of every active group, in reordered
/// row order. Lanes of a `grid_width` grid split the work.
pub fn grouped_forward(
    reorganized: &Reorganized,
    weights: &ModelWeights,
    policy: ExecPolicy,
    grid_width: usize,
) -> Result<Matrix> {
    let groups = &reorganized.groups.groups;
    let d = reorganized.activations.cols();
    let mut experts = Vec::with_capacity(groups.len());
    for g in groups {
        experts.push(weights.expert(g.layer as usize, g.expert)?);
    }
    if let Some(w) = experts.first() {
        if w.w_in.rows() != d {
            return Err(Error::protocol(format!(
                "activations have width {d}, model expects {}",
                w.w_in.rows()
            )));
        }
    }
    let counts: Vec<usize> = groups.iter().map(|g| g.len).collect();
    let lanes = ragged_iter_with(policy, &counts, grid_width.max(1));
    let computed = par::map_range(policy, lanes.len(), |lane| {
        let mut y = vec![0.0f32; d];
        lanes[lane]
            .iter()
            .map(|&(g, t)| {
                let row = groups[g].start + t;
                expert_forward_row(experts[g], reorganized.activations.row(row), &mut y);
                let score = reorganized.scores[row];
                (row, y.iter().map(|v| score * v).collect::<Vec<f32>>())
            })
            .collect::<Vec<_>>()
    });
    let mut out = Matrix::zeros(reorganized.activations.rows(), d);
    for (row, values) in computed.into_iter().flatten() {
        out.row_mut(row).copy_from_slice(&values);
    }
    Ok(out)
}

/// Inverts the reorganisation: per-entry flat outputs in request row order.
pub fn scatter(groups: &ExpertGroups, outputs: &Matrix, entry_rows: &[usize]) -> Vec<Vec<f32>> {
    let d = outputs.cols();
    let mut per_entry: Vec<Vec<f32>> = entry_rows.iter().map(|&n| vec![0.0; n * d]).collect();
    for (i, o) in groups.origin.iter().enumerate() {
        per_entry[o.entry][o.row * d..(o.row + 1) * d].copy_from_slice(outputs.row(i));
    }
    per_entry
}
