mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use proptest::prelude::*;

use eaas::model::{
    expert_forward_with, gate_logits, init_weights, route_with, Matrix, ModelSpec,
};
use eaas::par::ExecPolicy;
use eaas::placement::{
    build_placement, rebalance, select_server, LivenessMask, PlacementStrategy, PlacementTable,
    RebalancePolicy,
};
use eaas::protocol::{
    decode_request, decode_response, decode_sealed_request, encode_request, encode_response,
    seal, RequestRow, SlotHeader,
};
use eaas::server::{
    group_shrink, ragged_iter_with, reorganize, scatter, DynamicBatch, ReadySlot, SlotKey,
};
use eaas::{ClientId, ServerId};

fn row_strategy(d: usize, experts: u32) -> impl Strategy<Value = RequestRow> {
    (
        prop::collection::vec(-1e3f32..1e3, d),
        0..experts,
        0f32..1.0,
        any::<u32>(),
    )
        .prop_map(|(hidden, expert_id, router_score, token_tag)| RequestRow {
            hidden,
            expert_id,
            router_score,
            token_tag,
        })
}

fn entries_strategy() -> impl Strategy<Value = Vec<(u32, Vec<RequestRow>)>> {
    (1usize..5).prop_flat_map(|d| {
        prop::collection::vec((0u32..3, prop::collection::vec(row_strategy(d, 6), 0..6)), 1..5)
    })
}

fn batch_of(entries: &[(u32, Vec<RequestRow>)], d: usize) -> DynamicBatch {
    let entries: Vec<ReadySlot> = entries
        .iter()
        .enumerate()
        .map(|(i, (layer, rows))| ReadySlot {
            key: SlotKey {
                client: ClientId(i as u32),
                index: 0,
            },
            region: None,
            header: SlotHeader::request(*layer, rows.len(), d, 1),
            rows: rows.clone(),
        })
        .collect();
    let total_rows = entries.iter().map(|e| e.rows.len()).sum();
    DynamicBatch {
        entries,
        total_rows,
        formed_at: Instant::now(),
    }
}

proptest! {
    #[test]
    fn ragged_visits_every_pair_once(
        counts in prop::collection::vec(0usize..20, 0..8),
        grid in 1usize..10,
    ) {
        prop_assert!(common::ragged_matches(&counts, grid));
        let seq = ragged_iter_with(ExecPolicy::Sequential, &counts, grid);
        let par = ragged_iter_with(ExecPolicy::Parallel, &counts, grid);
        prop_assert_eq!(seq, par);
    }

    #[test]
    fn shrink_matches_filter(sizes in prop::collection::vec(prop_oneof![Just(0usize), 1usize..50], 0..64)) {
        prop_assert_eq!(group_shrink(&sizes), common::shrink_oracle(&sizes));
    }

    #[test]
    fn scatter_inverts_reorganize(entries in entries_strategy()) {
        let d = entries.iter().flat_map(|e| e.1.first()).map(|r| r.hidden.len()).next().unwrap_or(1);
        let batch = batch_of(&entries, d);
        let locals: Vec<u32> = (0..6).collect();
        let r = reorganize(&batch, &locals).unwrap();
        let entry_rows: Vec<usize> = entries.iter().map(|e| e.1.len()).collect();
        let back = scatter(&r.groups, &r.activations, &entry_rows);
        for ((_, rows), flat) in entries.iter().zip(&back) {
            let expect: Vec<f32> = rows.iter().flat_map(|r| r.hidden.iter().copied()).collect();
            prop_assert_eq!(&expect, flat);
        }
        // Groups tile the reordered rows, sorted by (layer, expert), none empty.
        let mut next = 0;
        let mut keys = Vec::new();
        for g in &r.groups.groups {
            prop_assert_eq!(g.start, next);
            prop_assert!(g.len > 0);
            next += g.len;
            keys.push((g.layer, g.expert));
            for i in g.start..g.start + g.len {
                let o = r.groups.origin[i];
                let row = &entries[o.entry].1[o.row];
                prop_assert_eq!(row.expert_id, g.expert);
                prop_assert_eq!(entries[o.entry].0, g.layer);
                prop_assert_eq!(r.scores[i], row.router_score);
            }
        }
        prop_assert_eq!(next, batch.total_rows);
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn request_round_trip(d in 0usize..6, rows in 0usize..6, seq in any::<u64>(), layer in any::<u32>()) {
        let data: Vec<RequestRow> = (0..rows)
            .map(|i| RequestRow {
                hidden: (0..d).map(|j| (i * 7 + j) as f32 * 0.5 - 3.0).collect(),
                expert_id: i as u32,
                router_score: 0.25,
                token_tag: i as u32 * 3,
            })
            .collect();
        let header = SlotHeader::request(layer, rows, d, seq);
        if d == 0 && rows > 0 {
            prop_assert!(encode_request(&header, &data).is_err());
            return Ok(());
        }
        let image = encode_request(&header, &data).unwrap();
        prop_assert_eq!(decode_request(&image).unwrap(), (header, data.clone()));
        prop_assert_eq!(decode_sealed_request(&seal(image)).unwrap(), (header, data));
    }

    #[test]
    fn response_round_trip_is_bit_exact(
        values in (0usize..8).prop_flat_map(|rows| prop::collection::vec(any::<u32>().prop_map(f32::from_bits), rows * 3)),
        seq in any::<u64>(),
    ) {
        let rows = values.len() / 3;
        let header = SlotHeader::request(1, rows, 3, seq).response(rows);
        let image = encode_response(&header, &values).unwrap();
        let (h, back) = decode_response(&image).unwrap();
        prop_assert_eq!(h, header);
        prop_assert!(back.iter().map(|f| f.to_bits()).eq(values.iter().map(|f| f.to_bits())));
    }

    #[test]
    fn sealed_image_detects_any_single_bit_flip(
        rows in prop::collection::vec(row_strategy(2, 8), 1..4),
        pick in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let header = SlotHeader::request(0, rows.len(), 2, 5);
        let mut image = seal(encode_request(&header, &rows).unwrap());
        // The state and reserved bytes (0..8) are outside the checksum.
        let at = 8 + pick.index(image.len() - 8);
        image[at] ^= 1 << bit;
        prop_assert!(decode_sealed_request(&image).is_err());
    }

    #[test]
    fn placement_replicas_are_distinct_and_survive_failures(
        experts in 1usize..40,
        servers in 1u32..9,
        rf_seed in any::<usize>(),
        strategy in prop_oneof![Just(PlacementStrategy::RoundRobin), Just(PlacementStrategy::ContiguousBlocks)],
        dead_seed in any::<u64>(),
    ) {
        let ids: Vec<ServerId> = (0..servers).map(ServerId).collect();
        let rf = 1 + rf_seed % servers as usize;
        let table = build_placement(experts, &ids, rf, strategy).unwrap();
        table.validate().unwrap();
        for e in 0..experts as u32 {
            let reps = table.replicas_of(e);
            prop_assert_eq!(reps.len(), rf);
            prop_assert_eq!(reps.iter().collect::<BTreeSet<_>>().len(), rf);
            for s in reps {
                prop_assert!(table.hosted_by(*s).contains(&e));
            }
        }
        // Any rf - 1 failures leave every expert reachable.
        let mut mask = LivenessMask::new();
        let mut dead = BTreeSet::new();
        let mut x = dead_seed;
        while dead.len() < rf - 1 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            dead.insert(ServerId((x >> 33) as u32 % servers));
        }
        for s in &dead {
            mask.mark_dead(*s);
        }
        for e in 0..experts as u32 {
            let chosen = select_server(e, &table, &mask, e.wrapping_mul(31)).unwrap();
            prop_assert!(!dead.contains(&chosen));
        }
        prop_assert_eq!(PlacementTable::from_bytes(&table.to_bytes()).unwrap(), table);
    }

    #[test]
    fn rebalance_keeps_every_expert_hosted(
        counts in prop::collection::vec(0u64..1000, 8),
        rf in 1usize..3,
    ) {
        let ids: Vec<ServerId> = (0..4).map(ServerId).collect();
        let table = build_placement(8, &ids, rf, PlacementStrategy::RoundRobin).unwrap();
        let activations: BTreeMap<u32, u64> = counts.iter().enumerate().map(|(e, &c)| (e as u32, c)).collect();
        let loads: BTreeMap<ServerId, u64> = ids.iter().map(|&s| {
            (s, table.hosted_by(s).iter().map(|e| activations[e]).sum())
        }).collect();
        let next = rebalance(&activations, &table, &loads, RebalancePolicy::default());
        next.validate().unwrap();
        prop_assert_eq!(next.version, table.version + 1);
        for e in 0..8u32 {
            prop_assert!(!next.replicas_of(e).is_empty());
        }
    }

    #[test]
    fn parallel_and_sequential_compute_agree_bitwise(seed in any::<u64>(), tokens in 1usize..40) {
        let spec = ModelSpec { num_layers: 1, num_experts: 8, top_k: 2, hidden_dim: 8, inner_dim: 16, seed };
        let w = init_weights(&spec).unwrap();
        let mut s = eaas::rng::Stream::new(seed, 2, 0);
        let x = Matrix::new(tokens, 8, (0..tokens * 8).map(|_| s.uniform_f32(-1.0, 1.0)).collect()).unwrap();
        let layer = w.layer(0).unwrap();
        let logits = gate_logits(&x, &layer.gate, &w.gate_bias).unwrap();
        prop_assert_eq!(
            route_with(ExecPolicy::Sequential, &logits, 2).unwrap(),
            route_with(ExecPolicy::Parallel, &logits, 2).unwrap()
        );
        let e = w.expert(0, 3).unwrap();
        let a = expert_forward_with(ExecPolicy::Sequential, e, &x).unwrap();
        let b = expert_forward_with(ExecPolicy::Parallel, e, &x).unwrap();
        prop_assert!(a.as_slice().iter().map(|f| f.to_bits()).eq(b.as_slice().iter().map(|f| f.to_bits())));
    }
}
