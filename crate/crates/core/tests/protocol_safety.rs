mod common;

use eaas::protocol::{
    client_poll, client_submit, ClientSlot, PollOutcome, RequestRow, SlotHeader,
};
use eaas::transport::inproc::InProcFabric;
use eaas::transport::{Fabric, HandshakeHandler, RegionDescriptor, ServerMemory, ServerNode};
use eaas::{ClientId, Error, Result, ServerId};
use std::sync::Arc;

#[test]
fn random_schedules_respect_the_state_machine() {
    let r = common::random_schedules(5_000, 12, 11);
    assert!(r.invalid.is_empty(), "{:?}", &r.invalid[..r.invalid.len().min(5)]);
    assert_eq!(r.torn, 0);
    assert!(r.completed > 0);
    // Every legal edge shows up; nothing else does.
    let edges: Vec<(u8, u8, &str)> = r.transitions.keys().copied().collect();
    for e in [
        (0, 1, "client"),
        (1, 2, "server"),
        (2, 0, "client"),
        (1, 3, "monitor"),
        (3, 0, "server"),
    ] {
        assert!(edges.contains(&e), "missing {e:?} in {edges:?}");
    }
}

#[test]
fn tcp_reads_never_see_torn_images() {
    let r = common::tcp_torn_reads(300, 8, 16);
    assert_eq!(r.round_trips, 300);
    assert_eq!((r.torn, r.client_errors, r.server_bad_crc), (0, 0, 0));
}

struct Fixed(RegionDescriptor);

impl HandshakeHandler for Fixed {
    fn accept(&self, _: ClientId, _: &[RegionDescriptor]) -> Result<Vec<RegionDescriptor>> {
        Ok(vec![self.0])
    }
}

fn one_slot() -> (Arc<ServerMemory>, Box<dyn eaas::transport::Connection>, ClientSlot) {
    let memory = Arc::new(ServerMemory::new(ServerId(0)));
    let region = memory.register(256);
    let node = ServerNode::new(memory.clone(), Arc::new(Fixed(region.descriptor())));
    let fabric = InProcFabric::new();
    fabric.add_node(node);
    let conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
    let slot = ClientSlot::new(conn.remote_regions()[0]);
    (memory, conn, slot)
}

fn row() -> RequestRow {
    RequestRow {
        hidden: vec![1.0, 2.0],
        expert_id: 0,
        router_score: 1.0,
        token_tag: 0,
    }
}

#[test]
fn submit_requires_empty_slot_and_fresh_seq() {
    let (_mem, mut conn, mut slot) = one_slot();
    client_submit(conn.as_mut(), &mut slot, &SlotHeader::request(0, 1, 2, 4), &[row()]).unwrap();
    let again = client_submit(conn.as_mut(), &mut slot, &SlotHeader::request(0, 1, 2, 6), &[row()]);
    assert!(matches!(again, Err(Error::Protocol(_))));
    assert_eq!(client_poll(conn.as_mut(), &mut slot).unwrap(), PollOutcome::Pending);

    let (_mem, mut conn, mut slot) = one_slot();
    slot.last_seq = 8;
    let stale = client_submit(conn.as_mut(), &mut slot, &SlotHeader::request(0, 1, 2, 8), &[row()]);
    assert!(matches!(stale, Err(Error::Protocol(_))));
}

#[test]
fn oversized_request_is_refused() {
    let (_mem, mut conn, mut slot) = one_slot();
    let rows = vec![row(); 20];
    let r = client_submit(conn.as_mut(), &mut slot, &SlotHeader::request(0, 20, 2, 2), &rows);
    assert!(matches!(r, Err(Error::Protocol(_))));
}

#[test]
fn response_for_another_seq_is_rejected() {
    let (mem, mut conn, mut slot) = one_slot();
    client_submit(conn.as_mut(), &mut slot, &SlotHeader::request(0, 1, 2, 10), &[row()]).unwrap();
    let region = mem.get(slot.region.region_id).unwrap();
    let (header, _) = eaas::protocol::server_read_request(&region).unwrap().unwrap();
    let mut wrong = header;
    wrong.request_seq = 12;
    eaas::protocol::server_publish(&region, &wrong, &[0.0, 0.0]).unwrap();
    assert!(matches!(client_poll(conn.as_mut(), &mut slot), Err(Error::Protocol(_))));
}

#[test]
fn released_slot_is_reported() {
    let (mem, mut conn, mut slot) = one_slot();
    client_submit(conn.as_mut(), &mut slot, &SlotHeader::request(0, 1, 2, 2), &[row()]).unwrap();
    let region = mem.get(slot.region.region_id).unwrap();
    eaas::protocol::server_mark_offline(&region).unwrap();
    assert_eq!(client_poll(conn.as_mut(), &mut slot).unwrap(), PollOutcome::Released);
}
