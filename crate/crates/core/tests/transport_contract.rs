//! The same contract checked against both backends.

use std::net::TcpListener;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use eaas::model::{init_weights, ModelSpec};
use eaas::protocol::PAYLOAD_OFFSET;
use eaas::server::{ExpertServer, ServerConfig};
use eaas::transport::inproc::InProcFabric;
use eaas::transport::tcp::TcpFabric;
use eaas::transport::{ConnState, Fabric};
use eaas::{ClientId, Error, ServerId};

#[derive(Clone, Copy, Debug)]
enum Kind {
    Inproc,
    Tcp,
}

const BOTH: [Kind; 2] = [Kind::Inproc, Kind::Tcp];

fn setup(kind: Kind) -> (ExpertServer, Arc<dyn Fabric>) {
    let spec = ModelSpec {
        num_layers: 1,
        num_experts: 1,
        top_k: 1,
        hidden_dim: 4,
        inner_dim: 4,
        seed: 1,
    };
    let mut cfg = ServerConfig::new(ServerId(0), vec![0]);
    cfg.max_rows_per_slot = 16;
    if let Kind::Tcp = kind {
        cfg.listen_addr = Some("127.0.0.1:0".into());
    }
    let server = ExpertServer::start(cfg, Arc::new(init_weights(&spec).unwrap()), None).unwrap();
    let fabric: Arc<dyn Fabric> = match kind {
        Kind::Inproc => {
            let f = InProcFabric::new();
            f.add_node(server.node());
            f
        }
        Kind::Tcp => {
            let f = TcpFabric::new();
            f.register(ServerId(0), server.tcp_addr().unwrap());
            f
        }
    };
    (server, fabric)
}

#[test]
fn writes_apply_in_issue_order() {
    for kind in BOTH {
        let (server, fabric) = setup(kind);
        let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let region = conn.remote_regions()[0].region_id;
        let offset = PAYLOAD_OFFSET as u64;
        let mut last = None;
        for i in 0u64..10_000 {
            // The same offset is overwritten, so only in-order application
            // leaves the final value in place.
            last = Some(conn.write(region, offset, &i.to_le_bytes()).unwrap());
            if i % 1000 == 999 {
                let seen = conn.read(region, offset, 8).unwrap();
                assert_eq!(u64::from_le_bytes(seen.try_into().unwrap()), i, "{kind:?}");
            }
        }
        last.unwrap().wait().unwrap();
        let stored = server.node().memory.read(region, offset, 8).unwrap();
        assert_eq!(u64::from_le_bytes(stored.try_into().unwrap()), 9_999, "{kind:?}");
    }
}

#[test]
fn completion_means_visible_at_server() {
    for kind in BOTH {
        let (server, fabric) = setup(kind);
        let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let region = conn.remote_regions()[1].region_id;
        for i in 0u32..200 {
            conn.write(region, 40, &i.to_le_bytes()).unwrap().wait().unwrap();
            let local = server.node().memory.read(region, 40, 4).unwrap();
            assert_eq!(local, i.to_le_bytes(), "{kind:?}");
        }
    }
}

#[test]
fn clients_cannot_touch_each_others_regions() {
    for kind in BOTH {
        let (server, fabric) = setup(kind);
        let mut a = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let mut b = fabric.establish(ClientId(1), ServerId(0)).unwrap();
        let ra: Vec<u32> = a.remote_regions().iter().map(|r| r.region_id).collect();
        let rb: Vec<u32> = b.remote_regions().iter().map(|r| r.region_id).collect();
        assert!(ra.iter().all(|r| !rb.contains(r)), "{kind:?}");
        assert!(matches!(a.write(rb[0], 32, &[1]), Err(Error::Protocol(_))), "{kind:?}");
        assert!(a.read(rb[0], 0, 1).is_err(), "{kind:?}");
        a.write(ra[0], 32, &[7; 8]).unwrap().wait().unwrap();
        assert_eq!(b.read(rb[0], 32, 8).unwrap(), vec![0; 8], "{kind:?}");
        assert_eq!(server.node().memory.read(ra[0], 32, 8).unwrap(), vec![7; 8]);
    }
}

#[test]
fn out_of_bounds_access_is_rejected_before_sending() {
    for kind in BOTH {
        let (server, fabric) = setup(kind);
        let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let r = conn.remote_regions()[0];
        assert!(conn.write(r.region_id, r.length - 2, &[0; 4]).is_err(), "{kind:?}");
        assert!(conn.read(r.region_id, r.length, 1).is_err(), "{kind:?}");
        assert_eq!(server.node().stats.writes_rejected.load(Ordering::Relaxed), 0);
    }
}

#[test]
fn reestablish_hands_out_fresh_zeroed_regions() {
    for kind in BOTH {
        let (server, fabric) = setup(kind);
        let mut old = fabric.establish(ClientId(3), ServerId(0)).unwrap();
        let old_ids: Vec<u32> = old.remote_regions().iter().map(|r| r.region_id).collect();
        old.write(old_ids[0], 32, &[9; 16]).unwrap().wait().unwrap();
        let mut new = fabric.establish(ClientId(3), ServerId(0)).unwrap();
        let new_ids: Vec<u32> = new.remote_regions().iter().map(|r| r.region_id).collect();
        assert!(new_ids.iter().all(|r| !old_ids.contains(r)), "{kind:?}");
        for r in new.remote_regions().to_vec() {
            let bytes = new.read(r.region_id, 0, r.length as usize).unwrap();
            assert!(bytes.iter().all(|&b| b == 0), "{kind:?}");
        }
        for id in &old_ids {
            assert!(server.node().memory.get(*id).is_none(), "{kind:?}");
        }
        // The stale connection can no longer reach its regions.
        assert!(old.read(old_ids[0], 0, 1).is_err(), "{kind:?}");
    }
}

#[test]
fn closed_connection_refuses_operations() {
    for kind in BOTH {
        let (_server, fabric) = setup(kind);
        let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let r = conn.remote_regions()[0].region_id;
        conn.close();
        assert_eq!(conn.state(), ConnState::Closed);
        assert!(matches!(conn.read(r, 0, 1), Err(Error::Connection { .. })), "{kind:?}");
    }
}

#[test]
fn killed_server_fails_operations() {
    for kind in BOTH {
        let (mut server, fabric) = setup(kind);
        let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let r = conn.remote_regions()[0].region_id;
        server.kill();
        let failed = conn.read(r, 0, 1).is_err()
            || conn.write(r, 32, &[1]).and_then(|c| c.wait()).is_err();
        assert!(failed, "{kind:?}");
        assert!(fabric.establish(ClientId(1), ServerId(0)).is_err(), "{kind:?}");
    }
}

#[test]
fn server_never_initiates_sends() {
    for kind in BOTH {
        let (server, fabric) = setup(kind);
        let mut conn = fabric.establish(ClientId(0), ServerId(0)).unwrap();
        let r = conn.remote_regions()[0].region_id;
        for i in 0u8..100 {
            conn.write(r, 32, &[i]).unwrap().wait().unwrap();
            conn.read(r, 0, 8).unwrap();
        }
        let stats = &server.node().stats;
        assert_eq!(stats.server_initiated_sends.load(Ordering::Relaxed), 0, "{kind:?}");
        assert!(stats.reads_served.load(Ordering::Relaxed) >= 100, "{kind:?}");
    }
}

#[test]
fn handshake_times_out_against_silent_listener() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let fabric = TcpFabric::new();
    fabric.register(ServerId(0), listener.local_addr().unwrap());
    let start = Instant::now();
    let err = fabric.establish(ClientId(0), ServerId(0)).err().unwrap();
    let took = start.elapsed();
    assert!(matches!(err, Error::Connection { .. }), "{err}");
    assert!(took >= Duration::from_millis(900) && took < Duration::from_secs(3), "{took:?}");
}

#[test]
fn unknown_server_is_a_connection_error() {
    let fabric = InProcFabric::new();
    assert!(matches!(
        fabric.establish(ClientId(0), ServerId(9)),
        Err(Error::Connection { .. })
    ));
    let tcp = TcpFabric::new();
    assert!(matches!(
        tcp.establish(ClientId(0), ServerId(9)),
        Err(Error::Connection { .. })
    ));
}
