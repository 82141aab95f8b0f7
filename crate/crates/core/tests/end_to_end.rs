use std::sync::Arc;
use std::time::Duration;

use eaas::client::{AttentionClient, ClientConfig};
use eaas::model::{full_forward_oracle, init_weights, Matrix, ModelSpec, ModelWeights};
use eaas::monitor::{ControlPlane, Monitor, MonitorConfig};
use eaas::placement::{build_placement, PlacementStrategy, PlacementTable};
use eaas::rng::Stream;
use eaas::server::{ExpertServer, ServerConfig};
use eaas::transport::inproc::InProcFabric;
use eaas::transport::tcp::TcpFabric;
use eaas::transport::Fabric;
use eaas::{ClientId, ServerId};

fn weights(layers: usize, experts: usize, top_k: usize, d: usize) -> Arc<ModelWeights> {
    Arc::new(
        init_weights(&ModelSpec {
            num_layers: layers,
            num_experts: experts,
            top_k,
            hidden_dim: d,
            inner_dim: 2 * d,
            seed: 11,
        })
        .unwrap(),
    )
}

fn tokens(n: usize, d: usize, seed: u64) -> Matrix {
    let mut s = Stream::new(seed, 1, 0);
    Matrix::new(n, d, (0..n * d).map(|_| s.uniform_f32(-1.0, 1.0)).collect()).unwrap()
}

struct Cluster {
    servers: Vec<ExpertServer>,
    fabric: Arc<dyn Fabric>,
    table: Arc<PlacementTable>,
    monitor: Option<Monitor>,
}

fn cluster(w: &Arc<ModelWeights>, n: u32, rf: usize, tcp: bool, monitor: bool) -> Cluster {
    let ids: Vec<ServerId> = (0..n).map(ServerId).collect();
    let table = Arc::new(
        build_placement(w.spec.num_experts, &ids, rf, PlacementStrategy::RoundRobin).unwrap(),
    );
    let monitor = monitor.then(|| Monitor::start(MonitorConfig::default()));
    let control = monitor
        .as_ref()
        .map(|m| Arc::new(m.handle()) as Arc<dyn ControlPlane>);
    let inproc = InProcFabric::new();
    let tcp_fabric = TcpFabric::new();
    let mut servers = Vec::new();
    for &id in &ids {
        let mut cfg = ServerConfig::new(id, table.hosted_by(id).to_vec());
        if tcp {
            cfg.listen_addr = Some("127.0.0.1:0".into());
        }
        let s = ExpertServer::start(cfg, w.clone(), control.clone()).unwrap();
        if tcp {
            tcp_fabric.register(id, s.tcp_addr().unwrap());
        } else {
            inproc.add_node(s.node());
        }
        servers.push(s);
    }
    let fabric: Arc<dyn Fabric> = if tcp { tcp_fabric } else { inproc };
    Cluster {
        servers,
        fabric,
        table,
        monitor,
    }
}

impl Cluster {
    fn client(&self, w: &Arc<ModelWeights>, id: u32) -> AttentionClient {
        let mut c = AttentionClient::new(
            ClientConfig::new(ClientId(id)),
            w.clone(),
            self.fabric.clone(),
            self.table.clone(),
        )
        .unwrap();
        if let Some(m) = &self.monitor {
            c.attach_monitor(Arc::new(m.handle()));
        }
        c
    }
}

#[test]
fn single_server_matches_oracle_exactly() {
    let w = weights(2, 8, 2, 8);
    let c = cluster(&w, 1, 1, false, false);
    let mut client = c.client(&w, 0);
    let x = tokens(16, 8, 1);
    assert_eq!(client.forward(&x).unwrap(), full_forward_oracle(&w, &x).unwrap());
}

#[test]
fn four_servers_match_oracle() {
    let w = weights(4, 16, 4, 8);
    let c = cluster(&w, 4, 2, false, true);
    let mut client = c.client(&w, 0);
    let x = tokens(32, 8, 2);
    let out = client.forward(&x).unwrap();
    assert!(out.max_abs_diff(&full_forward_oracle(&w, &x).unwrap()) <= 1e-4);
}

#[test]
fn tcp_backend_matches_oracle() {
    let w = weights(2, 8, 2, 8);
    let c = cluster(&w, 2, 2, true, false);
    let mut client = c.client(&w, 0);
    let x = tokens(20, 8, 3);
    let out = client.pipelined_forward(&x).unwrap();
    assert!(out.max_abs_diff(&full_forward_oracle(&w, &x).unwrap()) <= 1e-4);
}

#[test]
fn pipelined_equals_sequential() {
    let w = weights(3, 8, 2, 8);
    let c = cluster(&w, 2, 1, false, false);
    let mut client = c.client(&w, 0);
    let x = tokens(9, 8, 4);
    assert_eq!(
        client.pipelined_forward(&x).unwrap(),
        client.forward(&x).unwrap()
    );
}

#[test]
fn kill_fails_over_to_identical_output() {
    let w = weights(2, 8, 2, 8);
    let x = tokens(24, 8, 5);
    let baseline = {
        let c = cluster(&w, 3, 2, false, false);
        let mut client = c.client(&w, 0);
        client.forward(&x).unwrap()
    };
    let mut c = cluster(&w, 3, 2, false, false);
    let mut client = c.client(&w, 0);
    c.servers[1].kill();
    let out = client.forward(&x).unwrap();
    assert_eq!(out, baseline);
    let m = client.metrics().snapshot();
    assert!(m.failovers >= 1);
    assert_eq!(m.sends_to_dead, 0);
}

#[test]
fn hung_server_times_out() {
    let w = weights(1, 4, 1, 4);
    let x = tokens(8, 4, 6);
    let c = cluster(&w, 2, 2, false, false);
    let mut client = c.client(&w, 0);
    c.servers[0].hang();
    let start = std::time::Instant::now();
    let out = client.forward(&x).unwrap();
    assert!(start.elapsed() >= Duration::from_millis(200));
    assert_eq!(out, full_forward_oracle(&w, &x).unwrap());
    assert!(client.metrics().snapshot().failovers_by_timeout >= 1);
}
