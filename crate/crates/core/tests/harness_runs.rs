use eaas::harness::workload::{activation_histogram, hot_to_median, request_tokens};
use eaas::harness::{build_inputs, gen_workload, run, verify, Scenario};
use eaas::model::Matrix;
use eaas::ServerId;

fn scenario(extra: &str) -> Scenario {
    Scenario::parse(&format!(
        r#"
[model]
layers = 2
experts = 8
top_k = 2
hidden_dim = 8
inner_dim = 16

[topology]
servers = 4
clients = 2
replication = 2

[workload]
requests = 60
tokens_per_request = 8

[server]
service_us_per_batch = 300
idle_sleep_us = 200
heartbeat_period_ms = 20

[client]
timeout_ms = 200
poll_interval_us = 200

[monitor]
heartbeat_period_ms = 20
timeout_ms = 80
detection_period_ms = 20
{extra}"#
    ))
    .unwrap()
}

#[test]
fn same_seed_same_outputs() {
    let s = scenario("");
    let a = run(&s).unwrap();
    let b = run(&s).unwrap();
    assert_eq!(a.completion_ratio(), 1.0);
    assert_eq!(a.outputs, b.outputs);
    let mut other = s.clone();
    other.run.seed += 1;
    assert_ne!(gen_workload(&s).requests[0].tokens, gen_workload(&other).requests[0].tokens);
}

#[test]
fn hung_server_is_routed_around() {
    let mut s = scenario("[[events]]\nat_ms = 30\nkind = \"hang-server\"\ntarget = 2\n");
    s.workload.requests = 400;
    let m = verify(&s).unwrap();
    assert_eq!(m.events.len(), 1);
    assert_eq!(m.completion_ratio(), 1.0, "{:?}", m.errors);
    assert!(m.failovers >= 1);
    assert!(m.max_oracle_error.unwrap() <= 1e-4);
}

#[test]
fn killed_client_leaves_others_intact() {
    let mut s = scenario("[[events]]\nat_ms = 40\nkind = \"kill-client\"\ntarget = 1\n");
    s.workload.requests = 400;
    let m = run(&s).unwrap();
    assert_eq!(m.events.len(), 1);
    assert_eq!(m.submitted_requests, m.completed_requests + m.failed_requests);
    let survivors: Vec<_> = m.records.iter().filter(|r| r.client == 0).collect();
    assert_eq!(survivors.len(), 200);
    assert!(m.records.iter().filter(|r| r.client == 1).count() < 200);
    // Without server faults every dispatched row is computed or voided once.
    assert_eq!(m.rows_sent, m.rows_processed + m.rows_voided);
}

#[test]
fn added_server_takes_load_after_rebalance() {
    let mut s = scenario(
        "[[events]]\nat_ms = 60\nkind = \"add-server\"\ntarget = 4\n\n[[events]]\nat_ms = 120\nkind = \"rebalance\"\n",
    );
    s.workload.skew = 2.0;
    s.workload.requests = 600;
    let m = verify(&s).unwrap();
    assert_eq!(m.events.len(), 2, "{:?}", m.events);
    assert_eq!(m.completion_ratio(), 1.0, "{:?}", m.errors);
    assert!(m.max_oracle_error.unwrap() <= 1e-4);
    assert!(m.per_server_rows.get(&ServerId(4)).copied().unwrap_or(0) > 0, "{:?}", m.per_server_rows);
}

#[test]
fn tcp_backend_survives_a_crash() {
    let mut s = scenario("[[events]]\nat_ms = 40\nkind = \"kill-server\"\ntarget = 0\n");
    s.topology.backend = eaas::harness::Backend::Tcp;
    s.workload.requests = 200;
    let m = verify(&s).unwrap();
    assert_eq!(m.events.len(), 1);
    assert_eq!(m.completion_ratio(), 1.0, "{:?}", m.errors);
    assert!(m.max_oracle_error.unwrap() <= 1e-4);
    assert!(m.failovers >= 1);
}

#[test]
fn skew_concentrates_activations() {
    let mut s = scenario("");
    s.model.experts = 64;
    s.workload.skew = 2.0;
    s.workload.requests = 1;
    let (w, _) = build_inputs(&s).unwrap();
    let tokens: Matrix = request_tokens(s.run.seed, 0, 10_000, s.model.hidden_dim);
    let h = activation_histogram(&w, &tokens).unwrap();
    assert_eq!(h.iter().sum::<u64>(), 10_000 * s.model.top_k as u64);
    assert!(hot_to_median(&h) >= 5.0, "{}", hot_to_median(&h));
    let (w2, _) = build_inputs(&s).unwrap();
    assert_eq!(activation_histogram(&w2, &tokens).unwrap(), h);

    s.workload.skew = 0.0;
    let (flat, _) = build_inputs(&s).unwrap();
    let flat = hot_to_median(&activation_histogram(&flat, &tokens).unwrap());
    assert!(hot_to_median(&h) > 2.0 * flat, "{} vs {flat}", hot_to_median(&h));
}

