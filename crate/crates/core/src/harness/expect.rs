//! Post-run assertions from a scenario's `[expect]` section.

use std::fmt;
use std::time::Duration;

use super::metrics::RunMetrics;
use super::scenario::Scenario;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Time after a fault before post-fault throughput is measured: long enough
/// for either the client timeout or the monitor to have noticed.
pub fn recovery_settle(scenario: &Scenario) -> Duration {
    let timeout = Duration::from_millis(scenario.client.timeout_ms);
    let monitor = Duration::from_millis(scenario.monitor.timeout_ms + scenario.monitor.detection_period_ms);
    timeout.max(monitor)
}

pub fn check_expectations(scenario: &Scenario, m: &RunMetrics) -> Vec<Check> {
    let e = &scenario.expect;
    let mut out = Vec::new();
    if !scenario.events.is_empty() {
        // Events scheduled after the workload drained never happen.
        let (fired, planned) = (m.events.len(), scenario.events.len());
        out.push(check(
            "events fired",
            fired == planned,
            format!("{fired} of {planned}"),
        ));
    }
    if let Some(min) = e.completion {
        let r = m.completion_ratio();
        out.push(check(
            "completion",
            r >= min,
            format!("{r:.4} (want >= {min})"),
        ));
    }
    if let Some(max) = e.max_oracle_error {
        out.push(match m.max_oracle_error {
            Some(err) => check(
                "oracle error",
                f64::from(err) <= max,
                format!("{err:e} (want <= {max:e})"),
            ),
            None => check("oracle error", false, "run was not verified".into()),
        });
    }
    if let Some(max) = e.max_zero_windows {
        let z = m.zero_windows();
        out.push(check("zero windows", z <= max, format!("{z} (want <= {max})")));
    }
    if let Some(min) = e.min_zero_windows {
        let z = m.zero_windows();
        out.push(check("zero windows", z >= min, format!("{z} (want >= {min})")));
    }
    if let Some(min) = e.min_recovery_ratio {
        out.push(match m.recovery_ratio(recovery_settle(scenario)) {
            Some(r) => check("recovery", r >= min, format!("{r:.3} (want >= {min})")),
            None => check(
                "recovery",
                false,
                "not enough full windows around the fault".into(),
            ),
        });
    }
    if let Some(max) = e.max_sends_to_dead {
        let n = m.sends_to_dead;
        out.push(check("sends to dead", n <= max, format!("{n} (want <= {max})")));
    }
    if let Some(min) = e.min_failovers {
        let n = m.failovers;
        out.push(check("failovers", n >= min, format!("{n} (want >= {min})")));
    }
    if let Some(min) = e.min_throughput {
        let t = m.throughput();
        out.push(check(
            "throughput",
            t >= min,
            format!("{t:.1} tokens/s (want >= {min})"),
        ));
    }
    out
}
