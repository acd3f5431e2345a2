use std::fmt::Write as _;

use serde::Serialize;
use svagent::orchestrator::RunTrace;

fn snake<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

/// Plain-text summary of a run: one row per iteration, then the outcome.
pub fn render(t: &RunTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run       {}", t.run_id);
    let _ = writeln!(out, "question  {}", t.question);
    let _ = writeln!(out, "pipeline  {} (tau {}, T {}, k {})", t.config.ablations.label(), t.config.tau, t.config.max_iters, t.config.k);
    let _ = writeln!(out, "{:<4} {:<24} {:>7} {:<5} {:<9} outcome", "iter", "frames", "ratio", "gate", "decisions");
    for rec in &t.iterations {
        let (ratio, gate) = match &rec.gate {
            Some(g) => (format!("{:.3}", g.ratio), if g.passed { "pass" } else { "fail" }),
            None => ("-".into(), "-"),
        };
        let decisions = match &rec.decisions {
            Some((text, vision)) => format!("{}/{}", text.option, vision.option),
            None => "-".into(),
        };
        let mut frames = rec.frames_used.to_string();
        if frames.len() > 24 {
            frames = format!("{} frames", rec.frames_used.len());
        }
        let mut outcome = snake(&rec.failure_reason);
        if let Some(e) = &rec.error {
            let _ = write!(outcome, ": {e}");
        }
        let _ = writeln!(out, "{:<4} {frames:<24} {ratio:>7} {gate:<5} {decisions:<9} {outcome}", rec.iteration);
    }
    let _ = writeln!(out, "final     {} via {}", t.final_option, snake(&t.resolution_path));
    let _ = writeln!(out, "calls     {}", t.calls.len());
    for w in &t.warnings {
        let _ = writeln!(out, "warning   {w}");
    }
    out
}
