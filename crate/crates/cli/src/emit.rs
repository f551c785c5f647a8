//! Deterministic result files. Floats are formatted with Rust's
//! shortest-roundtrip formatter, so identical runs emit identical bytes.
//! Wall-clock timings deliberately never reach these files.

use crate::config::{serialize_config, ExperimentConfig};
use nplab_core::train::{RunResult, RunStatus};

/// Long-format per-epoch data: one row per logged metric, header
/// `epoch,metric,value`. Metric names match the record field names.
pub fn emit_plot_data(result: &RunResult) -> String {
    let mut s = String::from("epoch,metric,value\n");
    for rec in &result.records {
        for (name, value) in rec.metrics() {
            s.push_str(&format!("{},{},{}\n", rec.epoch, name, value));
        }
    }
    s
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn json_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        // JSON has no non-finite literals
        format!("\"{v}\"")
    }
}

/// Run summary as a small JSON document with a fixed key order.
pub fn emit_summary(cfg: &ExperimentConfig, result: &RunResult, params_path: &str) -> String {
    let status = match result.status {
        RunStatus::Completed => "ok".to_string(),
        RunStatus::ReachedThreshold { epoch } => format!("reached_threshold@{epoch}"),
        RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
    };
    let mut s = String::from("{\n");
    s.push_str(&format!("  \"status\": \"{}\",\n", json_escape(&status)));
    s.push_str(&format!("  \"seed\": {},\n", result.seed));
    s.push_str(&format!(
        "  \"epochs_recorded\": {},\n",
        result.records.len()
    ));
    s.push_str(&format!("  \"final_loss\": {},\n", json_num(result.final_loss())));
    s.push_str(&format!("  \"best_loss\": {},\n", json_num(result.best_loss())));
    if let Some(last) = result.records.last() {
        s.push_str("  \"final_metrics\": {");
        let metrics = last.metrics();
        for (i, (name, value)) in metrics.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            s.push_str(&format!("\"{}\": {}", name, json_num(*value)));
        }
        s.push_str("},\n");
    }
    s.push_str(&format!(
        "  \"params_path\": \"{}\",\n",
        json_escape(params_path)
    ));
    s.push_str(&format!(
        "  \"config\": \"{}\"\n",
        json_escape(&serialize_config(cfg))
    ));
    s.push_str("}\n");
    s
}
