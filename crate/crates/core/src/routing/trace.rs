//! Line-delimited route traces: one JSON object per token with its experts,
//! gate weights (six decimals), slots and whether it was dropped.

use std::fmt::Write;

use super::DispatchPlan;

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

/// Trace record for token `t`. `layer` is prepended when tracing a model.
pub fn route_trace_line(plan: &DispatchPlan, t: usize, layer: Option<usize>) -> String {
    let mine = plan.token_assignments(t);
    let mut s = String::from("{");
    if let Some(l) = layer {
        write!(s, "\"layer\":{l},").unwrap();
    }
    write!(
        s,
        "\"token\":{t},\"experts\":[{}],\"gates\":[{}],\"slots\":[{}],\"dropped\":{}}}",
        join(&mine, |a| a.expert.to_string()),
        join(&mine, |a| format!("{:.6}", a.gate)),
        join(&mine, |a| a.slot.to_string()),
        mine.is_empty()
    )
    .unwrap();
    s
}

pub fn route_trace_lines(plan: &DispatchPlan, layer: Option<usize>) -> Vec<String> {
    (0..plan.num_tokens)
        .map(|t| route_trace_line(plan, t, layer))
        .collect()
}
