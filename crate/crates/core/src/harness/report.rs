//! CSV lines for metrics and channel traces. Numbers use the shortest
//! round-trip decimal form, so identical runs give identical bytes.

use std::fmt::Write;

use cen_autograd::Element;

use super::trace::ChannelTrace;
use super::train::MetricsRecord;
use crate::models::ModelAssembly;

pub fn lane_label<T: Element>(assembly: &ModelAssembly<T>, lane: usize) -> String {
    let l = &assembly.lanes[lane];
    format!("m{}_t{}", l.modality, l.task)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_header<T: Element>(assembly: &ModelAssembly<T>) -> String {
    let mut h = String::from("step,epoch");
    for lane in 0..assembly.lanes.len() {
        write!(h, ",loss_{}", lane_label(assembly, lane)).unwrap();
    }
    for t in 0..assembly.tasks.len() {
        write!(h, ",ensemble_t{t}").unwrap();
    }
    h.push_str(",miou,sparsity,total\n");
    h
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    let mut s = format!("{},{}", r.step, r.epoch);
    for &v in r.lane_losses.iter().chain(&r.ensemble_losses) {
        write!(s, ",{}", opt(v)).unwrap();
    }
    writeln!(s, ",{},{},{}", opt(r.miou), r.sparsity, r.total).unwrap();
    s
}

pub const TRACE_HEADER: &str = "step,layer,stream,channel,gamma,replaced\n";
pub const TRACE_SUMMARY_HEADER: &str = "step,layer,stream,exchanged_fraction,layer_exchanged_fraction,cat_a,cat_b,cat_c\n";

pub fn trace_rows(trace: &ChannelTrace) -> String {
    let mut s = String::new();
    for r in &trace.rows {
        writeln!(s, "{},{},{},{},{},{}", r.step, r.layer, r.stream, r.channel, r.gamma, r.replaced as u8).unwrap();
    }
    s
}

pub fn trace_summary_rows(trace: &ChannelTrace) -> String {
    let mut s = String::new();
    for l in &trace.layers {
        for m in &l.streams {
            writeln!(s, "{},{},{},{},{},{},{},{}", l.step, l.layer, m.stream, m.exchanged_fraction, l.exchanged_fraction, m.a, m.b, m.c)
                .unwrap();
        }
    }
    s
}
