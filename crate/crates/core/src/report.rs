//! Makespans, Gantt charts, comparisons and trace export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_traits::ToPrimitive;
use serde::Serialize;

use crate::cq::CommandKind;
use crate::scheduler::SimTrace;
use crate::spec::{ComponentId, DeviceId, KernelId};
use crate::time::Millis;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("trace has no events")]
    EmptyTrace,
    #[error("gantt quantum must be positive")]
    BadQuantum,
    #[error("comparison needs at least one run")]
    NoRuns,
}

/// Time from the first command start to the last command finish.
pub fn makespan(trace: &SimTrace) -> Result<Millis, ReportError> {
    let start = trace.events.iter().map(|e| &e.start).min().ok_or(ReportError::EmptyTrace)?;
    let end = trace.events.iter().map(|e| &e.finish).max().ok_or(ReportError::EmptyTrace)?;
    Ok(end - start)
}

fn kind_char(k: CommandKind) -> char {
    match k {
        CommandKind::Write => 'w',
        CommandKind::Ndrange => 'e',
        CommandKind::Read => 'r',
    }
}

fn rows(trace: &SimTrace) -> BTreeMap<(DeviceId, usize), Vec<usize>> {
    let mut out: BTreeMap<(DeviceId, usize), Vec<usize>> = BTreeMap::new();
    for (i, e) in trace.events.iter().enumerate() {
        out.entry((e.device, e.queue)).or_default().push(i);
    }
    out
}

/// Character Gantt chart with one row per device queue and one column per
/// `quantum`. A cell shows the kind of the command occupying any part of it.
pub fn gantt_text(trace: &SimTrace, quantum: &Millis) -> Result<String, ReportError> {
    if !quantum.is_positive() {
        return Err(ReportError::BadQuantum);
    }
    let span = makespan(trace)?;
    let t0 = trace.events.iter().map(|e| &e.start).min().expect("non-empty");
    let cols = (&span / quantum).ceil_int().to_usize().unwrap_or(0).max(1);
    let mut out = String::new();
    for ((dev, q), idx) in rows(trace) {
        let mut cells = vec!['.'; cols];
        for i in idx {
            let e = &trace.events[i];
            if e.start == e.finish {
                continue;
            }
            let a = ((&e.start - t0) / quantum).floor_int().to_usize().unwrap_or(0);
            let b = ((&e.finish - t0) / quantum).ceil_int().to_usize().unwrap_or(0);
            for c in cells.iter_mut().take(b.min(cols)).skip(a) {
                *c = kind_char(e.kind);
            }
        }
        let _ = writeln!(out, "dev{dev}/q{q} |{}|", cells.into_iter().collect::<String>());
    }
    let _ = writeln!(out, "one column = {quantum} ms, makespan = {span} ms");
    let _ = writeln!(out, "w = write, e = ndrange, r = read, . = idle");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG Gantt chart; every command with non-zero duration becomes a `rect`
/// carrying its kind as a class and its label as a tooltip.
pub fn gantt_svg(trace: &SimTrace) -> Result<String, ReportError> {
    const WIDTH: f64 = 1000.0;
    const ROW: f64 = 24.0;
    const LEFT: f64 = 90.0;
    let span = makespan(trace)?.to_f64();
    let t0 = trace.events.iter().map(|e| &e.start).min().expect("non-empty").clone();
    let scale = if span > 0.0 { WIDTH / span } else { 1.0 };
    let rows = rows(trace);
    let height = ROW * (rows.len() as f64 + 1.5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="monospace" font-size="12">"#,
        LEFT + WIDTH + 10.0
    );
    let _ = writeln!(
        out,
        "<style>.write{{fill:#4e79a7}} .ndrange{{fill:#f28e2b}} .read{{fill:#59a14f}} rect{{stroke:#222;stroke-width:0.5}}</style>"
    );
    for (row, ((dev, q), idx)) in rows.into_iter().enumerate() {
        let y = ROW * row as f64;
        let _ = writeln!(out, r#"<text x="4" y="{}">dev{dev}/q{q}</text>"#, y + ROW * 0.7);
        for i in idx {
            let e = &trace.events[i];
            if e.start == e.finish {
                continue;
            }
            let x = LEFT + (&e.start - &t0).to_f64() * scale;
            let w = (&e.finish - &e.start).to_f64() * scale;
            let class = match e.kind {
                CommandKind::Write => "write",
                CommandKind::Ndrange => "ndrange",
                CommandKind::Read => "read",
            };
            let _ = writeln!(
                out,
                r#"<rect class="{class}" x="{x:.3}" y="{:.3}" width="{w:.3}" height="{:.3}"><title>{} k{} [{} - {}]</title></rect>"#,
                y + 2.0,
                ROW - 4.0,
                escape(&e.label),
                e.kernel,
                e.start,
                e.finish
            );
        }
    }
    let _ = writeln!(out, r#"<text x="{LEFT}" y="{:.3}">0 .. {span} ms</text>"#, height - ROW * 0.4);
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub name: String,
    pub makespan: f64,
    /// Makespan of the first run divided by this run's.
    pub speedup: f64,
}

/// Speedups of each run relative to the first.
pub fn compare(runs: &[(String, Millis)]) -> Result<Vec<Comparison>, ReportError> {
    let base = &runs.first().ok_or(ReportError::NoRuns)?.1;
    Ok(runs
        .iter()
        .map(|(name, m)| Comparison {
            name: name.clone(),
            makespan: m.to_f64(),
            speedup: if m.is_zero() { f64::INFINITY } else { (base / m).to_f64() },
        })
        .collect())
}

pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut out = String::from("name,makespan_ms,speedup\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{:.4}", r.name, r.makespan, r.speedup);
    }
    out
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: usize,
    label: &'a str,
    kind: CommandKind,
    kernel: KernelId,
    device: DeviceId,
    component: ComponentId,
    queue: usize,
    channel: Option<u32>,
    start: f64,
    finish: f64,
}

/// One JSON object per completed command, in completion order.
pub fn trace_ndjson(trace: &SimTrace) -> String {
    let mut out = String::new();
    for (id, e) in trace.events.iter().enumerate() {
        let line = TraceLine {
            id,
            label: &e.label,
            kind: e.kind,
            kernel: e.kernel,
            device: e.device,
            component: e.component,
            queue: e.queue,
            channel: e.channel,
            start: e.start.to_f64(),
            finish: e.finish.to_f64(),
        };
        out.push_str(&serde_json::to_string(&line).expect("trace line serialization cannot fail"));
        out.push('\n');
    }
    out
}
