//! Post-hoc checks of a finished run: schedule validity and work
//! conservation.

use std::collections::BTreeMap;

use num_rational::BigRational;
use num_traits::One;

use crate::cq::CommandKind;
use crate::scheduler::SimTrace;
use crate::sim::EventRecord;
use crate::spec::{transfer_time, DagSpec, DeviceId, DeviceType, KernelId, Platform};
use crate::time::Millis;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{} violation(s), first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
pub struct AuditFailure(pub Vec<String>);

fn finish(v: Vec<String>) -> Result<(), AuditFailure> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(AuditFailure(v))
    }
}

/// Checks that the trace is a legal execution of `dag`:
///
/// * every kernel is dispatched once and every command runs once, after its
///   dispatch;
/// * in-queue order and cross-queue dependencies hold;
/// * a consumer's ndrange starts after each producer's ndrange finishes, and
///   a component is dispatched only after the host saw its producers finish;
/// * a device runs one component at a time and a copy channel one transfer
///   at a time;
/// * GPU transfers last exactly their modelled time, CPU transfers none.
pub fn audit_schedule(dag: &DagSpec, platform: &Platform, trace: &SimTrace) -> Result<(), AuditFailure> {
    let mut v = Vec::new();
    let mut by_event: BTreeMap<(usize, usize), &EventRecord> = BTreeMap::new();
    for e in &trace.events {
        if by_event.insert((e.dispatch, e.event), e).is_some() {
            v.push(format!("event {} of dispatch {} ran twice", e.event, e.dispatch));
        }
        if e.start > e.finish {
            v.push(format!("{} of dispatch {} finishes before it starts", e.label, e.dispatch));
        }
    }

    let mut owner: BTreeMap<KernelId, usize> = BTreeMap::new();
    for (i, d) in trace.dispatches.iter().enumerate() {
        for k in &d.kernels {
            if owner.insert(*k, i).is_some() {
                v.push(format!("kernel {k} dispatched twice"));
            }
        }
    }
    for k in dag.kernel_ids() {
        if !owner.contains_key(&k) {
            v.push(format!("kernel {k} never dispatched"));
        }
    }

    let mut ndrange: BTreeMap<KernelId, &EventRecord> = BTreeMap::new();
    let mut spans: BTreeMap<DeviceId, Vec<(Millis, Millis, usize)>> = BTreeMap::new();
    for (i, d) in trace.dispatches.iter().enumerate() {
        let s = &d.structure;
        let mut last = d.time.clone();
        for c in s.commands() {
            match by_event.get(&(i, c.event)) {
                None => v.push(format!("{} of dispatch {i} never ran", c.label)),
                Some(r) => {
                    if r.start < d.time {
                        v.push(format!("{} of dispatch {i} starts before its dispatch", c.label));
                    }
                    last = last.max(r.finish.clone());
                    if c.kind == CommandKind::Ndrange {
                        ndrange.insert(c.kernel, r);
                    }
                }
            }
        }
        for q in s.queues() {
            for w in q.windows(2) {
                if let (Some(a), Some(b)) = (by_event.get(&(i, w[0].event)), by_event.get(&(i, w[1].event))) {
                    if b.start < a.finish {
                        v.push(format!("dispatch {i}: {} starts before {} finishes in its queue", b.label, a.label));
                    }
                }
            }
        }
        for &(x, y) in s.deps() {
            if let (Some(a), Some(b)) = (by_event.get(&(i, x)), by_event.get(&(i, y))) {
                if b.start < a.finish {
                    v.push(format!("dispatch {i}: {} starts before {} finishes", b.label, a.label));
                }
            }
        }
        spans.entry(d.device).or_default().push((d.time.clone(), last, i));
    }

    for e in dag.edges() {
        let (p, c) = (e.src.kernel, e.dst.kernel);
        if let (Some(a), Some(b)) = (ndrange.get(&p), ndrange.get(&c)) {
            if b.start < a.finish {
                v.push(format!("kernel {c} starts before its producer {p} finishes"));
            }
        }
        if let (Some(&dp), Some(&dc)) = (owner.get(&p), owner.get(&c)) {
            if dp != dc {
                let seen = trace.kernel_finished.get(&p);
                if seen.is_none_or(|t| trace.dispatches[dc].time < *t) {
                    v.push(format!("kernel {c} dispatched before the host saw producer {p} finish"));
                }
            }
        }
    }

    for (dev, mut s) in spans {
        s.sort();
        for w in s.windows(2) {
            if w[1].0 < w[0].1 {
                v.push(format!("device {dev} runs dispatches {} and {} at once", w[0].2, w[1].2));
            }
        }
    }

    let mut channels: BTreeMap<(DeviceId, u32), Vec<&EventRecord>> = BTreeMap::new();
    for e in &trace.events {
        if !e.kind.is_transfer() {
            continue;
        }
        let Ok(profile) = platform.device(e.device) else {
            v.push(format!("unknown device {}", e.device));
            continue;
        };
        let d = &trace.dispatches[e.dispatch].structure;
        let expect = transfer_time(d.command(e.event).bytes, profile);
        if &e.finish - &e.start != expect {
            v.push(format!(
                "{} of dispatch {} lasts {} instead of {expect}",
                e.label,
                e.dispatch,
                &e.finish - &e.start
            ));
        }
        match (profile.device_type, e.channel) {
            (DeviceType::Gpu, Some(c)) if c < profile.copy_channels => {
                channels.entry((e.device, c)).or_default().push(e)
            }
            (DeviceType::Cpu, None) => {}
            _ => v.push(format!("{} of dispatch {} has an invalid copy channel", e.label, e.dispatch)),
        }
    }
    for ((dev, c), mut list) in channels {
        list.sort_by(|a, b| a.start.cmp(&b.start));
        for w in list.windows(2) {
            if w[1].start < w[0].finish {
                v.push(format!("channel {c} of device {dev} carries two transfers at once"));
            }
        }
    }
    finish(v)
}

/// Checks that every ndrange received exactly its profiled amount of work
/// (within `tolerance` ms), that its segments tile its execution interval,
/// and that each device ran at the processor-sharing rate implied by the
/// shares of the kernels running on it.
pub fn audit_work(platform: &Platform, trace: &SimTrace, tolerance: &Millis) -> Result<(), AuditFailure> {
    let mut v = Vec::new();
    let mut per_event: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut per_slice: BTreeMap<(DeviceId, Millis, Millis), Vec<usize>> = BTreeMap::new();
    for (i, s) in trace.segments.iter().enumerate() {
        per_event.entry((s.dispatch, s.event)).or_default().push(i);
        per_slice.entry((s.device, s.start.clone(), s.end.clone())).or_default().push(i);
    }
    for e in trace.events.iter().filter(|e| e.kind == CommandKind::Ndrange) {
        let Ok(expect) = platform.time(e.kernel, e.device) else {
            v.push(format!("kernel {} has no profile on device {}", e.kernel, e.device));
            continue;
        };
        let segs: Vec<_> =
            per_event.get(&(e.dispatch, e.event)).into_iter().flatten().map(|&i| &trace.segments[i]).collect();
        let done: Millis = segs.iter().map(|s| s.work()).sum();
        if (&done - expect).abs() > *tolerance {
            v.push(format!("kernel {} on device {} did {done} ms of work, expected {expect}", e.kernel, e.device));
        }
        let mut at = e.start.clone();
        for s in &segs {
            if s.start != at {
                v.push(format!("kernel {} has a gap or overlap in its progress at {at}", e.kernel));
            }
            at = s.end.clone();
        }
        if at != e.finish {
            v.push(format!("kernel {} progress ends at {at} but it finished at {}", e.kernel, e.finish));
        }
    }
    for ((dev, a, b), idx) in per_slice {
        let sigma: BigRational = idx.iter().map(|&i| trace.segments[i].share.clone()).sum();
        let rate = if sigma <= BigRational::one() { BigRational::one() } else { sigma.recip() };
        if idx.iter().any(|&i| trace.segments[i].rate != rate) {
            v.push(format!("device {dev} ran at the wrong rate during [{a}, {b}]"));
        }
    }
    finish(v)
}
