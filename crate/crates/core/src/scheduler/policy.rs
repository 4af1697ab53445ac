//! Dispatch policies: which ready component goes to which free device.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::Analysis;
use crate::cq::{estimate_duration, setup_cq};
use crate::spec::{ComponentId, DagSpec, DeviceId, Platform};
use crate::time::Millis;

/// Scheduler state visible to a policy at a decision point.
pub struct SchedView<'a> {
    pub dag: &'a DagSpec,
    pub platform: &'a Platform,
    pub analysis: &'a Analysis,
    pub component_ranks: &'a BTreeMap<ComponentId, Millis>,
    /// Ready, undispatched components.
    pub ready: &'a BTreeSet<ComponentId>,
    /// Idle devices that have at least one command queue.
    pub available: &'a BTreeSet<DeviceId>,
    /// Estimated release time of each busy device.
    pub busy_until: &'a BTreeMap<DeviceId, Millis>,
    pub now: &'a Millis,
}

impl SchedView<'_> {
    /// Ready components ordered by decreasing rank, then increasing id.
    pub fn by_rank(&self) -> Vec<ComponentId> {
        let mut v: Vec<ComponentId> = self.ready.iter().copied().collect();
        v.sort_by(|a, b| self.component_ranks[b].cmp(&self.component_ranks[a]).then(a.cmp(b)));
        v
    }

    /// Estimated run time of component `c` on device `d` in isolation: the
    /// longest queue of its command structure, summing profiled ndrange and
    /// transfer times. `None` when the device lacks a profile entry.
    pub fn estimate(&self, c: ComponentId, d: DeviceId) -> Option<Millis> {
        let profile = self.platform.device(d).ok()?;
        let r = self.dag.queue_count(d).max(1) as usize;
        let cqs = setup_cq(self.analysis.component(c), d, profile.device_type, r, self.dag).ok()?;
        estimate_duration(&cqs, self.platform).ok()
    }

    /// Devices with at least one command queue, in id order.
    pub fn usable_devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.platform.devices().iter().map(|d| d.device_id).filter(|d| self.dag.queue_count(*d) > 0)
    }
}

pub trait Policy {
    fn name(&self) -> &'static str;

    /// Picks the next `(component, device)` pair to dispatch, or `None` to
    /// wait for the next notification. The device must be available.
    fn select(&mut self, view: &SchedView) -> Option<(ComponentId, DeviceId)>;
}

/// Highest-rank ready component whose preferred device type has an idle
/// device; ties go to the lower component id, then the lower device id.
#[derive(Debug, Default, Clone, Copy)]
pub struct Clustering;

impl Policy for Clustering {
    fn name(&self) -> &'static str {
        "clustering"
    }

    fn select(&mut self, view: &SchedView) -> Option<(ComponentId, DeviceId)> {
        view.by_rank().into_iter().find_map(|c| {
            let pref = view.analysis.component(c).dev_pref;
            view.available
                .iter()
                .copied()
                .find(|d| view.platform.device(*d).is_ok_and(|p| p.device_type == pref))
                .map(|d| (c, d))
        })
    }
}

/// Highest-rank ready component to the lowest-id idle device, whatever its
/// type.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Policy for Eager {
    fn name(&self) -> &'static str {
        "eager"
    }

    fn select(&mut self, view: &SchedView) -> Option<(ComponentId, DeviceId)> {
        let c = *view.by_rank().first()?;
        let d = *view.available.first()?;
        Some((c, d))
    }
}

/// Earliest-finish-time placement of ready kernels, in rank order. A
/// kernel's time on a device includes its transfers there (see
/// [`SchedView::estimate`]).
///
/// Without `wait` the top-ranked kernel goes to whichever idle device
/// finishes it first. With `wait` every ready kernel is committed, when it
/// becomes ready, to the device minimizing `backlog(d) + t(k, d)`, where the
/// backlog counts the running dispatch and the kernels already committed to
/// `d`; committed kernels then run on their device in commitment order.
#[derive(Debug, Default, Clone)]
pub struct Heft {
    pub wait: bool,
    plan: BTreeMap<DeviceId, VecDeque<(ComponentId, Millis)>>,
    planned: BTreeSet<ComponentId>,
}

impl Heft {
    pub fn new(wait: bool) -> Self {
        Heft { wait, ..Default::default() }
    }

    fn backlog(&self, view: &SchedView, d: DeviceId) -> Millis {
        let running = match view.busy_until.get(&d) {
            Some(t) if !view.available.contains(&d) && t > view.now => t - view.now,
            _ => Millis::zero(),
        };
        self.plan.get(&d).into_iter().flatten().map(|(_, t)| t).fold(running, |acc, t| acc + t)
    }

    fn select_idle(&self, view: &SchedView) -> Option<(ComponentId, DeviceId)> {
        let c = *view.by_rank().first()?;
        let mut best: Option<(Millis, DeviceId)> = None;
        for &d in view.available {
            let Some(eft) = view.estimate(c, d) else { continue };
            if best.as_ref().is_none_or(|(b, _)| eft < *b) {
                best = Some((eft, d));
            }
        }
        best.map(|(_, d)| (c, d))
    }

    fn select_planned(&mut self, view: &SchedView) -> Option<(ComponentId, DeviceId)> {
        for c in view.by_rank() {
            if self.planned.contains(&c) {
                continue;
            }
            let mut best: Option<(Millis, DeviceId, Millis)> = None;
            for d in view.usable_devices() {
                let Some(run) = view.estimate(c, d) else { continue };
                let eft = self.backlog(view, d) + &run;
                if best.as_ref().is_none_or(|(b, _, _)| eft < *b) {
                    best = Some((eft, d, run));
                }
            }
            if let Some((_, d, run)) = best {
                self.plan.entry(d).or_default().push_back((c, run));
                self.planned.insert(c);
            }
        }
        for &d in view.available {
            let head = self.plan.get(&d).and_then(|q| q.front()).map(|(c, _)| *c);
            if let Some(c) = head.filter(|c| view.ready.contains(c)) {
                self.plan.get_mut(&d).expect("non-empty plan").pop_front();
                self.planned.remove(&c);
                return Some((c, d));
            }
        }
        None
    }
}

impl Policy for Heft {
    fn name(&self) -> &'static str {
        "heft"
    }

    fn select(&mut self, view: &SchedView) -> Option<(ComponentId, DeviceId)> {
        if self.wait {
            self.select_planned(view)
        } else {
            self.select_idle(view)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Clustering,
    Eager,
    Heft,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Clustering, PolicyKind::Eager, PolicyKind::Heft];

    pub fn build(self, heft_waits: bool) -> Box<dyn Policy> {
        match self {
            PolicyKind::Clustering => Box::new(Clustering),
            PolicyKind::Eager => Box::new(Eager),
            PolicyKind::Heft => Box::new(Heft::new(heft_waits)),
        }
    }

    /// Eager and HEFT place single kernels rather than the given components.
    pub fn per_kernel(self) -> bool {
        !matches!(self, PolicyKind::Clustering)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Clustering => "clustering",
            PolicyKind::Eager => "eager",
            PolicyKind::Heft => "heft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown policy `{0}` (expected clustering, eager or heft)")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "clustering" | "cluster" => Ok(PolicyKind::Clustering),
            "eager" => Ok(PolicyKind::Eager),
            "heft" => Ok(PolicyKind::Heft),
            _ => Err(UnknownPolicy(s.to_string())),
        }
    }
}
