//! Host-side event loop: dispatches ready components to idle devices,
//! receives completion notifications and tracks kernel readiness.

mod policy;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::analysis::{bottom_level_ranks, component_rank, Analysis};
use crate::cq::{estimate_duration, setup_cq, BuildError, CommandQueueStructure, EventId};
use crate::sim::{DispatchId, EventRecord, PlatformSim, SimError, WorkSegment};
use crate::spec::{ComponentId, DagSpec, DeviceId, DeviceType, KernelId, Platform, ProfileError, SpecError};
use crate::time::Millis;

pub use policy::{Clustering, Eager, Heft, Policy, PolicyKind, SchedView, UnknownPolicy};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedError {
    #[error("deadlock: {remaining} components can never be dispatched")]
    Deadlock { remaining: usize },
    #[error("policy chose busy or unusable device {0}")]
    DeviceBusy(DeviceId),
    #[error("policy chose component {0}, which is not ready")]
    NotReady(ComponentId),
    #[error("notification for unknown event {event} of dispatch {dispatch}")]
    UnknownEvent { dispatch: DispatchId, event: EventId },
    #[error("no execution time for kernel {kernel} on device {device}")]
    MissingProfileEntry { kernel: KernelId, device: DeviceId },
    #[error(transparent)]
    Profile(ProfileError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Sim(Box<SimError>),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

impl From<ProfileError> for SchedError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::MissingProfileEntry { kernel, device } => SchedError::MissingProfileEntry { kernel, device },
            other => SchedError::Profile(other),
        }
    }
}

impl From<SimError> for SchedError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Profile(p) => p.into(),
            other => SchedError::Sim(Box::new(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub policy: PolicyKind,
    /// Host-side latency between an event completing and its notification.
    pub callback_delay: Millis,
    /// Lets HEFT hold a kernel back for a busy device that would finish it
    /// sooner.
    pub heft_waits: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { policy: PolicyKind::Clustering, callback_delay: Millis::zero(), heft_waits: false }
    }
}

impl SchedulerConfig {
    pub fn new(policy: PolicyKind) -> Self {
        SchedulerConfig { policy, ..Default::default() }
    }

    pub fn with_callback_delay(mut self, d: Millis) -> Self {
        self.callback_delay = d;
        self
    }

    pub fn with_heft_waits(mut self, w: bool) -> Self {
        self.heft_waits = w;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchRecord {
    pub component: ComponentId,
    pub kernels: BTreeSet<KernelId>,
    pub device: DeviceId,
    pub time: Millis,
    pub structure: CommandQueueStructure,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTrace {
    pub policy: String,
    /// Completed commands in completion order.
    pub events: Vec<EventRecord>,
    pub segments: Vec<WorkSegment>,
    pub dispatches: Vec<DispatchRecord>,
    /// Time at which the host learned each kernel had finished.
    pub kernel_finished: BTreeMap<KernelId, Millis>,
    /// Time at which the host learned each component had completed.
    pub component_completed: BTreeMap<ComponentId, Millis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Notice {
    Callback(DispatchId, EventId),
    Completed(DispatchId),
}

struct Loop<'a> {
    dag: &'a DagSpec,
    platform: &'a Platform,
    analysis: Analysis,
    ranks: BTreeMap<ComponentId, Millis>,
    sim: PlatformSim<'a>,
    delay: Millis,
    ready: BTreeSet<ComponentId>,
    available: BTreeSet<DeviceId>,
    busy_until: BTreeMap<DeviceId, Millis>,
    dispatched: BTreeSet<ComponentId>,
    completed: BTreeSet<ComponentId>,
    finished: BTreeSet<KernelId>,
    delivered: BTreeSet<(DispatchId, EventId)>,
    inbox: BinaryHeap<Reverse<(Millis, u64, Notice)>>,
    seq: u64,
    records: Vec<DispatchRecord>,
    kernel_finished: BTreeMap<KernelId, Millis>,
    component_completed: BTreeMap<ComponentId, Millis>,
}

impl<'a> Loop<'a> {
    fn new(dag: &'a DagSpec, platform: &'a Platform, delay: Millis) -> Result<Self, SchedError> {
        let analysis = Analysis::new(dag);
        let kr = bottom_level_ranks(dag, platform)?;
        let ranks = analysis.components().iter().map(|c| (c.id, component_rank(c, &kr))).collect();
        let available = platform.devices().iter().map(|d| d.device_id).filter(|d| dag.queue_count(*d) > 0).collect();
        let mut l = Loop {
            dag,
            platform,
            analysis,
            ranks,
            sim: PlatformSim::new(platform),
            delay,
            ready: BTreeSet::new(),
            available,
            busy_until: BTreeMap::new(),
            dispatched: BTreeSet::new(),
            completed: BTreeSet::new(),
            finished: BTreeSet::new(),
            delivered: BTreeSet::new(),
            inbox: BinaryHeap::new(),
            seq: 0,
            records: Vec::new(),
            kernel_finished: BTreeMap::new(),
            component_completed: BTreeMap::new(),
        };
        l.refresh_ready();
        Ok(l)
    }

    fn refresh_ready(&mut self) {
        self.ready = self.analysis.ready_components(&self.finished, &self.dispatched).into_iter().collect();
    }

    fn dispatch(&mut self, c: ComponentId, d: DeviceId) -> Result<(), SchedError> {
        if !self.available.contains(&d) {
            return Err(SchedError::DeviceBusy(d));
        }
        if !self.ready.contains(&c) {
            return Err(SchedError::NotReady(c));
        }
        let profile = self.platform.device(d)?;
        let comp = self.analysis.component(c);
        let r = self.dag.queue_count(d) as usize;
        let cqs = setup_cq(comp, d, profile.device_type, r, self.dag)?;
        let estimate = estimate_duration(&cqs, self.platform)?;
        let now = self.sim.now().clone();
        self.records.push(DispatchRecord {
            component: c,
            kernels: comp.kernels.clone(),
            device: d,
            time: now.clone(),
            structure: cqs.clone(),
        });
        let id = self.sim.submit(cqs)?;
        debug_assert_eq!(id, self.records.len() - 1);
        self.available.remove(&d);
        self.busy_until.insert(d, &now + &estimate);
        self.dispatched.insert(c);
        self.ready.remove(&c);
        Ok(())
    }

    fn notify(&mut self, at: Millis, n: Notice) {
        self.seq += 1;
        self.inbox.push(Reverse((at, self.seq, n)));
    }

    fn on_completion(&mut self, dispatch: DispatchId, event: EventId, time: &Millis) {
        let cqs = self.sim.structure(dispatch);
        let at = time + &self.delay;
        let callback = cqs.callbacks().contains(&event);
        let last = cqs.terminals().contains(&event) && cqs.terminals().iter().all(|t| self.sim.is_done(dispatch, *t));
        if callback {
            self.notify(at.clone(), Notice::Callback(dispatch, event));
        }
        if last {
            self.notify(at, Notice::Completed(dispatch));
        }
    }

    fn mark_finished(&mut self, k: KernelId, now: &Millis) {
        if self.finished.insert(k) {
            self.kernel_finished.insert(k, now.clone());
        }
    }

    fn on_notice(&mut self, n: Notice) -> Result<(), SchedError> {
        let now = self.sim.now().clone();
        match n {
            Notice::Callback(dispatch, event) => {
                let cqs = self.sim.structure(dispatch);
                if event >= cqs.event_count() || !cqs.callbacks().contains(&event) {
                    return Err(SchedError::UnknownEvent { dispatch, event });
                }
                self.delivered.insert((dispatch, event));
                let k = cqs.command(event).kernel;
                let done = match cqs.device_type {
                    DeviceType::Cpu => true,
                    DeviceType::Gpu => cqs
                        .callbacks()
                        .iter()
                        .filter(|e| cqs.command(**e).kernel == k)
                        .all(|e| self.delivered.contains(&(dispatch, *e))),
                };
                if done {
                    self.mark_finished(k, &now);
                }
            }
            Notice::Completed(dispatch) => {
                let rec = &self.records[dispatch];
                let (c, d, kernels) = (rec.component, rec.device, rec.kernels.clone());
                for k in kernels {
                    self.mark_finished(k, &now);
                }
                self.completed.insert(c);
                self.component_completed.insert(c, now.clone());
                self.available.insert(d);
                self.busy_until.remove(&d);
            }
        }
        self.refresh_ready();
        Ok(())
    }

    fn run(mut self, policy: &mut dyn Policy) -> Result<SimTrace, SchedError> {
        let total = self.analysis.components().len();
        loop {
            loop {
                let choice = {
                    let view = SchedView {
                        dag: self.dag,
                        platform: self.platform,
                        analysis: &self.analysis,
                        component_ranks: &self.ranks,
                        ready: &self.ready,
                        available: &self.available,
                        busy_until: &self.busy_until,
                        now: self.sim.now(),
                    };
                    policy.select(&view)
                };
                match choice {
                    Some((c, d)) => self.dispatch(c, d)?,
                    None => break,
                }
            }
            if self.completed.len() == total {
                break;
            }
            let next_sim = self.sim.next_completion_time();
            let next_notice = self.inbox.peek().map(|Reverse((t, _, _))| t.clone());
            match (next_sim, next_notice) {
                (None, None) => return Err(SchedError::Deadlock { remaining: total - self.completed.len() }),
                (Some(s), n) if n.as_ref().is_none_or(|n| s <= *n) => {
                    let ev = self.sim.step()?.expect("a completion is pending");
                    self.on_completion(ev.dispatch, ev.event, &ev.time);
                }
                (_, Some(n)) => {
                    self.sim.advance_to(&n)?;
                    let Reverse((_, _, notice)) = self.inbox.pop().expect("peeked");
                    self.on_notice(notice)?;
                }
                (Some(_), None) => unreachable!("covered by the guard above"),
            }
        }
        let policy = policy.name().to_string();
        let (events, segments) = self.sim.into_parts();
        Ok(SimTrace {
            policy,
            events,
            segments,
            dispatches: self.records,
            kernel_finished: self.kernel_finished,
            component_completed: self.component_completed,
        })
    }
}

/// Runs `dag` on `platform` with a caller-supplied policy, using the DAG's
/// own partition and queue counts.
pub fn schedule_with(
    dag: &DagSpec,
    platform: &Platform,
    policy: &mut dyn Policy,
    callback_delay: Millis,
) -> Result<SimTrace, SchedError> {
    Loop::new(dag, platform, callback_delay)?.run(policy)
}

/// Runs `dag` on `platform` under `config`. Eager and HEFT ignore the DAG's
/// partition and schedule single kernels with one queue per device.
pub fn schedule(dag: &DagSpec, platform: &Platform, config: &SchedulerConfig) -> Result<SimTrace, SchedError> {
    let mut policy = config.policy.build(config.heft_waits);
    if config.policy.per_kernel() {
        let flat = dag.per_kernel(platform.devices().iter().map(|d| d.device_id))?;
        schedule_with(&flat, platform, policy.as_mut(), config.callback_delay.clone())
    } else {
        schedule_with(dag, platform, policy.as_mut(), config.callback_delay.clone())
    }
}
