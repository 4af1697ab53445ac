//! Discrete-event platform simulator executing command-queue structures.
//!
//! Queues are in-order. GPU transfers occupy one of the device's copy
//! channels for `latency + bytes / bandwidth`; CPU transfers are free.
//! Ndranges on one device share it: when the summed shares of the running
//! kernels exceed 1 every kernel progresses at rate `1 / sum`.

use std::collections::BTreeMap;

use num_rational::BigRational;
use num_traits::One;
use serde::Serialize;

use crate::cq::{CommandKind, CommandQueueStructure, EventId};
use crate::spec::{transfer_time, ComponentId, DeviceId, DeviceType, KernelId, Platform, ProfileError};
use crate::time::Millis;

pub type DispatchId = usize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("no command can make progress; {pending} commands outstanding")]
    Deadlock { pending: usize },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("cannot advance to {target}: a command completes at {next}")]
    Overshoot { target: Box<Millis>, next: Box<Millis> },
    #[error("cannot move time backwards from {now} to {target}")]
    TimeReversal { now: Box<Millis>, target: Box<Millis> },
}

/// A command completion reported by [`PlatformSim::step`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub dispatch: DispatchId,
    pub event: EventId,
    pub time: Millis,
}

/// Execution record of one completed command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventRecord {
    pub dispatch: DispatchId,
    pub event: EventId,
    pub label: String,
    pub kind: CommandKind,
    pub kernel: KernelId,
    pub device: DeviceId,
    pub component: ComponentId,
    pub queue: usize,
    pub position: usize,
    pub channel: Option<u32>,
    #[serde(skip)]
    pub start: Millis,
    #[serde(skip)]
    pub finish: Millis,
}

/// An interval during which an ndrange progressed at a constant rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkSegment {
    pub device: DeviceId,
    pub dispatch: DispatchId,
    pub event: EventId,
    pub kernel: KernelId,
    pub start: Millis,
    pub end: Millis,
    pub rate: BigRational,
    pub share: BigRational,
}

impl WorkSegment {
    /// Standalone milliseconds of work done in this segment.
    pub fn work(&self) -> Millis {
        (&self.end - &self.start) * Millis::from_rational(self.rate.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Pending,
    Waiting,
    Running,
    Done,
}

struct Dispatch {
    cqs: CommandQueueStructure,
    preds: Vec<Vec<EventId>>,
    state: Vec<State>,
    head: Vec<usize>,
    start: Vec<Millis>,
    remaining: usize,
}

enum Activity {
    Transfer { channel: Option<u32>, finish: Millis },
    Ndrange { remaining: Millis, share: BigRational },
}

struct Active {
    dispatch: DispatchId,
    event: EventId,
    device: DeviceId,
    activity: Activity,
}

struct Waiting {
    ready: Millis,
    dispatch: DispatchId,
    queue: usize,
    position: usize,
    event: EventId,
    device: DeviceId,
    duration: Millis,
}

pub struct PlatformSim<'a> {
    platform: &'a Platform,
    now: Millis,
    dispatches: Vec<Dispatch>,
    active: Vec<Active>,
    waiting: Vec<Waiting>,
    channels: BTreeMap<DeviceId, Vec<bool>>,
    records: Vec<EventRecord>,
    segments: Vec<WorkSegment>,
}

impl<'a> PlatformSim<'a> {
    pub fn new(platform: &'a Platform) -> Self {
        let channels = platform
            .devices()
            .iter()
            .filter(|d| d.device_type == DeviceType::Gpu)
            .map(|d| (d.device_id, vec![false; d.copy_channels as usize]))
            .collect();
        PlatformSim {
            platform,
            now: Millis::zero(),
            dispatches: Vec::new(),
            active: Vec::new(),
            waiting: Vec::new(),
            channels,
            records: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn now(&self) -> &Millis {
        &self.now
    }

    pub fn structure(&self, d: DispatchId) -> &CommandQueueStructure {
        &self.dispatches[d].cqs
    }

    pub fn is_done(&self, d: DispatchId, ev: EventId) -> bool {
        self.dispatches[d].state[ev] == State::Done
    }

    pub fn dispatch_finished(&self, d: DispatchId) -> bool {
        self.dispatches[d].remaining == 0
    }

    /// Completed commands in completion order.
    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn segments(&self) -> &[WorkSegment] {
        &self.segments
    }

    pub fn into_parts(self) -> (Vec<EventRecord>, Vec<WorkSegment>) {
        (self.records, self.segments)
    }

    /// Hands a structure to its device at the current time and starts any
    /// commands that are immediately ready.
    pub fn submit(&mut self, cqs: CommandQueueStructure) -> Result<DispatchId, SimError> {
        self.platform.device(cqs.device)?;
        let n = cqs.event_count();
        let mut preds = vec![Vec::new(); n];
        for &(a, b) in cqs.deps() {
            preds[b].push(a);
        }
        let r = cqs.queues().len();
        self.dispatches.push(Dispatch {
            cqs,
            preds,
            state: vec![State::Pending; n],
            head: vec![0; r],
            start: vec![Millis::zero(); n],
            remaining: n,
        });
        let id = self.dispatches.len() - 1;
        self.start_ready()?;
        Ok(id)
    }

    fn rate(&self, device: DeviceId) -> BigRational {
        let sigma: BigRational = self
            .active
            .iter()
            .filter(|a| a.device == device)
            .filter_map(|a| match &a.activity {
                Activity::Ndrange { share, .. } => Some(share.clone()),
                Activity::Transfer { .. } => None,
            })
            .sum();
        if sigma <= BigRational::one() {
            BigRational::one()
        } else {
            sigma.recip()
        }
    }

    fn finish_time(&self, a: &Active) -> Millis {
        match &a.activity {
            Activity::Transfer { finish, .. } => finish.clone(),
            Activity::Ndrange { remaining, .. } => {
                &self.now + &(remaining / &Millis::from_rational(self.rate(a.device)))
            }
        }
    }

    pub fn next_completion_time(&self) -> Option<Millis> {
        self.active.iter().map(|a| self.finish_time(a)).min()
    }

    /// Moves simulated time forward to `t`, which must not pass the next
    /// completion.
    pub fn advance_to(&mut self, t: &Millis) -> Result<(), SimError> {
        if *t < self.now {
            return Err(SimError::TimeReversal { now: Box::new(self.now.clone()), target: Box::new(t.clone()) });
        }
        if let Some(next) = self.next_completion_time() {
            if *t > next {
                return Err(SimError::Overshoot { target: Box::new(t.clone()), next: Box::new(next) });
            }
        }
        if *t == self.now {
            return Ok(());
        }
        let dt = t - &self.now;
        let rates: BTreeMap<DeviceId, BigRational> =
            self.active.iter().map(|a| a.device).map(|d| (d, self.rate(d))).collect();
        for a in &mut self.active {
            if let Activity::Ndrange { remaining, share } = &mut a.activity {
                let rate = rates[&a.device].clone();
                *remaining = &*remaining - &(&dt * &Millis::from_rational(rate.clone()));
                self.segments.push(WorkSegment {
                    device: a.device,
                    dispatch: a.dispatch,
                    event: a.event,
                    kernel: self.dispatches[a.dispatch].cqs.command(a.event).kernel,
                    start: self.now.clone(),
                    end: t.clone(),
                    rate,
                    share: share.clone(),
                });
            }
        }
        self.now = t.clone();
        Ok(())
    }

    fn startable(&self, d: DispatchId, ev: EventId) -> bool {
        let disp = &self.dispatches[d];
        disp.state[ev] == State::Pending && disp.preds[ev].iter().all(|p| disp.state[*p] == State::Done)
    }

    fn start_ready(&mut self) -> Result<(), SimError> {
        let platform = self.platform;
        for d in 0..self.dispatches.len() {
            if self.dispatches[d].remaining == 0 {
                continue;
            }
            for q in 0..self.dispatches[d].head.len() {
                let pos = self.dispatches[d].head[q];
                let Some(cmd) = self.dispatches[d].cqs.queues()[q].get(pos) else { continue };
                let ev = cmd.event;
                if !self.startable(d, ev) {
                    continue;
                }
                let device = platform.device(self.dispatches[d].cqs.device)?;
                let (kind, kernel, bytes) = (cmd.kind, cmd.kernel, cmd.bytes);
                let disp = &mut self.dispatches[d];
                match kind {
                    CommandKind::Ndrange => {
                        let remaining = platform.time(kernel, device.device_id)?.clone();
                        let share = platform.share(kernel, device.device_id);
                        disp.state[ev] = State::Running;
                        disp.start[ev] = self.now.clone();
                        self.active.push(Active {
                            dispatch: d,
                            event: ev,
                            device: device.device_id,
                            activity: Activity::Ndrange { remaining, share },
                        });
                    }
                    _ if device.device_type == DeviceType::Cpu => {
                        disp.state[ev] = State::Running;
                        disp.start[ev] = self.now.clone();
                        self.active.push(Active {
                            dispatch: d,
                            event: ev,
                            device: device.device_id,
                            activity: Activity::Transfer { channel: None, finish: self.now.clone() },
                        });
                    }
                    _ => {
                        disp.state[ev] = State::Waiting;
                        let w = Waiting {
                            ready: self.now.clone(),
                            dispatch: d,
                            queue: q,
                            position: pos,
                            event: ev,
                            device: device.device_id,
                            duration: transfer_time(bytes, device),
                        };
                        let key = |w: &Waiting| (w.ready.clone(), w.dispatch, w.queue, w.position);
                        let at = self.waiting.partition_point(|x| key(x) <= key(&w));
                        self.waiting.insert(at, w);
                    }
                }
            }
        }
        self.assign_channels();
        Ok(())
    }

    fn assign_channels(&mut self) {
        let mut i = 0;
        while i < self.waiting.len() {
            let dev = self.waiting[i].device;
            let chans = self.channels.get_mut(&dev).expect("gpu channels");
            match chans.iter().position(|busy| !busy) {
                Some(c) => {
                    chans[c] = true;
                    let w = self.waiting.remove(i);
                    let disp = &mut self.dispatches[w.dispatch];
                    disp.state[w.event] = State::Running;
                    disp.start[w.event] = self.now.clone();
                    self.active.push(Active {
                        dispatch: w.dispatch,
                        event: w.event,
                        device: dev,
                        activity: Activity::Transfer { channel: Some(c as u32), finish: &self.now + &w.duration },
                    });
                }
                None => i += 1,
            }
        }
    }

    /// Advances to the next completion, retires exactly one command and
    /// starts whatever it unblocks. Returns `None` once everything submitted
    /// has completed.
    pub fn step(&mut self) -> Result<Option<SimEvent>, SimError> {
        let Some(t) = self.next_completion_time() else {
            let pending: usize = self.dispatches.iter().map(|d| d.remaining).sum();
            return if pending == 0 { Ok(None) } else { Err(SimError::Deadlock { pending }) };
        };
        self.advance_to(&t)?;
        let idx = (0..self.active.len())
            .filter(|&i| self.finish_time(&self.active[i]) == t)
            .min_by_key(|&i| {
                let a = &self.active[i];
                let (q, p) = self.dispatches[a.dispatch].cqs.location(a.event);
                (a.device, a.dispatch, q, p)
            })
            .expect("a command finishes at the next completion time");
        let a = self.active.swap_remove(idx);
        let channel = match a.activity {
            Activity::Transfer { channel: Some(c), .. } => {
                self.channels.get_mut(&a.device).expect("gpu channels")[c as usize] = false;
                Some(c)
            }
            _ => None,
        };
        let disp = &mut self.dispatches[a.dispatch];
        disp.state[a.event] = State::Done;
        disp.remaining -= 1;
        let (queue, position) = disp.cqs.location(a.event);
        disp.head[queue] += 1;
        let cmd = disp.cqs.command(a.event);
        self.records.push(EventRecord {
            dispatch: a.dispatch,
            event: a.event,
            label: cmd.label.clone(),
            kind: cmd.kind,
            kernel: cmd.kernel,
            device: a.device,
            component: disp.cqs.component,
            queue,
            position,
            channel,
            start: disp.start[a.event].clone(),
            finish: t.clone(),
        });
        self.start_ready()?;
        Ok(Some(SimEvent { dispatch: a.dispatch, event: a.event, time: t }))
    }

    /// Runs until every submitted command has completed.
    pub fn run_to_completion(&mut self) -> Result<Vec<SimEvent>, SimError> {
        let mut out = Vec::new();
        while let Some(ev) = self.step()? {
            out.push(ev);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::analysis::TaskComponent;
    use crate::cq::{setup_cq, Command};
    use crate::fixtures;
    use crate::spec::DeviceProfile;

    fn ndrange(kernel: KernelId, event: EventId) -> Command {
        Command {
            kind: CommandKind::Ndrange,
            kernel,
            buffer: None,
            copy: None,
            event,
            label: format!("e{}", event + 1),
            bytes: 0,
        }
    }

    fn write(kernel: KernelId, event: EventId, bytes: i64) -> Command {
        Command {
            kind: CommandKind::Write,
            kernel,
            buffer: None,
            copy: None,
            event,
            label: format!("w{}", event + 1),
            bytes,
        }
    }

    fn gpu_platform(times: &[(KernelId, i64, (i64, i64))]) -> Platform {
        let mut gpu = DeviceProfile::new(1, DeviceType::Gpu);
        for &(k, t, (n, d)) in times {
            gpu.kernel_times.insert(k, Millis::from_int(t));
            gpu.kernel_share.insert(k, BigRational::new(n.into(), d.into()));
        }
        gpu.bandwidth = BigRational::from_integer(100.into());
        gpu.transfer_latency = Millis::from_int(1);
        let cpu = DeviceProfile::new(0, DeviceType::Cpu);
        Platform::new(vec![cpu, gpu]).unwrap()
    }

    fn structure(queues: Vec<Vec<Command>>, deps: &[(EventId, EventId)]) -> CommandQueueStructure {
        CommandQueueStructure::from_parts(
            0,
            1,
            DeviceType::Gpu,
            queues,
            deps.iter().copied().collect(),
            BTreeSet::new(),
        )
        .unwrap()
    }

    fn finish_of(sim: &PlatformSim, ev: EventId) -> Millis {
        sim.records().iter().find(|r| r.event == ev).unwrap().finish.clone()
    }

    #[test]
    fn lone_kernel_runs_for_profile_time() {
        let p = gpu_platform(&[(0, 5, (1, 1))]);
        let mut sim = PlatformSim::new(&p);
        sim.submit(structure(vec![vec![ndrange(0, 0)]], &[])).unwrap();
        let evs = sim.run_to_completion().unwrap();
        assert_eq!(evs, vec![SimEvent { dispatch: 0, event: 0, time: Millis::from_int(5) }]);
    }

    #[test]
    fn light_kernels_overlap_without_slowdown() {
        let p = gpu_platform(&[(0, 4, (2, 5)), (1, 4, (2, 5))]);
        let mut sim = PlatformSim::new(&p);
        sim.submit(structure(vec![vec![ndrange(0, 0)], vec![ndrange(1, 1)]], &[])).unwrap();
        sim.run_to_completion().unwrap();
        assert_eq!(finish_of(&sim, 0), Millis::from_int(4));
        assert_eq!(finish_of(&sim, 1), Millis::from_int(4));
    }

    #[test]
    fn oversubscription_slows_everyone() {
        // shares 3/4 + 3/4: rate 2/3 until the short one finishes at 3
        let p = gpu_platform(&[(0, 2, (3, 4)), (1, 4, (3, 4))]);
        let mut sim = PlatformSim::new(&p);
        sim.submit(structure(vec![vec![ndrange(0, 0)], vec![ndrange(1, 1)]], &[])).unwrap();
        sim.run_to_completion().unwrap();
        assert_eq!(finish_of(&sim, 0), Millis::from_int(3));
        assert_eq!(finish_of(&sim, 1), Millis::from_int(5));
        let work: Millis = sim.segments().iter().filter(|s| s.event == 1).map(WorkSegment::work).sum();
        assert_eq!(work, Millis::from_int(4));
    }

    #[test]
    fn in_queue_order_is_sequential() {
        let p = gpu_platform(&[(0, 2, (1, 10)), (1, 3, (1, 10))]);
        let mut sim = PlatformSim::new(&p);
        sim.submit(structure(vec![vec![ndrange(0, 0), ndrange(1, 1)]], &[])).unwrap();
        sim.run_to_completion().unwrap();
        assert_eq!(finish_of(&sim, 1), Millis::from_int(5));
    }

    #[test]
    fn cross_queue_dependency_delays_start() {
        let p = gpu_platform(&[(0, 2, (1, 10)), (1, 3, (1, 10))]);
        let mut sim = PlatformSim::new(&p);
        sim.submit(structure(vec![vec![ndrange(0, 0)], vec![ndrange(1, 1)]], &[(0, 1)])).unwrap();
        sim.run_to_completion().unwrap();
        let r = sim.records().iter().find(|r| r.event == 1).unwrap();
        assert_eq!((r.start.clone(), r.finish.clone()), (Millis::from_int(2), Millis::from_int(5)));
    }

    #[test]
    fn transfers_queue_for_copy_channels() {
        // 2 channels, three 100-byte writes of 1 + 1 ms each
        let p = gpu_platform(&[]);
        let mut sim = PlatformSim::new(&p);
        let q = vec![vec![write(0, 0, 100)], vec![write(0, 1, 100)], vec![write(0, 2, 100)]];
        sim.submit(structure(q, &[])).unwrap();
        sim.run_to_completion().unwrap();
        let by_event: Vec<(Millis, Option<u32>)> = (0..3)
            .map(|e| sim.records().iter().find(|r| r.event == e).map(|r| (r.finish.clone(), r.channel)).unwrap())
            .collect();
        assert_eq!(
            by_event,
            vec![(Millis::from_int(2), Some(0)), (Millis::from_int(2), Some(1)), (Millis::from_int(4), Some(0))]
        );
    }

    #[test]
    fn cpu_transfers_are_instant() {
        let dag = fixtures::independent(1);
        let p = fixtures::uniform_platform(&dag, 3);
        let t = TaskComponent::new(0, &dag);
        let cqs = setup_cq(&t, 0, DeviceType::Cpu, 1, &dag).unwrap();
        let mut sim = PlatformSim::new(&p);
        sim.submit(cqs).unwrap();
        let evs = sim.run_to_completion().unwrap();
        let times: Vec<Millis> = evs.into_iter().map(|e| e.time).collect();
        assert_eq!(times, vec![Millis::zero(), Millis::from_int(3), Millis::from_int(3)]);
        assert!(sim.records().iter().all(|r| r.channel.is_none()));
    }

    #[test]
    fn dependency_cycle_deadlocks() {
        let p = gpu_platform(&[(0, 1, (1, 1)), (1, 1, (1, 1))]);
        let mut sim = PlatformSim::new(&p);
        sim.submit(structure(vec![vec![ndrange(0, 0)], vec![ndrange(1, 1)]], &[(0, 1), (1, 0)])).unwrap();
        assert_eq!(sim.step(), Err(SimError::Deadlock { pending: 2 }));
    }

    #[test]
    fn missing_profile_entry_surfaces() {
        let p = gpu_platform(&[]);
        let mut sim = PlatformSim::new(&p);
        let err = sim.submit(structure(vec![vec![ndrange(7, 0)]], &[])).unwrap_err();
        assert_eq!(err, SimError::Profile(ProfileError::MissingProfileEntry { kernel: 7, device: 1 }));
    }

    #[test]
    fn advance_cannot_overshoot() {
        let p = gpu_platform(&[(0, 2, (1, 1))]);
        let mut sim = PlatformSim::new(&p);
        sim.submit(structure(vec![vec![ndrange(0, 0)]], &[])).unwrap();
        sim.advance_to(&Millis::from_int(1)).unwrap();
        assert!(matches!(sim.advance_to(&Millis::from_int(3)), Err(SimError::Overshoot { .. })));
        assert!(matches!(sim.advance_to(&Millis::zero()), Err(SimError::TimeReversal { .. })));
        assert_eq!(sim.step().unwrap().unwrap().time, Millis::from_int(2));
        assert_eq!(sim.step().unwrap(), None);
    }

    #[test]
    fn five_kernel_component_completes() {
        let dag = fixtures::five_kernel_component();
        let p = fixtures::uniform_platform(&dag, 1);
        let t = TaskComponent::new(fixtures::FIVE_KERNEL_COMPONENT, &dag);
        let cqs = setup_cq(&t, 1, DeviceType::Gpu, 3, &dag).unwrap();
        let mut sim = PlatformSim::new(&p);
        let d = sim.submit(cqs).unwrap();
        sim.run_to_completion().unwrap();
        assert!(sim.dispatch_finished(d));
        assert_eq!(sim.records().len(), 10);
    }
}
