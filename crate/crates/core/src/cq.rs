//! Construction of the per-dispatch command-queue structure: ordered command
//! lists for `r` in-order queues plus cross-queue precedence pairs.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::analysis::{CopyKind, TaskComponent};
use crate::spec::{
    transfer_time, BufferId, ComponentId, DagSpec, DeviceId, DeviceType, ExprError, KernelId, Platform, ProfileError,
};
use crate::time::Millis;

pub type EventId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Write,
    Ndrange,
    Read,
}

impl CommandKind {
    pub fn is_transfer(self) -> bool {
        !matches!(self, CommandKind::Ndrange)
    }

    fn prefix(self) -> char {
        match self {
            CommandKind::Write => 'w',
            CommandKind::Ndrange => 'e',
            CommandKind::Read => 'r',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Command {
    pub kind: CommandKind,
    pub kernel: KernelId,
    /// Set for transfers only.
    pub buffer: Option<BufferId>,
    /// Isolated or dependent; set for transfers only.
    pub copy: Option<CopyKind>,
    pub event: EventId,
    /// `w1`, `e3`, `r2`: kind prefix plus a 1-based per-kind counter.
    pub label: String,
    pub bytes: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("component {0} has no kernels")]
    EmptyComponent(ComponentId),
    #[error("device {0} has no command queues")]
    NoQueues(DeviceId),
    #[error("kernel {0} was already enqueued")]
    AlreadyProcessed(KernelId),
    #[error("kernel {0} is not part of the component")]
    NotInComponent(KernelId),
    #[error("queue index {0} out of range")]
    BadQueue(usize),
    #[error("event ids must number commands densely from 0: {0}")]
    BadEvent(EventId),
    #[error("buffer size: {0}")]
    Size(#[from] ExprError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommandQueueStructure {
    pub component: ComponentId,
    pub device: DeviceId,
    pub device_type: DeviceType,
    queues: Vec<Vec<Command>>,
    deps: BTreeSet<(EventId, EventId)>,
    callbacks: BTreeSet<EventId>,
    terminals: BTreeSet<EventId>,
    #[serde(skip)]
    locations: Vec<(usize, usize)>,
}

impl CommandQueueStructure {
    fn empty(component: ComponentId, device: DeviceId, device_type: DeviceType, r: usize) -> Self {
        CommandQueueStructure {
            component,
            device,
            device_type,
            queues: vec![Vec::new(); r],
            deps: BTreeSet::new(),
            callbacks: BTreeSet::new(),
            terminals: BTreeSet::new(),
            locations: Vec::new(),
        }
    }

    /// Assembles a structure from hand-built parts. Event ids must be a
    /// permutation of `0..n`; terminals are derived from the queues.
    pub fn from_parts(
        component: ComponentId,
        device: DeviceId,
        device_type: DeviceType,
        queues: Vec<Vec<Command>>,
        deps: BTreeSet<(EventId, EventId)>,
        callbacks: BTreeSet<EventId>,
    ) -> Result<Self, BuildError> {
        if queues.is_empty() {
            return Err(BuildError::NoQueues(device));
        }
        let n: usize = queues.iter().map(Vec::len).sum();
        let mut locations = vec![None; n];
        for (q, cmds) in queues.iter().enumerate() {
            for (i, c) in cmds.iter().enumerate() {
                match locations.get_mut(c.event) {
                    Some(slot @ None) => *slot = Some((q, i)),
                    _ => return Err(BuildError::BadEvent(c.event)),
                }
            }
        }
        if let Some(&(a, b)) = deps.iter().find(|(a, b)| *a >= n || *b >= n) {
            return Err(BuildError::BadEvent(a.max(b)));
        }
        if let Some(&c) = callbacks.iter().find(|c| **c >= n) {
            return Err(BuildError::BadEvent(c));
        }
        let terminals = queues.iter().filter_map(|q| q.last().map(|c| c.event)).collect();
        Ok(CommandQueueStructure {
            component,
            device,
            device_type,
            queues,
            deps,
            callbacks,
            terminals,
            locations: locations.into_iter().map(|l| l.expect("dense ids")).collect(),
        })
    }

    pub fn queues(&self) -> &[Vec<Command>] {
        &self.queues
    }

    /// Cross-queue precedence pairs `(before, after)`.
    pub fn deps(&self) -> &BTreeSet<(EventId, EventId)> {
        &self.deps
    }

    /// Events whose completion notifies the host that a kernel's results
    /// are available to other components.
    pub fn callbacks(&self) -> &BTreeSet<EventId> {
        &self.callbacks
    }

    /// Last command of every non-empty queue; all of them completing means
    /// the component has finished.
    pub fn terminals(&self) -> &BTreeSet<EventId> {
        &self.terminals
    }

    pub fn event_count(&self) -> usize {
        self.locations.len()
    }

    /// `(queue, position)` of an event.
    pub fn location(&self, ev: EventId) -> (usize, usize) {
        self.locations[ev]
    }

    pub fn command(&self, ev: EventId) -> &Command {
        let (q, i) = self.locations[ev];
        &self.queues[q][i]
    }

    pub fn commands(&self) -> impl Iterator<Item = &Command> {
        self.queues.iter().flatten()
    }

    pub fn commands_of(&self, k: KernelId) -> impl Iterator<Item = &Command> {
        self.commands().filter(move |c| c.kernel == k)
    }

    pub fn ndrange_of(&self, k: KernelId) -> Option<&Command> {
        self.commands_of(k).find(|c| c.kind == CommandKind::Ndrange)
    }

    pub fn label(&self, ev: EventId) -> &str {
        &self.command(ev).label
    }

    /// Queue contents as label lists.
    pub fn queue_labels(&self) -> Vec<Vec<String>> {
        self.queues.iter().map(|q| q.iter().map(|c| c.label.clone()).collect()).collect()
    }

    /// Cross-queue deps as label pairs.
    pub fn dep_labels(&self) -> BTreeSet<(String, String)> {
        self.deps.iter().map(|&(a, b)| (self.label(a).to_string(), self.label(b).to_string())).collect()
    }

    /// True when in-queue order plus `deps` admits a topological order.
    pub fn is_acyclic(&self) -> bool {
        let n = self.locations.len();
        let mut succ: Vec<Vec<EventId>> = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for q in &self.queues {
            for w in q.windows(2) {
                succ[w[0].event].push(w[1].event);
                indeg[w[1].event] += 1;
            }
        }
        for &(a, b) in &self.deps {
            succ[a].push(b);
            indeg[b] += 1;
        }
        let mut stack: Vec<EventId> = (0..n).filter(|&e| indeg[e] == 0).collect();
        let mut seen = 0;
        while let Some(e) = stack.pop() {
            seen += 1;
            for &s in &succ[e] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    stack.push(s);
                }
            }
        }
        seen == n
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("structure serialization cannot fail")
    }
}

/// Lower bound on the structure's run time on an idle device: the largest
/// per-queue sum of profiled ndrange times and modelled transfer times.
pub fn estimate_duration(cqs: &CommandQueueStructure, platform: &Platform) -> Result<Millis, ProfileError> {
    let device = platform.device(cqs.device)?;
    let mut longest = Millis::zero();
    for q in cqs.queues() {
        let mut sum = Millis::zero();
        for c in q {
            sum += &match c.kind {
                CommandKind::Ndrange => platform.time(c.kernel, cqs.device)?.clone(),
                _ => transfer_time(c.bytes, device),
            };
        }
        longest = longest.max(sum);
    }
    Ok(longest)
}

/// Incremental builder exposing the individual construction steps.
pub struct QueueBuilder<'a> {
    dag: &'a DagSpec,
    component: &'a TaskComponent,
    fed: BTreeSet<BufferId>,
    feeding: BTreeSet<BufferId>,
    out: CommandQueueStructure,
    processed: BTreeSet<KernelId>,
    kernel_queue: BTreeMap<KernelId, usize>,
    counters: [usize; 3],
}

impl<'a> QueueBuilder<'a> {
    pub fn new(
        dag: &'a DagSpec,
        component: &'a TaskComponent,
        device: DeviceId,
        device_type: DeviceType,
        r: usize,
    ) -> Result<Self, BuildError> {
        if component.kernels.is_empty() {
            return Err(BuildError::EmptyComponent(component.id));
        }
        if r == 0 {
            return Err(BuildError::NoQueues(device));
        }
        Ok(QueueBuilder {
            dag,
            component,
            fed: dag.edges().iter().map(|e| e.dst).collect(),
            feeding: dag.edges().iter().map(|e| e.src).collect(),
            out: CommandQueueStructure::empty(component.id, device, device_type, r),
            processed: BTreeSet::new(),
            kernel_queue: BTreeMap::new(),
            counters: [0; 3],
        })
    }

    pub fn structure(&self) -> &CommandQueueStructure {
        &self.out
    }

    pub fn processed(&self) -> &BTreeSet<KernelId> {
        &self.processed
    }

    fn has_inter_in_edge(&self, b: BufferId) -> bool {
        self.dag.edges().iter().any(|e| e.dst == b && !self.component.contains(e.src.kernel))
    }

    fn has_inter_out_edge(&self, b: BufferId) -> bool {
        self.dag.edges().iter().any(|e| e.src == b && !self.component.contains(e.dst.kernel))
    }

    fn push(
        &mut self,
        q: usize,
        kind: CommandKind,
        k: KernelId,
        buffer: Option<BufferId>,
        copy: Option<CopyKind>,
    ) -> Result<(), BuildError> {
        let slot = kind as usize;
        self.counters[slot] += 1;
        let label = format!("{}{}", kind.prefix(), self.counters[slot]);
        let bytes = match buffer {
            Some(b) => self.dag.buffer_bytes(b)?,
            None => 0,
        };
        let event = self.out.locations.len();
        self.out.locations.push((q, self.out.queues[q].len()));
        self.out.queues[q].push(Command { kind, kernel: k, buffer, copy, event, label, bytes });
        Ok(())
    }

    /// Appends kernel `k`'s commands to queue `q`: inter-component dependent
    /// writes (FRONT kernels only), isolated writes, the ndrange, isolated
    /// reads, then inter-component dependent reads (END kernels only).
    pub fn enq(&mut self, k: KernelId, q: usize) -> Result<(), BuildError> {
        if !self.component.contains(k) {
            return Err(BuildError::NotInComponent(k));
        }
        if self.processed.contains(&k) {
            return Err(BuildError::AlreadyProcessed(k));
        }
        if q >= self.out.queues.len() {
            return Err(BuildError::BadQueue(q));
        }
        let kernel = self.dag.kernel(k).expect("component kernels exist");
        let inputs: Vec<BufferId> = kernel.inputs().map(|b| b.id).collect();
        let outputs: Vec<BufferId> = kernel.outputs().map(|b| b.id).collect();

        if self.component.front.contains(&k) {
            for &b in &inputs {
                if self.fed.contains(&b) && self.has_inter_in_edge(b) {
                    self.push(q, CommandKind::Write, k, Some(b), Some(CopyKind::Dependent))?;
                }
            }
        }
        for &b in &inputs {
            if !self.fed.contains(&b) {
                self.push(q, CommandKind::Write, k, Some(b), Some(CopyKind::Isolated))?;
            }
        }
        self.push(q, CommandKind::Ndrange, k, None, None)?;
        for &b in &outputs {
            if !self.feeding.contains(&b) {
                self.push(q, CommandKind::Read, k, Some(b), Some(CopyKind::Isolated))?;
            }
        }
        if self.component.end.contains(&k) {
            for &b in &outputs {
                if self.feeding.contains(&b) && self.has_inter_out_edge(b) {
                    self.push(q, CommandKind::Read, k, Some(b), Some(CopyKind::Dependent))?;
                }
            }
        }
        self.processed.insert(k);
        self.kernel_queue.insert(k, q);
        Ok(())
    }

    fn ndrange_event(&self, k: KernelId) -> Option<EventId> {
        self.out.ndrange_of(k).map(|c| c.event)
    }

    /// Adds the cross-queue pairs involving kernel `k`: its writes before its
    /// ndrange, its ndrange before its reads, and ndrange-to-ndrange order
    /// along intra-component edges. Same-queue pairs are implied by queue
    /// order and never stored.
    pub fn set_dependencies(&mut self, k: KernelId) {
        let Some(ek) = self.ndrange_event(k) else { return };
        let qk = self.out.location(ek).0;
        let own: Vec<(CommandKind, EventId, usize)> =
            self.out.commands_of(k).map(|c| (c.kind, c.event, self.out.location(c.event).0)).collect();
        for (kind, ev, q) in own {
            if q == qk {
                continue;
            }
            match kind {
                CommandKind::Write => {
                    self.out.deps.insert((ev, ek));
                }
                CommandKind::Read => {
                    self.out.deps.insert((ek, ev));
                }
                CommandKind::Ndrange => {}
            }
        }
        let intra: Vec<(KernelId, KernelId)> = self
            .dag
            .edges()
            .iter()
            .filter(|e| self.component.contains(e.src.kernel) && self.component.contains(e.dst.kernel))
            .filter(|e| e.src.kernel == k || e.dst.kernel == k)
            .map(|e| (e.src.kernel, e.dst.kernel))
            .collect();
        for (m, n) in intra {
            if let (Some(em), Some(en)) = (self.ndrange_event(m), self.ndrange_event(n)) {
                if self.out.location(em).0 != self.out.location(en).0 {
                    self.out.deps.insert((em, en));
                }
            }
        }
    }

    /// Marks notification events. On a GPU every inter-component dependent
    /// read of an END kernel is marked; on a CPU the END kernel's ndrange is
    /// marked instead. The last command of each queue is recorded as a
    /// terminal so completion of the whole component is observable.
    pub fn set_callbacks(&mut self) -> BTreeSet<EventId> {
        let end: Vec<KernelId> = self.component.end.iter().copied().filter(|k| self.processed.contains(k)).collect();
        for k in end {
            let marks: Vec<EventId> = match self.out.device_type {
                DeviceType::Gpu => self
                    .out
                    .commands_of(k)
                    .filter(|c| c.kind == CommandKind::Read && c.copy == Some(CopyKind::Dependent))
                    .filter(|c| c.buffer.is_some_and(|b| self.has_inter_out_edge(b)))
                    .map(|c| c.event)
                    .collect(),
                DeviceType::Cpu => self.ndrange_event(k).into_iter().collect(),
            };
            self.out.callbacks.extend(marks);
        }
        self.out.terminals = self.out.queues.iter().filter_map(|q| q.last().map(|c| c.event)).collect();
        self.out.callbacks.clone()
    }

    pub fn finish(self) -> CommandQueueStructure {
        self.out
    }
}

/// Builds the structure for component `t` on `device` with `r` queues.
///
/// Kernels are processed in topological order inside the component, smallest
/// ready id first, and assigned queues round-robin in processing order.
pub fn setup_cq(
    t: &TaskComponent,
    device: DeviceId,
    device_type: DeviceType,
    r: usize,
    dag: &DagSpec,
) -> Result<CommandQueueStructure, BuildError> {
    let mut b = QueueBuilder::new(dag, t, device, device_type, r)?;
    let inner_preds =
        |k: KernelId| -> BTreeSet<KernelId> { dag.predecessors(k).into_iter().filter(|p| t.contains(*p)).collect() };
    let mut unprocessed: BTreeSet<KernelId> =
        t.kernels.iter().copied().filter(|&k| inner_preds(k).is_empty()).collect();
    let mut next_queue = 0;
    while let Some(k) = unprocessed.pop_first() {
        b.enq(k, next_queue)?;
        next_queue = (next_queue + 1) % r;
        b.set_dependencies(k);
        for s in dag.successors(k) {
            if t.contains(s) && !b.processed().contains(&s) && inner_preds(s).iter().all(|p| b.processed().contains(p))
            {
                unprocessed.insert(s);
            }
        }
    }
    debug_assert_eq!(b.processed().len(), t.kernels.len());
    b.set_callbacks();
    let out = b.finish();
    debug_assert!(out.is_acyclic());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn pairs(v: &[(&str, &str)]) -> BTreeSet<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn five() -> (DagSpec, TaskComponent) {
        let dag = fixtures::five_kernel_component();
        let t = TaskComponent::new(fixtures::FIVE_KERNEL_COMPONENT, &dag);
        (dag, t)
    }

    #[test]
    fn enq_front_kernel_writes_inter_inputs_first() {
        let (dag, t) = five();
        let mut b = QueueBuilder::new(&dag, &t, 1, DeviceType::Gpu, 3).unwrap();
        b.enq(0, 0).unwrap();
        assert_eq!(b.structure().queue_labels()[0], labels(&["w1", "w2", "e1"]));
        b.enq(1, 1).unwrap();
        assert_eq!(b.structure().queue_labels()[1], labels(&["w3", "e2"]));
        assert_eq!(b.enq(1, 2), Err(BuildError::AlreadyProcessed(1)));
        assert_eq!(b.enq(6, 2), Err(BuildError::NotInComponent(6)));
    }

    #[test]
    fn interior_kernel_without_transfers_gets_only_ndrange() {
        let (dag, t) = five();
        let mut b = QueueBuilder::new(&dag, &t, 1, DeviceType::Gpu, 3).unwrap();
        b.enq(2, 2).unwrap();
        assert_eq!(b.structure().queue_labels()[2], labels(&["e1"]));
    }

    #[test]
    fn five_kernel_component_on_three_queues() {
        let (dag, t) = five();
        let q = setup_cq(&t, 1, DeviceType::Gpu, 3, &dag).unwrap();
        assert_eq!(
            q.queue_labels(),
            vec![labels(&["w1", "w2", "e1", "e4", "r1"]), labels(&["w3", "e2", "e5", "r2"]), labels(&["e3"])]
        );
        assert_eq!(q.dep_labels(), pairs(&[("e1", "e2"), ("e1", "e3"), ("e2", "e4"), ("e3", "e5")]));
        assert!(q.is_acyclic());
    }

    #[test]
    fn callbacks_depend_on_device_type() {
        let (dag, t) = five();
        let gpu = setup_cq(&t, 1, DeviceType::Gpu, 3, &dag).unwrap();
        let names: BTreeSet<&str> = gpu.callbacks().iter().map(|&e| gpu.label(e)).collect();
        assert_eq!(names, ["r1", "r2"].into_iter().collect());
        let terms: BTreeSet<&str> = gpu.terminals().iter().map(|&e| gpu.label(e)).collect();
        assert_eq!(terms, ["r1", "r2", "e3"].into_iter().collect());

        let cpu = setup_cq(&t, 0, DeviceType::Cpu, 3, &dag).unwrap();
        let names: BTreeSet<&str> = cpu.callbacks().iter().map(|&e| cpu.label(e)).collect();
        assert_eq!(names, ["e4", "e5"].into_iter().collect());
    }

    #[test]
    fn single_queue_has_no_cross_deps() {
        let (dag, t) = five();
        let q = setup_cq(&t, 1, DeviceType::Gpu, 1, &dag).unwrap();
        assert!(q.deps().is_empty());
        assert_eq!(q.queues().len(), 1);
        assert_eq!(q.queues()[0].len(), 10);
    }

    #[test]
    fn singleton_component_layout() {
        let dag = fixtures::independent(1);
        let t = TaskComponent::new(0, &dag);
        let q = setup_cq(&t, 1, DeviceType::Gpu, 1, &dag).unwrap();
        assert_eq!(q.queue_labels(), vec![labels(&["w1", "e1", "r1"])]);
        assert!(q.deps().is_empty());
        assert!(q.callbacks().is_empty());
    }

    #[test]
    fn extra_queues_stay_empty() {
        let dag = fixtures::independent(1);
        let t = TaskComponent::new(0, &dag);
        let q = setup_cq(&t, 1, DeviceType::Gpu, 4, &dag).unwrap();
        assert_eq!(q.queues().iter().filter(|q| q.is_empty()).count(), 3);
    }

    #[test]
    fn zero_queues_rejected() {
        let dag = fixtures::independent(1);
        let t = TaskComponent::new(0, &dag);
        assert_eq!(setup_cq(&t, 1, DeviceType::Gpu, 0, &dag), Err(BuildError::NoQueues(1)));
    }

    #[test]
    fn json_dump_lists_queues_and_deps() {
        let (dag, t) = five();
        let q = setup_cq(&t, 1, DeviceType::Gpu, 3, &dag).unwrap();
        let v: serde_json::Value = serde_json::from_str(&q.to_json()).unwrap();
        assert_eq!(v["queues"].as_array().unwrap().len(), 3);
        assert_eq!(v["deps"].as_array().unwrap().len(), 4);
        assert_eq!(v["queues"][0][0]["label"], "w1");
    }

    #[test]
    fn construction_is_deterministic() {
        let (dag, t) = five();
        assert_eq!(setup_cq(&t, 1, DeviceType::Gpu, 2, &dag), setup_cq(&t, 1, DeviceType::Gpu, 2, &dag));
    }
}
