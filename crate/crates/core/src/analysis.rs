//! Task-component classification: FRONT/END/interior sets, intra/inter
//! edges, isolated/dependent copies, readiness and bottom-level ranks.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::spec::{BufferId, ComponentId, DagSpec, DeviceType, Edge, KernelId, Platform, ProfileError};
use crate::time::Millis;

/// A set of kernels dispatched together to one device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskComponent {
    pub id: ComponentId,
    pub kernels: BTreeSet<KernelId>,
    pub dev_pref: DeviceType,
    /// Kernels with an input fed from another component.
    pub front: BTreeSet<KernelId>,
    /// Kernels with an output consumed by another component.
    pub end: BTreeSet<KernelId>,
    /// Kernels in neither `front` nor `end`.
    pub interior: BTreeSet<KernelId>,
}

impl TaskComponent {
    /// Builds component `id` of `dag`'s partition.
    pub fn new(id: ComponentId, dag: &DagSpec) -> Self {
        let kernels: BTreeSet<KernelId> = dag.tc()[id].iter().copied().collect();
        let dev_pref = dag.kernel(*kernels.first().expect("validated partition")).expect("validated partition").dev;
        let front = front_set(&kernels, dag);
        let end = end_set(&kernels, dag);
        let interior = interior_set(&kernels, &front, &end);
        TaskComponent { id, kernels, dev_pref, front, end, interior }
    }

    pub fn contains(&self, k: KernelId) -> bool {
        self.kernels.contains(&k)
    }
}

pub fn front_set(component: &BTreeSet<KernelId>, dag: &DagSpec) -> BTreeSet<KernelId> {
    dag.edges()
        .iter()
        .filter(|e| component.contains(&e.dst.kernel) && !component.contains(&e.src.kernel))
        .map(|e| e.dst.kernel)
        .collect()
}

pub fn end_set(component: &BTreeSet<KernelId>, dag: &DagSpec) -> BTreeSet<KernelId> {
    dag.edges()
        .iter()
        .filter(|e| component.contains(&e.src.kernel) && !component.contains(&e.dst.kernel))
        .map(|e| e.src.kernel)
        .collect()
}

pub fn interior_set(
    component: &BTreeSet<KernelId>,
    front: &BTreeSet<KernelId>,
    end: &BTreeSet<KernelId>,
) -> BTreeSet<KernelId> {
    component.iter().filter(|k| !front.contains(k) && !end.contains(k)).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CopyKind {
    Isolated,
    Dependent,
}

/// Labels for every buffer edge and every kernel-buffer copy.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EdgeClass {
    pub edges: BTreeMap<Edge, Locality>,
    /// One entry per input/io buffer.
    pub writes: BTreeMap<BufferId, CopyKind>,
    /// One entry per output/io buffer.
    pub reads: BTreeMap<BufferId, CopyKind>,
}

pub fn classify_edges(dag: &DagSpec) -> EdgeClass {
    let owner = component_owner(dag);
    let mut class = EdgeClass::default();
    for e in dag.edges() {
        let loc = if owner[&e.src.kernel] == owner[&e.dst.kernel] { Locality::Intra } else { Locality::Inter };
        class.edges.insert(*e, loc);
    }
    let fed: BTreeSet<BufferId> = dag.edges().iter().map(|e| e.dst).collect();
    let feeding: BTreeSet<BufferId> = dag.edges().iter().map(|e| e.src).collect();
    for k in dag.kernels() {
        for b in k.inputs() {
            let kind = if fed.contains(&b.id) { CopyKind::Dependent } else { CopyKind::Isolated };
            class.writes.insert(b.id, kind);
        }
        for b in k.outputs() {
            let kind = if feeding.contains(&b.id) { CopyKind::Dependent } else { CopyKind::Isolated };
            class.reads.insert(b.id, kind);
        }
    }
    class
}

fn component_owner(dag: &DagSpec) -> BTreeMap<KernelId, ComponentId> {
    dag.tc().iter().enumerate().flat_map(|(i, c)| c.iter().map(move |&k| (k, i))).collect()
}

/// Precomputed per-DAG view used by the builder and the scheduler.
#[derive(Debug, Clone)]
pub struct Analysis {
    components: Vec<TaskComponent>,
    owner: BTreeMap<KernelId, ComponentId>,
    classes: EdgeClass,
    /// Kernels outside each component that feed it.
    external_preds: Vec<BTreeSet<KernelId>>,
}

impl Analysis {
    pub fn new(dag: &DagSpec) -> Self {
        let components: Vec<TaskComponent> = (0..dag.tc().len()).map(|i| TaskComponent::new(i, dag)).collect();
        let owner = component_owner(dag);
        let mut external_preds = vec![BTreeSet::new(); components.len()];
        for e in dag.edges() {
            let (src, dst) = (owner[&e.src.kernel], owner[&e.dst.kernel]);
            if src != dst {
                external_preds[dst].insert(e.src.kernel);
            }
        }
        Analysis { components, owner, classes: classify_edges(dag), external_preds }
    }

    pub fn components(&self) -> &[TaskComponent] {
        &self.components
    }

    pub fn component(&self, id: ComponentId) -> &TaskComponent {
        &self.components[id]
    }

    pub fn component_of(&self, k: KernelId) -> ComponentId {
        self.owner[&k]
    }

    pub fn classes(&self) -> &EdgeClass {
        &self.classes
    }

    pub fn external_predecessors(&self, c: ComponentId) -> &BTreeSet<KernelId> {
        &self.external_preds[c]
    }

    /// Components outside `exclude` whose cross-component predecessor
    /// kernels are all in `finished`, in id order.
    pub fn ready_components(&self, finished: &BTreeSet<KernelId>, exclude: &BTreeSet<ComponentId>) -> Vec<ComponentId> {
        (0..self.components.len())
            .filter(|c| !exclude.contains(c))
            .filter(|&c| self.external_preds[c].iter().all(|k| finished.contains(k)))
            .collect()
    }
}

/// Components whose cross-component predecessors have all finished.
pub fn ready_components(dag: &DagSpec, finished: &BTreeSet<KernelId>) -> Vec<ComponentId> {
    Analysis::new(dag).ready_components(finished, &BTreeSet::new())
}

/// Bottom-level rank of every kernel: its own time on the first device of its
/// preferred type plus the largest rank among its successors.
pub fn bottom_level_ranks(dag: &DagSpec, platform: &Platform) -> Result<BTreeMap<KernelId, Millis>, ProfileError> {
    let mut ranks: BTreeMap<KernelId, Millis> = BTreeMap::new();
    for &k in dag.topo_order().iter().rev() {
        let kernel = dag.kernel(k).expect("topo order lists known kernels");
        let device = platform.first_of_type(kernel.dev)?;
        let own = platform.time(k, device.device_id)?.clone();
        let tail = dag.successors(k).iter().map(|s| ranks[s].clone()).max().unwrap_or_else(Millis::zero);
        ranks.insert(k, own + tail);
    }
    Ok(ranks)
}

pub fn bottom_level_rank(k: KernelId, dag: &DagSpec, platform: &Platform) -> Result<Millis, ProfileError> {
    Ok(bottom_level_ranks(dag, platform)?.remove(&k).expect("rank computed for every kernel"))
}

/// Component priority: max rank over FRONT, or over all kernels when FRONT is
/// empty.
pub fn component_rank(c: &TaskComponent, ranks: &BTreeMap<KernelId, Millis>) -> Millis {
    let over = if c.front.is_empty() { &c.kernels } else { &c.front };
    over.iter().map(|k| ranks[k].clone()).max().unwrap_or_else(Millis::zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn set(v: &[KernelId]) -> BTreeSet<KernelId> {
        v.iter().copied().collect()
    }

    #[test]
    fn five_kernel_component_sets() {
        let dag = fixtures::five_kernel_component();
        let t = TaskComponent::new(fixtures::FIVE_KERNEL_COMPONENT, &dag);
        assert_eq!(t.front, set(&[0]));
        assert_eq!(t.end, set(&[3, 4]));
        assert_eq!(t.interior, set(&[1, 2]));
    }

    #[test]
    fn whole_dag_component_has_no_front_or_end() {
        let dag = fixtures::five_kernel_component();
        let all: BTreeSet<_> = dag.kernel_ids().collect();
        assert!(front_set(&all, &dag).is_empty());
        assert!(end_set(&all, &dag).is_empty());
        assert_eq!(interior_set(&all, &BTreeSet::new(), &BTreeSet::new()), all);
    }

    #[test]
    fn chain_endpoints() {
        let dag = fixtures::chain(3);
        assert_eq!(end_set(&set(&[0]), &dag), set(&[0]));
        let mid = set(&[1]);
        let (f, e) = (front_set(&mid, &dag), end_set(&mid, &dag));
        assert_eq!(f, mid);
        assert_eq!(e, mid);
        assert!(interior_set(&mid, &f, &e).is_empty());
        // the terminal component only holds the sink
        assert!(end_set(&set(&[2]), &dag).is_empty());
    }

    #[test]
    fn five_kernel_edge_classes() {
        let dag = fixtures::five_kernel_component();
        let class = classify_edges(&dag);
        let b = fixtures::five_kernel_buffers();
        let intra: BTreeSet<Edge> =
            class.edges.iter().filter(|(_, l)| **l == Locality::Intra).map(|(e, _)| *e).collect();
        let inter: BTreeSet<Edge> =
            class.edges.iter().filter(|(_, l)| **l == Locality::Inter).map(|(e, _)| *e).collect();
        let edge = |s: u32, d: u32| Edge { src: b[&s], dst: b[&d] };
        assert_eq!(intra, [edge(4, 6), edge(4, 7), edge(9, 11), edge(10, 12)].into_iter().collect());
        assert_eq!(inter, [edge(0, 2), edge(1, 3), edge(13, 15), edge(14, 16)].into_iter().collect());
        let isolated: Vec<BufferId> =
            class.writes.iter().filter(|(_, c)| **c == CopyKind::Isolated).map(|(id, _)| *id).collect();
        assert_eq!(isolated, vec![b[&5]]);
        assert!(class.reads.values().all(|c| *c == CopyKind::Dependent));
    }

    #[test]
    fn no_edges_means_all_copies_isolated() {
        let dag = fixtures::independent(3);
        let class = classify_edges(&dag);
        assert!(class.edges.is_empty());
        assert!(class.writes.values().chain(class.reads.values()).all(|c| *c == CopyKind::Isolated));
    }

    #[test]
    fn readiness_on_a_chain() {
        let dag = fixtures::chain(2);
        assert_eq!(ready_components(&dag, &BTreeSet::new()), vec![0]);
        let a = Analysis::new(&dag);
        assert_eq!(a.ready_components(&set(&[0]), &[0].into_iter().collect()), vec![1]);
    }

    #[test]
    fn chain_ranks() {
        let dag = fixtures::chain(2);
        let platform = fixtures::uniform_platform(&dag, 10);
        assert_eq!(bottom_level_rank(0, &dag, &platform).unwrap(), Millis::from_int(20));
        assert_eq!(bottom_level_rank(1, &dag, &platform).unwrap(), Millis::from_int(10));
    }

    #[test]
    fn sink_rank_is_own_time() {
        let dag = fixtures::independent(1);
        let platform = fixtures::uniform_platform(&dag, 7);
        assert_eq!(bottom_level_rank(0, &dag, &platform).unwrap(), Millis::from_int(7));
    }

    #[test]
    fn missing_profile_entry() {
        let dag = fixtures::chain(2);
        let platform = fixtures::uniform_platform(&fixtures::independent(1), 1);
        assert!(matches!(bottom_level_ranks(&dag, &platform), Err(ProfileError::MissingProfileEntry { .. })));
    }
}
