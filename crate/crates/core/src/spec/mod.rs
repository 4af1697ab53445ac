//! Application DAG model and the JSON specification document.

mod expr;
mod profile;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use expr::{eval_expr, Expr, ExprError, Params};
pub use profile::{parse_profiles, profiles_to_json, transfer_time, DeviceProfile, Platform, ProfileError};

pub type KernelId = u32;
pub type DeviceId = u32;
pub type ComponentId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceType {
    Cpu,
    Gpu,
}

impl fmt::Display for DeviceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceType::Cpu => "cpu",
            DeviceType::Gpu => "gpu",
        })
    }
}

/// Scalar element type of a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElemType {
    #[serde(rename = "float32", alias = "float")]
    Float32,
    #[serde(rename = "int32", alias = "int")]
    Int32,
    #[serde(rename = "float64", alias = "double")]
    Float64,
    #[serde(rename = "int64", alias = "long")]
    Int64,
}

impl ElemType {
    pub fn width(self) -> i64 {
        match self {
            ElemType::Float32 | ElemType::Int32 => 4,
            ElemType::Float64 | ElemType::Int64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BufferKind {
    Input,
    Output,
    Io,
}

/// A buffer is identified by its kernel and argument position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BufferId {
    pub kernel: KernelId,
    pub pos: u32,
}

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}.{}", self.kernel, self.pos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferSpec {
    pub id: BufferId,
    pub elem_type: ElemType,
    pub size: Expr,
    pub kind: BufferKind,
}

impl BufferSpec {
    pub fn pos(&self) -> u32 {
        self.id.pos
    }

    /// Input and io buffers are written before the kernel runs.
    pub fn is_input(&self) -> bool {
        matches!(self.kind, BufferKind::Input | BufferKind::Io)
    }

    /// Output and io buffers are read back after the kernel runs.
    pub fn is_output(&self) -> bool {
        matches!(self.kind, BufferKind::Output | BufferKind::Io)
    }
}

/// Size of a buffer in bytes: element count times element width.
pub fn buffer_bytes(b: &BufferSpec, params: &Params) -> Result<i64, ExprError> {
    let count = b.size.eval_positive(params)?;
    count.checked_mul(b.elem_type.width()).ok_or(ExprError::Overflow)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarArg {
    #[serde(rename = "type")]
    pub ty: String,
    pub pos: u32,
    pub value: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    pub id: KernelId,
    pub name: String,
    pub dev: DeviceType,
    pub work_dimension: u8,
    pub global_work_size: Vec<Expr>,
    pub input_buffers: Vec<BufferSpec>,
    pub output_buffers: Vec<BufferSpec>,
    pub io_buffers: Vec<BufferSpec>,
    pub var_args: Vec<VarArg>,
    pub src: String,
}

impl KernelSpec {
    /// All buffers ordered by argument position.
    pub fn buffers(&self) -> Vec<&BufferSpec> {
        let mut all: Vec<&BufferSpec> =
            self.input_buffers.iter().chain(&self.output_buffers).chain(&self.io_buffers).collect();
        all.sort_by_key(|b| b.pos());
        all
    }

    pub fn buffer(&self, pos: u32) -> Option<&BufferSpec> {
        self.input_buffers.iter().chain(&self.output_buffers).chain(&self.io_buffers).find(|b| b.pos() == pos)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &BufferSpec> {
        self.buffers().into_iter().filter(|b| b.is_input())
    }

    pub fn outputs(&self) -> impl Iterator<Item = &BufferSpec> {
        self.buffers().into_iter().filter(|b| b.is_output())
    }
}

/// A buffer-to-buffer dependency: `src` (an output of its kernel) feeds
/// `dst` (an input of its kernel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: BufferId,
    pub dst: BufferId,
}

impl Edge {
    pub fn new(src_kernel: KernelId, src_pos: u32, dst_kernel: KernelId, dst_pos: u32) -> Self {
        Edge { src: BufferId { kernel: src_kernel, pos: src_pos }, dst: BufferId { kernel: dst_kernel, pos: dst_pos } }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("malformed spec: {0}")]
    MalformedSpec(String),
    #[error("dependency cycle through kernels {0:?}")]
    CycleDetected(Vec<KernelId>),
    #[error("invalid task component partition: {0}")]
    PartitionError(String),
    #[error("kernel {kernel}: {msg}")]
    ArgPositionClash { kernel: KernelId, msg: String },
    #[error("reference to unknown kernel {0}")]
    UnknownKernelRef(KernelId),
    #[error("invalid dependency {edge}: {msg}")]
    InvalidEdge { edge: String, msg: String },
    #[error("{context}: {source}")]
    Expr {
        context: String,
        #[source]
        source: ExprError,
    },
}

/// A validated application graph.
///
/// Kernels are kept sorted by id. Symbolic expressions are stored unevaluated
/// alongside the parameter bindings they were validated against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagSpec {
    kernels: Vec<KernelSpec>,
    edges: Vec<Edge>,
    tc: Vec<Vec<KernelId>>,
    cq: BTreeMap<DeviceId, u32>,
    params: Params,
}

impl DagSpec {
    pub fn new(
        mut kernels: Vec<KernelSpec>,
        edges: Vec<Edge>,
        tc: Vec<Vec<KernelId>>,
        cq: BTreeMap<DeviceId, u32>,
        params: Params,
    ) -> Result<Self, SpecError> {
        kernels.sort_by_key(|k| k.id);
        let dag = DagSpec { kernels, edges, tc, cq, params };
        dag.validate()?;
        Ok(dag)
    }

    pub fn kernels(&self) -> &[KernelSpec] {
        &self.kernels
    }

    pub fn kernel(&self, id: KernelId) -> Option<&KernelSpec> {
        self.kernels.binary_search_by_key(&id, |k| k.id).ok().map(|i| &self.kernels[i])
    }

    pub fn kernel_ids(&self) -> impl Iterator<Item = KernelId> + '_ {
        self.kernels.iter().map(|k| k.id)
    }

    pub fn buffer(&self, id: BufferId) -> Option<&BufferSpec> {
        self.kernel(id.kernel)?.buffer(id.pos)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn tc(&self) -> &[Vec<KernelId>] {
        &self.tc
    }

    pub fn cq(&self) -> &BTreeMap<DeviceId, u32> {
        &self.cq
    }

    pub fn queue_count(&self, device: DeviceId) -> u32 {
        self.cq.get(&device).copied().unwrap_or(0)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn buffer_bytes(&self, id: BufferId) -> Result<i64, ExprError> {
        let b = self.buffer(id).ok_or(ExprError::UnboundParameter(format!("buffer {id}")))?;
        buffer_bytes(b, &self.params)
    }

    /// Same graph with a different partition and queue layout.
    pub fn with_layout(&self, tc: Vec<Vec<KernelId>>, cq: BTreeMap<DeviceId, u32>) -> Result<Self, SpecError> {
        DagSpec::new(self.kernels.clone(), self.edges.clone(), tc, cq, self.params.clone())
    }

    /// Same graph with kernel device preferences replaced.
    pub fn with_devices(&self, dev: &BTreeMap<KernelId, DeviceType>) -> Result<Self, SpecError> {
        let mut kernels = self.kernels.clone();
        for k in &mut kernels {
            if let Some(d) = dev.get(&k.id) {
                k.dev = *d;
            }
        }
        DagSpec::new(kernels, self.edges.clone(), self.tc.clone(), self.cq.clone(), self.params.clone())
    }

    /// One component per kernel and one queue on each listed device.
    pub fn per_kernel(&self, devices: impl IntoIterator<Item = DeviceId>) -> Result<Self, SpecError> {
        let tc = self.kernel_ids().map(|k| vec![k]).collect();
        let cq = devices.into_iter().map(|d| (d, 1)).collect();
        self.with_layout(tc, cq)
    }

    /// Distinct kernel-level successors of `k`.
    pub fn successors(&self, k: KernelId) -> BTreeSet<KernelId> {
        self.edges.iter().filter(|e| e.src.kernel == k).map(|e| e.dst.kernel).collect()
    }

    pub fn predecessors(&self, k: KernelId) -> BTreeSet<KernelId> {
        self.edges.iter().filter(|e| e.dst.kernel == k).map(|e| e.src.kernel).collect()
    }

    /// Deterministic topological order (smallest ready id first).
    pub fn topo_order(&self) -> Vec<KernelId> {
        topo_sort(self.kernel_ids(), &self.edges).unwrap_or_default()
    }

    fn validate(&self) -> Result<(), SpecError> {
        let mut seen = BTreeSet::new();
        for k in &self.kernels {
            if !seen.insert(k.id) {
                return Err(SpecError::MalformedSpec(format!("duplicate kernel id {}", k.id)));
            }
            self.validate_kernel(k)?;
        }
        self.validate_edges()?;
        if let Err(cycle) = topo_sort(self.kernel_ids(), &self.edges) {
            return Err(SpecError::CycleDetected(cycle));
        }
        self.validate_partition()?;
        Ok(())
    }

    fn validate_kernel(&self, k: &KernelSpec) -> Result<(), SpecError> {
        if !(1..=3).contains(&k.work_dimension) {
            return Err(SpecError::MalformedSpec(format!(
                "kernel {}: workDimension {} outside [1,3]",
                k.id, k.work_dimension
            )));
        }
        if k.global_work_size.len() != 3 {
            return Err(SpecError::MalformedSpec(format!(
                "kernel {}: globalWorkSize must have 3 entries, found {}",
                k.id,
                k.global_work_size.len()
            )));
        }
        for (i, e) in k.global_work_size.iter().enumerate() {
            e.eval_positive(&self.params).map_err(|source| SpecError::Expr {
                context: format!("kernel {} globalWorkSize[{i}]", k.id),
                source,
            })?;
        }
        let mut positions = BTreeMap::new();
        for b in k.buffers() {
            if b.id.kernel != k.id {
                return Err(SpecError::MalformedSpec(format!("buffer {} listed under kernel {}", b.id, k.id)));
            }
            buffer_bytes(b, &self.params)
                .map_err(|source| SpecError::Expr { context: format!("buffer {} size", b.id), source })?;
            if positions.insert(b.pos(), "buffer").is_some() {
                return Err(SpecError::ArgPositionClash {
                    kernel: k.id,
                    msg: format!("position {} used twice", b.pos()),
                });
            }
        }
        for v in &k.var_args {
            if positions.insert(v.pos, "var").is_some() {
                return Err(SpecError::ArgPositionClash {
                    kernel: k.id,
                    msg: format!("position {} used twice", v.pos),
                });
            }
            if let serde_json::Value::String(s) = &v.value {
                Expr::parse(s).and_then(|e| e.eval(&self.params)).map_err(|source| SpecError::Expr {
                    context: format!("kernel {} argument {}", k.id, v.pos),
                    source,
                })?;
            }
        }
        if let Some((&max, _)) = positions.last_key_value() {
            if positions.len() as u64 != u64::from(max) + 1 {
                let missing = (0..=max).find(|p| !positions.contains_key(p)).unwrap_or(max);
                return Err(SpecError::ArgPositionClash {
                    kernel: k.id,
                    msg: format!("argument position {missing} is not covered"),
                });
            }
        }
        Ok(())
    }

    fn validate_edges(&self) -> Result<(), SpecError> {
        let mut producers: BTreeMap<BufferId, Edge> = BTreeMap::new();
        for e in &self.edges {
            let show = || format!("{},{} -> {},{}", e.src.kernel, e.src.pos, e.dst.kernel, e.dst.pos);
            let src = self.kernel(e.src.kernel).ok_or(SpecError::UnknownKernelRef(e.src.kernel))?;
            let dst = self.kernel(e.dst.kernel).ok_or(SpecError::UnknownKernelRef(e.dst.kernel))?;
            match src.buffer(e.src.pos) {
                Some(b) if b.is_output() => {}
                _ => {
                    return Err(SpecError::InvalidEdge {
                        edge: show(),
                        msg: format!("argument {} of kernel {} is not an output buffer", e.src.pos, src.id),
                    })
                }
            }
            match dst.buffer(e.dst.pos) {
                Some(b) if b.is_input() => {}
                _ => {
                    return Err(SpecError::InvalidEdge {
                        edge: show(),
                        msg: format!("argument {} of kernel {} is not an input buffer", e.dst.pos, dst.id),
                    })
                }
            }
            if let Some(prev) = producers.insert(e.dst, *e) {
                if prev != *e {
                    return Err(SpecError::InvalidEdge {
                        edge: show(),
                        msg: format!("buffer {} has two producers", e.dst),
                    });
                }
                return Err(SpecError::InvalidEdge { edge: show(), msg: "duplicate dependency".into() });
            }
        }
        Ok(())
    }

    fn validate_partition(&self) -> Result<(), SpecError> {
        let mut owner: BTreeMap<KernelId, usize> = BTreeMap::new();
        for (i, comp) in self.tc.iter().enumerate() {
            if comp.is_empty() {
                return Err(SpecError::PartitionError(format!("component {i} is empty")));
            }
            let mut dev = None;
            for &k in comp {
                let kernel = self
                    .kernel(k)
                    .ok_or_else(|| SpecError::PartitionError(format!("component {i} names unknown kernel {k}")))?;
                if let Some(j) = owner.insert(k, i) {
                    return Err(SpecError::PartitionError(format!("kernel {k} appears in components {j} and {i}")));
                }
                match dev {
                    None => dev = Some(kernel.dev),
                    Some(d) if d != kernel.dev => {
                        return Err(SpecError::PartitionError(format!("component {i} mixes cpu and gpu kernels")))
                    }
                    _ => {}
                }
            }
        }
        if let Some(k) = self.kernel_ids().find(|k| !owner.contains_key(k)) {
            return Err(SpecError::PartitionError(format!("kernel {k} is not in any component")));
        }
        Ok(())
    }
}

/// Kahn's algorithm; on failure returns the kernels left on a cycle.
fn topo_sort(ids: impl Iterator<Item = KernelId>, edges: &[Edge]) -> Result<Vec<KernelId>, Vec<KernelId>> {
    let mut indeg: BTreeMap<KernelId, usize> = ids.map(|k| (k, 0)).collect();
    let mut succ: BTreeMap<KernelId, BTreeSet<KernelId>> = BTreeMap::new();
    for e in edges {
        if succ.entry(e.src.kernel).or_default().insert(e.dst.kernel) {
            *indeg.entry(e.dst.kernel).or_default() += 1;
        }
    }
    let mut heap: BinaryHeap<Reverse<KernelId>> =
        indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| Reverse(k)).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(Reverse(k)) = heap.pop() {
        order.push(k);
        for &s in succ.get(&k).into_iter().flatten() {
            let d = indeg.get_mut(&s).expect("edge endpoints validated");
            *d -= 1;
            if *d == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    if order.len() == indeg.len() {
        Ok(order)
    } else {
        let done: BTreeSet<_> = order.into_iter().collect();
        Err(indeg.keys().filter(|k| !done.contains(k)).copied().collect())
    }
}

// ---- document format ----

#[derive(Serialize, Deserialize)]
struct DocBuffer {
    #[serde(rename = "type")]
    ty: ElemType,
    size: Expr,
    pos: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DocKernel {
    id: KernelId,
    name: String,
    dev: DeviceType,
    work_dimension: u8,
    global_work_size: Vec<Expr>,
    #[serde(default)]
    input_buffers: Vec<DocBuffer>,
    #[serde(default)]
    output_buffers: Vec<DocBuffer>,
    #[serde(default)]
    io_buffers: Vec<DocBuffer>,
    #[serde(default)]
    var_arguments: Vec<VarArg>,
    #[serde(default)]
    src: String,
}

#[derive(Serialize, Deserialize)]
struct DocQueues {
    device: DeviceId,
    queues: u32,
}

#[derive(Serialize, Deserialize)]
struct Doc {
    kernels: Vec<DocKernel>,
    tc: Vec<Vec<KernelId>>,
    #[serde(default)]
    cq: Vec<DocQueues>,
    #[serde(default)]
    depends: Vec<[u32; 4]>,
}

fn from_doc(kernel: KernelId, kind: BufferKind, list: Vec<DocBuffer>) -> Vec<BufferSpec> {
    list.into_iter()
        .map(|b| BufferSpec { id: BufferId { kernel, pos: b.pos }, elem_type: b.ty, size: b.size, kind })
        .collect()
}

fn to_doc(list: &[BufferSpec]) -> Vec<DocBuffer> {
    list.iter().map(|b| DocBuffer { ty: b.elem_type, size: b.size.clone(), pos: b.pos() }).collect()
}

/// Parses and validates a specification document.
pub fn parse_spec(text: &str, params: &Params) -> Result<DagSpec, SpecError> {
    let doc: Doc = serde_json::from_str(text).map_err(|e| SpecError::MalformedSpec(e.to_string()))?;
    let kernels = doc
        .kernels
        .into_iter()
        .map(|k| KernelSpec {
            id: k.id,
            name: k.name,
            dev: k.dev,
            work_dimension: k.work_dimension,
            global_work_size: k.global_work_size,
            input_buffers: from_doc(k.id, BufferKind::Input, k.input_buffers),
            output_buffers: from_doc(k.id, BufferKind::Output, k.output_buffers),
            io_buffers: from_doc(k.id, BufferKind::Io, k.io_buffers),
            var_args: k.var_arguments,
            src: k.src,
        })
        .collect();
    let mut cq = BTreeMap::new();
    for q in doc.cq {
        if cq.insert(q.device, q.queues).is_some() {
            return Err(SpecError::MalformedSpec(format!("device {} listed twice in cq", q.device)));
        }
    }
    let edges = doc.depends.iter().map(|d| Edge::new(d[0], d[1], d[2], d[3])).collect();
    DagSpec::new(kernels, edges, doc.tc, cq, params.clone())
}

/// Serializes to the document format. Parameter bindings are not part of the
/// document.
pub fn to_json(dag: &DagSpec) -> String {
    let doc = Doc {
        kernels: dag
            .kernels
            .iter()
            .map(|k| DocKernel {
                id: k.id,
                name: k.name.clone(),
                dev: k.dev,
                work_dimension: k.work_dimension,
                global_work_size: k.global_work_size.clone(),
                input_buffers: to_doc(&k.input_buffers),
                output_buffers: to_doc(&k.output_buffers),
                io_buffers: to_doc(&k.io_buffers),
                var_arguments: k.var_args.clone(),
                src: k.src.clone(),
            })
            .collect(),
        tc: dag.tc.clone(),
        cq: dag.cq.iter().map(|(&device, &queues)| DocQueues { device, queues }).collect(),
        depends: dag.edges.iter().map(|e| [e.src.kernel, e.src.pos, e.dst.kernel, e.dst.pos]).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("document serialization cannot fail")
}
