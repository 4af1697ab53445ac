//! Small reference graphs for tests, examples and benchmarks.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;

use crate::spec::{
    BufferId, BufferKind, BufferSpec, DagSpec, DeviceProfile, DeviceType, Edge, ElemType, Expr, KernelId, KernelSpec,
    Params, Platform,
};
use crate::time::Millis;

/// Element count used by fixture buffers.
pub const FIXTURE_N: i64 = 16;

/// Builds a kernel whose first `inputs` arguments are input buffers and next
/// `outputs` arguments are output buffers, all `size` float32 elements.
pub fn simple_kernel(id: KernelId, name: &str, dev: DeviceType, inputs: u32, outputs: u32, size: &str) -> KernelSpec {
    let buf = |pos: u32, kind| BufferSpec {
        id: BufferId { kernel: id, pos },
        elem_type: ElemType::Float32,
        size: Expr::parse(size).expect("fixture size expression"),
        kind,
    };
    KernelSpec {
        id,
        name: name.to_string(),
        dev,
        work_dimension: 1,
        global_work_size: vec![Expr::parse(size).expect("fixture size expression"), Expr::literal(1), Expr::literal(1)],
        input_buffers: (0..inputs).map(|p| buf(p, BufferKind::Input)).collect(),
        output_buffers: (inputs..inputs + outputs).map(|p| buf(p, BufferKind::Output)).collect(),
        io_buffers: Vec::new(),
        var_args: Vec::new(),
        src: format!("{name}.cl"),
    }
}

pub fn fixture_params() -> Params {
    [("N".to_string(), FIXTURE_N)].into_iter().collect()
}

/// Index of the five-kernel component in [`five_kernel_component`].
pub const FIVE_KERNEL_COMPONENT: usize = 1;

/// A five-kernel GPU component `{0..4}` fed by kernel 5 and feeding kernel 6:
///
/// ```text
/// 5 =(b0,b1)=> 0 -(b4)-> {1, 2};  1 -(b9)-> 3;  2 -(b10)-> 4;  3,4 =(b13,b14)=> 6
/// ```
///
/// Kernel 1 additionally takes an isolated input `b5`.
pub fn five_kernel_component() -> DagSpec {
    let g = DeviceType::Gpu;
    let kernels = vec![
        simple_kernel(5, "source", DeviceType::Cpu, 0, 2, "N"),
        simple_kernel(0, "k0", g, 2, 1, "N"),
        simple_kernel(1, "k1", g, 2, 1, "N"),
        simple_kernel(2, "k2", g, 1, 1, "N"),
        simple_kernel(3, "k3", g, 1, 1, "N"),
        simple_kernel(4, "k4", g, 1, 1, "N"),
        simple_kernel(6, "sink", DeviceType::Cpu, 2, 0, "N"),
    ];
    let b = five_kernel_buffers();
    let e = |s: u32, d: u32| Edge { src: b[&s], dst: b[&d] };
    let edges = vec![e(0, 2), e(1, 3), e(4, 6), e(4, 7), e(9, 11), e(10, 12), e(13, 15), e(14, 16)];
    let tc = vec![vec![5], vec![0, 1, 2, 3, 4], vec![6]];
    let cq = [(0, 1), (1, 3)].into_iter().collect();
    DagSpec::new(kernels, edges, tc, cq, fixture_params()).expect("valid fixture")
}

/// Buffer labels `b0..b16` of [`five_kernel_component`] (there is no `b8`).
pub fn five_kernel_buffers() -> BTreeMap<u32, BufferId> {
    let id = |kernel, pos| BufferId { kernel, pos };
    [
        (0, id(5, 0)),
        (1, id(5, 1)),
        (2, id(0, 0)),
        (3, id(0, 1)),
        (4, id(0, 2)),
        (5, id(1, 0)),
        (6, id(1, 1)),
        (9, id(1, 2)),
        (7, id(2, 0)),
        (10, id(2, 1)),
        (11, id(3, 0)),
        (13, id(3, 1)),
        (12, id(4, 0)),
        (14, id(4, 1)),
        (15, id(6, 0)),
        (16, id(6, 1)),
    ]
    .into_iter()
    .collect()
}

/// `n` single-input single-output GPU kernels in a chain, one component each.
pub fn chain(n: u32) -> DagSpec {
    let kernels = (0..n).map(|i| simple_kernel(i, "step", DeviceType::Gpu, 1, 1, "N")).collect();
    let edges = (1..n).map(|i| Edge::new(i - 1, 1, i, 0)).collect();
    let tc = (0..n).map(|i| vec![i]).collect();
    DagSpec::new(kernels, edges, tc, [(0, 1), (1, 1)].into_iter().collect(), fixture_params()).expect("valid fixture")
}

/// `n` unconnected GPU kernels, one component each.
pub fn independent(n: u32) -> DagSpec {
    let kernels = (0..n).map(|i| simple_kernel(i, "solo", DeviceType::Gpu, 1, 1, "N")).collect();
    let tc = (0..n).map(|i| vec![i]).collect();
    DagSpec::new(kernels, Vec::new(), tc, [(0, 1), (1, 1)].into_iter().collect(), fixture_params())
        .expect("valid fixture")
}

/// CPU device 0 and GPU device 1, every kernel taking `time` ms on both,
/// full shares and effectively free transfers.
pub fn uniform_platform(dag: &DagSpec, time: i64) -> Platform {
    let times: BTreeMap<KernelId, Millis> = dag.kernel_ids().map(|k| (k, Millis::from_int(time))).collect();
    let mut cpu = DeviceProfile::new(0, DeviceType::Cpu);
    cpu.kernel_times = times.clone();
    let mut gpu = DeviceProfile::new(1, DeviceType::Gpu);
    gpu.kernel_times = times;
    gpu.bandwidth = BigRational::from_integer(BigInt::from(i64::MAX));
    Platform::new(vec![cpu, gpu]).expect("valid fixture platform")
}
