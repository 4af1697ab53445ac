//! Shared generators for integration tests: a seeded corpus of random
//! layered DAGs with contiguous partitions and random platforms.

#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;

use cqsched_core::spec::{BufferKind, BufferSpec, Expr};
use cqsched_core::{fixtures, BufferId, DagSpec, DeviceProfile, DeviceType, Edge, KernelId, Millis, Platform};
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub seed: u64,
    pub dag: DagSpec,
    pub platform: Platform,
    pub delay: Millis,
}

fn pick_type(rng: &mut ChaCha8Rng) -> DeviceType {
    if rng.gen_bool(0.5) {
        DeviceType::Cpu
    } else {
        DeviceType::Gpu
    }
}

/// A layered DAG of at most 20 kernels. Kernel ids follow layer order, so
/// id order is topological; components are contiguous id ranges.
pub fn random_dag(rng: &mut ChaCha8Rng) -> DagSpec {
    let n: u32 = rng.gen_range(1..=20);
    let layers: u32 = rng.gen_range(1..=5.min(n));
    let mut cuts: Vec<u32> = (1..n).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<u32> = cuts.into_iter().take(layers as usize - 1).collect();
    cuts.sort();
    let layer_of = |k: u32| cuts.iter().filter(|c| **c <= k).count();

    let mut kernels = Vec::new();
    let mut produced: Vec<(usize, BufferId)> = Vec::new();
    let mut edges = Vec::new();
    for k in 0..n {
        let ins = rng.gen_range(1..=3);
        let outs = rng.gen_range(1..=2);
        let size = if rng.gen_bool(0.5) { "N" } else { "2*N" };
        let mut spec = fixtures::simple_kernel(k, "rnd", DeviceType::Gpu, ins, outs, size);
        if rng.gen_bool(0.15) {
            spec.io_buffers.push(BufferSpec {
                id: BufferId { kernel: k, pos: ins + outs },
                elem_type: spec.output_buffers[0].elem_type,
                size: Expr::parse("N").unwrap(),
                kind: BufferKind::Io,
            });
        }
        let layer = layer_of(k);
        let earlier: Vec<BufferId> = produced.iter().filter(|(l, _)| *l < layer).map(|(_, b)| *b).collect();
        let consumers: Vec<BufferId> = spec.inputs().map(|b| b.id).collect();
        for dst in consumers {
            if !earlier.is_empty() && rng.gen_bool(0.6) {
                let src = *earlier.choose(rng).unwrap();
                edges.push(Edge { src, dst });
            }
        }
        produced.extend(spec.outputs().map(|b| (layer, b.id)));
        kernels.push(spec);
    }

    let mut tc: Vec<Vec<KernelId>> = vec![vec![0]];
    for k in 1..n {
        if rng.gen_bool(0.45) {
            tc.push(vec![k]);
        } else {
            tc.last_mut().unwrap().push(k);
        }
    }
    let mut dev: BTreeMap<KernelId, DeviceType> = BTreeMap::new();
    for c in &tc {
        let t = pick_type(rng);
        for k in c {
            dev.insert(*k, t);
        }
    }
    for k in &mut kernels {
        k.dev = dev[&k.id];
    }
    let cq = [(0, rng.gen_range(1..=3)), (1, rng.gen_range(1..=3))].into_iter().collect();
    let params = [("N".to_string(), rng.gen_range(8..=512))].into_iter().collect();
    DagSpec::new(kernels, edges, tc, cq, params).expect("generated DAG is valid")
}

fn half(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> Millis {
    Millis::ratio(rng.gen_range(lo..=hi), 2)
}

pub fn random_platform(dag: &DagSpec, rng: &mut ChaCha8Rng) -> Platform {
    let shares = [(1, 4), (1, 2), (3, 4), (1, 1)];
    let mut cpu = DeviceProfile::new(0, DeviceType::Cpu);
    let mut gpu = DeviceProfile::new(1, DeviceType::Gpu);
    for k in dag.kernel_ids() {
        cpu.kernel_times.insert(k, half(rng, 2, 40));
        gpu.kernel_times.insert(k, half(rng, 1, 20));
        let (n, d) = *shares.choose(rng).unwrap();
        cpu.kernel_share.insert(k, BigRational::new(n.into(), d.into()));
        let (n, d) = *shares.choose(rng).unwrap();
        gpu.kernel_share.insert(k, BigRational::new(n.into(), d.into()));
    }
    gpu.copy_channels = rng.gen_range(1..=3);
    gpu.bandwidth = BigRational::from_integer(rng.gen_range(256..=4096).into());
    gpu.transfer_latency = [Millis::zero(), Millis::ratio(1, 10), Millis::ratio(1, 4)].choose(rng).unwrap().clone();
    Platform::new(vec![cpu, gpu]).expect("generated platform is valid")
}

pub fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dag = random_dag(&mut rng);
    let platform = random_platform(&dag, &mut rng);
    let delay = if rng.gen_bool(0.5) { Millis::zero() } else { Millis::ratio(1, 2) };
    Case { seed, dag, platform, delay }
}

pub const CORPUS_SIZE: u64 = 240;

pub fn corpus() -> Vec<Case> {
    (0..CORPUS_SIZE).map(|s| case(0x5eed_0000 + s)).collect()
}
