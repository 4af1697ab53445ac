//! Generators for the transformer-head and fork-join DAGs, their synthetic
//! profiles, and the clustering configuration sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;
use serde::Serialize;

use crate::fixtures::simple_kernel;
use crate::report::makespan;
use crate::scheduler::{schedule, SchedError, SchedulerConfig};
use crate::spec::{
    DagSpec, DeviceId, DeviceProfile, DeviceType, Edge, KernelId, KernelSpec, Params, Platform, SpecError,
};
use crate::time::Millis;

pub const CPU: DeviceId = 0;
pub const GPU: DeviceId = 1;

/// Kernels per transformer head.
pub const HEAD_KERNELS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("configuration {mc}: {source}")]
    Sched { mc: String, source: SchedError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TcMode {
    #[default]
    PerHead,
    PerKernel,
}

impl FromStr for TcMode {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_head" | "per-head" => Ok(TcMode::PerHead),
            "per_kernel" | "per-kernel" => Ok(TcMode::PerKernel),
            _ => Err(WorkloadError::InvalidParam(format!("tc mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerConfig {
    pub heads: u32,
    pub beta: i64,
    pub mode: TcMode,
    pub q_gpu: u32,
    pub q_cpu: u32,
    /// The first `h_cpu` heads prefer the CPU, the rest the GPU.
    pub h_cpu: u32,
}

impl TransformerConfig {
    pub fn new(heads: u32, beta: i64) -> Self {
        TransformerConfig { heads, beta, mode: TcMode::PerHead, q_gpu: 1, q_cpu: 0, h_cpu: 0 }
    }

    pub fn queues(mut self, q_gpu: u32, q_cpu: u32) -> Self {
        self.q_gpu = q_gpu;
        self.q_cpu = q_cpu;
        self
    }

    pub fn cpu_heads(mut self, h_cpu: u32) -> Self {
        self.h_cpu = h_cpu;
        self
    }

    pub fn mode(mut self, mode: TcMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Role of a kernel inside its head, by `id % 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKernel {
    Gemm,
    Transpose,
    Softmax,
}

pub fn head_kernel(k: KernelId) -> HeadKernel {
    match k % HEAD_KERNELS {
        3 => HeadKernel::Transpose,
        4 => HeadKernel::Softmax,
        _ => HeadKernel::Gemm,
    }
}

/// One attention layer of `heads` independent heads. Per head (ids `8h..8h+7`):
///
/// ```text
/// L1  q = X Wq (0)   k = X Wk (1)   v = X Wv (2)
/// L2  t = transpose(k) (3)
/// L3  s = softmax(t) (4)
/// L4  a = q s (5)
/// L5  c = a v (6)
/// L6  o = c Wo (7)
/// ```
///
/// GEMMs take inputs at positions 0 and 1 and write position 2; transpose
/// and softmax read position 0 and write position 1. All matrices are
/// `beta x beta` float32. `X` is copied separately to each level-1 kernel.
pub fn gen_transformer(cfg: &TransformerConfig) -> Result<DagSpec, WorkloadError> {
    if cfg.heads == 0 {
        return Err(WorkloadError::InvalidParam("at least one head is required".into()));
    }
    if cfg.beta < 1 {
        return Err(WorkloadError::InvalidParam("beta must be positive".into()));
    }
    if cfg.h_cpu > cfg.heads {
        return Err(WorkloadError::InvalidParam(format!("h_cpu {} exceeds {} heads", cfg.h_cpu, cfg.heads)));
    }
    let names = ["gemm_q", "gemm_k", "gemm_v", "transpose", "softmax", "gemm_qk", "gemm_av", "gemm_out"];
    let mut kernels: Vec<KernelSpec> = Vec::new();
    let mut edges = Vec::new();
    let mut tc: Vec<Vec<KernelId>> = Vec::new();
    for h in 0..cfg.heads {
        let dev = if h < cfg.h_cpu { DeviceType::Cpu } else { DeviceType::Gpu };
        let b = h * HEAD_KERNELS;
        for (i, name) in names.iter().enumerate() {
            let k = b + i as u32;
            let mut spec = match head_kernel(k) {
                HeadKernel::Gemm => simple_kernel(k, name, dev, 2, 1, "N*N"),
                _ => simple_kernel(k, name, dev, 1, 1, "N*N"),
            };
            spec.src = format!("{}.cl", name.split('_').next().unwrap_or(name));
            kernels.push(spec);
        }
        edges.extend([
            Edge::new(b, 2, b + 5, 0),
            Edge::new(b + 1, 2, b + 3, 0),
            Edge::new(b + 3, 1, b + 4, 0),
            Edge::new(b + 4, 1, b + 5, 1),
            Edge::new(b + 5, 2, b + 6, 0),
            Edge::new(b + 2, 2, b + 6, 1),
            Edge::new(b + 6, 2, b + 7, 0),
        ]);
        match cfg.mode {
            TcMode::PerHead => tc.push((b..b + HEAD_KERNELS).collect()),
            TcMode::PerKernel => tc.extend((b..b + HEAD_KERNELS).map(|k| vec![k])),
        }
    }
    let cq = [(CPU, cfg.q_cpu), (GPU, cfg.q_gpu)].into_iter().collect();
    let params: Params = [("N".to_string(), cfg.beta)].into_iter().collect();
    Ok(DagSpec::new(kernels, edges, tc, cq, params)?)
}

fn rat(n: BigInt, d: BigInt) -> BigRational {
    BigRational::new(n, d)
}

/// Synthetic CPU/GPU profile for [`gen_transformer`] graphs of `heads` heads:
///
/// * GEMM: `4 (beta/256)^3` ms on the GPU with share 0.4, twenty times
///   longer on the CPU with share 0.5;
/// * transpose and softmax: `0.5 (beta/256)^2` ms on the GPU with share
///   0.1, `(beta/256)^2` ms on the CPU with share 0.25;
/// * GPU copies over 2 channels at 262144 bytes/ms with 0.01 ms latency.
pub fn transformer_profile(heads: u32, beta: i64) -> Platform {
    let r = rat(BigInt::from(beta), BigInt::from(256));
    let gemm_gpu = Millis::from_rational(&r * &r * &r * BigInt::from(4));
    let gemm_cpu = &gemm_gpu * &Millis::from_int(20);
    let light_cpu = Millis::from_rational(&r * &r);
    let light_gpu = &light_cpu * &Millis::ratio(1, 2);
    let share = |n: i64, d: i64| rat(n.into(), d.into());
    let mut cpu = DeviceProfile::new(CPU, DeviceType::Cpu);
    let mut gpu = DeviceProfile::new(GPU, DeviceType::Gpu);
    for k in 0..heads * HEAD_KERNELS {
        let (tc, tg, sc, sg) = match head_kernel(k) {
            HeadKernel::Gemm => (gemm_cpu.clone(), gemm_gpu.clone(), share(1, 2), share(2, 5)),
            _ => (light_cpu.clone(), light_gpu.clone(), share(1, 4), share(1, 10)),
        };
        cpu.kernel_times.insert(k, tc);
        cpu.kernel_share.insert(k, sc);
        gpu.kernel_times.insert(k, tg);
        gpu.kernel_share.insert(k, sg);
    }
    gpu.copy_channels = 2;
    gpu.bandwidth = BigRational::from_integer(262_144.into());
    gpu.transfer_latency = Millis::ratio(1, 100);
    Platform::new(vec![cpu, gpu]).expect("shipped profile is valid")
}

/// Buffer element count of the fork-join graph.
pub const FORKJOIN_N: i64 = 16;

/// The four-kernel fork-join `k0 -> {k1, k2} -> k3`. Every kernel takes two
/// inputs (positions 0, 1) and writes one output (position 2). `k0`'s output
/// feeds input 0 of both `k1` and `k2`; their outputs feed `k3`.
///
/// `devices[i]` is kernel `i`'s device type. `k1` and `k2` form one component
/// when they share a type; every other kernel is its own component. Both
/// devices get two queues.
pub fn gen_forkjoin(devices: [DeviceType; 4]) -> DagSpec {
    let kernels = (0..4u32).map(|k| simple_kernel(k, &format!("k{k}"), devices[k as usize], 2, 1, "N")).collect();
    let edges = vec![Edge::new(0, 2, 1, 0), Edge::new(0, 2, 2, 0), Edge::new(1, 2, 3, 0), Edge::new(2, 2, 3, 1)];
    let tc = if devices[1] == devices[2] {
        vec![vec![0], vec![1, 2], vec![3]]
    } else {
        vec![vec![0], vec![1], vec![2], vec![3]]
    };
    let cq = [(CPU, 2), (GPU, 2)].into_iter().collect();
    let params = [("N".to_string(), FORKJOIN_N)].into_iter().collect();
    DagSpec::new(kernels, edges, tc, cq, params).expect("fork-join is valid")
}

/// All 16 CPU/GPU assignments of the fork-join kernels; bit `i` of the index
/// set means kernel `i` runs on the GPU.
pub fn forkjoin_mappings() -> Vec<[DeviceType; 4]> {
    (0..16u32)
        .map(|m| std::array::from_fn(|i| if m >> i & 1 == 1 { DeviceType::Gpu } else { DeviceType::Cpu }))
        .collect()
}

pub const FORKJOIN_PROFILES: usize = 3;

/// Three synthetic fork-join profiles: `0` unit times and 1 ms copies; `1` a
/// GPU four times faster with one copy channel and slow transfers; `2`
/// uneven per-kernel times and partial shares.
pub fn forkjoin_profile(variant: usize) -> Platform {
    let mut cpu = DeviceProfile::new(CPU, DeviceType::Cpu);
    let mut gpu = DeviceProfile::new(GPU, DeviceType::Gpu);
    let bytes = FORKJOIN_N * 4;
    let ms = Millis::from_int;
    let share = |n: i64, d: i64| rat(n.into(), d.into());
    match variant % FORKJOIN_PROFILES {
        0 => {
            for k in 0..4 {
                cpu.kernel_times.insert(k, ms(1));
                gpu.kernel_times.insert(k, ms(1));
            }
            gpu.bandwidth = BigRational::from_integer(bytes.into());
        }
        1 => {
            for k in 0..4 {
                cpu.kernel_times.insert(k, ms(4));
                gpu.kernel_times.insert(k, ms(1));
                gpu.kernel_share.insert(k, share(1, 2));
            }
            gpu.copy_channels = 1;
            gpu.bandwidth = BigRational::from_integer((bytes / 2).into());
            gpu.transfer_latency = Millis::ratio(1, 4);
        }
        _ => {
            let c = [3, 5, 2, 4];
            let g = [Millis::from_int(1), Millis::from_int(2), Millis::ratio(3, 2), Millis::from_int(1)];
            let s = [share(1, 1), share(3, 4), share(3, 4), share(1, 2)];
            for k in 0..4u32 {
                cpu.kernel_times.insert(k, ms(c[k as usize]));
                cpu.kernel_share.insert(k, share(2, 3));
                gpu.kernel_times.insert(k, g[k as usize].clone());
                gpu.kernel_share.insert(k, s[k as usize].clone());
            }
            gpu.bandwidth = BigRational::from_integer((bytes * 2).into());
            gpu.transfer_latency = Millis::ratio(1, 10);
        }
    }
    Platform::new(vec![cpu, gpu]).expect("fork-join profile is valid")
}

/// Clustering configuration: GPU queues, CPU queues, heads on the CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Mc {
    pub q_gpu: u32,
    pub q_cpu: u32,
    pub h_cpu: u32,
}

impl Mc {
    pub const BASELINE: Mc = Mc { q_gpu: 1, q_cpu: 0, h_cpu: 0 };
}

impl fmt::Display for Mc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.q_gpu, self.q_cpu, self.h_cpu)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub heads: u32,
    pub beta: i64,
    pub q_gpu: Vec<u32>,
    pub q_cpu: Vec<u32>,
    pub h_cpu: Vec<u32>,
    pub callback_delay: Millis,
}

impl SweepSpec {
    /// Configurations to run: the baseline first, then the valid part of the
    /// cartesian product in `(h_cpu, q_gpu, q_cpu)` order. A configuration is
    /// valid when every device hosting a head has at least one queue.
    pub fn configurations(&self) -> Result<Vec<Mc>, WorkloadError> {
        if let Some(h) = self.h_cpu.iter().find(|h| **h > self.heads) {
            return Err(WorkloadError::InvalidParam(format!("h_cpu {h} exceeds {} heads", self.heads)));
        }
        let mut out = vec![Mc::BASELINE];
        for &h_cpu in &self.h_cpu {
            for &q_gpu in &self.q_gpu {
                for &q_cpu in &self.q_cpu {
                    let mc = Mc { q_gpu, q_cpu, h_cpu };
                    let gpu_ok = h_cpu == self.heads || q_gpu > 0;
                    let cpu_ok = h_cpu == 0 || q_cpu > 0;
                    if gpu_ok && cpu_ok && !out.contains(&mc) {
                        out.push(mc);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    pub mc: Mc,
    pub makespan: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepResult {
    /// `rows[0]` is the baseline.
    pub rows: Vec<SweepRow>,
    pub best: usize,
}

impl SweepResult {
    pub fn baseline(&self) -> &SweepRow {
        &self.rows[0]
    }

    pub fn best(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    /// Baseline makespan over the best makespan.
    pub fn speedup(&self) -> Millis {
        &self.baseline().makespan / &self.best().makespan
    }

    pub fn to_csv(&self) -> String {
        let base = &self.baseline().makespan;
        let mut out = String::from("q_gpu,q_cpu,h_cpu,mc,makespan_ms,speedup,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},\"{}\",{:.4},{:.4},{}\n",
                r.mc.q_gpu,
                r.mc.q_cpu,
                r.mc.h_cpu,
                r.mc,
                r.makespan.to_f64(),
                (base / &r.makespan).to_f64(),
                if i == self.best { "*" } else { "" }
            ));
        }
        out
    }
}

/// Makespan of the clustering policy on one transformer configuration.
pub fn run_clustering(
    heads: u32,
    beta: i64,
    mc: Mc,
    platform: &Platform,
    delay: &Millis,
) -> Result<Millis, WorkloadError> {
    let cfg = TransformerConfig::new(heads, beta).queues(mc.q_gpu, mc.q_cpu).cpu_heads(mc.h_cpu);
    let dag = gen_transformer(&cfg)?;
    let sched = SchedulerConfig::default().with_callback_delay(delay.clone());
    let trace =
        schedule(&dag, platform, &sched).map_err(|source| WorkloadError::Sched { mc: mc.to_string(), source })?;
    Ok(makespan(&trace).expect("a transformer trace is never empty"))
}

/// Runs clustering for every configuration of `spec` in parallel. The best
/// row is the one with the smallest makespan, earliest on ties.
pub fn sweep_clustering(spec: &SweepSpec, platform: &Platform) -> Result<SweepResult, WorkloadError> {
    let configs = spec.configurations()?;
    let rows = configs
        .par_iter()
        .map(|&mc| {
            run_clustering(spec.heads, spec.beta, mc, platform, &spec.callback_delay)
                .map(|makespan| SweepRow { mc, makespan })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let best =
        (0..rows.len()).min_by(|&a, &b| rows[a].makespan.cmp(&rows[b].makespan).then(a.cmp(&b))).expect("baseline row");
    Ok(SweepResult { rows, best })
}

/// Device types of the transformer kernels per head, useful for
/// re-targeting generated graphs.
pub fn head_devices(heads: u32, h_cpu: u32) -> BTreeMap<KernelId, DeviceType> {
    (0..heads * HEAD_KERNELS)
        .map(|k| (k, if k / HEAD_KERNELS < h_cpu { DeviceType::Cpu } else { DeviceType::Gpu }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{classify_edges, Locality};

    #[test]
    fn single_head_is_one_component_without_inter_edges() {
        let dag = gen_transformer(&TransformerConfig::new(1, 256)).unwrap();
        assert_eq!(dag.kernels().len(), 8);
        assert_eq!(dag.tc().len(), 1);
        assert!(classify_edges(&dag).edges.values().all(|l| *l == Locality::Intra));
        assert_eq!(dag.buffer_bytes(crate::spec::BufferId { kernel: 0, pos: 0 }).unwrap(), 256 * 256 * 4);
    }

    #[test]
    fn per_kernel_mode_makes_singletons() {
        let dag = gen_transformer(&TransformerConfig::new(2, 64).mode(TcMode::PerKernel)).unwrap();
        assert_eq!(dag.tc().len(), 16);
    }

    #[test]
    fn sixteen_heads_have_48_independent_level_one_gemms() {
        let dag = gen_transformer(&TransformerConfig::new(16, 64)).unwrap();
        let sources = dag.kernel_ids().filter(|k| dag.predecessors(*k).is_empty()).count();
        assert_eq!(sources, 48);
    }

    #[test]
    fn cpu_heads_come_first() {
        let dag = gen_transformer(&TransformerConfig::new(3, 64).cpu_heads(1).queues(2, 1)).unwrap();
        assert_eq!(dag.kernel(7).unwrap().dev, DeviceType::Cpu);
        assert_eq!(dag.kernel(8).unwrap().dev, DeviceType::Gpu);
        assert_eq!(head_devices(3, 1)[&7], DeviceType::Cpu);
    }

    #[test]
    fn invalid_transformer_params() {
        assert!(gen_transformer(&TransformerConfig::new(0, 64)).is_err());
        assert!(gen_transformer(&TransformerConfig::new(1, 0)).is_err());
        assert!(gen_transformer(&TransformerConfig::new(1, 64).cpu_heads(2)).is_err());
    }

    #[test]
    fn shipped_profile_scales_with_beta() {
        let p = transformer_profile(1, 512);
        assert_eq!(p.time(0, GPU).unwrap(), &Millis::from_int(32));
        assert_eq!(p.time(0, CPU).unwrap(), &Millis::from_int(640));
        assert_eq!(p.time(3, GPU).unwrap(), &Millis::from_int(2));
    }

    #[test]
    fn forkjoin_shape() {
        let dag = gen_forkjoin([DeviceType::Cpu, DeviceType::Gpu, DeviceType::Gpu, DeviceType::Cpu]);
        assert_eq!(dag.tc().len(), 3);
        assert_eq!(dag.topo_order(), vec![0, 1, 2, 3]);
        assert_eq!(forkjoin_mappings().len(), 16);
        let split = gen_forkjoin([DeviceType::Cpu, DeviceType::Gpu, DeviceType::Cpu, DeviceType::Cpu]);
        assert_eq!(split.tc().len(), 4);
    }

    #[test]
    fn sweep_configurations() {
        let spec = SweepSpec {
            heads: 1,
            beta: 64,
            q_gpu: vec![1, 2, 3],
            q_cpu: vec![0, 1],
            h_cpu: vec![0, 1],
            callback_delay: Millis::zero(),
        };
        let c = spec.configurations().unwrap();
        assert_eq!(c[0], Mc::BASELINE);
        // h_cpu=0: 3x2 grid; h_cpu=1 (all heads on cpu): q_cpu must be 1
        assert_eq!(c.len(), 6 + 3);
        let bad = SweepSpec { h_cpu: vec![2], ..spec };
        assert!(bad.configurations().is_err());
    }

    #[test]
    fn sweep_finds_a_faster_configuration() {
        let spec = SweepSpec {
            heads: 1,
            beta: 256,
            q_gpu: vec![1, 2, 3],
            q_cpu: vec![0],
            h_cpu: vec![0],
            callback_delay: Millis::zero(),
        };
        let r = sweep_clustering(&spec, &transformer_profile(1, 256)).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.speedup() > Millis::one());
        assert!(r.to_csv().lines().any(|l| l.ends_with('*')));
    }
}
