use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cqsched_core::report::{compare, comparison_csv, gantt_svg, gantt_text, trace_ndjson};
use cqsched_core::spec::{profiles_to_json, to_json};
use cqsched_core::workloads::{
    forkjoin_mappings, forkjoin_profile, gen_forkjoin, gen_transformer, sweep_clustering, transformer_profile,
    SweepSpec, TcMode, TransformerConfig, FORKJOIN_N,
};
use cqsched_core::{
    makespan, parse_profiles, parse_spec, Analysis, DagSpec, Millis, Params, Platform, PolicyKind, SchedulerConfig,
    SimTrace,
};

#[derive(Parser)]
#[command(name = "cqsched", version, about = "Command-queue scheduling of kernel DAGs on simulated CPU/GPU platforms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a spec and print its component classification.
    Validate {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Schedule a spec with one policy.
    Run {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value = "clustering")]
        policy: PolicyKind,
        #[arg(long, value_enum, default_value_t = Gantt::None)]
        gantt: Gantt,
        /// Column width of the text Gantt chart in ms (default: makespan/100).
        #[arg(long)]
        quantum: Option<Millis>,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Schedule a spec with several policies and print a comparison table.
    Compare {
        #[command(flatten)]
        input: Input,
        /// Policies to run; the first is the speedup baseline.
        #[arg(long = "policy", required = true, value_delimiter = ',')]
        policies: Vec<PolicyKind>,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep clustering queue configurations of the transformer workload.
    Sweep {
        #[arg(long)]
        heads: u32,
        #[arg(long, default_value_t = 256)]
        beta: i64,
        /// Profile document; defaults to the built-in transformer profile.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long = "sweep-qgpu", default_value = "1-5", value_parser = parse_range)]
        q_gpu: Counts,
        #[arg(long = "sweep-qcpu", default_value = "0", value_parser = parse_range)]
        q_cpu: Counts,
        #[arg(long = "sweep-hcpu", default_value = "0", value_parser = parse_range)]
        h_cpu: Counts,
        #[arg(long = "callback-delay", default_value = "0")]
        callback_delay: Millis,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write generated spec or profile documents.
    Gen {
        #[command(subcommand)]
        what: Gen,
    },
}

#[derive(Subcommand)]
enum Gen {
    /// One transformer layer; sizes use the parameter `N` (= beta).
    Transformer {
        #[arg(long)]
        heads: u32,
        #[arg(long, default_value_t = 256)]
        beta: i64,
        #[arg(long, default_value_t = 1)]
        q_gpu: u32,
        #[arg(long, default_value_t = 0)]
        q_cpu: u32,
        #[arg(long, default_value_t = 0)]
        h_cpu: u32,
        #[arg(long, default_value = "per-head")]
        mode: TcMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// The four-kernel fork-join graph; bit i of the mapping puts kernel i on the GPU.
    Forkjoin {
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..16))]
        mapping: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// A built-in profile document.
    Profile {
        #[arg(value_enum)]
        kind: ProfileKind,
        /// Heads of the transformer profile.
        #[arg(long, default_value_t = 1)]
        heads: u32,
        #[arg(long, default_value_t = 256)]
        beta: i64,
        #[arg(long, default_value_t = 0)]
        variant: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileKind {
    Transformer,
    Forkjoin,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Gantt {
    Svg,
    Text,
    None,
}

#[derive(Args)]
struct ParamArgs {
    /// Parameter bindings, e.g. `--params N=256 M=64`.
    #[arg(long, num_args = 1.., value_parser = parse_binding)]
    params: Vec<(String, i64)>,
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct SchedArgs {
    /// Host notification latency in ms.
    #[arg(long = "callback-delay", default_value = "0")]
    callback_delay: Millis,
    /// Let HEFT hold components for a busy device that finishes them earlier.
    #[arg(long = "heft-waits")]
    heft_waits: bool,
}

impl SchedArgs {
    fn config(&self, policy: PolicyKind) -> SchedulerConfig {
        SchedulerConfig::new(policy).with_callback_delay(self.callback_delay.clone()).with_heft_waits(self.heft_waits)
    }
}

fn parse_binding(s: &str) -> Result<(String, i64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let v = v.trim().parse().map_err(|_| format!("`{v}` is not an integer"))?;
    Ok((k.trim().to_string(), v))
}

#[derive(Clone)]
struct Counts(Vec<u32>);

/// `3`, `1-5` or `0,2,4`.
fn parse_range(s: &str) -> Result<Counts, String> {
    let num = |t: &str| t.trim().parse::<u32>().map_err(|_| format!("`{t}` is not a count"));
    if let Some((a, b)) = s.split_once('-') {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty range `{s}`"));
        }
        return Ok(Counts((a..=b).collect()));
    }
    s.split(',').map(num).collect::<Result<_, _>>().map(Counts)
}

enum Failure {
    Input(anyhow::Error),
    Sched(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn sched<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Sched(e.into()))
}

fn params(p: &ParamArgs) -> Params {
    p.params.iter().cloned().collect()
}

fn load_spec(path: &Path, p: &ParamArgs) -> anyhow::Result<DagSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_spec(&text, &params(p)).with_context(|| format!("in {}", path.display()))
}

fn load_profiles(path: &Path) -> anyhow::Result<Platform> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_profiles(&text).with_context(|| format!("in {}", path.display()))
}

fn load(input: &Input) -> anyhow::Result<(DagSpec, Platform)> {
    Ok((load_spec(&input.spec, &input.params)?, load_profiles(&input.profiles)?))
}

fn write(dir: &Path, name: &str, body: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn write_file(path: &Path, body: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn list<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let v: Vec<String> = items.into_iter().map(|x| x.to_string()).collect();
    format!("[{}]", v.join(", "))
}

fn validate(spec: &Path, p: &ParamArgs) -> Result<(), Failure> {
    let dag = load_spec(spec, p)?;
    let a = Analysis::new(&dag);
    println!("{} kernels, {} edges, {} components", dag.kernels().len(), dag.edges().len(), a.components().len());
    for t in a.components() {
        println!(
            "component {} ({}): kernels {} front {} end {} in {}",
            t.id,
            t.dev_pref,
            list(&t.kernels),
            list(&t.front),
            list(&t.end),
            list(&t.interior)
        );
    }
    let c = a.classes();
    for (e, loc) in &c.edges {
        println!("edge {} -> {}: {}", e.src, e.dst, lower(loc));
    }
    for (b, k) in &c.writes {
        println!("write {b}: {}", lower(k));
    }
    for (b, k) in &c.reads {
        println!("read {b}: {}", lower(k));
    }
    Ok(())
}

fn lower(v: &impl std::fmt::Debug) -> String {
    format!("{v:?}").to_lowercase()
}

fn gantt(trace: &SimTrace, kind: Gantt, quantum: Option<&Millis>) -> anyhow::Result<Option<(String, &'static str)>> {
    Ok(match kind {
        Gantt::None => None,
        Gantt::Svg => Some((gantt_svg(trace)?, "gantt.svg")),
        Gantt::Text => {
            let q = match quantum {
                Some(q) => q.clone(),
                None => {
                    let m = makespan(trace)?;
                    if m.is_zero() {
                        Millis::one()
                    } else {
                        &m / &Millis::from_int(100)
                    }
                }
            };
            Some((gantt_text(trace, &q)?, "gantt.txt"))
        }
    })
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Validate { spec, params } => validate(&spec, &params),
        Cmd::Run { input, policy, gantt: kind, quantum, sched: s, out } => {
            let (dag, platform) = load(&input)?;
            let trace = sched(cqsched_core::schedule(&dag, &platform, &s.config(policy)))?;
            let m = makespan(&trace)?;
            let chart = gantt(&trace, kind, quantum.as_ref())?;
            match &out {
                Some(dir) => {
                    write(dir, "trace.ndjson", &trace_ndjson(&trace))?;
                    if let Some((body, name)) = &chart {
                        write(dir, name, body)?;
                    }
                }
                None => {
                    if let Some((body, _)) = &chart {
                        print!("{body}");
                    }
                }
            }
            println!("policy {policy} makespan {m} ms");
            Ok(())
        }
        Cmd::Compare { input, policies, sched: s, out } => {
            let (dag, platform) = load(&input)?;
            let mut runs = Vec::new();
            for p in policies {
                let trace = sched(cqsched_core::schedule(&dag, &platform, &s.config(p)))?;
                runs.push((p.to_string(), makespan(&trace)?));
            }
            let csv = comparison_csv(&compare(&runs)?);
            if let Some(dir) = &out {
                write(dir, "compare.csv", &csv)?;
            }
            print!("{csv}");
            Ok(())
        }
        Cmd::Sweep { heads, beta, profiles, q_gpu, q_cpu, h_cpu, callback_delay, out } => {
            if heads == 0 || beta <= 0 {
                return Err(Failure::Input(anyhow!("heads and beta must be positive")));
            }
            let platform = match &profiles {
                Some(p) => load_profiles(p)?,
                None => transformer_profile(heads, beta),
            };
            let spec = SweepSpec { heads, beta, q_gpu: q_gpu.0, q_cpu: q_cpu.0, h_cpu: h_cpu.0, callback_delay };
            spec.configurations()?;
            let r = sched(sweep_clustering(&spec, &platform))?;
            let csv = r.to_csv();
            if let Some(dir) = &out {
                write(dir, "sweep.csv", &csv)?;
            }
            print!("{csv}");
            println!("best {} makespan {} ms speedup {:.4}", r.best().mc, r.best().makespan, r.speedup().to_f64());
            Ok(())
        }
        Cmd::Gen { what } => generate(what),
    }
}

fn generate(what: Gen) -> Result<(), Failure> {
    match what {
        Gen::Transformer { heads, beta, q_gpu, q_cpu, h_cpu, mode, out } => {
            let cfg = TransformerConfig { heads, beta, mode, q_gpu, q_cpu, h_cpu };
            let dag = gen_transformer(&cfg)?;
            write_file(&out, &to_json(&dag))?;
            eprintln!("wrote {}; run it with --params N={beta}", out.display());
        }
        Gen::Forkjoin { mapping, out } => {
            let dag = gen_forkjoin(forkjoin_mappings()[mapping as usize]);
            write_file(&out, &to_json(&dag))?;
            eprintln!("wrote {}; run it with --params N={FORKJOIN_N}", out.display());
        }
        Gen::Profile { kind, heads, beta, variant, out } => {
            let platform = match kind {
                ProfileKind::Transformer => {
                    if heads == 0 || beta <= 0 {
                        return Err(Failure::Input(anyhow!("heads and beta must be positive")));
                    }
                    transformer_profile(heads, beta)
                }
                ProfileKind::Forkjoin => forkjoin_profile(variant),
            };
            write_file(&out, &profiles_to_json(&platform))?;
        }
    }
    Ok(())
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Sched(e)) => {
            eprintln!("scheduling error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
