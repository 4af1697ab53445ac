//! Deterministic command-queue scheduling of data-parallel kernel DAGs on
//! simulated CPU/GPU platforms.

pub mod analysis;
pub mod audit;
pub mod cq;
pub mod fixtures;
pub mod report;
pub mod scheduler;
pub mod sim;
pub mod spec;
pub mod time;
pub mod workloads;

pub use analysis::{classify_edges, Analysis, CopyKind, EdgeClass, Locality, TaskComponent};
pub use audit::{audit_schedule, audit_work, AuditFailure};
pub use cq::{setup_cq, BuildError, Command, CommandKind, CommandQueueStructure, EventId, QueueBuilder};
pub use report::{makespan, ReportError};
pub use scheduler::{schedule, schedule_with, Policy, PolicyKind, SchedError, SchedulerConfig, SimTrace};
pub use sim::{PlatformSim, SimError, SimEvent};
pub use spec::{
    parse_profiles, parse_spec, BufferId, ComponentId, DagSpec, DeviceId, DeviceProfile, DeviceType, Edge, KernelId,
    Params, Platform, ProfileError, SpecError,
};
pub use time::Millis;
