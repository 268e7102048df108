//! Provisioning plans, MPI launch envelopes, and the job lifecycle.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    select_instance, CatalogSnapshot, FamilyClass, InstanceType, ResourceRequirements,
    SelectionError,
};
use crate::governance::ReservationId;
use crate::workflow::{EnvironmentSpec, ParameterSet, TemplateVersion};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Local,
    #[default]
    Simulated,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Backend::Local),
            "simulated" | "sim" => Ok(Backend::Simulated),
            other => Err(format!(
                "unknown backend {other:?} (expected local or simulated)"
            )),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Local => "local",
            Backend::Simulated => "simulated",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutionError {
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error("num_nodes must be >= 1")]
    InvalidNodeCount,
    #[error("np must be >= 1")]
    InvalidRankCount,
    #[error("np={np} exceeds the {slots} slots provisioned")]
    InsufficientSlots { np: u32, slots: u32 },
    #[error("np={np} leaves some of the {nodes} nodes without ranks")]
    IdleNodes { np: u32, nodes: u32 },
    #[error("invalid transition: {event:?} in state {state:?}")]
    InvalidTransition { state: JobState, event: JobEvent },
    #[error("malformed hostfile line {line}: {text:?}")]
    MalformedHostfile { line: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisioningPlan {
    pub instance: InstanceType,
    pub num_nodes: u32,
    pub total_slots: u32,
    pub backend: Backend,
    #[serde(default)]
    pub rationale: String,
}

pub fn plan_provisioning(
    req: &ResourceRequirements,
    snapshot: &CatalogSnapshot,
    backend: Backend,
) -> Result<ProvisioningPlan, ExecutionError> {
    if req.num_nodes < 1 {
        return Err(ExecutionError::InvalidNodeCount);
    }
    let selection = select_instance(req, snapshot)?;
    Ok(ProvisioningPlan {
        total_slots: req.num_nodes * selection.instance.vcpus,
        num_nodes: req.num_nodes,
        instance: selection.instance,
        backend,
        rationale: selection.rationale,
    })
}

/// Two-dimensional process grid with `nx <= ny` and `nx * ny = np`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessGrid {
    pub nx: u32,
    pub ny: u32,
}

impl fmt::Display for ProcessGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.nx, self.ny)
    }
}

/// Largest divisor of `np` not exceeding its square root, paired with the cofactor.
///
/// `np = 0` is treated as 1.
pub fn decompose_grid(np: u32) -> ProcessGrid {
    let np = np.max(1);
    let nx = (1..=np.isqrt())
        .rev()
        .find(|d| np.is_multiple_of(*d))
        .unwrap_or(1);
    ProcessGrid { nx, ny: np / nx }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankPlacement {
    pub rank: u32,
    pub node_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpiPlan {
    pub np: u32,
    pub grid: ProcessGrid,
    pub hostfile_text: String,
    pub rank_map: Vec<RankPlacement>,
    /// Ranks assigned to each node; this is what the hostfile advertises.
    pub slots_per_node: Vec<u32>,
    /// Fabric and launcher settings, e.g. `interconnect=efa` on hpc-class nodes.
    pub runtime_env: BTreeMap<String, String>,
}

pub fn node_hostname(index: u32) -> String {
    format!("node-{index}")
}

/// Even block-contiguous split: earlier nodes take the larger share.
pub fn rank_shares(np: u32, num_nodes: u32) -> Vec<u32> {
    let base = np / num_nodes;
    let extra = np % num_nodes;
    (0..num_nodes)
        .map(|i| base + u32::from(i < extra))
        .collect()
}

pub fn build_mpi_envelope(np: u32, plan: &ProvisioningPlan) -> Result<MpiPlan, ExecutionError> {
    if np < 1 {
        return Err(ExecutionError::InvalidRankCount);
    }
    if plan.num_nodes < 1 {
        return Err(ExecutionError::InvalidNodeCount);
    }
    if np > plan.total_slots {
        return Err(ExecutionError::InsufficientSlots {
            np,
            slots: plan.total_slots,
        });
    }
    if np < plan.num_nodes {
        return Err(ExecutionError::IdleNodes {
            np,
            nodes: plan.num_nodes,
        });
    }

    let shares = rank_shares(np, plan.num_nodes);
    let mut rank_map = Vec::with_capacity(np as usize);
    let mut hostfile_text = String::new();
    let mut next_rank = 0;
    for (node, &share) in shares.iter().enumerate() {
        let node = node as u32;
        hostfile_text.push_str(&format!("{} slots={share}\n", node_hostname(node)));
        rank_map.extend((next_rank..next_rank + share).map(|rank| RankPlacement {
            rank,
            node_index: node,
        }));
        next_rank += share;
    }

    let grid = decompose_grid(np);
    let mut runtime_env = BTreeMap::new();
    runtime_env.insert("STRATUS_NP".to_string(), np.to_string());
    runtime_env.insert(
        "STRATUS_GRID".to_string(),
        format!("{}x{}", grid.nx, grid.ny),
    );
    if plan.instance.family_class == FamilyClass::Hpc {
        runtime_env.insert("interconnect".to_string(), "efa".to_string());
        runtime_env.insert("FI_PROVIDER".to_string(), "efa".to_string());
    } else {
        runtime_env.insert("interconnect".to_string(), "tcp".to_string());
    }

    Ok(MpiPlan {
        np,
        grid,
        hostfile_text,
        rank_map,
        slots_per_node: shares,
        runtime_env,
    })
}

/// Parses `hostname slots=N` lines. Blank lines and `#` comments are skipped.
pub fn parse_hostfile(text: &str) -> Result<Vec<(String, u32)>, ExecutionError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || ExecutionError::MalformedHostfile {
            line: i + 1,
            text: raw.to_string(),
        };
        let mut parts = line.split_whitespace();
        let host = parts.next().ok_or_else(bad)?;
        let slots = match parts.next() {
            Some(kv) => kv
                .strip_prefix("slots=")
                .and_then(|n| n.parse::<u32>().ok())
                .ok_or_else(bad)?,
            None => 1,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        out.push((host.to_string(), slots));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Provisioning,
    Setup,
    Running,
    Collecting,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub const ALL: [JobState; 8] = [
        JobState::Queued,
        JobState::Provisioning,
        JobState::Setup,
        JobState::Running,
        JobState::Collecting,
        JobState::Succeeded,
        JobState::Failed,
        JobState::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Succeeded | JobState::Failed | JobState::Cancelled
        )
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobEvent {
    ProvisionStarted,
    NodesReady,
    SetupDone,
    RunCompleted,
    OutputsStored,
    ErrorRaised,
    CancelRequested,
}

impl JobEvent {
    pub const ALL: [JobEvent; 7] = [
        JobEvent::ProvisionStarted,
        JobEvent::NodesReady,
        JobEvent::SetupDone,
        JobEvent::RunCompleted,
        JobEvent::OutputsStored,
        JobEvent::ErrorRaised,
        JobEvent::CancelRequested,
    ];
}

pub fn transition(current: JobState, event: JobEvent) -> Result<JobState, ExecutionError> {
    use JobEvent as E;
    use JobState as S;
    let next = match (current, event) {
        (s, _) if s.is_terminal() => None,
        (S::Queued, E::ProvisionStarted) => Some(S::Provisioning),
        (S::Provisioning, E::NodesReady) => Some(S::Setup),
        (S::Setup, E::SetupDone) => Some(S::Running),
        (S::Running, E::RunCompleted) => Some(S::Collecting),
        (S::Collecting, E::OutputsStored) => Some(S::Succeeded),
        (_, E::ErrorRaised) => Some(S::Failed),
        (_, E::CancelRequested) => Some(S::Cancelled),
        _ => None,
    };
    next.ok_or(ExecutionError::InvalidTransition {
        state: current,
        event,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub String);

impl JobId {
    pub fn new() -> Self {
        JobId(uuid::Uuid::new_v4().to_string())
    }
}

impl Default for JobId {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub at: DateTime<Utc>,
    pub event: JobEvent,
    pub from: JobState,
    pub to: JobState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub template_version: TemplateVersion,
    pub environment: EnvironmentSpec,
    pub parameters: ParameterSet,
    pub plan: ProvisioningPlan,
    pub mpi: Option<MpiPlan>,
    pub state: JobState,
    pub submitted_at: DateTime<Utc>,
    pub transitions: Vec<TransitionRecord>,
    pub budget_reservation: Option<ReservationId>,
}

impl Job {
    pub fn new(
        template_version: TemplateVersion,
        environment: EnvironmentSpec,
        parameters: ParameterSet,
        plan: ProvisioningPlan,
        mpi: Option<MpiPlan>,
        submitted_at: DateTime<Utc>,
    ) -> Job {
        Job {
            id: JobId::new(),
            template_version,
            environment,
            parameters,
            plan,
            mpi,
            state: JobState::Queued,
            submitted_at,
            transitions: Vec::new(),
            budget_reservation: None,
        }
    }

    /// Applies `event` and appends it to the log. Timestamps are forced to be
    /// strictly increasing.
    pub fn apply(
        &mut self,
        event: JobEvent,
        at: DateTime<Utc>,
    ) -> Result<&TransitionRecord, ExecutionError> {
        let to = transition(self.state, event)?;
        let floor = self
            .transitions
            .last()
            .map_or(self.submitted_at, |t| t.at + Duration::microseconds(1));
        self.transitions.push(TransitionRecord {
            at: at.max(floor),
            event,
            from: self.state,
            to,
        });
        self.state = to;
        Ok(self.transitions.last().expect("just pushed"))
    }

    /// Folds the event log over the transition table from `Queued`.
    pub fn replay(&self) -> Result<JobState, ExecutionError> {
        self.transitions
            .iter()
            .try_fold(JobState::Queued, |s, t| transition(s, t.event))
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::fixture_catalog;

    fn hpc_plan(name: &str, nodes: u32) -> ProvisioningPlan {
        let req = ResourceRequirements {
            instance_type: Some(name.into()),
            num_nodes: nodes,
            ..Default::default()
        };
        plan_provisioning(&req, &fixture_catalog(), Backend::Simulated).unwrap()
    }

    #[test]
    fn explicit_hpc_plan_has_96_slots() {
        let plan = hpc_plan("hpc7a.12xlarge", 4);
        assert_eq!(plan.num_nodes, 4);
        assert_eq!(plan.total_slots, 96);
    }

    #[test]
    fn capability_plan_picks_g6() {
        let req = ResourceRequirements {
            min_gpus: Some(1),
            min_memory_gib: Some(32.0),
            ..Default::default()
        };
        let plan = plan_provisioning(&req, &fixture_catalog(), Backend::Local).unwrap();
        assert_eq!(plan.instance.name, "g6.2xlarge");
        assert_eq!(plan.num_nodes, 1);
        assert_eq!(plan.total_slots, 8);
    }

    #[test]
    fn zero_nodes_rejected() {
        let req = ResourceRequirements {
            num_nodes: 0,
            ..Default::default()
        };
        assert_eq!(
            plan_provisioning(&req, &fixture_catalog(), Backend::Local),
            Err(ExecutionError::InvalidNodeCount)
        );
    }

    #[test]
    fn grids_for_small_counts() {
        assert_eq!(decompose_grid(1), ProcessGrid { nx: 1, ny: 1 });
        assert_eq!(decompose_grid(7), ProcessGrid { nx: 1, ny: 7 });
        assert_eq!(decompose_grid(24), ProcessGrid { nx: 4, ny: 6 });
    }

    #[test]
    fn envelope_96_over_four_nodes() {
        let mpi = build_mpi_envelope(96, &hpc_plan("hpc7a.12xlarge", 4)).unwrap();
        assert_eq!(
            mpi.hostfile_text,
            "node-0 slots=24\nnode-1 slots=24\nnode-2 slots=24\nnode-3 slots=24\n"
        );
        assert_eq!(mpi.grid, ProcessGrid { nx: 8, ny: 12 });
        assert!(mpi.rank_map[..24].iter().all(|p| p.node_index == 0));
        assert!(mpi.rank_map[24..48].iter().all(|p| p.node_index == 1));
        assert_eq!(
            mpi.rank_map[95],
            RankPlacement {
                rank: 95,
                node_index: 3
            }
        );
        assert_eq!(mpi.runtime_env["interconnect"], "efa");
    }

    #[test]
    fn envelope_single_node() {
        let mpi = build_mpi_envelope(8, &hpc_plan("hpc7a.48xlarge", 1)).unwrap();
        assert_eq!(mpi.hostfile_text, "node-0 slots=8\n");
        assert_eq!(mpi.grid, ProcessGrid { nx: 2, ny: 4 });
    }

    #[test]
    fn envelope_uneven_split() {
        let mpi = build_mpi_envelope(10, &hpc_plan("hpc7a.12xlarge", 4)).unwrap();
        assert_eq!(mpi.slots_per_node, [3, 3, 2, 2]);
    }

    #[test]
    fn envelope_errors() {
        let plan = hpc_plan("hpc7a.12xlarge", 4);
        assert_eq!(
            build_mpi_envelope(97, &plan),
            Err(ExecutionError::InsufficientSlots { np: 97, slots: 96 })
        );
        assert_eq!(
            build_mpi_envelope(3, &plan),
            Err(ExecutionError::IdleNodes { np: 3, nodes: 4 })
        );
        assert_eq!(
            build_mpi_envelope(0, &plan),
            Err(ExecutionError::InvalidRankCount)
        );
    }

    #[test]
    fn hostfile_parser_accepts_comments_and_rejects_junk() {
        let hosts = parse_hostfile("# cluster\nnode-0 slots=4\n\nnode-1\n").unwrap();
        assert_eq!(hosts, vec![("node-0".into(), 4), ("node-1".into(), 1)]);
        assert!(matches!(
            parse_hostfile("node-0 cpus=4\n"),
            Err(ExecutionError::MalformedHostfile { line: 1, .. })
        ));
    }

    #[test]
    fn transition_table_rows() {
        assert_eq!(
            transition(JobState::Queued, JobEvent::ProvisionStarted),
            Ok(JobState::Provisioning)
        );
        assert!(matches!(
            transition(JobState::Succeeded, JobEvent::ProvisionStarted),
            Err(ExecutionError::InvalidTransition { .. })
        ));
        assert_eq!(
            transition(JobState::Running, JobEvent::CancelRequested),
            Ok(JobState::Cancelled)
        );
    }

    #[test]
    fn job_log_replays_to_state() {
        let plan = hpc_plan("hpc7a.12xlarge", 1);
        let t0 = Utc::now();
        let mut job = Job::new(
            TemplateVersion {
                name: "t".into(),
                version: 1,
            },
            EnvironmentSpec::default(),
            ParameterSet::default(),
            plan,
            None,
            t0,
        );
        for e in [
            JobEvent::ProvisionStarted,
            JobEvent::NodesReady,
            JobEvent::SetupDone,
        ] {
            // same timestamp for every event; the log must still be strictly ordered
            job.apply(e, t0).unwrap();
        }
        assert_eq!(job.state, JobState::Running);
        assert_eq!(job.replay(), Ok(JobState::Running));
        assert!(job.transitions.windows(2).all(|w| w[0].at < w[1].at));
        assert!(job.apply(JobEvent::OutputsStored, t0).is_err());
        assert_eq!(job.transitions.len(), 3);
    }
}
