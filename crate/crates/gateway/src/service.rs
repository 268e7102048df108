//! The orchestrator behind both the CLI and the HTTP API.
//!
//! Admission (permission, feasibility, budget) runs synchronously inside
//! [`Gateway::submit`]; the only mutation it performs is the budget
//! reservation, which comes last, so a rejected request leaves no trace. An
//! admitted job is stored in `Queued` and driven through the state machine by a
//! background task that holds one of `worker_limit` permits while it runs.
//!
//! Every transition is appended to the job's event history and broadcast to
//! live subscribers while the job's lock is held, so a subscriber that takes
//! the history and a receiver under the same lock sees each event exactly once.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use futures::Stream;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use stratus_core::backends::{
    local_execute, sim_execute, sim_provision, ExecutionOutcome, ExitStatus, LocalError,
    LocalOptions, SimError, SimParams,
};
use stratus_core::catalog::{estimate_cost, CatalogSnapshot, ResourceRequirements, SelectionError};
use stratus_core::execution::{
    build_mpi_envelope, plan_provisioning, Backend, ExecutionError, Job, JobEvent, JobId, JobState,
    MpiPlan, ProvisioningPlan,
};
use stratus_core::governance::{
    Action, Budget, Decision, Governance, GovernanceConfig, GovernanceError, ResourceKind,
    ResourceRef,
};
use stratus_core::results::{
    record_run, sha256_hex, OutputDigest, ProvenanceRecord, RecordStore, ResultsError,
};
use stratus_core::workflow::{
    fixture_templates, render_commands, resolve_parameters_from_text, ExecutablePlan, ParamValue,
    TemplateRegistry, TemplateVersion, WorkflowError, WorkflowTemplate,
};
use stratus_core::Money;
use thiserror::Error;
use tokio::sync::{broadcast, watch, Semaphore};

use crate::cli::RunRequest;
use crate::config::{ConfigError, GatewayConfig};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("budget exhausted: requested {requested}, headroom {headroom}")]
    BudgetExhausted { requested: Money, headroom: Money },
    #[error("workspace {0} has no budget to charge")]
    NoBudget(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Execution(ExecutionError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Governance(GovernanceError),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} is already {1}")]
    JobAlreadyTerminal(String, JobState),
    #[error("no provenance record for job {0}")]
    NoRecord(String),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("storage: {0}")]
    Storage(String),
}

impl From<ExecutionError> for GatewayError {
    fn from(e: ExecutionError) -> Self {
        match e {
            ExecutionError::Selection(s) => GatewayError::Selection(s),
            other => GatewayError::Execution(other),
        }
    }
}

impl From<GovernanceError> for GatewayError {
    fn from(e: GovernanceError) -> Self {
        match e {
            GovernanceError::BudgetExhausted {
                requested,
                headroom,
            } => GatewayError::BudgetExhausted {
                requested,
                headroom,
            },
            other => GatewayError::Governance(other),
        }
    }
}

impl GatewayError {
    /// Stable machine-readable error class.
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::PermissionDenied(_) => "permission_denied",
            GatewayError::BudgetExhausted { .. } | GatewayError::NoBudget(_) => "budget_exhausted",
            GatewayError::Selection(_) => "no_feasible_instance",
            GatewayError::Execution(_) => "invalid_plan",
            GatewayError::Workflow(WorkflowError::NotFound(_)) => "not_found",
            GatewayError::Workflow(_) => "invalid_request",
            GatewayError::Governance(
                GovernanceError::UnknownWorkspace(_) | GovernanceError::UnknownBudget(_),
            ) => "not_found",
            GatewayError::Governance(_) => "invalid_request",
            GatewayError::UnknownJob(_) | GatewayError::NoRecord(_) => "not_found",
            GatewayError::Results(ResultsError::NotFound(_)) => "not_found",
            GatewayError::JobAlreadyTerminal(..) => "conflict",
            GatewayError::Results(_) | GatewayError::Config(_) | GatewayError::Storage(_) => {
                "internal"
            }
        }
    }
}

/// One entry in a job's status history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub state: JobState,
    #[serde(default)]
    pub log_lines: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JobEntry {
    job: Job,
    principal: String,
    workspace: String,
    budget: String,
    commands: ExecutablePlan,
    estimate: Money,
    events: Vec<StatusEvent>,
    log: String,
    wall_time_hours: Option<f64>,
    cost: Option<Money>,
    record_id: Option<String>,
    error: Option<String>,
}

/// Full job description returned by status queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: JobId,
    pub state: JobState,
    pub principal: String,
    pub workspace: String,
    pub template_version: TemplateVersion,
    pub parameters: BTreeMap<String, ParamValue>,
    pub commands: ExecutablePlan,
    pub plan: ProvisioningPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpi: Option<MpiPlan>,
    pub budget: String,
    pub estimate: Money,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub submitted_at: DateTime<Utc>,
    pub events: Vec<StatusEvent>,
}

impl From<&JobEntry> for JobView {
    fn from(e: &JobEntry) -> Self {
        JobView {
            id: e.job.id.clone(),
            state: e.job.state,
            principal: e.principal.clone(),
            workspace: e.workspace.clone(),
            template_version: e.job.template_version.clone(),
            parameters: e.job.parameters.values.clone(),
            commands: e.commands.clone(),
            plan: e.job.plan.clone(),
            mpi: e.job.mpi.clone(),
            budget: e.budget.clone(),
            estimate: e.estimate,
            cost: e.cost,
            wall_time_hours: e.wall_time_hours,
            record_id: e.record_id.clone(),
            error: e.error.clone(),
            submitted_at: e.job.submitted_at,
            events: e.events.clone(),
        }
    }
}

/// Row in a job listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub id: JobId,
    pub template_version: TemplateVersion,
    pub state: JobState,
    pub backend: Backend,
    pub instance: String,
    pub num_nodes: u32,
    pub workspace: String,
    pub submitted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<Money>,
}

impl From<&JobEntry> for JobSummary {
    fn from(e: &JobEntry) -> Self {
        JobSummary {
            id: e.job.id.clone(),
            template_version: e.job.template_version.clone(),
            state: e.job.state,
            backend: e.job.plan.backend,
            instance: e.job.plan.instance.name.clone(),
            num_nodes: e.job.plan.num_nodes,
            workspace: e.workspace.clone(),
            submitted_at: e.job.submitted_at,
            cost: e.cost,
        }
    }
}

/// What a dry run reports: the plan that would execute and its price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryRunReport {
    pub template_version: TemplateVersion,
    pub commands: ExecutablePlan,
    pub plan: ProvisioningPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpi: Option<MpiPlan>,
    pub estimated_hours: f64,
    pub estimate: Money,
    pub budget: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Submission {
    Queued {
        job_id: JobId,
        instance: String,
        estimate: Money,
    },
    DryRun(Box<DryRunReport>),
}

/// Stored history plus, for a live job, a receiver for what follows.
type Subscription = (
    Arc<JobSlot>,
    Vec<StatusEvent>,
    Option<broadcast::Receiver<StatusEvent>>,
);

struct JobSlot {
    entry: Mutex<JobEntry>,
    tx: broadcast::Sender<StatusEvent>,
    cancel_flag: Arc<AtomicBool>,
    cancel_tx: watch::Sender<bool>,
}

impl JobSlot {
    fn new(entry: JobEntry) -> Arc<Self> {
        let (tx, _) = broadcast::channel(64);
        let (cancel_tx, _) = watch::channel(false);
        Arc::new(JobSlot {
            entry: Mutex::new(entry),
            tx,
            cancel_flag: Arc::new(AtomicBool::new(false)),
            cancel_tx,
        })
    }

    fn cancelled(&self) -> bool {
        self.cancel_flag.load(Ordering::SeqCst)
    }
}

struct Inner {
    catalog: CatalogSnapshot,
    registry: TemplateRegistry,
    governance: Governance,
    store: RecordStore,
    sim: SimParams,
    sim_time_scale: f64,
    local_timeout: Duration,
    data_dir: PathBuf,
    workers: Arc<Semaphore>,
    jobs: RwLock<BTreeMap<JobId, Arc<JobSlot>>>,
    persist: Mutex<()>,
    runtime: tokio::runtime::Handle,
}

/// Cheap to clone; all clones share one orchestrator.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

fn io_err(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Storage(e.to_string())
}

/// Rank count requested by a job: the template's `np` parameter, else an
/// `--np N` / `-np N` option in the rendered run command.
pub fn requested_ranks(params: &BTreeMap<String, ParamValue>, run_command: &str) -> Option<u32> {
    if let Some(ParamValue::Number(n)) = params.get("np") {
        if *n >= 1.0 && n.fract() == 0.0 && *n <= f64::from(u32::MAX) {
            return Some(*n as u32);
        }
    }
    let tokens: Vec<&str> = run_command.split_whitespace().collect();
    tokens.iter().enumerate().find_map(|(i, t)| {
        if let Some(v) = t.strip_prefix("--np=") {
            return v.parse().ok();
        }
        if *t == "--np" || *t == "-np" {
            return tokens.get(i + 1)?.parse().ok();
        }
        None
    })
}

/// Request fields win; unset ones fall back to the template's defaults.
fn merge_requirements(
    req: &ResourceRequirements,
    template: Option<&ResourceRequirements>,
) -> ResourceRequirements {
    let Some(t) = template else {
        return req.clone();
    };
    ResourceRequirements {
        min_gpus: req.min_gpus.or(t.min_gpus),
        min_memory_gib: req.min_memory_gib.or(t.min_memory_gib),
        min_vcpus: req.min_vcpus.or(t.min_vcpus),
        provider: req.provider.clone().or_else(|| t.provider.clone()),
        instance_type: req
            .instance_type
            .clone()
            .or_else(|| t.instance_type.clone()),
        num_nodes: if req.num_nodes != 1 {
            req.num_nodes
        } else {
            t.num_nodes
        },
        max_price_per_hour: req.max_price_per_hour.or(t.max_price_per_hour),
    }
}

struct Admission {
    template: WorkflowTemplate,
    params: stratus_core::workflow::ParameterSet,
    commands: ExecutablePlan,
    plan: ProvisioningPlan,
    mpi: Option<MpiPlan>,
    hours: f64,
    estimate: Money,
    budget: String,
}

impl Gateway {
    /// Builds a gateway from configuration. Must be called inside a Tokio
    /// runtime; `owner` seeds the governance document when none exists.
    pub fn from_config(config: &GatewayConfig, owner: &str) -> Result<Gateway, GatewayError> {
        config.validate()?;
        let governance = config.governance(owner)?;
        Gateway::new(config, config.catalog()?, governance)
    }

    pub fn new(
        config: &GatewayConfig,
        catalog: CatalogSnapshot,
        governance: GovernanceConfig,
    ) -> Result<Gateway, GatewayError> {
        let data_dir = config.data_dir.clone();
        fs::create_dir_all(data_dir.join("jobs")).map_err(io_err)?;
        let registry = TemplateRegistry::open(data_dir.join("templates"))?;
        // The shipped study templates are registered once, as version 1.
        for t in fixture_templates() {
            if registry.resolve(&t.name, None).is_err() {
                registry.register(t)?;
            }
        }
        let store = RecordStore::open(data_dir.join("records"))?;
        let governance = Governance::new(governance)?;
        let budget_file = data_dir.join("budgets.json");
        if budget_file.exists() {
            let text = fs::read_to_string(&budget_file).map_err(io_err)?;
            let snapshot: Vec<Budget> = serde_json::from_str(&text).map_err(io_err)?;
            governance.restore_spent(&snapshot);
        }
        let gw = Gateway {
            inner: Arc::new(Inner {
                catalog,
                registry,
                governance,
                store,
                sim: config.sim.clone(),
                sim_time_scale: config.sim_time_scale,
                local_timeout: Duration::from_secs(config.local_timeout_seconds),
                workers: Arc::new(Semaphore::new(config.worker_limit)),
                jobs: RwLock::new(BTreeMap::new()),
                persist: Mutex::new(()),
                runtime: tokio::runtime::Handle::current(),
                data_dir,
            }),
        };
        gw.load_jobs()?;
        Ok(gw)
    }

    fn load_jobs(&self) -> Result<(), GatewayError> {
        let dir = self.inner.data_dir.join("jobs");
        let mut jobs = self.inner.jobs.write();
        for file in fs::read_dir(&dir).map_err(io_err)? {
            let path = file.map_err(io_err)?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io_err)?;
            let entry: JobEntry = serde_json::from_str(&text).map_err(io_err)?;
            jobs.insert(entry.job.id.clone(), JobSlot::new(entry));
        }
        Ok(())
    }

    pub fn catalog(&self) -> &CatalogSnapshot {
        &self.inner.catalog
    }

    pub fn registry(&self) -> &TemplateRegistry {
        &self.inner.registry
    }

    pub fn governance(&self) -> &Governance {
        &self.inner.governance
    }

    pub fn records(&self) -> &RecordStore {
        &self.inner.store
    }

    pub fn sim_params(&self) -> &SimParams {
        &self.inner.sim
    }

    fn authorize(
        &self,
        workspace: &str,
        principal: &str,
        resource: ResourceRef,
        action: Action,
    ) -> Result<(), GatewayError> {
        match self
            .inner
            .governance
            .check_permission(workspace, principal, &resource, action)
        {
            Ok(Decision::Allow { .. }) => Ok(()),
            Ok(Decision::Deny { reason }) => Err(GatewayError::PermissionDenied(reason)),
            Err(GovernanceError::UnknownResource(r)) => Err(GatewayError::PermissionDenied(
                format!("{r} is not registered in workspace {workspace}"),
            )),
            Err(e) => Err(e.into()),
        }
    }

    fn admit(&self, req: &RunRequest, principal: &str) -> Result<Admission, GatewayError> {
        let template = match (&req.template_ref, &req.run_command) {
            (Some(t), _) => (*self.inner.registry.resolve(&t.name, t.version)?).clone(),
            (None, Some(run)) => WorkflowTemplate::ad_hoc(req.setup_command.as_deref(), run),
            (None, None) => {
                return Err(WorkflowError::MissingParameter("run_command".into()).into());
            }
        };
        let ws = self.inner.governance.workspace(&req.workspace)?;
        self.authorize(
            &req.workspace,
            principal,
            ResourceRef::new(ResourceKind::Workflow, &template.name),
            Action::Run,
        )?;

        let params = resolve_parameters_from_text(&template, &req.overrides)?;
        let commands = render_commands(&template, &params)?;
        let requirements =
            merge_requirements(&req.requirements, template.default_requirements.as_ref());
        let plan = plan_provisioning(&requirements, &self.inner.catalog, req.backend)?;
        self.authorize(
            &req.workspace,
            principal,
            ResourceRef::new(ResourceKind::Compute, &plan.instance.name),
            Action::Run,
        )?;
        let np = requested_ranks(&params.values, &commands.run);
        let mpi = np.map(|np| build_mpi_envelope(np, &plan)).transpose()?;

        let hours = match plan.backend {
            Backend::Simulated => {
                let np = mpi.as_ref().map_or(plan.total_slots, |m| m.np);
                // reserve for the worst jitter draw so settlement never exceeds it
                self.inner.sim.model_hours(np, plan.num_nodes)
                    * (1.0 + self.inner.sim.jitter_fraction)
            }
            Backend::Local => template
                .expected_wall_hours
                .unwrap_or(self.inner.local_timeout.as_secs_f64() / 3600.0),
        };
        let estimate = estimate_cost(&plan.instance, hours, plan.num_nodes);
        let budget = ws
            .default_budget()
            .ok_or_else(|| GatewayError::NoBudget(req.workspace.clone()))?
            .to_string();
        Ok(Admission {
            template,
            params,
            commands,
            plan,
            mpi,
            hours,
            estimate,
            budget,
        })
    }

    /// Admits and queues a job, or, for a dry run, reports what would run.
    pub fn submit(&self, req: &RunRequest, principal: &str) -> Result<Submission, GatewayError> {
        let a = self.admit(req, principal)?;
        if req.dry_run {
            return Ok(Submission::DryRun(Box::new(DryRunReport {
                template_version: a.template.version_ref(),
                commands: a.commands,
                plan: a.plan,
                mpi: a.mpi,
                estimated_hours: a.hours,
                estimate: a.estimate,
                budget: a.budget,
            })));
        }

        let reservation = self
            .inner
            .governance
            .reserve_budget(&a.budget, a.estimate)?;
        let template = if req.template_ref.is_some() {
            a.template
        } else {
            match self.inner.registry.ensure_ad_hoc(a.template) {
                Ok(t) => (*t).clone(),
                Err(e) => {
                    let _ = self
                        .inner
                        .governance
                        .settle_reservation(&reservation, Money::ZERO);
                    return Err(e.into());
                }
            }
        };

        let now = Utc::now();
        let mut job = Job::new(
            template.version_ref(),
            template.environment.clone(),
            a.params,
            a.plan,
            a.mpi,
            now,
        );
        job.budget_reservation = Some(reservation);
        let id = job.id.clone();
        let instance = job.plan.instance.name.clone();
        let entry = JobEntry {
            events: vec![StatusEvent {
                seq: 0,
                at: now,
                state: JobState::Queued,
                log_lines: vec![format!(
                    "queued {} on {} x {} ({} backend), estimate {}",
                    job.template_version,
                    job.plan.num_nodes,
                    instance,
                    job.plan.backend,
                    a.estimate
                )],
            }],
            log: String::new(),
            job,
            principal: principal.to_string(),
            workspace: req.workspace.clone(),
            budget: a.budget,
            commands: a.commands,
            estimate: a.estimate,
            wall_time_hours: None,
            cost: None,
            record_id: None,
            error: None,
        };
        let slot = JobSlot::new(entry);
        self.inner.jobs.write().insert(id.clone(), slot.clone());
        let gw = self.clone();
        self.inner
            .runtime
            .spawn(async move { gw.drive(slot).await });
        Ok(Submission::Queued {
            job_id: id,
            instance,
            estimate: a.estimate,
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<JobSlot>, GatewayError> {
        self.inner
            .jobs
            .read()
            .get(&JobId(id.to_string()))
            .cloned()
            .ok_or_else(|| GatewayError::UnknownJob(id.to_string()))
    }

    fn authorize_job(
        &self,
        slot: &JobSlot,
        principal: &str,
        action: Action,
    ) -> Result<(), GatewayError> {
        let (ws, name) = {
            let e = slot.entry.lock();
            (e.workspace.clone(), e.job.template_version.name.clone())
        };
        self.authorize(
            &ws,
            principal,
            ResourceRef::new(ResourceKind::Workflow, name),
            action,
        )
    }

    pub fn job(&self, id: &str, principal: &str) -> Result<JobView, GatewayError> {
        let slot = self.slot(id)?;
        self.authorize_job(&slot, principal, Action::Read)?;
        let view = JobView::from(&*slot.entry.lock());
        Ok(view)
    }

    pub fn jobs(&self, principal: &str, workspace: Option<&str>) -> Vec<JobSummary> {
        let slots: Vec<Arc<JobSlot>> = self.inner.jobs.read().values().cloned().collect();
        let mut out: Vec<JobSummary> = slots
            .iter()
            .filter(|s| workspace.is_none_or(|w| s.entry.lock().workspace == w))
            .filter(|s| self.authorize_job(s, principal, Action::Read).is_ok())
            .map(|s| JobSummary::from(&*s.entry.lock()))
            .collect();
        out.sort_by(|a, b| a.submitted_at.cmp(&b.submitted_at).then(a.id.cmp(&b.id)));
        out
    }

    pub fn logs(&self, id: &str, principal: &str) -> Result<String, GatewayError> {
        let slot = self.slot(id)?;
        self.authorize_job(&slot, principal, Action::Read)?;
        let log = slot.entry.lock().log.clone();
        Ok(log)
    }

    pub fn record(&self, id: &str, principal: &str) -> Result<ProvenanceRecord, GatewayError> {
        let slot = self.slot(id)?;
        self.authorize_job(&slot, principal, Action::Read)?;
        let record_id = slot
            .entry
            .lock()
            .record_id
            .clone()
            .ok_or_else(|| GatewayError::NoRecord(id.to_string()))?;
        Ok(self.inner.store.get(&record_id)?)
    }

    /// Requests cancellation. A queued job is cancelled at once; a running one
    /// stops at its next checkpoint (simulated) or when its process is killed
    /// (local).
    pub fn cancel(&self, id: &str, principal: &str) -> Result<JobView, GatewayError> {
        let slot = self.slot(id)?;
        self.authorize_job(&slot, principal, Action::Run)?;
        let state = slot.entry.lock().job.state;
        if state.is_terminal() {
            return Err(GatewayError::JobAlreadyTerminal(id.to_string(), state));
        }
        slot.cancel_flag.store(true, Ordering::SeqCst);
        slot.cancel_tx.send_replace(true);
        if state == JobState::Queued {
            self.conclude(
                &slot,
                JobEvent::CancelRequested,
                None,
                vec!["cancelled while queued".into()],
                None,
            );
        }
        let view = JobView::from(&*slot.entry.lock());
        Ok(view)
    }

    /// History after `after` (all of it when `None`) plus, unless the job is
    /// already terminal, a receiver for what follows.
    fn subscribe(
        &self,
        id: &str,
        principal: &str,
        after: Option<u64>,
    ) -> Result<Subscription, GatewayError> {
        let slot = self.slot(id)?;
        self.authorize_job(&slot, principal, Action::Read)?;
        let (history, rx) = {
            let e = slot.entry.lock();
            let history: Vec<StatusEvent> = e
                .events
                .iter()
                .filter(|ev| after.is_none_or(|a| ev.seq > a))
                .cloned()
                .collect();
            let rx = (!e.job.is_terminal()).then(|| slot.tx.subscribe());
            (history, rx)
        };
        Ok((slot, history, rx))
    }

    /// Ordered status events: the stored history after `after`, then the live
    /// tail. Ends after the terminal state.
    pub fn status_stream(
        &self,
        id: &str,
        principal: &str,
        after: Option<u64>,
    ) -> Result<impl Stream<Item = StatusEvent> + Send + 'static, GatewayError> {
        let (slot, history, rx) = self.subscribe(id, principal, after)?;
        struct St {
            slot: Arc<JobSlot>,
            pending: VecDeque<StatusEvent>,
            rx: Option<broadcast::Receiver<StatusEvent>>,
            last: Option<u64>,
            done: bool,
        }
        let init = St {
            slot,
            last: after,
            pending: history.into(),
            rx,
            done: false,
        };
        Ok(futures::stream::unfold(init, |mut st| async move {
            loop {
                if st.done {
                    return None;
                }
                if let Some(ev) = st.pending.pop_front() {
                    st.last = Some(ev.seq);
                    st.done = ev.state.is_terminal();
                    return Some((ev, st));
                }
                let rx = st.rx.as_mut()?;
                match rx.recv().await {
                    Ok(ev) => {
                        if st.last.is_none_or(|l| ev.seq > l) {
                            st.pending.push_back(ev);
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => {
                        // fell behind the channel: refill from the stored history
                        let e = st.slot.entry.lock();
                        st.pending.extend(
                            e.events
                                .iter()
                                .filter(|ev| st.last.is_none_or(|l| ev.seq > l))
                                .cloned(),
                        );
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        }))
    }

    /// Waits until the job is terminal and returns its final view.
    pub async fn wait(&self, id: &str, principal: &str) -> Result<JobView, GatewayError> {
        use futures::StreamExt;
        let stream = self.status_stream(id, principal, None)?;
        futures::pin_mut!(stream);
        while stream.next().await.is_some() {}
        self.job(id, principal)
    }

    pub fn templates(&self) -> Vec<TemplateVersion> {
        self.inner.registry.list()
    }

    pub fn template(
        &self,
        name: &str,
        version: Option<u32>,
    ) -> Result<Arc<WorkflowTemplate>, GatewayError> {
        Ok(self.inner.registry.resolve(name, version)?)
    }

    pub fn register_template(
        &self,
        template: WorkflowTemplate,
        principal: &str,
        workspace: &str,
    ) -> Result<TemplateVersion, GatewayError> {
        self.authorize(
            workspace,
            principal,
            ResourceRef::new(ResourceKind::Workflow, &template.name),
            Action::Write,
        )?;
        Ok(self.inner.registry.register(template)?)
    }

    /// Budgets of workspaces the principal belongs to.
    pub fn budgets(&self, principal: &str) -> Vec<Budget> {
        let gov = &self.inner.governance;
        let mut ids: Vec<&str> = gov
            .config()
            .workspaces
            .iter()
            .filter(|w| gov.groups_of(w, principal).next().is_some())
            .flat_map(|w| w.budgets.iter().map(String::as_str))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| gov.budget(id).ok())
            .collect()
    }

    pub fn budget(&self, id: &str, principal: &str) -> Result<Budget, GatewayError> {
        self.budgets(principal)
            .into_iter()
            .find(|b| b.id == id)
            .ok_or_else(|| match self.inner.governance.budget(id) {
                Ok(_) => {
                    GatewayError::PermissionDenied(format!("{principal} cannot read budget {id}"))
                }
                Err(e) => e.into(),
            })
    }

    // ---- pipeline ------------------------------------------------------

    /// Applies a non-terminal event. `false` when the job was concluded
    /// meanwhile (e.g. cancelled) and the pipeline should stop.
    fn advance(&self, slot: &JobSlot, event: JobEvent, lines: Vec<String>) -> bool {
        let mut e = slot.entry.lock();
        if e.job.is_terminal() {
            return false;
        }
        let Ok(rec) = e.job.apply(event, Utc::now()) else {
            return false;
        };
        let (at, state) = (rec.at, rec.to);
        push_event(&mut e, &slot.tx, at, state, lines);
        true
    }

    /// Moves the job to a terminal state exactly once: settles the budget,
    /// writes the provenance record when there is an outcome, and persists.
    fn conclude(
        &self,
        slot: &JobSlot,
        event: JobEvent,
        outcome: Option<ExecutionOutcome>,
        lines: Vec<String>,
        outputs: Option<Vec<OutputDigest>>,
    ) {
        let mut e = slot.entry.lock();
        if e.job.is_terminal() {
            return;
        }
        let Ok(rec) = e.job.apply(event, Utc::now()) else {
            return;
        };
        let (at, state) = (rec.at, rec.to);
        let cost = outcome.as_ref().map_or(Money::ZERO, |o| {
            estimate_cost(
                &e.job.plan.instance,
                o.wall_time_hours,
                e.job.plan.num_nodes,
            )
        });
        e.cost = Some(cost);
        e.wall_time_hours = outcome.as_ref().map(|o| o.wall_time_hours);
        if let Some(r) = e.job.budget_reservation.clone() {
            if let Err(err) = self.inner.governance.settle_reservation(&r, cost) {
                e.error
                    .get_or_insert(format!("budget settlement failed: {err}"));
            }
        }
        let mut lines = lines;
        if let Some(o) = &outcome {
            match record_run(&e.job, o, outputs.as_deref().unwrap_or(&[]), Utc::now())
                .and_then(|r| self.inner.store.put(&r, Some(&e.job.id)).map(|_| r))
            {
                Ok(r) => {
                    lines.push(format!("provenance record {}", r.record_id));
                    e.record_id = Some(r.record_id);
                }
                Err(err) => {
                    e.error
                        .get_or_insert(format!("provenance record not stored: {err}"));
                }
            }
        }
        lines.push(format!("{state}: cost {cost}"));
        push_event(&mut e, &slot.tx, at, state, lines);
        if let Err(err) = self.persist(&e) {
            e.error.get_or_insert(err.to_string());
        }
    }

    fn persist(&self, e: &JobEntry) -> Result<(), GatewayError> {
        let _guard = self.inner.persist.lock();
        let dir = self.inner.data_dir.join("jobs");
        write_atomic(
            &dir.join(format!("{}.json", e.job.id)),
            &serde_json::to_vec_pretty(e).map_err(io_err)?,
        )?;
        let budgets = self.inner.governance.budgets();
        write_atomic(
            &self.inner.data_dir.join("budgets.json"),
            &serde_json::to_vec_pretty(&budgets).map_err(io_err)?,
        )
    }

    fn fail(&self, slot: &JobSlot, message: String, outcome: Option<ExecutionOutcome>) {
        slot.entry.lock().error.get_or_insert(message.clone());
        self.conclude(slot, JobEvent::ErrorRaised, outcome, vec![message], None);
    }

    fn cancel_now(&self, slot: &JobSlot, outcome: Option<ExecutionOutcome>) {
        self.conclude(
            slot,
            JobEvent::CancelRequested,
            outcome,
            vec!["cancelled".into()],
            None,
        );
    }

    /// Sleeps for a simulated duration scaled by `sim_time_scale`. `false` if
    /// cancelled while waiting.
    async fn sim_sleep(&self, slot: &JobSlot, sim_seconds: f64) -> bool {
        let real = sim_seconds * self.inner.sim_time_scale;
        if real > 0.0 && real.is_finite() {
            let mut rx = slot.cancel_tx.subscribe();
            tokio::select! {
                _ = tokio::time::sleep(Duration::from_secs_f64(real)) => {}
                _ = rx.wait_for(|c| *c) => {}
            }
        } else {
            tokio::task::yield_now().await;
        }
        !slot.cancelled()
    }

    async fn drive(self, slot: Arc<JobSlot>) {
        let Ok(_permit) = self.inner.workers.clone().acquire_owned().await else {
            return;
        };
        if slot.cancelled() {
            return self.cancel_now(&slot, None);
        }
        let (plan, mpi, commands, id) = {
            let e = slot.entry.lock();
            (
                e.job.plan.clone(),
                e.job.mpi.clone(),
                e.commands.clone(),
                e.job.id.clone(),
            )
        };
        let inst = &plan.instance;
        if !self.advance(
            &slot,
            JobEvent::ProvisionStarted,
            vec![format!(
                "provisioning {} x {} ({}, {})",
                plan.num_nodes, inst.name, inst.provider, inst.region
            )],
        ) {
            return;
        }
        match plan.backend {
            Backend::Simulated => {
                self.drive_simulated(&slot, &plan, mpi.as_ref(), &commands)
                    .await
            }
            Backend::Local => {
                self.drive_local(&slot, &plan, mpi.as_ref(), &commands, &id)
                    .await
            }
        }
    }

    async fn drive_simulated(
        &self,
        slot: &JobSlot,
        plan: &ProvisioningPlan,
        mpi: Option<&MpiPlan>,
        commands: &ExecutablePlan,
    ) {
        let cluster = match sim_provision(plan, &self.inner.sim) {
            Ok(c) => c,
            Err(e @ SimError::SimulatedStockout { .. }) => {
                return self.fail(slot, e.to_string(), None)
            }
            Err(e) => return self.fail(slot, e.to_string(), None),
        };
        if !self.sim_sleep(slot, cluster.delay_seconds).await {
            return self.cancel_now(slot, None);
        }
        let mut lines = vec![format!(
            "nodes ready: {} after {:.0} s simulated",
            cluster.nodes.join(", "),
            cluster.delay_seconds
        )];
        if let Some(m) = mpi {
            lines.push(format!(
                "np={} grid={} interconnect={}",
                m.np,
                m.grid,
                m.runtime_env.get("interconnect").map_or("", String::as_str)
            ));
            lines.extend(m.hostfile_text.lines().map(|l| format!("hostfile: {l}")));
        }
        if !self.advance(slot, JobEvent::NodesReady, lines) {
            return;
        }
        let setup = commands
            .setup
            .as_deref()
            .map_or("setup: none".to_string(), |s| format!("setup: {s}"));
        if !self.advance(slot, JobEvent::SetupDone, vec![setup]) {
            return;
        }
        let np = mpi.map_or(plan.total_slots, |m| m.np);
        let outcome = sim_execute(np, plan.num_nodes, &self.inner.sim);
        if !self.sim_sleep(slot, outcome.wall_time_hours * 3600.0).await {
            return self.cancel_now(slot, None);
        }
        let mut lines = vec![format!("run: {}", commands.run)];
        lines.extend(outcome.log_text.lines().map(str::to_string));
        slot.entry.lock().log.push_str(&outcome.log_text);
        if !self.advance(slot, JobEvent::RunCompleted, lines) {
            return;
        }
        let digests = outcome
            .output_refs
            .iter()
            .map(|r| OutputDigest {
                reference: r.clone(),
                digest: sha256_hex(r.as_bytes()),
            })
            .collect();
        self.conclude(
            slot,
            JobEvent::OutputsStored,
            Some(outcome),
            vec!["outputs stored".into()],
            Some(digests),
        );
    }

    async fn drive_local(
        &self,
        slot: &Arc<JobSlot>,
        plan: &ProvisioningPlan,
        mpi: Option<&MpiPlan>,
        commands: &ExecutablePlan,
        id: &JobId,
    ) {
        let workdir = self.inner.data_dir.join("work").join(&id.0);
        let mut lines = vec![format!(
            "local workdir {} (priced as {} x {})",
            workdir.display(),
            plan.num_nodes,
            plan.instance.name
        )];
        if let Some(m) = mpi {
            lines.push(format!("np={} grid={}", m.np, m.grid));
        }
        if !self.advance(slot, JobEvent::NodesReady, lines) {
            return;
        }
        let hook = {
            let gw = self.clone();
            let slot = slot.clone();
            let setup = commands.setup.clone();
            Arc::new(move || {
                let line = setup
                    .as_deref()
                    .map_or("setup: none".to_string(), |s| format!("setup done: {s}"));
                gw.advance(&slot, JobEvent::SetupDone, vec![line]);
            })
        };
        let opts = LocalOptions {
            timeout: self.inner.local_timeout,
            env: mpi.map(|m| m.runtime_env.clone()).unwrap_or_default(),
            hostfile: mpi.map(|m| m.hostfile_text.clone()),
            cancel: Some(slot.cancel_flag.clone()),
            on_setup_done: Some(hook),
        };
        let started = Instant::now();
        let (cmds, dir) = (commands.clone(), workdir.clone());
        let result = tokio::task::spawn_blocking(move || local_execute(&cmds, &dir, &opts))
            .await
            .unwrap_or_else(|e| Err(LocalError::Io(std::io::Error::other(e.to_string()))));
        let elapsed = (started.elapsed().as_secs_f64() / 3600.0).max(1e-9);
        let failed = |log: &str, hours: f64| ExecutionOutcome {
            wall_time_hours: hours,
            exit_status: ExitStatus::Failure,
            log_text: log.to_string(),
            output_refs: Vec::new(),
        };
        match result {
            Ok(outcome) => {
                slot.entry.lock().log.push_str(&outcome.log_text);
                let mut lines = vec![format!("run: {}", commands.run)];
                lines.extend(outcome.log_text.lines().map(str::to_string));
                if !self.advance(slot, JobEvent::RunCompleted, lines) {
                    return;
                }
                let digests = outcome
                    .output_refs
                    .iter()
                    .map(|r| OutputDigest {
                        reference: r.clone(),
                        digest: fs::read(workdir.join(r))
                            .map(|b| sha256_hex(&b))
                            .unwrap_or_else(|_| sha256_hex(r.as_bytes())),
                    })
                    .collect();
                self.conclude(
                    slot,
                    JobEvent::OutputsStored,
                    Some(outcome),
                    vec!["outputs stored".into()],
                    Some(digests),
                );
            }
            Err(LocalError::Cancelled(log)) => {
                slot.entry.lock().log.push_str(&log);
                self.cancel_now(slot, Some(failed(&log, elapsed)));
            }
            Err(e @ (LocalError::SetupFailed { .. } | LocalError::RunFailed { .. })) => {
                let (log, hours) = match &e {
                    LocalError::SetupFailed {
                        log,
                        wall_time_hours,
                        ..
                    }
                    | LocalError::RunFailed {
                        log,
                        wall_time_hours,
                        ..
                    } => (log.clone(), wall_time_hours.max(1e-9)),
                    _ => unreachable!(),
                };
                slot.entry.lock().log.push_str(&log);
                self.fail(slot, e.to_string(), Some(failed(&log, hours)));
            }
            Err(e) => {
                let log = e.log().to_string();
                slot.entry.lock().log.push_str(&log);
                self.fail(slot, e.to_string(), Some(failed(&log, elapsed)));
            }
        }
    }
}

fn push_event(
    e: &mut JobEntry,
    tx: &broadcast::Sender<StatusEvent>,
    at: DateTime<Utc>,
    state: JobState,
    log_lines: Vec<String>,
) {
    let ev = StatusEvent {
        seq: e.events.len() as u64,
        at,
        state,
        log_lines,
    };
    e.events.push(ev.clone());
    // no receivers is fine
    let _ = tx.send(ev);
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), GatewayError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}
