//! Workspaces, group-based permissions, and shared budgets.
//!
//! Budgets use a reserve-at-submit, settle-at-terminal protocol. Each budget is
//! its own serialization point: reserve and settle are atomic read-modify-write
//! operations under that budget's lock, so `spent + reserved <= allocation`
//! holds at every observable instant.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Money;

/// Actions form a chain: admin ⊇ write ⊇ run ⊇ read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Read,
    Run,
    Write,
    Admin,
}

impl Action {
    pub fn implies(self, other: Action) -> bool {
        self >= other
    }
}

impl FromStr for Action {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(Action::Read),
            "run" => Ok(Action::Run),
            "write" => Ok(Action::Write),
            "admin" => Ok(Action::Admin),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Workflow,
    Dataset,
    Environment,
    JobResult,
    Compute,
}

impl FromStr for ResourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "workflow" => Ok(ResourceKind::Workflow),
            "dataset" => Ok(ResourceKind::Dataset),
            "environment" => Ok(ResourceKind::Environment),
            "job_result" => Ok(ResourceKind::JobResult),
            "compute" => Ok(ResourceKind::Compute),
            other => Err(format!("unknown resource kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceRef {
    pub kind: ResourceKind,
    /// `*` in an ACL entry matches every resource of the kind.
    pub id: String,
}

impl ResourceRef {
    pub fn new(kind: ResourceKind, id: impl Into<String>) -> Self {
        ResourceRef {
            kind,
            id: id.into(),
        }
    }

    fn matches(&self, other: &ResourceRef) -> bool {
        self.kind == other.kind && (self.id == "*" || self.id == other.id)
    }
}

impl fmt::Display for ResourceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.kind, self.id)
    }
}

/// Parses `kind:id`, e.g. `workflow:pism-greenland`.
impl FromStr for ResourceRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| format!("expected kind:id, got {s:?}"))?;
        if id.is_empty() {
            return Err(format!("empty resource id in {s:?}"));
        }
        Ok(ResourceRef::new(kind.parse()?, id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    #[serde(default)]
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclEntry {
    pub resource: ResourceRef,
    pub group: String,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub member_groups: Vec<String>,
    #[serde(default)]
    pub budgets: Vec<String>,
    #[serde(default)]
    pub resources: Vec<ResourceRef>,
    #[serde(default)]
    pub acl: Vec<AclEntry>,
}

impl Workspace {
    pub fn default_budget(&self) -> Option<&str> {
        self.budgets.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetDecl {
    pub id: String,
    pub allocation: Money,
}

/// Declarative governance document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GovernanceConfig {
    #[serde(default)]
    pub groups: Vec<Group>,
    #[serde(default)]
    pub workspaces: Vec<Workspace>,
    #[serde(default)]
    pub budgets: Vec<BudgetDecl>,
}

impl GovernanceConfig {
    pub fn from_toml(text: &str) -> Result<Self, GovernanceError> {
        let cfg: GovernanceConfig =
            toml::from_str(text).map_err(|e| GovernanceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("governance config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), GovernanceError> {
        let known = |g: &str| self.groups.iter().any(|x| x.id == g);
        for ws in &self.workspaces {
            for g in ws
                .member_groups
                .iter()
                .chain(ws.acl.iter().map(|a| &a.group))
            {
                if !known(g) {
                    return Err(GovernanceError::Config(format!(
                        "workspace {} references unknown group {g}",
                        ws.id
                    )));
                }
            }
            for b in &ws.budgets {
                if !self.budgets.iter().any(|x| &x.id == b) {
                    return Err(GovernanceError::Config(format!(
                        "workspace {} references unknown budget {b}",
                        ws.id
                    )));
                }
            }
        }
        for b in &self.budgets {
            if b.allocation.is_negative() {
                return Err(GovernanceError::Config(format!(
                    "budget {} has a negative allocation",
                    b.id
                )));
            }
        }
        Ok(())
    }

    pub fn create_group(&mut self, id: &str) -> Result<(), GovernanceError> {
        if self.groups.iter().any(|g| g.id == id) {
            return Err(GovernanceError::Config(format!(
                "group {id} already exists"
            )));
        }
        self.groups.push(Group {
            id: id.to_string(),
            members: Vec::new(),
        });
        Ok(())
    }

    pub fn add_member(&mut self, group: &str, user: &str) -> Result<(), GovernanceError> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.id == group)
            .ok_or_else(|| GovernanceError::Config(format!("unknown group {group}")))?;
        if !g.members.iter().any(|m| m == user) {
            g.members.push(user.to_string());
        }
        Ok(())
    }

    pub fn grant(
        &mut self,
        workspace: &str,
        resource: ResourceRef,
        group: &str,
        action: Action,
    ) -> Result<(), GovernanceError> {
        if !self.groups.iter().any(|g| g.id == group) {
            return Err(GovernanceError::Config(format!("unknown group {group}")));
        }
        let ws = self
            .workspaces
            .iter_mut()
            .find(|w| w.id == workspace)
            .ok_or_else(|| GovernanceError::UnknownWorkspace(workspace.to_string()))?;
        if !ws.member_groups.iter().any(|g| g == group) {
            ws.member_groups.push(group.to_string());
        }
        match ws
            .acl
            .iter_mut()
            .find(|a| a.resource == resource && a.group == group)
        {
            Some(entry) if !entry.actions.contains(&action) => entry.actions.push(action),
            Some(_) => {}
            None => ws.acl.push(AclEntry {
                resource,
                group: group.to_string(),
                actions: vec![action],
            }),
        }
        Ok(())
    }

    pub fn set_allocation(
        &mut self,
        budget: &str,
        allocation: Money,
    ) -> Result<(), GovernanceError> {
        if allocation.is_negative() {
            return Err(GovernanceError::Config("allocation must be >= 0".into()));
        }
        match self.budgets.iter_mut().find(|b| b.id == budget) {
            Some(b) => b.allocation = allocation,
            None => self.budgets.push(BudgetDecl {
                id: budget.to_string(),
                allocation,
            }),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum Decision {
    Allow { group: String, held: Action },
    Deny { reason: String },
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow { .. })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GovernanceError {
    #[error("unknown workspace {0}")]
    UnknownWorkspace(String),
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("unknown budget {0}")]
    UnknownBudget(String),
    #[error("budget exhausted: requested {requested}, headroom {headroom}")]
    BudgetExhausted { requested: Money, headroom: Money },
    #[error("unknown reservation {0}")]
    UnknownReservation(String),
    #[error("reservation {0} already settled")]
    DoubleSettle(String),
    #[error("amount must be >= 0")]
    NegativeAmount,
    #[error("governance config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReservationId(pub String);

impl ReservationId {
    fn new(budget: &str, seq: u64) -> Self {
        ReservationId(format!("{budget}/{seq}"))
    }

    fn budget(&self) -> Option<&str> {
        self.0.rsplit_once('/').map(|(b, _)| b)
    }
}

impl fmt::Display for ReservationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverageFlag {
    pub reservation: ReservationId,
    pub estimate: Money,
    pub actual: Money,
    /// Portion of `actual` that could not be charged.
    pub uncharged: Money,
}

/// Observable budget state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub id: String,
    pub allocation: Money,
    pub reserved: Money,
    pub spent: Money,
    #[serde(default)]
    pub overages: Vec<OverageFlag>,
}

impl Budget {
    pub fn headroom(&self) -> Money {
        self.allocation - self.spent - self.reserved
    }
}

#[derive(Debug)]
struct BudgetCell {
    state: Budget,
    // estimate and whether it has been settled
    reservations: HashMap<ReservationId, (Money, bool)>,
}

/// Runtime governance state: permissions plus live budget accounts.
#[derive(Debug)]
pub struct Governance {
    config: GovernanceConfig,
    budgets: BTreeMap<String, Mutex<BudgetCell>>,
    next_reservation: AtomicU64,
}

impl Governance {
    pub fn new(config: GovernanceConfig) -> Result<Self, GovernanceError> {
        config.validate()?;
        let budgets = config
            .budgets
            .iter()
            .map(|b| {
                (
                    b.id.clone(),
                    Mutex::new(BudgetCell {
                        state: Budget {
                            id: b.id.clone(),
                            allocation: b.allocation,
                            reserved: Money::ZERO,
                            spent: Money::ZERO,
                            overages: Vec::new(),
                        },
                        reservations: HashMap::new(),
                    }),
                )
            })
            .collect();
        Ok(Governance {
            config,
            budgets,
            next_reservation: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &GovernanceConfig {
        &self.config
    }

    pub fn workspace(&self, id: &str) -> Result<&Workspace, GovernanceError> {
        self.config
            .workspaces
            .iter()
            .find(|w| w.id == id)
            .ok_or_else(|| GovernanceError::UnknownWorkspace(id.to_string()))
    }

    /// Groups in `workspace` whose members include `principal`.
    pub fn groups_of<'a>(
        &'a self,
        workspace: &'a Workspace,
        principal: &'a str,
    ) -> impl Iterator<Item = &'a str> + 'a {
        workspace.member_groups.iter().filter_map(move |gid| {
            self.config
                .groups
                .iter()
                .find(|g| &g.id == gid && g.members.iter().any(|m| m == principal))
                .map(|g| g.id.as_str())
        })
    }

    pub fn check_permission(
        &self,
        workspace: &str,
        principal: &str,
        resource: &ResourceRef,
        action: Action,
    ) -> Result<Decision, GovernanceError> {
        let ws = self.workspace(workspace)?;
        let known =
            ws.resources.contains(resource) || ws.acl.iter().any(|a| a.resource.matches(resource));
        if !known {
            return Err(GovernanceError::UnknownResource(resource.to_string()));
        }
        let groups: Vec<&str> = self.groups_of(ws, principal).collect();
        if groups.is_empty() {
            return Ok(Decision::Deny {
                reason: format!(
                    "{principal} is not a member of any group in workspace {workspace}"
                ),
            });
        }
        let grant = ws
            .acl
            .iter()
            .filter(|a| groups.contains(&a.group.as_str()) && a.resource.matches(resource))
            .flat_map(|a| a.actions.iter().map(move |act| (a, *act)))
            .filter(|(_, held)| held.implies(action))
            .min_by_key(|(a, held)| (*held, a.group.clone()));
        Ok(match grant {
            Some((entry, held)) => Decision::Allow {
                group: entry.group.clone(),
                held,
            },
            None => Decision::Deny {
                reason: format!("no group of {principal} holds {action:?} on {resource}"),
            },
        })
    }

    pub fn budget(&self, id: &str) -> Result<Budget, GovernanceError> {
        self.budgets
            .get(id)
            .map(|c| c.lock().state.clone())
            .ok_or_else(|| GovernanceError::UnknownBudget(id.to_string()))
    }

    pub fn budgets(&self) -> Vec<Budget> {
        self.budgets
            .values()
            .map(|c| c.lock().state.clone())
            .collect()
    }

    /// Reinstates persisted spending (e.g. after a restart). Outstanding
    /// reservations belonged to the previous process and are not restored.
    pub fn restore_spent(&self, snapshot: &[Budget]) {
        for b in snapshot {
            if let Some(cell) = self.budgets.get(&b.id) {
                let mut cell = cell.lock();
                cell.state.spent = b.spent.min(cell.state.allocation);
                cell.state.overages = b.overages.clone();
            }
        }
    }

    pub fn reserve_budget(
        &self,
        budget: &str,
        estimate: Money,
    ) -> Result<ReservationId, GovernanceError> {
        if estimate.is_negative() {
            return Err(GovernanceError::NegativeAmount);
        }
        let cell = self
            .budgets
            .get(budget)
            .ok_or_else(|| GovernanceError::UnknownBudget(budget.to_string()))?;
        let mut cell = cell.lock();
        let headroom = cell.state.headroom();
        if estimate > headroom {
            return Err(GovernanceError::BudgetExhausted {
                requested: estimate,
                headroom,
            });
        }
        let id = ReservationId::new(
            budget,
            self.next_reservation.fetch_add(1, Ordering::Relaxed),
        );
        cell.state.reserved += estimate;
        cell.reservations.insert(id.clone(), (estimate, false));
        Ok(id)
    }

    /// Releases the reservation and charges `actual`, capped at the available
    /// headroom. Any uncharged remainder is recorded as an [`OverageFlag`].
    pub fn settle_reservation(
        &self,
        reservation: &ReservationId,
        actual: Money,
    ) -> Result<Budget, GovernanceError> {
        if actual.is_negative() {
            return Err(GovernanceError::NegativeAmount);
        }
        let unknown = || GovernanceError::UnknownReservation(reservation.to_string());
        let cell = self
            .budgets
            .get(reservation.budget().ok_or_else(unknown)?)
            .ok_or_else(unknown)?;
        let mut cell = cell.lock();
        let (estimate, settled) = *cell.reservations.get(reservation).ok_or_else(unknown)?;
        if settled {
            return Err(GovernanceError::DoubleSettle(reservation.to_string()));
        }
        cell.state.reserved -= estimate;
        let available = cell.state.headroom();
        let charged = actual.min(available);
        cell.state.spent += charged;
        if charged < actual {
            cell.state.overages.push(OverageFlag {
                reservation: reservation.clone(),
                estimate,
                actual,
                uncharged: actual - charged,
            });
        }
        cell.reservations
            .insert(reservation.clone(), (estimate, true));
        Ok(cell.state.clone())
    }
}
