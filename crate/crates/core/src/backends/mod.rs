//! Execution backends.
//!
//! [`local`] really runs commands as OS processes; [`sim`] is a deterministic
//! cloud simulator with a calibrated strong-scaling model.

pub mod local;
pub mod sim;

use serde::{Deserialize, Serialize};

pub use local::{local_execute, LocalError, LocalOptions, PhaseHook, LOG_FILE, OUTPUT_DIR};
pub use sim::{
    calibrate_model, sim_execute, sim_execute_repetition, sim_provision, sim_wall_hours,
    CalibrationError, Observation, ProvisionedCluster, SimError, SimParams, FIXTURE_CALIBRATION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub wall_time_hours: f64,
    pub exit_status: ExitStatus,
    pub log_text: String,
    /// Opaque artifact references, e.g. paths relative to the job's output directory.
    pub output_refs: Vec<String>,
}

impl ExecutionOutcome {
    pub fn wall_time_seconds(&self) -> f64 {
        self.wall_time_hours * 3600.0
    }

    pub fn succeeded(&self) -> bool {
        self.exit_status == ExitStatus::Success
    }
}
