//! Deterministic cloud simulator.
//!
//! Wall time for `np` ranks on `num_nodes` nodes is
//!
//! ```text
//! T = t_serial * (s + (1 - s) / np) + penalty * (num_nodes - 1) * np / 8
//! ```
//!
//! scaled by `(1 + u)` with `u` drawn uniformly from `[-jitter, +jitter]`. The
//! draw comes from a ChaCha stream keyed on `(seed, np, num_nodes)` and
//! positioned by the repetition index, so every sample is reproducible.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ExecutionOutcome, ExitStatus};
use crate::execution::{node_hostname, Backend, ProvisioningPlan};

/// Rank count the inter-node penalty is normalized to.
pub const PENALTY_BASE_RANKS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub t_serial_hours: f64,
    pub serial_fraction: f64,
    #[serde(default)]
    pub internode_penalty_per_node_hours: f64,
    #[serde(default)]
    pub provision_delay_seconds_per_node: f64,
    #[serde(default)]
    pub jitter_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Probability that provisioning fails with a simulated stockout. 0 disables
    /// fault injection.
    #[serde(default)]
    pub stockout_probability: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            t_serial_hours: 1.0,
            serial_fraction: 0.0,
            internode_penalty_per_node_hours: 0.0,
            provision_delay_seconds_per_node: 0.0,
            jitter_fraction: 0.0,
            seed: 0,
            stockout_probability: 0.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &str| Err(SimError::InvalidParams(what.to_string()));
        if !(self.t_serial_hours.is_finite() && self.t_serial_hours > 0.0) {
            return bad("t_serial_hours must be > 0");
        }
        if !(0.0..=1.0).contains(&self.serial_fraction) {
            return bad("serial_fraction must be in [0, 1]");
        }
        if !(self.internode_penalty_per_node_hours.is_finite()
            && self.internode_penalty_per_node_hours >= 0.0)
        {
            return bad("internode_penalty_per_node_hours must be >= 0");
        }
        if !(self.provision_delay_seconds_per_node.is_finite()
            && self.provision_delay_seconds_per_node >= 0.0)
        {
            return bad("provision_delay_seconds_per_node must be >= 0");
        }
        if !(0.0..0.5).contains(&self.jitter_fraction) {
            return bad("jitter_fraction must be in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.stockout_probability) {
            return bad("stockout_probability must be in [0, 1]");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let p: SimParams =
            toml::from_str(text).map_err(|e| SimError::InvalidParams(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// Noise-free model time.
    pub fn model_hours(&self, np: u32, num_nodes: u32) -> f64 {
        let np_f = f64::from(np.max(1));
        let extra_nodes = f64::from(num_nodes.max(1) - 1);
        self.t_serial_hours * (self.serial_fraction + (1.0 - self.serial_fraction) / np_f)
            + self.internode_penalty_per_node_hours * extra_nodes * np_f / PENALTY_BASE_RANKS
    }
}

/// Calibration shipped with the crate, fitted to the reference strong-scaling
/// measurements.
pub const FIXTURE_CALIBRATION: &str = include_str!("../../fixtures/calibration.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator parameters: {0}")]
    InvalidParams(String),
    #[error("simulated stockout while provisioning {nodes} x {instance}")]
    SimulatedStockout { instance: String, nodes: u32 },
    #[error("plan targets the {0} backend, not the simulator")]
    WrongBackend(Backend),
}

fn stream_key(np: u32, num_nodes: u32) -> u64 {
    (u64::from(np) << 32) | u64::from(num_nodes)
}

fn jitter_draw(params: &SimParams, np: u32, num_nodes: u32, repetition: u64) -> f64 {
    if params.jitter_fraction == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(stream_key(np, num_nodes));
    // each f64 draw consumes two 32-bit words
    rng.set_word_pos(u128::from(repetition) * 2);
    rng.random_range(-params.jitter_fraction..=params.jitter_fraction)
}

/// Simulated wall time in hours for one repetition.
pub fn sim_wall_hours(np: u32, num_nodes: u32, params: &SimParams, repetition: u64) -> f64 {
    params.model_hours(np, num_nodes) * (1.0 + jitter_draw(params, np, num_nodes, repetition))
}

pub fn sim_execute(np: u32, num_nodes: u32, params: &SimParams) -> ExecutionOutcome {
    sim_execute_repetition(np, num_nodes, params, 0)
}

pub fn sim_execute_repetition(
    np: u32,
    num_nodes: u32,
    params: &SimParams,
    repetition: u64,
) -> ExecutionOutcome {
    let hours = sim_wall_hours(np, num_nodes, params, repetition);
    ExecutionOutcome {
        wall_time_hours: hours,
        exit_status: ExitStatus::Success,
        log_text: format!(
            "[sim] np={np} nodes={num_nodes} repetition={repetition} wall_hours={hours:.6}\n"
        ),
        output_refs: vec![format!("sim://np{np}-n{num_nodes}-r{repetition}/output.nc")],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionedCluster {
    pub nodes: Vec<String>,
    pub delay_seconds: f64,
}

pub fn sim_provision(
    plan: &ProvisioningPlan,
    params: &SimParams,
) -> Result<ProvisionedCluster, SimError> {
    if plan.backend != Backend::Simulated {
        return Err(SimError::WrongBackend(plan.backend));
    }
    if params.stockout_probability > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(u64::MAX - u64::from(plan.num_nodes));
        if rng.random::<f64>() < params.stockout_probability {
            return Err(SimError::SimulatedStockout {
                instance: plan.instance.name.clone(),
                nodes: plan.num_nodes,
            });
        }
    }
    Ok(ProvisionedCluster {
        nodes: (0..plan.num_nodes).map(node_hostname).collect(),
        delay_seconds: params.provision_delay_seconds_per_node * f64::from(plan.num_nodes),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub np: u32,
    pub num_nodes: u32,
    pub wall_hours: f64,
}

impl Observation {
    pub fn new(np: u32, num_nodes: u32, wall_hours: f64) -> Self {
        Observation {
            np,
            num_nodes,
            wall_hours,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("underdetermined calibration: {0}")]
    Underdetermined(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
}

/// Fits `(t_serial_hours, serial_fraction, internode_penalty_per_node_hours)`
/// minimizing the sum of squared relative errors.
///
/// The model is linear in `a = t*s`, `b = t*(1-s)` and the penalty, and dividing
/// each row by its observation turns relative error into an ordinary linear
/// least-squares problem. Non-negativity of all three coefficients is enforced
/// exactly by solving every support subset and keeping the best feasible one.
/// When no observation spans more than one node the penalty is not
/// identifiable and is fixed at zero.
pub fn calibrate_model(observations: &[Observation]) -> Result<SimParams, CalibrationError> {
    if observations.len() < 3 {
        return Err(CalibrationError::Underdetermined(format!(
            "need at least 3 observations, got {}",
            observations.len()
        )));
    }
    for o in observations {
        if o.np < 1 || o.num_nodes < 1 || !(o.wall_hours.is_finite() && o.wall_hours > 0.0) {
            return Err(CalibrationError::InvalidObservation(format!("{o:?}")));
        }
    }
    let mut distinct: Vec<u32> = observations.iter().map(|o| o.np).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(CalibrationError::Underdetermined(
            "need at least 2 distinct rank counts".into(),
        ));
    }

    let fit_penalty = observations.iter().any(|o| o.num_nodes > 1);
    let columns = if fit_penalty { 3 } else { 2 };
    let m = observations.len();
    let design = DMatrix::from_fn(m, columns, |i, j| {
        let o = &observations[i];
        let np = f64::from(o.np);
        let x = match j {
            0 => 1.0,
            1 => 1.0 / np,
            _ => f64::from(o.num_nodes - 1) * np / PENALTY_BASE_RANKS,
        };
        x / o.wall_hours
    });
    let target = DVector::from_element(m, 1.0);

    if rank(&design) < columns {
        return Err(CalibrationError::Underdetermined(
            "rank-deficient design".into(),
        ));
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << columns) {
        let support: Vec<usize> = (0..columns).filter(|j| mask & (1 << j) != 0).collect();
        let sub = design.select_columns(support.iter());
        let Ok(coef) = sub.clone().svd(true, true).solve(&target, 1e-12) else {
            continue;
        };
        if coef.iter().any(|c| *c < 0.0) {
            continue;
        }
        let residual = (&sub * &coef - &target).norm_squared();
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            let mut full = vec![0.0; columns];
            for (k, &j) in support.iter().enumerate() {
                full[j] = coef[k];
            }
            best = Some((residual, full));
        }
    }

    let (_, coef) =
        best.ok_or_else(|| CalibrationError::Underdetermined("no non-negative fit".into()))?;
    let (a, b) = (coef[0], coef[1]);
    let t_serial = a + b;
    if t_serial <= 0.0 {
        return Err(CalibrationError::Underdetermined(
            "fitted t_serial is zero".into(),
        ));
    }
    Ok(SimParams {
        t_serial_hours: t_serial,
        serial_fraction: a / t_serial,
        internode_penalty_per_node_hours: coef.get(2).copied().unwrap_or(0.0),
        provision_delay_seconds_per_node: 0.0,
        jitter_fraction: 0.0,
        seed: 0,
        stockout_probability: 0.0,
    })
}

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|s| **s > max * 1e-10).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::fixture_catalog;
    use crate::catalog::ResourceRequirements;
    use crate::execution::plan_provisioning;

    fn ideal() -> SimParams {
        SimParams {
            t_serial_hours: 8.0,
            ..Default::default()
        }
    }

    #[test]
    fn ideal_scaling_halves_time() {
        let p = ideal();
        for np in [1, 2, 4, 8, 16, 48] {
            let t1 = sim_execute(np, 1, &p).wall_time_hours;
            let t2 = sim_execute(2 * np, 1, &p).wall_time_hours;
            assert!((t1 / t2 - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_node_penalty_is_strictly_larger() {
        let p = SimParams {
            t_serial_hours: 10.0,
            serial_fraction: 0.05,
            internode_penalty_per_node_hours: 0.01,
            ..Default::default()
        };
        let one = sim_execute(64, 1, &p).wall_time_hours;
        let four = sim_execute(64, 4, &p).wall_time_hours;
        // direct evaluation: 10*(0.05 + 0.95/64) + 0.01*3*64/8
        let expected_one = 10.0 * (0.05 + 0.95 / 64.0);
        assert!((one - expected_one).abs() < 1e-12);
        assert!((four - (expected_one + 0.24)).abs() < 1e-12);
        assert!(four > one);
    }

    #[test]
    fn jitter_is_bounded_and_deterministic() {
        let p = SimParams {
            jitter_fraction: 0.1,
            seed: 42,
            ..ideal()
        };
        let base = p.model_hours(16, 1);
        let mut seen = std::collections::HashSet::new();
        for rep in 0..50 {
            let a = sim_wall_hours(16, 1, &p, rep);
            let b = sim_wall_hours(16, 1, &p, rep);
            assert_eq!(a.to_bits(), b.to_bits());
            assert!((a / base - 1.0).abs() <= 0.1 + 1e-12);
            seen.insert(a.to_bits());
        }
        assert!(seen.len() > 40, "repetitions should differ");
        let other_seed = SimParams {
            seed: 43,
            ..p.clone()
        };
        assert_ne!(
            sim_wall_hours(16, 1, &p, 0).to_bits(),
            sim_wall_hours(16, 1, &other_seed, 0).to_bits()
        );
    }

    fn sim_plan(nodes: u32) -> ProvisioningPlan {
        let req = ResourceRequirements {
            instance_type: Some("hpc7a.12xlarge".into()),
            num_nodes: nodes,
            ..Default::default()
        };
        plan_provisioning(&req, &fixture_catalog(), Backend::Simulated).unwrap()
    }

    #[test]
    fn provision_delay_is_linear() {
        let p = SimParams {
            provision_delay_seconds_per_node: 30.0,
            ..ideal()
        };
        let one = sim_provision(&sim_plan(1), &p).unwrap();
        assert_eq!(one.delay_seconds, 30.0);
        assert_eq!(one.nodes, vec!["node-0".to_string()]);
        assert_eq!(
            sim_provision(&sim_plan(4), &p).unwrap().delay_seconds,
            120.0
        );
    }

    #[test]
    fn provision_rejects_local_plans() {
        let mut plan = sim_plan(1);
        plan.backend = Backend::Local;
        assert_eq!(
            sim_provision(&plan, &ideal()),
            Err(SimError::WrongBackend(Backend::Local))
        );
    }

    #[test]
    fn forced_stockout() {
        let p = SimParams {
            stockout_probability: 1.0,
            ..ideal()
        };
        assert!(matches!(
            sim_provision(&sim_plan(2), &p),
            Err(SimError::SimulatedStockout { nodes: 2, .. })
        ));
    }

    #[test]
    fn stockout_frequency_tracks_probability() {
        // independent check against the configured probability over many seeds
        let hits = (0..2000u64)
            .filter(|&seed| {
                let p = SimParams {
                    stockout_probability: 0.25,
                    seed,
                    ..ideal()
                };
                sim_provision(&sim_plan(1), &p).is_err()
            })
            .count();
        let rate = hits as f64 / 2000.0;
        assert!((rate - 0.25).abs() < 0.04, "rate {rate}");
    }

    #[test]
    fn round_trip_recovers_parameters() {
        let truth = SimParams {
            t_serial_hours: 10.0,
            serial_fraction: 0.1,
            ..Default::default()
        };
        let obs: Vec<_> = [1, 2, 4, 8, 16, 32]
            .iter()
            .map(|&np| Observation::new(np, 1, truth.model_hours(np, 1)))
            .collect();
        let fit = calibrate_model(&obs).unwrap();
        assert!((fit.t_serial_hours / 10.0 - 1.0).abs() < 1e-6);
        assert!((fit.serial_fraction / 0.1 - 1.0).abs() < 1e-6);
        assert_eq!(fit.internode_penalty_per_node_hours, 0.0);
        assert_eq!((fit.jitter_fraction, fit.seed), (0.0, 0));
    }

    #[test]
    fn round_trip_with_penalty() {
        let truth = SimParams {
            t_serial_hours: 10.0,
            serial_fraction: 0.1,
            internode_penalty_per_node_hours: 0.02,
            ..Default::default()
        };
        let obs: Vec<_> = [(8, 1), (16, 1), (32, 2), (48, 2), (64, 4), (96, 4)]
            .iter()
            .map(|&(np, n)| Observation::new(np, n, truth.model_hours(np, n)))
            .collect();
        let fit = calibrate_model(&obs).unwrap();
        assert!((fit.t_serial_hours / 10.0 - 1.0).abs() < 1e-6);
        assert!((fit.serial_fraction / 0.1 - 1.0).abs() < 1e-6);
        assert!((fit.internode_penalty_per_node_hours / 0.02 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn too_few_observations() {
        let obs = [Observation::new(8, 1, 1.0), Observation::new(16, 1, 0.6)];
        assert!(matches!(
            calibrate_model(&obs),
            Err(CalibrationError::Underdetermined(_))
        ));
        let same_np = [
            Observation::new(8, 1, 1.0),
            Observation::new(8, 1, 1.1),
            Observation::new(8, 1, 0.9),
        ];
        assert!(matches!(
            calibrate_model(&same_np),
            Err(CalibrationError::Underdetermined(_))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(ideal().validate().is_ok());
        let bad = SimParams {
            jitter_fraction: 0.5,
            ..ideal()
        };
        assert!(bad.validate().is_err());
        let bad = SimParams {
            serial_fraction: 1.5,
            ..ideal()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shipped_calibration_loads() {
        let p = SimParams::from_toml(FIXTURE_CALIBRATION).unwrap();
        assert!(p.internode_penalty_per_node_hours > 0.0);
        assert!((p.model_hours(8, 1) / 1.38 - 1.0).abs() <= 0.10);
        assert!((p.model_hours(64, 1) / 0.52 - 1.0).abs() <= 0.15);
        // scale-out node counts at np 32/48/64/96
        for (np, nodes) in [(32, 2), (48, 2), (64, 4), (96, 4)] {
            assert!(p.model_hours(np, nodes) > p.model_hours(np, 1));
        }
    }
}
