//! Exact branch-flow power flow for fixed nodal injections.
//!
//! Solves the DistFlow equations on the radial network with the current
//! definition held as an equality, by alternating backward (flow) and
//! forward (voltage) sweeps until the consistency residual
//! `|v_from · l - P² - Q²|` is below tolerance. This is the physical
//! reference against which the conic relaxation and all open-loop schedules
//! are evaluated, so it deliberately shares no code with the solver path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::Feeder;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge at hour {hour}: residual {residual:.3e} after {sweeps} sweeps")]
    NonConvergence {
        hour: usize,
        residual: f64,
        sweeps: usize,
    },
    #[error("injections have {got} nodes, feeder has {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_sweeps: 200,
        }
    }
}

/// Network state for one hour: sending-end flows and squared currents per
/// line, squared voltages per node, and the substation net injection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HourState {
    pub flow_p: Vec<f64>,
    pub flow_q: Vec<f64>,
    pub current_sq: Vec<f64>,
    pub voltage_sq: Vec<f64>,
    pub root_p: f64,
    pub root_q: f64,
    pub residual: f64,
}

/// Full-horizon power flow result, hour-major fields indexed `[line][t]` or
/// `[node][t]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerFlowResult {
    pub flow_p: Vec<Vec<f64>>,
    pub flow_q: Vec<Vec<f64>>,
    pub current_sq: Vec<Vec<f64>>,
    pub voltage_sq: Vec<Vec<f64>>,
    pub root_p: Vec<f64>,
    pub root_q: Vec<f64>,
    pub max_residual: f64,
}

/// Solves one hour for net injections `inj_p[node]`, `inj_q[node]`
/// (generation positive; the root entry is ignored and reported back).
pub fn solve_hour(
    feeder: &Feeder,
    inj_p: &[f64],
    inj_q: &[f64],
    config: &SweepConfig,
) -> Result<HourState, PowerFlowError> {
    let n_nodes = feeder.num_nodes();
    if inj_p.len() != n_nodes || inj_q.len() != n_nodes {
        return Err(PowerFlowError::ShapeMismatch {
            expected: n_nodes,
            got: inj_p.len().min(inj_q.len()),
        });
    }
    let n_lines = feeder.num_lines();
    let mut flow_p = vec![0.0; n_lines];
    let mut flow_q = vec![0.0; n_lines];
    let mut current_sq = vec![0.0; n_lines];
    let mut voltage_sq = vec![feeder.root_voltage_sq; n_nodes];

    let mut residual = f64::INFINITY;
    for sweep in 0..config.max_sweeps {
        // Backward: accumulate flows from the leaves with the latest
        // current estimates providing the loss terms.
        for &node in feeder.topo_order.iter().rev() {
            if let Some(line_id) = feeder.line_into[node.idx()] {
                let line = feeder.line(line_id);
                let mut p = -inj_p[node.idx()];
                let mut q = -inj_q[node.idx()];
                for &child in &feeder.children[node.idx()] {
                    let cl = feeder.line(child);
                    p += flow_p[child.idx()];
                    q += flow_q[child.idx()];
                    let _ = cl;
                }
                flow_p[line_id.idx()] = p + line.resistance_pu * current_sq[line_id.idx()];
                flow_q[line_id.idx()] = q + line.reactance_pu * current_sq[line_id.idx()];
            }
        }
        // Forward: propagate voltages from the root.
        for &node in &feeder.topo_order {
            if let Some(line_id) = feeder.line_into[node.idx()] {
                let line = feeder.line(line_id);
                let v_from = voltage_sq[line.from.idx()];
                let l = current_sq[line_id.idx()];
                voltage_sq[node.idx()] = v_from
                    - 2.0 * line.resistance_pu * flow_p[line_id.idx()]
                    - 2.0 * line.reactance_pu * flow_q[line_id.idx()]
                    + (line.resistance_pu * line.resistance_pu
                        + line.reactance_pu * line.reactance_pu)
                        * l;
            }
        }
        // Current update and residual.
        residual = 0.0;
        for line in &feeder.lines {
            let v_from = voltage_sq[line.from.idx()];
            let p = flow_p[line.id.idx()];
            let q = flow_q[line.id.idx()];
            residual = residual
                .max((v_from * current_sq[line.id.idx()] - p * p - q * q).abs());
            current_sq[line.id.idx()] = (p * p + q * q) / v_from;
        }
        if residual <= config.tolerance {
            let root_p: f64 = feeder.children[0]
                .iter()
                .map(|l| flow_p[l.idx()])
                .sum::<f64>()
                - inj_p[0];
            let root_q: f64 = feeder.children[0]
                .iter()
                .map(|l| flow_q[l.idx()])
                .sum::<f64>()
                - inj_q[0];
            return Ok(HourState {
                flow_p,
                flow_q,
                current_sq,
                voltage_sq,
                root_p,
                root_q,
                residual,
            });
        }
        if !residual.is_finite() {
            return Err(PowerFlowError::NonConvergence {
                hour: 0,
                residual,
                sweeps: sweep + 1,
            });
        }
    }
    Err(PowerFlowError::NonConvergence {
        hour: 0,
        residual,
        sweeps: config.max_sweeps,
    })
}

/// Solves every hour of the horizon. `inj_p[node][t]`, `inj_q[node][t]` are
/// net injections (generation positive; loads enter negatively).
pub fn fixed_injection_powerflow(
    feeder: &Feeder,
    inj_p: &[Vec<f64>],
    inj_q: &[Vec<f64>],
    config: &SweepConfig,
) -> Result<PowerFlowResult, PowerFlowError> {
    let t_len = feeder.horizon;
    let n_lines = feeder.num_lines();
    let n_nodes = feeder.num_nodes();
    let mut result = PowerFlowResult {
        flow_p: vec![vec![0.0; t_len]; n_lines],
        flow_q: vec![vec![0.0; t_len]; n_lines],
        current_sq: vec![vec![0.0; t_len]; n_lines],
        voltage_sq: vec![vec![0.0; t_len]; n_nodes],
        root_p: vec![0.0; t_len],
        root_q: vec![0.0; t_len],
        max_residual: 0.0,
    };
    for t in 0..t_len {
        let p_t: Vec<f64> = (0..n_nodes).map(|j| inj_p[j][t]).collect();
        let q_t: Vec<f64> = (0..n_nodes).map(|j| inj_q[j][t]).collect();
        let hour = solve_hour(feeder, &p_t, &q_t, config).map_err(|e| match e {
            PowerFlowError::NonConvergence {
                residual, sweeps, ..
            } => PowerFlowError::NonConvergence {
                hour: t,
                residual,
                sweeps,
            },
            other => other,
        })?;
        for l in 0..n_lines {
            result.flow_p[l][t] = hour.flow_p[l];
            result.flow_q[l][t] = hour.flow_q[l];
            result.current_sq[l][t] = hour.current_sq[l];
        }
        for j in 0..n_nodes {
            result.voltage_sq[j][t] = hour.voltage_sq[j];
        }
        result.root_p[t] = hour.root_p;
        result.root_q[t] = hour.root_q;
        result.max_residual = result.max_residual.max(hour.residual);
    }
    Ok(result)
}

/// Net injections corresponding to the feeder's fixed loads only.
pub fn load_only_injections(feeder: &Feeder) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let inj_p = feeder
        .load_p
        .iter()
        .map(|row| row.iter().map(|p| -p).collect())
        .collect();
    let inj_q = feeder
        .load_q
        .iter()
        .map(|row| row.iter().map(|q| -q).collect())
        .collect();
    (inj_p, inj_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{to_per_unit, FeederFile};

    fn two_bus_feeder(r_ohm: f64, x_ohm: f64) -> Feeder {
        let text = format!(
            r#"
[meta]
name = "pf-two-bus"
horizon_hours = 1

[bases]
s_kva = 1000.0
levels = [{{ name = "mv", v_kv = 1.0 }}]

[[nodes]]
id = 0
level = "mv"
vmin_pu = 0.8
vmax_pu = 1.1

[[nodes]]
id = 1
parent = 0
level = "mv"
vmin_pu = 0.8
vmax_pu = 1.1

[[lines]]
from = 0
to = 1
r_ohm = {r_ohm}
x_ohm = {x_ohm}
ampacity_a = 5000.0

[series]
lmp_per_kwh = [0.05]
q_price_per_kwh = [0.005]
ambient_c = [25.0]
irradiation = [0.5]
"#
        );
        // v_kv = 1 and s_kva = 1000 give z_base = 1 ohm: r_ohm is r_pu.
        let file: FeederFile = toml::from_str(&text).unwrap();
        to_per_unit(&file).unwrap()
    }

    #[test]
    fn zero_injections_give_flat_profile() {
        let feeder = two_bus_feeder(0.01, 0.01);
        let state = solve_hour(&feeder, &[0.0, 0.0], &[0.0, 0.0], &SweepConfig::default()).unwrap();
        assert_eq!(state.flow_p[0], 0.0);
        assert_eq!(state.current_sq[0], 0.0);
        assert_eq!(state.voltage_sq[1], 1.0);
        assert_eq!(state.root_p, 0.0);
    }

    #[test]
    fn two_bus_half_pu_load_matches_fixed_point() {
        // Fixed point of l = (0.5 + 0.01 l)² + (0.01 l)², computed
        // independently by scalar iteration.
        let feeder = two_bus_feeder(0.01, 0.01);
        let state =
            solve_hour(&feeder, &[0.0, -0.5], &[0.0, 0.0], &SweepConfig::default()).unwrap();
        assert!((state.current_sq[0] - 0.2525381364667414).abs() < 1e-9);
        assert!((state.flow_p[0] - 0.5025253813646674).abs() < 1e-9);
        assert!((state.flow_q[0] - 0.002525381364667414).abs() < 1e-9);
        assert!((state.voltage_sq[1] - 0.9899494923727067).abs() < 1e-9);
        assert!((state.root_p - state.flow_p[0]).abs() < 1e-15);
        assert!(state.residual <= 1e-10);
    }

    #[test]
    fn lossless_line_passes_power_through() {
        let feeder = two_bus_feeder(0.0, 0.0);
        let state =
            solve_hour(&feeder, &[0.0, -0.3], &[0.0, -0.1], &SweepConfig::default()).unwrap();
        assert!((state.flow_p[0] - 0.3).abs() < 1e-12);
        assert!((state.flow_q[0] - 0.1).abs() < 1e-12);
        assert!((state.voltage_sq[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diverges_cleanly_past_loadability() {
        // A 1 pu impedance line cannot deliver 2 pu of power.
        let feeder = two_bus_feeder(1.0, 0.0);
        let result = solve_hour(&feeder, &[0.0, -2.0], &[0.0, 0.0], &SweepConfig::default());
        assert!(matches!(result, Err(PowerFlowError::NonConvergence { .. })));
    }
}
