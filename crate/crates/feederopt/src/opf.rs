//! Day-ahead operational planning problem: assembly, solve, and diagnostics.
//!
//! The problem minimizes substation real/reactive energy cost plus (in full
//! mode) transformer degradation cost over the horizon, subject to the
//! branch-flow network equations with the current-definition equality
//! relaxed to a second-order cone, voltage and ampacity limits, the affine
//! transformer thermal model, and the device feasible sets. Dropping the
//! transformer cost and thermal rows yields the pure energy co-optimization
//! variant.
//!
//! Boundary conditions: the transformer top-oil state and any EV whose
//! itinerary closes on itself can either start from fixed initial values or
//! be required to coincide at the beginning and end of the daily cycle. The
//! cyclic variant is expressed as hard linear wrap-around rows inside one
//! solve; no outer fixed-point iteration is involved.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{
    verify_kkt, ConicProblem, ConicSolver, KktResiduals, SocBlock, SolveError, SolveStatus,
    SolverConfig,
};
use crate::der::{DerFleet, DerSchedule, DeviceSchedule};
use crate::net::{Feeder, LineId};
use crate::thermal::{
    build_pwl, linearize, top_oil_initial, LinearizedCoefficients, TransformerParams,
    DEFAULT_PWL_BREAKPOINTS,
};

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("thermal model error: {0}")]
    Thermal(#[from] crate::thermal::ThermalError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpfOptions {
    /// Include transformer degradation cost and thermal rows (full mode).
    /// When false the problem reduces to energy-only co-optimization.
    pub include_transformer_cost: bool,
    /// Tie thermal state and wrapping EV charge at the cycle boundary.
    pub cyclic: bool,
    /// Squared transformer current assumed before the horizon when the
    /// boundary is not cyclic, pu².
    pub initial_current_sq_pu: f64,
    /// Breakpoints for the piecewise-linear aging overestimator.
    pub pwl_breakpoints: Vec<f64>,
    pub solver: SolverConfig,
    /// Tolerance on the cone gap `v·l - P² - Q²` beyond which a line-hour is
    /// flagged as inexact.
    pub exactness_tol: f64,
}

impl Default for OpfOptions {
    fn default() -> Self {
        Self {
            include_transformer_cost: true,
            cyclic: true,
            initial_current_sq_pu: 0.0,
            pwl_breakpoints: DEFAULT_PWL_BREAKPOINTS.to_vec(),
            solver: SolverConfig::default(),
            exactness_tol: 1e-6,
        }
    }
}

impl OpfOptions {
    /// Energy-only variant: no degradation cost, no thermal rows.
    pub fn pq_only() -> Self {
        Self {
            include_transformer_cost: false,
            ..Self::default()
        }
    }
}

/// Affine thermal model attached to one transformer line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerModel {
    pub line: LineId,
    pub params: TransformerParams,
    pub lin: LinearizedCoefficients,
}

// ---------------------------------------------------------------------------
// Variable and row bookkeeping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvVars {
    /// (hour, p-var, q-var) per plugged hour, time-ordered.
    hours: Vec<(usize, usize, usize)>,
    arrive: Vec<usize>,
    depart: Vec<usize>,
    /// (arrive boundary, depart boundary) per interval, for reading SoC back.
    boundaries: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VarMap {
    horizon: usize,
    flow_p: usize,
    flow_q: usize,
    current: usize,
    voltage: usize,
    inj_p: usize,
    inj_q: usize,
    root_p: usize,
    root_q: usize,
    /// Per transformer: (first h var covering boundaries 0..=T, first f var).
    xfmr: Vec<(usize, usize)>,
    /// Per PV: (first p var, first q var), T of each.
    pv: Vec<(usize, usize)>,
    ev: Vec<EvVars>,
}

impl VarMap {
    fn flow_p(&self, line: usize, t: usize) -> usize {
        self.flow_p + line * self.horizon + t
    }
    fn flow_q(&self, line: usize, t: usize) -> usize {
        self.flow_q + line * self.horizon + t
    }
    fn current(&self, line: usize, t: usize) -> usize {
        self.current + line * self.horizon + t
    }
    fn voltage(&self, node: usize, t: usize) -> usize {
        self.voltage + node * self.horizon + t
    }
    fn inj_p(&self, node: usize, t: usize) -> usize {
        debug_assert!(node >= 1);
        self.inj_p + (node - 1) * self.horizon + t
    }
    fn inj_q(&self, node: usize, t: usize) -> usize {
        debug_assert!(node >= 1);
        self.inj_q + (node - 1) * self.horizon + t
    }
    fn root_p(&self, t: usize) -> usize {
        self.root_p + t
    }
    fn root_q(&self, t: usize) -> usize {
        self.root_q + t
    }
    /// Top-oil state at boundary `b` in `0..=T`.
    fn xfmr_h(&self, y: usize, b: usize) -> usize {
        self.xfmr[y].0 + b
    }
    /// Aging factor during hour `t`.
    fn xfmr_f(&self, y: usize, t: usize) -> usize {
        self.xfmr[y].1 + t
    }
    fn pv_p(&self, s: usize, t: usize) -> usize {
        self.pv[s].0 + t
    }
    fn pv_q(&self, s: usize, t: usize) -> usize {
        self.pv[s].1 + t
    }
}

/// Offsets of dual-bearing row groups inside the conic problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RowMap {
    horizon: usize,
    // Equality group offsets.
    balance_p: usize,
    balance_q: usize,
    // Inequality group offsets.
    v_upper: usize,
    v_lower: usize,
    ampacity: usize,
    /// Per transformer: first epigraph row; rows are (t, segment)-major.
    epigraph: Vec<usize>,
    num_segments: usize,
    // Row-count bookkeeping for diagnostics and tests.
    eq_recursion_rows: usize,
    eq_boundary_rows: usize,
}

impl RowMap {
    fn balance_p(&self, node: usize, t: usize) -> usize {
        self.balance_p + node * self.horizon + t
    }
    fn balance_q(&self, node: usize, t: usize) -> usize {
        self.balance_q + node * self.horizon + t
    }
    fn v_upper(&self, node: usize, t: usize) -> usize {
        // Bounds exist for non-root nodes only.
        self.v_upper + (node - 1) * self.horizon + t
    }
    fn v_lower(&self, node: usize, t: usize) -> usize {
        self.v_lower + (node - 1) * self.horizon + t
    }
    fn ampacity(&self, line: usize, t: usize) -> usize {
        self.ampacity + line * self.horizon + t
    }
    fn epigraph(&self, y: usize, t: usize, segment: usize) -> usize {
        self.epigraph[y] + t * self.num_segments + segment
    }
}

/// Assembled conic program plus the index maps needed to read a solution
/// back in network terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpfProblem {
    pub conic: ConicProblem,
    pub transformers: Vec<TransformerModel>,
    pub options: OpfOptions,
    vars: VarMap,
    rows: RowMap,
    num_nodes: usize,
    num_lines: usize,
    num_pv: usize,
    num_ev: usize,
}

impl OpfProblem {
    pub fn num_variables(&self) -> usize {
        self.conic.num_vars
    }
    pub fn num_equalities(&self) -> usize {
        self.conic.eq_rhs.len()
    }
    pub fn num_inequalities(&self) -> usize {
        self.conic.ineq_rhs.len()
    }
    pub fn num_cone_blocks(&self) -> usize {
        self.conic.soc_blocks.len()
    }
    /// Epigraph rows across all transformers.
    pub fn num_epigraph_rows(&self) -> usize {
        self.transformers.len() * self.rows.horizon * self.rows.num_segments
    }
    /// Thermal recursion rows across all transformers.
    pub fn num_recursion_rows(&self) -> usize {
        self.rows.eq_recursion_rows
    }
    /// Initial-condition or cycle-closure rows across all transformers.
    pub fn num_thermal_boundary_rows(&self) -> usize {
        self.rows.eq_boundary_rows
    }
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Builds the conic program for a feeder and DER fleet.
pub fn assemble(
    feeder: &Feeder,
    fleet: &DerFleet,
    options: &OpfOptions,
) -> Result<OpfProblem, OpfError> {
    let t_len = feeder.horizon;
    if t_len == 0 {
        return Err(OpfError::Assembly("horizon is empty".into()));
    }
    let n_nodes = feeder.num_nodes();
    let n_lines = feeder.num_lines();
    let s_dt = feeder.pu_to_kwh();

    let root = &feeder.nodes[0];
    if feeder.root_voltage_sq < root.voltage_min_sq - 1e-12
        || feeder.root_voltage_sq > root.voltage_max_sq + 1e-12
    {
        return Err(OpfError::Assembly(format!(
            "root voltage setpoint {:.4} pu² violates the root bounds",
            feeder.root_voltage_sq
        )));
    }
    for pv in &fleet.pvs {
        if pv.irradiation.len() != t_len {
            return Err(OpfError::Assembly(
                "pv irradiation length disagrees with the horizon".into(),
            ));
        }
    }
    for ev in &fleet.evs {
        for iv in &ev.itinerary.intervals {
            if iv.depart > t_len {
                return Err(OpfError::Assembly(
                    "ev plug window exceeds the horizon".into(),
                ));
            }
        }
    }

    let transformers: Vec<TransformerModel> = if options.include_transformer_cost {
        let pwl = build_pwl(&options.pwl_breakpoints)?;
        feeder
            .transformer_lines()
            .into_iter()
            .map(|(line, params)| TransformerModel {
                line,
                params: params.clone(),
                lin: linearize(params, &pwl, &feeder.ambient_c, feeder.dt_hours),
            })
            .collect()
    } else {
        Vec::new()
    };
    let num_segments = transformers
        .first()
        .map(|x| x.lin.alpha1.len())
        .unwrap_or(0);

    let mut pb = ConicProblem::new();

    // --- Variables ---------------------------------------------------------
    let mut alloc_block = |pb: &mut ConicProblem, count: usize| -> usize {
        let first = pb.num_vars;
        for _ in 0..count {
            pb.add_var(0.0);
        }
        first
    };
    let flow_p = alloc_block(&mut pb, n_lines * t_len);
    let flow_q = alloc_block(&mut pb, n_lines * t_len);
    let current = alloc_block(&mut pb, n_lines * t_len);
    let voltage = alloc_block(&mut pb, n_nodes * t_len);
    let inj_p = alloc_block(&mut pb, (n_nodes - 1) * t_len);
    let inj_q = alloc_block(&mut pb, (n_nodes - 1) * t_len);
    let root_p = {
        let first = pb.num_vars;
        for t in 0..t_len {
            pb.add_var(feeder.lmp[t] * s_dt);
        }
        first
    };
    let root_q = {
        let first = pb.num_vars;
        for t in 0..t_len {
            pb.add_var(feeder.q_price[t] * s_dt);
        }
        first
    };
    let mut xfmr_vars = Vec::with_capacity(transformers.len());
    for model in &transformers {
        let h0 = alloc_block(&mut pb, t_len + 1);
        let f0 = pb.num_vars;
        for _ in 0..t_len {
            pb.add_var(model.params.hourly_cost * feeder.dt_hours);
        }
        xfmr_vars.push((h0, f0));
    }
    let mut pv_vars = Vec::with_capacity(fleet.pvs.len());
    for _ in &fleet.pvs {
        let p0 = alloc_block(&mut pb, t_len);
        let q0 = alloc_block(&mut pb, t_len);
        pv_vars.push((p0, q0));
    }
    let mut ev_vars = Vec::with_capacity(fleet.evs.len());
    for ev in &fleet.evs {
        let mut hours = Vec::new();
        for (h, _) in ev.plugged_hours() {
            let p = pb.add_var(0.0);
            let q = pb.add_var(0.0);
            hours.push((h, p, q));
        }
        let z_count = ev.itinerary.intervals.len();
        let arrive: Vec<usize> = (0..z_count).map(|_| pb.add_var(0.0)).collect();
        let depart: Vec<usize> = (0..z_count).map(|_| pb.add_var(0.0)).collect();
        let boundaries = ev
            .itinerary
            .intervals
            .iter()
            .map(|iv| (iv.arrive, iv.depart))
            .collect();
        ev_vars.push(EvVars {
            hours,
            arrive,
            depart,
            boundaries,
        });
    }

    let vars = VarMap {
        horizon: t_len,
        flow_p,
        flow_q,
        current,
        voltage,
        inj_p,
        inj_q,
        root_p,
        root_q,
        xfmr: xfmr_vars,
        pv: pv_vars,
        ev: ev_vars,
    };

    // --- Equality rows -------------------------------------------------
    // Nodal real-power balance, one row per (node, hour), root first. The
    // dual of this row (negated) is the nodal price.
    let balance_p_offset = pb.eq_rhs.len();
    for node in 0..n_nodes {
        for t in 0..t_len {
            let mut row: Vec<(usize, f64)> = Vec::new();
            if node == 0 {
                row.push((vars.root_p(t), 1.0));
            } else {
                let line = feeder.line_into[node].unwrap();
                let l = feeder.line(line);
                row.push((vars.flow_p(line.idx(), t), 1.0));
                row.push((vars.current(line.idx(), t), -l.resistance_pu));
                row.push((vars.inj_p(node, t), 1.0));
            }
            for &child in &feeder.children[node] {
                row.push((vars.flow_p(child.idx(), t), -1.0));
            }
            pb.add_eq(row, 0.0);
        }
    }
    let balance_q_offset = pb.eq_rhs.len();
    for node in 0..n_nodes {
        for t in 0..t_len {
            let mut row: Vec<(usize, f64)> = Vec::new();
            if node == 0 {
                row.push((vars.root_q(t), 1.0));
            } else {
                let line = feeder.line_into[node].unwrap();
                let l = feeder.line(line);
                row.push((vars.flow_q(line.idx(), t), 1.0));
                row.push((vars.current(line.idx(), t), -l.reactance_pu));
                row.push((vars.inj_q(node, t), 1.0));
            }
            for &child in &feeder.children[node] {
                row.push((vars.flow_q(child.idx(), t), -1.0));
            }
            pb.add_eq(row, 0.0);
        }
    }
    // Voltage drop along each line.
    for line in &feeder.lines {
        let (r, x) = (line.resistance_pu, line.reactance_pu);
        let z_sq = r * r + x * x;
        for t in 0..t_len {
            pb.add_eq(
                vec![
                    (vars.voltage(line.to.idx(), t), 1.0),
                    (vars.voltage(line.from.idx(), t), -1.0),
                    (vars.flow_p(line.id.idx(), t), 2.0 * r),
                    (vars.flow_q(line.id.idx(), t), 2.0 * x),
                    (vars.current(line.id.idx(), t), -z_sq),
                ],
                0.0,
            );
        }
    }
    // The substation bus is held at its setpoint.
    for t in 0..t_len {
        pb.add_eq(vec![(vars.voltage(0, t), 1.0)], feeder.root_voltage_sq);
    }
    // Net-injection definitions: devices minus fixed load.
    for node in 1..n_nodes {
        for t in 0..t_len {
            let mut row = vec![(vars.inj_p(node, t), 1.0)];
            for (s, pv) in fleet.pvs.iter().enumerate() {
                if pv.node.idx() == node {
                    row.push((vars.pv_p(s, t), -1.0));
                }
            }
            for (e, ev) in fleet.evs.iter().enumerate() {
                if ev.node_at(t).map(|n| n.idx()) == Some(node) {
                    if let Some(&(_, p, _)) = vars.ev[e].hours.iter().find(|(h, _, _)| *h == t) {
                        row.push((p, 1.0));
                    }
                }
            }
            pb.add_eq(row, -feeder.load_p[node][t]);

            let mut row = vec![(vars.inj_q(node, t), 1.0)];
            for (s, pv) in fleet.pvs.iter().enumerate() {
                if pv.node.idx() == node {
                    row.push((vars.pv_q(s, t), -1.0));
                }
            }
            for (e, ev) in fleet.evs.iter().enumerate() {
                if ev.node_at(t).map(|n| n.idx()) == Some(node) {
                    if let Some(&(_, _, q)) = vars.ev[e].hours.iter().find(|(h, _, _)| *h == t) {
                        row.push((q, 1.0));
                    }
                }
            }
            pb.add_eq(row, -feeder.load_q[node][t]);
        }
    }
    // Thermal recursion and boundary rows.
    let mut eq_recursion_rows = 0;
    let mut eq_boundary_rows = 0;
    for (y, model) in transformers.iter().enumerate() {
        let lin = &model.lin;
        let line = model.line.idx();
        for t in 0..t_len {
            pb.add_eq(
                vec![
                    (vars.xfmr_h(y, t + 1), 1.0),
                    (vars.xfmr_h(y, t), -lin.gamma1),
                    (vars.current(line, t), -lin.gamma2),
                ],
                lin.delta[t],
            );
            eq_recursion_rows += 1;
        }
        if options.cyclic {
            pb.add_eq(
                vec![(vars.xfmr_h(y, 0), 1.0), (vars.xfmr_h(y, t_len), -1.0)],
                0.0,
            );
        } else {
            let h_init = top_oil_initial(
                &model.params,
                feeder.ambient_c[0],
                options.initial_current_sq_pu,
            );
            pb.add_eq(vec![(vars.xfmr_h(y, 0), 1.0)], h_init);
        }
        eq_boundary_rows += 1;
    }
    // PV dark hours are pinned to zero.
    for (s, pv) in fleet.pvs.iter().enumerate() {
        for t in 0..t_len {
            if !pv.is_daylight(t) {
                pb.add_eq(vec![(vars.pv_p(s, t), 1.0)], 0.0);
                pb.add_eq(vec![(vars.pv_q(s, t), 1.0)], 0.0);
            }
        }
    }
    // EV state-of-charge chains.
    for (e, ev) in fleet.evs.iter().enumerate() {
        let ev_var = &vars.ev[e];
        let z_count = ev.itinerary.intervals.len();
        for (z, interval) in ev.itinerary.intervals.iter().enumerate() {
            let mut row = vec![(ev_var.depart[z], 1.0), (ev_var.arrive[z], -1.0)];
            for &(h, p, _) in &ev_var.hours {
                if interval.hours().contains(&h) {
                    row.push((p, -feeder.dt_hours));
                }
            }
            pb.add_eq(row, 0.0);
            if z + 1 < z_count {
                pb.add_eq(
                    vec![(ev_var.arrive[z + 1], 1.0), (ev_var.depart[z], -1.0)],
                    -ev.itinerary.trip_drops[z],
                );
            }
        }
        match (options.cyclic, ev.itinerary.wrap_drop) {
            (true, Some(wrap)) => {
                pb.add_eq(
                    vec![(ev_var.arrive[0], 1.0), (ev_var.depart[z_count - 1], -1.0)],
                    -wrap,
                );
            }
            _ => {
                pb.add_eq(vec![(ev_var.arrive[0], 1.0)], ev.itinerary.initial_soc);
            }
        }
    }

    // --- Inequality rows -------------------------------------------------
    let v_upper_offset = pb.ineq_rhs.len();
    for node in 1..n_nodes {
        for t in 0..t_len {
            pb.add_ineq(
                vec![(vars.voltage(node, t), 1.0)],
                feeder.nodes[node].voltage_max_sq,
            );
        }
    }
    let v_lower_offset = pb.ineq_rhs.len();
    for node in 1..n_nodes {
        for t in 0..t_len {
            pb.add_ineq(
                vec![(vars.voltage(node, t), -1.0)],
                -feeder.nodes[node].voltage_min_sq,
            );
        }
    }
    let ampacity_offset = pb.ineq_rhs.len();
    for line in &feeder.lines {
        for t in 0..t_len {
            pb.add_ineq(
                vec![(vars.current(line.id.idx(), t), 1.0)],
                line.ampacity_sq_pu,
            );
        }
    }
    for line in 0..n_lines {
        for t in 0..t_len {
            pb.add_ineq(vec![(vars.current(line, t), -1.0)], 0.0);
        }
    }
    let mut epigraph_offsets = Vec::with_capacity(transformers.len());
    for (y, model) in transformers.iter().enumerate() {
        let lin = &model.lin;
        let line = model.line.idx();
        epigraph_offsets.push(pb.ineq_rhs.len());
        for t in 0..t_len {
            for k in 0..lin.alpha1.len() {
                pb.add_ineq(
                    vec![
                        (vars.xfmr_f(y, t), -1.0),
                        (vars.xfmr_h(y, t + 1), lin.alpha1[k]),
                        (vars.current(line, t), lin.alpha2[k]),
                    ],
                    -lin.beta[k],
                );
            }
        }
        for t in 0..t_len {
            pb.add_ineq(vec![(vars.xfmr_f(y, t), -1.0)], 0.0);
        }
    }
    for (s, pv) in fleet.pvs.iter().enumerate() {
        for t in 0..t_len {
            if pv.is_daylight(t) {
                pb.add_ineq(vec![(vars.pv_p(s, t), 1.0)], pv.adjusted_capacity(t));
                pb.add_ineq(vec![(vars.pv_p(s, t), -1.0)], 0.0);
            }
        }
    }
    for (e, ev) in fleet.evs.iter().enumerate() {
        let ev_var = &vars.ev[e];
        for &(_, p, _) in &ev_var.hours {
            pb.add_ineq(vec![(p, 1.0)], ev.max_charge_rate);
            pb.add_ineq(vec![(p, -1.0)], 0.0);
        }
        for (z, interval) in ev.itinerary.intervals.iter().enumerate() {
            pb.add_ineq(vec![(ev_var.arrive[z], -1.0)], 0.0);
            pb.add_ineq(vec![(ev_var.depart[z], 1.0)], ev.battery_capacity);
            let min_soc = interval.min_soc_at_depart.unwrap_or(0.0);
            pb.add_ineq(vec![(ev_var.depart[z], -1.0)], -min_soc);
        }
    }

    // --- Cone blocks -------------------------------------------------------
    // Relaxed current definition per line-hour:
    // (v_from + l, v_from - l, 2P, 2Q) in SOC4 encodes v_from·l ≥ P² + Q².
    for line in &feeder.lines {
        let from = line.from.idx();
        let id = line.id.idx();
        for t in 0..t_len {
            pb.add_soc(SocBlock {
                coeffs: vec![
                    vec![(vars.voltage(from, t), -1.0), (vars.current(id, t), -1.0)],
                    vec![(vars.voltage(from, t), -1.0), (vars.current(id, t), 1.0)],
                    vec![(vars.flow_p(id, t), -2.0)],
                    vec![(vars.flow_q(id, t), -2.0)],
                ],
                rhs: vec![0.0, 0.0, 0.0, 0.0],
            });
        }
    }
    for (s, pv) in fleet.pvs.iter().enumerate() {
        for t in 0..t_len {
            if pv.is_daylight(t) {
                pb.add_soc(SocBlock {
                    coeffs: vec![vec![], vec![(vars.pv_p(s, t), -1.0)], vec![(vars.pv_q(s, t), -1.0)]],
                    rhs: vec![pv.capacity_pu, 0.0, 0.0],
                });
            }
        }
    }
    for (e, ev) in fleet.evs.iter().enumerate() {
        for &(_, p, q) in &vars.ev[e].hours {
            pb.add_soc(SocBlock {
                coeffs: vec![vec![], vec![(p, -1.0)], vec![(q, -1.0)]],
                rhs: vec![ev.charger_capacity, 0.0, 0.0],
            });
        }
    }

    let rows = RowMap {
        horizon: t_len,
        balance_p: balance_p_offset,
        balance_q: balance_q_offset,
        v_upper: v_upper_offset,
        v_lower: v_lower_offset,
        ampacity: ampacity_offset,
        epigraph: epigraph_offsets,
        num_segments,
        eq_recursion_rows,
        eq_boundary_rows,
    };

    Ok(OpfProblem {
        conic: pb,
        transformers,
        options: options.clone(),
        vars,
        rows,
        num_nodes: n_nodes,
        num_lines: n_lines,
        num_pv: fleet.pvs.len(),
        num_ev: fleet.evs.len(),
    })
}

// ---------------------------------------------------------------------------
// Solution
// ---------------------------------------------------------------------------

/// Primal and dual solution of the planning problem, in network terms.
///
/// Duals follow the consumption convention: `lambda_p[j][t]` is the marginal
/// objective increase ($) per additional pu of real consumption at node `j`
/// during hour `t`. Dividing by `feeder.pu_to_kwh()` yields $/kWh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpfSolution {
    pub status: SolveStatus,
    /// Objective, $ over the horizon.
    pub objective: f64,
    pub flow_p: Vec<Vec<f64>>,
    pub flow_q: Vec<Vec<f64>>,
    pub current_sq: Vec<Vec<f64>>,
    pub voltage_sq: Vec<Vec<f64>>,
    /// Net injection per node and hour (root entries = substation import).
    pub inj_p: Vec<Vec<f64>>,
    pub inj_q: Vec<Vec<f64>>,
    pub root_p: Vec<f64>,
    pub root_q: Vec<f64>,
    /// Top-oil trajectory per transformer, boundaries `0..=T`.
    pub top_oil: Vec<Vec<f64>>,
    /// Modeled (piecewise-linear) aging factor per transformer and hour.
    pub aging: Vec<Vec<f64>>,
    pub transformers: Vec<TransformerModel>,
    pub der: DerSchedule,
    /// SoC at interval boundaries per EV: (hour boundary, pu·h).
    pub ev_soc: Vec<Vec<(usize, f64)>>,
    pub lambda_p: Vec<Vec<f64>>,
    pub lambda_q: Vec<Vec<f64>>,
    pub mu_v_upper: Vec<Vec<f64>>,
    pub mu_v_lower: Vec<Vec<f64>>,
    pub mu_ampacity: Vec<Vec<f64>>,
    /// Epigraph-row duals per transformer, hour, segment.
    pub xi: Vec<Vec<Vec<f64>>>,
    pub kkt: KktResiduals,
    /// Set when complementarity suggests the duals are not unique.
    pub degenerate_duals: bool,
    pub cyclic: bool,
    pub iterations: u32,
    pub solve_time_s: f64,
}

/// Solves an assembled problem and reads the solution back in network terms.
pub fn solve(problem: &OpfProblem, solver: &dyn ConicSolver) -> Result<OpfSolution, OpfError> {
    let sol = solver.solve(&problem.conic, &problem.options.solver)?;
    let vars = &problem.vars;
    let rows = &problem.rows;
    let t_len = vars.horizon;
    let n_nodes = problem.num_nodes;
    let n_lines = problem.num_lines;
    let x = &sol.x;

    let grid = |f: &dyn Fn(usize, usize) -> usize, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..t_len).map(|t| x[f(i, t)]).collect())
            .collect()
    };
    let flow_p = grid(&|l, t| vars.flow_p(l, t), n_lines);
    let flow_q = grid(&|l, t| vars.flow_q(l, t), n_lines);
    let current_sq = grid(&|l, t| vars.current(l, t), n_lines);
    let voltage_sq = grid(&|n, t| vars.voltage(n, t), n_nodes);
    let root_p: Vec<f64> = (0..t_len).map(|t| x[vars.root_p(t)]).collect();
    let root_q: Vec<f64> = (0..t_len).map(|t| x[vars.root_q(t)]).collect();
    let mut inj_p = vec![vec![0.0; t_len]; n_nodes];
    let mut inj_q = vec![vec![0.0; t_len]; n_nodes];
    inj_p[0] = root_p.clone();
    inj_q[0] = root_q.clone();
    for node in 1..n_nodes {
        for t in 0..t_len {
            inj_p[node][t] = x[vars.inj_p(node, t)];
            inj_q[node][t] = x[vars.inj_q(node, t)];
        }
    }
    let top_oil: Vec<Vec<f64>> = (0..problem.transformers.len())
        .map(|y| (0..=t_len).map(|b| x[vars.xfmr_h(y, b)]).collect())
        .collect();
    let aging: Vec<Vec<f64>> = (0..problem.transformers.len())
        .map(|y| (0..t_len).map(|t| x[vars.xfmr_f(y, t)]).collect())
        .collect();

    let mut der = DerSchedule {
        pv: Vec::with_capacity(problem.num_pv),
        ev: Vec::with_capacity(problem.num_ev),
    };
    for s in 0..problem.num_pv {
        let mut sched = DeviceSchedule::zeros(t_len);
        for t in 0..t_len {
            sched.real[t] = x[vars.pv_p(s, t)];
            sched.reactive[t] = x[vars.pv_q(s, t)];
        }
        der.pv.push(sched);
    }
    let mut ev_soc = Vec::with_capacity(problem.num_ev);
    for ev_var in &vars.ev {
        let mut sched = DeviceSchedule::zeros(t_len);
        for &(h, p, q) in &ev_var.hours {
            sched.real[h] = x[p];
            sched.reactive[h] = x[q];
        }
        der.ev.push(sched);
        let mut soc = Vec::with_capacity(2 * ev_var.boundaries.len());
        for (z, &(arrive_h, depart_h)) in ev_var.boundaries.iter().enumerate() {
            soc.push((arrive_h, x[ev_var.arrive[z]]));
            soc.push((depart_h, x[ev_var.depart[z]]));
        }
        ev_soc.push(soc);
    }

    // Duals: the nodal price is the negated equality dual.
    let lam = |offset: &dyn Fn(usize, usize) -> usize| -> Vec<Vec<f64>> {
        (0..n_nodes)
            .map(|j| (0..t_len).map(|t| -sol.eq_duals[offset(j, t)]).collect())
            .collect()
    };
    let lambda_p = lam(&|j, t| rows.balance_p(j, t));
    let lambda_q = lam(&|j, t| rows.balance_q(j, t));
    let mut mu_v_upper = vec![vec![0.0; t_len]; n_nodes];
    let mut mu_v_lower = vec![vec![0.0; t_len]; n_nodes];
    for node in 1..n_nodes {
        for t in 0..t_len {
            mu_v_upper[node][t] = sol.ineq_duals[rows.v_upper(node, t)];
            mu_v_lower[node][t] = sol.ineq_duals[rows.v_lower(node, t)];
        }
    }
    let mut mu_ampacity = vec![vec![0.0; t_len]; n_lines];
    for line in 0..n_lines {
        for t in 0..t_len {
            mu_ampacity[line][t] = sol.ineq_duals[rows.ampacity(line, t)];
        }
    }
    let xi: Vec<Vec<Vec<f64>>> = (0..problem.transformers.len())
        .map(|y| {
            (0..t_len)
                .map(|t| {
                    (0..rows.num_segments)
                        .map(|k| sol.ineq_duals[rows.epigraph(y, t, k)])
                        .collect()
                })
                .collect()
        })
        .collect();

    let kkt = verify_kkt(&problem.conic, &sol);
    let degenerate_duals = detect_degeneracy(&problem.conic, &sol);

    Ok(OpfSolution {
        status: sol.status,
        objective: sol.objective,
        flow_p,
        flow_q,
        current_sq,
        voltage_sq,
        inj_p,
        inj_q,
        root_p,
        root_q,
        top_oil,
        aging,
        transformers: problem.transformers.clone(),
        der,
        ev_soc,
        lambda_p,
        lambda_q,
        mu_v_upper,
        mu_v_lower,
        mu_ampacity,
        xi,
        kkt,
        degenerate_duals,
        cyclic: problem.options.cyclic,
        iterations: sol.iterations,
        solve_time_s: sol.solve_time_s,
    })
}

/// Assembles and solves in one call with the cyclic boundary enforced.
pub fn cyclic_fixpoint(
    feeder: &Feeder,
    fleet: &DerFleet,
    options: &OpfOptions,
    solver: &dyn ConicSolver,
) -> Result<OpfSolution, OpfError> {
    let mut options = options.clone();
    options.cyclic = true;
    let problem = assemble(feeder, fleet, &options)?;
    solve(&problem, solver)
}

/// Flags optima where an inequality has both near-zero slack and near-zero
/// dual, the usual symptom of non-unique prices.
fn detect_degeneracy(problem: &ConicProblem, sol: &crate::conic::ConicSolution) -> bool {
    let scale = 1e-6;
    for ((coeffs, rhs), dual) in problem
        .ineq_coeffs
        .iter()
        .zip(&problem.ineq_rhs)
        .zip(&sol.ineq_duals)
    {
        let ax: f64 = coeffs.iter().map(|&(c, v)| v * sol.x[c]).sum();
        let slack = rhs - ax;
        if slack.abs() < scale * (1.0 + rhs.abs()) && dual.abs() < scale {
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Exactness of the cone relaxation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactnessReport {
    /// Cone gap `v_from·l - P² - Q²` per line and hour, pu².
    pub gap: Vec<Vec<f64>>,
    pub max_gap: f64,
    /// Line-hours whose gap exceeds the tolerance: the relaxation did not
    /// recover a physical power flow there.
    pub inexact: Vec<(LineId, usize)>,
}

impl ExactnessReport {
    pub fn is_exact(&self) -> bool {
        self.inexact.is_empty()
    }
}

/// Computes the relaxation gap at a solution. Gaps beyond tolerance are
/// flagged, not repaired.
pub fn exactness_check(solution: &OpfSolution, feeder: &Feeder, tol: f64) -> ExactnessReport {
    let t_len = feeder.horizon;
    let mut gap = vec![vec![0.0; t_len]; feeder.num_lines()];
    let mut max_gap = f64::NEG_INFINITY;
    let mut inexact = Vec::new();
    for line in &feeder.lines {
        let from = line.from.idx();
        let id = line.id.idx();
        for t in 0..t_len {
            let g = solution.voltage_sq[from][t] * solution.current_sq[id][t]
                - solution.flow_p[id][t].powi(2)
                - solution.flow_q[id][t].powi(2);
            gap[id][t] = g;
            max_gap = max_gap.max(g);
            if g > tol {
                inexact.push((line.id, t));
            }
        }
    }
    ExactnessReport {
        gap,
        max_gap,
        inexact,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::ClarabelSolver;
    use crate::net::{to_per_unit, FeederFile};

    fn two_bus(t_len: usize, load_kw: f64, r_ohm: f64, x_ohm: f64) -> Feeder {
        let lmp: Vec<String> = (0..t_len).map(|t| format!("{}", 0.05 + 0.01 * t as f64)).collect();
        let qp: Vec<String> = (0..t_len).map(|t| format!("{}", 0.005 + 0.001 * t as f64)).collect();
        let amb: Vec<String> = (0..t_len).map(|_| "25.0".to_string()).collect();
        let rho: Vec<String> = (0..t_len).map(|_| "0.0".to_string()).collect();
        let load: Vec<String> = (0..t_len).map(|_| format!("{load_kw}")).collect();
        let text = format!(
            r#"
[meta]
name = "opf-two-bus"
horizon_hours = {t_len}

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
load_profile = "flat"
power_factor = 1.0

[[lines]]
from = 0
to = 1
r_ohm = {r_ohm}
x_ohm = {x_ohm}
ampacity_a = 5000.0

[profiles]
flat = [{load}]

[series]
lmp_per_kwh = [{lmp}]
q_price_per_kwh = [{qp}]
ambient_c = [{amb}]
irradiation = [{rho}]
"#,
            load = load.join(", "),
            lmp = lmp.join(", "),
            qp = qp.join(", "),
            amb = amb.join(", "),
            rho = rho.join(", "),
        );
        let file: FeederFile = toml::from_str(&text).unwrap();
        to_per_unit(&file).unwrap()
    }

    #[test]
    fn two_bus_row_and_variable_counts() {
        let feeder = two_bus(2, 100.0, 0.01, 0.01);
        let problem = assemble(&feeder, &DerFleet::default(), &OpfOptions::default()).unwrap();
        // Variables: P, Q, l per line-hour (6), v per node-hour (4),
        // injections per non-root node-hour (4), substation p/q (4).
        assert_eq!(problem.num_variables(), 18);
        // Equalities: balance 8, voltage drop 2, root voltage 2, injection
        // definitions 4.
        assert_eq!(problem.num_equalities(), 16);
        // Inequalities: v bounds 4, ampacity 2, current sign 2.
        assert_eq!(problem.num_inequalities(), 8);
        assert_eq!(problem.num_cone_blocks(), 2);
        assert_eq!(problem.num_epigraph_rows(), 0);
    }

    #[test]
    fn lossless_two_bus_prices_equal_lmp() {
        let feeder = two_bus(2, 100.0, 0.0, 0.0);
        let problem = assemble(&feeder, &DerFleet::default(), &OpfOptions::default()).unwrap();
        let sol = solve(&problem, &ClarabelSolver).unwrap();
        let kwh = feeder.pu_to_kwh();
        for t in 0..2 {
            // No losses, no congestion: node price equals the LMP.
            assert!((sol.lambda_p[1][t] / kwh - feeder.lmp[t]).abs() < 1e-6);
            assert!((sol.lambda_p[0][t] / kwh - feeder.lmp[t]).abs() < 1e-6);
            assert!((sol.root_p[t] - 0.1).abs() < 1e-7);
        }
        // Objective equals the energy bill.
        let bill: f64 = (0..2).map(|t| feeder.lmp[t] * 100.0).sum();
        assert!((sol.objective - bill).abs() < 1e-4);
    }

    #[test]
    fn lossy_two_bus_matches_sweep_and_is_exact() {
        let feeder = two_bus(1, 500.0, 0.01, 0.01);
        let problem = assemble(&feeder, &DerFleet::default(), &OpfOptions::default()).unwrap();
        let sol = solve(&problem, &ClarabelSolver).unwrap();
        // Same fixed-point as the sweep solver (no degrees of freedom).
        assert!((sol.current_sq[0][0] - 0.2525381364667414).abs() < 1e-6);
        assert!((sol.flow_p[0][0] - 0.5025253813646674).abs() < 1e-6);
        let report = exactness_check(&sol, &feeder, 1e-6);
        assert!(report.is_exact(), "max gap {}", report.max_gap);
        assert!(report.max_gap.abs() < 1e-7);
        // Price at the load node exceeds the LMP by the marginal-loss factor.
        let kwh = feeder.pu_to_kwh();
        assert!(sol.lambda_p[1][0] / kwh > feeder.lmp[0] * 1.005);
        // KKT residuals within solver tolerance headroom.
        assert!(sol.kkt.max_residual() < 1e-6, "{:?}", sol.kkt);
    }

    #[test]
    fn marginal_price_matches_finite_difference_resolve() {
        let feeder = two_bus(1, 500.0, 0.01, 0.01);
        let problem = assemble(&feeder, &DerFleet::default(), &OpfOptions::default()).unwrap();
        let sol = solve(&problem, &ClarabelSolver).unwrap();

        let step_kw = 0.1; // 1e-4 pu
        let up = two_bus(1, 500.0 + step_kw, 0.01, 0.01);
        let down = two_bus(1, 500.0 - step_kw, 0.01, 0.01);
        let obj = |f: &Feeder| {
            let p = assemble(f, &DerFleet::default(), &OpfOptions::default()).unwrap();
            solve(&p, &ClarabelSolver).unwrap().objective
        };
        let fd = (obj(&up) - obj(&down)) / (2.0 * step_kw / 1000.0);
        assert!(
            (sol.lambda_p[1][0] - fd).abs() < 1e-5 * fd.abs().max(1.0),
            "dual {} vs finite difference {}",
            sol.lambda_p[1][0],
            fd
        );
    }

    #[test]
    fn transformer_rows_appear_only_in_full_mode() {
        let mut file: FeederFile = toml::from_str(&format!(
            r#"
[meta]
name = "xfmr"
horizon_hours = 24

[bases]
s_kva = 1000.0
levels = [{{ name = "mv", v_kv = 13.8 }}, {{ name = "lv", v_kv = 0.24 }}]

[[nodes]]
id = 0
level = "mv"
vmin_pu = 0.95
vmax_pu = 1.05

[[nodes]]
id = 1
parent = 0
level = "lv"
vmin_pu = 0.90
vmax_pu = 1.10
load_profile = "flat"
power_factor = 0.95

[[lines]]
from = 0
to = 1
r_ohm = 0.02
x_ohm = 0.03
ampacity_a = 300.0
transformer = "t30"

[transformers.t30]
rated_kva = 30.0
loss_ratio = 5.0
top_oil_rise_c = 55.0
hot_spot_rise_c = 25.0
cost_per_hour = 0.011

[profiles]
flat = [{load}]

[series]
lmp_per_kwh = [{lmp}]
q_price_per_kwh = [{qp}]
ambient_c = [{amb}]
irradiation = [{rho}]
"#,
            load = vec!["20.0"; 24].join(", "),
            lmp = vec!["0.08"; 24].join(", "),
            qp = vec!["0.008"; 24].join(", "),
            amb = vec!["30.0"; 24].join(", "),
            rho = vec!["0.0"; 24].join(", "),
        ))
        .unwrap();
        file.meta.horizon_hours = 24;
        let feeder = to_per_unit(&file).unwrap();

        let full = assemble(&feeder, &DerFleet::default(), &OpfOptions::default()).unwrap();
        assert_eq!(full.num_epigraph_rows(), 8 * 24);
        assert_eq!(full.num_recursion_rows(), 24);
        assert_eq!(full.num_thermal_boundary_rows(), 1);

        let pq = assemble(&feeder, &DerFleet::default(), &OpfOptions::pq_only()).unwrap();
        assert_eq!(pq.num_epigraph_rows(), 0);
        assert_eq!(pq.num_recursion_rows(), 0);
        assert_eq!(pq.num_thermal_boundary_rows(), 0);
        assert!(pq.num_variables() < full.num_variables());
    }

    #[test]
    fn constant_load_cyclic_top_oil_sits_at_steady_state() {
        // With constant load and ambient, the periodic solution of the
        // linear recursion is its fixed point; compare against the affine
        // steady state (the PWL model shares gamma/delta with it).
        let mut file: FeederFile = toml::from_str(&format!(
            r#"
[meta]
name = "xfmr-cyclic"
horizon_hours = 24

[bases]
s_kva = 1000.0
levels = [{{ name = "mv", v_kv = 13.8 }}, {{ name = "lv", v_kv = 0.24 }}]

[[nodes]]
id = 0
level = "mv"
vmin_pu = 0.95
vmax_pu = 1.05

[[nodes]]
id = 1
parent = 0
level = "lv"
vmin_pu = 0.90
vmax_pu = 1.10
load_profile = "flat"
power_factor = 1.0

[[lines]]
from = 0
to = 1
r_ohm = 0.0005
x_ohm = 0.0005
ampacity_a = 300.0
transformer = "t30"

[transformers.t30]
rated_kva = 30.0
loss_ratio = 5.0
top_oil_rise_c = 55.0
hot_spot_rise_c = 25.0
cost_per_hour = 0.011

[profiles]
flat = [{load}]

[series]
lmp_per_kwh = [{lmp}]
q_price_per_kwh = [{qp}]
ambient_c = [{amb}]
irradiation = [{rho}]
"#,
            load = vec!["21.0"; 24].join(", "),
            lmp = vec!["0.08"; 24].join(", "),
            qp = vec!["0.0"; 24].join(", "),
            amb = vec!["30.0"; 24].join(", "),
            rho = vec!["0.0"; 24].join(", "),
        ))
        .unwrap();
        file.meta.horizon_hours = 24;
        let feeder = to_per_unit(&file).unwrap();
        let sol = cyclic_fixpoint(
            &feeder,
            &DerFleet::default(),
            &OpfOptions::default(),
            &ClarabelSolver,
        )
        .unwrap();
        // Wrap constraint satisfied inside the solve.
        let h = &sol.top_oil[0];
        assert!((h[0] - h[24]).abs() < 1e-6);
        // Fixed point of h = gamma1 h + gamma2 l + delta at the solved l.
        let model = &sol.transformers[0];
        let l = sol.current_sq[0][0];
        let fixed =
            (model.lin.gamma2 * l + model.lin.delta[0]) / (1.0 - model.lin.gamma1);
        assert!((h[12] - fixed).abs() < 1e-4, "h={} fixed={}", h[12], fixed);
        // At optimum with positive cost, the epigraph is tight somewhere.
        for t in 0..24 {
            let f = sol.aging[0][t];
            let best = (0..model.lin.alpha1.len())
                .map(|k| {
                    model.lin.alpha1[k] * h[t + 1] + model.lin.alpha2[k] * sol.current_sq[0][t]
                        + model.lin.beta[k]
                })
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0);
            assert!((f - best).abs() < 1e-6, "hour {t}: f={f} best={best}");
        }
    }

    #[test]
    fn empty_horizon_is_rejected() {
        let feeder = two_bus(1, 100.0, 0.01, 0.01);
        let mut broken = feeder.clone();
        broken.horizon = 0;
        assert!(matches!(
            assemble(&broken, &DerFleet::default(), &OpfOptions::default()),
            Err(OpfError::Assembly(_))
        ));
    }
}
