//! Distributed energy resources: PV and EV device models.
//!
//! Each device owns a convex per-day feasible set. PV injections are limited
//! by the irradiation-adjusted nameplate and the inverter circle; EV
//! consumption is driven by a plug-in itinerary with state-of-charge
//! accounting between arrivals and departures. EVs never discharge real
//! power, but reactive power may take either sign within the charger circle
//! (negative consumption = reactive provision to the grid).
//!
//! Besides feasibility checks, the module solves the device-level
//! self-scheduling problems: revenue maximization for a PV against announced
//! nodal prices (closed form, hour-separable) and cost minimization for an
//! EV (a small conic program). These are the per-device best responses that
//! system-optimal prices must reproduce.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{ClarabelSolver, ConicProblem, ConicSolver, SocBlock, SolveError, SolverConfig};
use crate::net::{EvEntry, Feeder, FeederFile, NodeId, PvEntry};

/// Irradiation below this threshold counts as darkness: the inverter is off
/// and both injections are pinned to zero.
pub const IRRADIATION_CUTOFF: f64 = 1e-6;

/// Relative weight of the deterministic tie-break that prefers charging in
/// earlier hours when prices leave the optimum non-unique.
const TIE_BREAK_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DerError {
    #[error("EV itinerary is infeasible: {0}")]
    InfeasibleItinerary(String),
    #[error("bad device description: {0}")]
    BadDevice(String),
    #[error("device subproblem failed: {0}")]
    Solver(#[from] SolveError),
}

// ---------------------------------------------------------------------------
// Device types
// ---------------------------------------------------------------------------

/// Rooftop PV unit: nameplate apparent capacity plus the hourly irradiation
/// adjustment of its feeder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvUnit {
    pub node: NodeId,
    /// Nameplate apparent capacity, pu.
    pub capacity_pu: f64,
    /// Irradiation factor per hour, in [0, 1].
    pub irradiation: Vec<f64>,
}

impl PvUnit {
    /// Irradiation-adjusted real-power cap at hour `t`, pu.
    pub fn adjusted_capacity(&self, t: usize) -> f64 {
        self.irradiation[t] * self.capacity_pu
    }

    pub fn is_daylight(&self, t: usize) -> bool {
        self.irradiation[t] > IRRADIATION_CUTOFF
    }
}

/// One plug-in interval: the vehicle sits at `node` and may charge during
/// hours `arrive..depart` (hour boundaries, 0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvPlugInterval {
    pub node: NodeId,
    pub arrive: usize,
    pub depart: usize,
    /// Minimum state of charge required at departure, pu·h (None: only ≥ 0).
    pub min_soc_at_depart: Option<f64>,
}

impl EvPlugInterval {
    pub fn hours(&self) -> std::ops::Range<usize> {
        self.arrive..self.depart
    }
}

/// The daily travel plan of one EV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvItinerary {
    /// Plug intervals in time order, pairwise disjoint.
    pub intervals: Vec<EvPlugInterval>,
    /// Energy consumed between interval `z` and `z+1`, pu·h.
    pub trip_drops: Vec<f64>,
    /// Energy consumed between the last departure and the first arrival of
    /// the following day; `Some` marks an itinerary that closes on itself.
    pub wrap_drop: Option<f64>,
    /// State of charge at the first arrival, pu·h (used when the daily wrap
    /// constraint is not active).
    pub initial_soc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvUnit {
    pub itinerary: EvItinerary,
    /// Battery capacity, pu·h.
    pub battery_capacity: f64,
    /// Charger apparent-power limit, pu.
    pub charger_capacity: f64,
    /// Maximum real charging rate, pu.
    pub max_charge_rate: f64,
}

impl EvUnit {
    /// Plugged hours with their interval index, in time order.
    pub fn plugged_hours(&self) -> Vec<(usize, usize)> {
        let mut hours = Vec::new();
        for (z, interval) in self.itinerary.intervals.iter().enumerate() {
            for h in interval.hours() {
                hours.push((h, z));
            }
        }
        hours
    }

    pub fn node_at(&self, hour: usize) -> Option<NodeId> {
        self.itinerary
            .intervals
            .iter()
            .find(|iv| iv.hours().contains(&hour))
            .map(|iv| iv.node)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DerFleet {
    pub pvs: Vec<PvUnit>,
    pub evs: Vec<EvUnit>,
}

impl DerFleet {
    pub fn is_empty(&self) -> bool {
        self.pvs.is_empty() && self.evs.is_empty()
    }
}

/// Hourly real/reactive setpoints of one device over the horizon, pu.
/// For PVs both are injections; for EVs both are consumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSchedule {
    pub real: Vec<f64>,
    pub reactive: Vec<f64>,
}

impl DeviceSchedule {
    pub fn zeros(horizon: usize) -> Self {
        Self {
            real: vec![0.0; horizon],
            reactive: vec![0.0; horizon],
        }
    }

    /// Price-weighted value of the schedule: `Σ_t (λP p + λQ q) · kwh_per_pu`,
    /// with prices in $/kWh.
    pub fn value(&self, price_p: &[f64], price_q: &[f64], kwh_per_pu: f64) -> f64 {
        self.real
            .iter()
            .zip(&self.reactive)
            .zip(price_p.iter().zip(price_q))
            .map(|((p, q), (cp, cq))| (cp * p + cq * q) * kwh_per_pu)
            .sum()
    }
}

/// Schedules for a whole fleet, index-aligned with [`DerFleet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerSchedule {
    pub pv: Vec<DeviceSchedule>,
    pub ev: Vec<DeviceSchedule>,
}

impl DerSchedule {
    pub fn zeros(fleet: &DerFleet, horizon: usize) -> Self {
        Self {
            pv: vec![DeviceSchedule::zeros(horizon); fleet.pvs.len()],
            ev: vec![DeviceSchedule::zeros(horizon); fleet.evs.len()],
        }
    }
}

// ---------------------------------------------------------------------------
// Fleet construction from the feeder file
// ---------------------------------------------------------------------------

/// Builds the per-unit DER fleet from the feeder file's device sections.
pub fn build_fleet(file: &FeederFile, feeder: &Feeder) -> Result<DerFleet, DerError> {
    let mut fleet = DerFleet::default();
    for entry in &file.pv {
        fleet.pvs.push(pv_from_entry(entry, feeder)?);
    }
    for entry in &file.ev {
        fleet.evs.push(ev_from_entry(entry, feeder)?);
    }
    Ok(fleet)
}

pub fn pv_from_entry(entry: &PvEntry, feeder: &Feeder) -> Result<PvUnit, DerError> {
    if entry.node >= feeder.num_nodes() {
        return Err(DerError::BadDevice(format!(
            "pv references unknown node {}",
            entry.node
        )));
    }
    if entry.kva <= 0.0 {
        return Err(DerError::BadDevice("pv capacity must be positive".into()));
    }
    Ok(PvUnit {
        node: NodeId(entry.node),
        capacity_pu: entry.kva / feeder.base.s_kva,
        irradiation: feeder.irradiation.clone(),
    })
}

pub fn ev_from_entry(entry: &EvEntry, feeder: &Feeder) -> Result<EvUnit, DerError> {
    let s = feeder.base.s_kva;
    if entry.plug.is_empty() {
        return Err(DerError::BadDevice("ev has no plug intervals".into()));
    }
    if entry.trip_kwh.len() + 1 != entry.plug.len() {
        return Err(DerError::BadDevice(format!(
            "ev with {} plug intervals needs {} trip entries, found {}",
            entry.plug.len(),
            entry.plug.len() - 1,
            entry.trip_kwh.len()
        )));
    }
    if !(entry.max_rate_kw > 0.0 && entry.max_rate_kw <= entry.charger_kva) {
        return Err(DerError::BadDevice(
            "need 0 < max charge rate <= charger capacity".into(),
        ));
    }
    if entry.battery_kwh <= 0.0 {
        return Err(DerError::BadDevice("battery capacity must be positive".into()));
    }
    let battery = entry.battery_kwh / s;
    let mut intervals = Vec::with_capacity(entry.plug.len());
    let mut prev_end = 0usize;
    for (i, plug) in entry.plug.iter().enumerate() {
        if plug.node >= feeder.num_nodes() {
            return Err(DerError::BadDevice(format!(
                "ev references unknown node {}",
                plug.node
            )));
        }
        if plug.arrive_hour >= plug.depart_hour || plug.depart_hour > feeder.horizon {
            return Err(DerError::BadDevice(format!(
                "plug window {}..{} is empty or exceeds the horizon",
                plug.arrive_hour, plug.depart_hour
            )));
        }
        if i > 0 && plug.arrive_hour < prev_end {
            return Err(DerError::BadDevice(
                "plug windows must be disjoint and time-ordered".into(),
            ));
        }
        prev_end = plug.depart_hour;
        let min_soc = if plug.full_at_depart {
            Some(battery)
        } else {
            plug.min_soc_kwh.map(|kwh| kwh / s)
        };
        if let Some(m) = min_soc {
            if m > battery + 1e-12 {
                return Err(DerError::BadDevice(
                    "required departure charge exceeds battery capacity".into(),
                ));
            }
        }
        intervals.push(EvPlugInterval {
            node: NodeId(plug.node),
            arrive: plug.arrive_hour,
            depart: plug.depart_hour,
            min_soc_at_depart: min_soc,
        });
    }
    Ok(EvUnit {
        itinerary: EvItinerary {
            intervals,
            trip_drops: entry.trip_kwh.iter().map(|kwh| kwh / s).collect(),
            wrap_drop: entry.wrap_trip_kwh.map(|kwh| kwh / s),
            initial_soc: entry.initial_soc_kwh / s,
        },
        battery_capacity: battery,
        charger_capacity: entry.charger_kva / s,
        max_charge_rate: entry.max_rate_kw / s,
    })
}

// ---------------------------------------------------------------------------
// Feasibility checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: String,
    pub hour: Option<usize>,
    pub amount: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn max_violation(&self) -> f64 {
        self.violations.iter().fold(0.0, |m, v| m.max(v.amount))
    }

    fn check(&mut self, constraint: &str, hour: Option<usize>, violation: f64, tol: f64) {
        if violation > tol {
            self.violations.push(Violation {
                constraint: constraint.to_string(),
                hour,
                amount: violation,
            });
        }
    }
}

pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Checks a PV schedule against the unit's feasible set.
pub fn pv_feasible(unit: &PvUnit, schedule: &DeviceSchedule) -> FeasibilityReport {
    let mut report = FeasibilityReport::default();
    for t in 0..schedule.real.len() {
        let (p, q) = (schedule.real[t], schedule.reactive[t]);
        if unit.is_daylight(t) {
            report.check("pv real lower bound", Some(t), -p, FEASIBILITY_TOL);
            report.check(
                "pv adjusted capacity",
                Some(t),
                p - unit.adjusted_capacity(t),
                FEASIBILITY_TOL,
            );
            report.check(
                "pv inverter circle",
                Some(t),
                p * p + q * q - unit.capacity_pu * unit.capacity_pu,
                FEASIBILITY_TOL,
            );
        } else {
            report.check("pv dark-hour real", Some(t), p.abs(), FEASIBILITY_TOL);
            report.check("pv dark-hour reactive", Some(t), q.abs(), FEASIBILITY_TOL);
        }
    }
    report
}

/// State of charge at each interval boundary, pu·h.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SocTrajectory {
    /// (hour boundary, SoC) at every arrival and departure, time-ordered.
    pub points: Vec<(usize, f64)>,
}

/// Checks an EV schedule: reconstructs the SoC chain from the initial state
/// (or an override, e.g. the cyclic value produced by an optimization) and
/// verifies bounds, charger limits, and off-plug silence.
pub fn ev_feasible(
    unit: &EvUnit,
    schedule: &DeviceSchedule,
    initial_soc_override: Option<f64>,
) -> (FeasibilityReport, SocTrajectory) {
    let mut report = FeasibilityReport::default();
    let horizon = schedule.real.len();
    let plugged: Vec<bool> = {
        let mut mask = vec![false; horizon];
        for (h, _) in unit.plugged_hours() {
            mask[h] = true;
        }
        mask
    };
    for t in 0..horizon {
        let (p, q) = (schedule.real[t], schedule.reactive[t]);
        if plugged[t] {
            report.check("ev real lower bound", Some(t), -p, FEASIBILITY_TOL);
            report.check(
                "ev charge rate",
                Some(t),
                p - unit.max_charge_rate,
                FEASIBILITY_TOL,
            );
            report.check(
                "ev charger circle",
                Some(t),
                p * p + q * q - unit.charger_capacity * unit.charger_capacity,
                FEASIBILITY_TOL,
            );
        } else {
            report.check("ev off-plug real", Some(t), p.abs(), FEASIBILITY_TOL);
            report.check("ev off-plug reactive", Some(t), q.abs(), FEASIBILITY_TOL);
        }
    }

    let mut points = Vec::new();
    let mut soc = initial_soc_override.unwrap_or(unit.itinerary.initial_soc);
    for (z, interval) in unit.itinerary.intervals.iter().enumerate() {
        points.push((interval.arrive, soc));
        report.check("ev soc nonnegative", Some(interval.arrive), -soc, FEASIBILITY_TOL);
        let charged: f64 = interval.hours().map(|h| schedule.real[h]).sum();
        soc += charged; // Dt = 1 h is baked into the pu·h energy unit
        points.push((interval.depart, soc));
        report.check(
            "ev battery capacity",
            Some(interval.depart),
            soc - unit.battery_capacity,
            FEASIBILITY_TOL,
        );
        if let Some(min_soc) = interval.min_soc_at_depart {
            report.check(
                "ev departure charge",
                Some(interval.depart),
                min_soc - soc,
                FEASIBILITY_TOL,
            );
        }
        if z + 1 < unit.itinerary.intervals.len() {
            soc -= unit.itinerary.trip_drops[z];
        }
    }
    if let Some(wrap) = unit.itinerary.wrap_drop {
        let start = points.first().map(|(_, s)| *s).unwrap_or(0.0);
        report.check(
            "ev daily wrap balance",
            None,
            (soc - wrap - start).abs(),
            FEASIBILITY_TOL,
        );
    }
    (report, SocTrajectory { points })
}

// ---------------------------------------------------------------------------
// Device self-scheduling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceOptResult {
    pub schedule: DeviceSchedule,
    /// Objective at the announced prices, $: revenue for PVs, cost for EVs.
    pub value: f64,
}

/// Revenue-maximizing PV schedule against announced nodal prices ($/kWh).
///
/// Hour-separable with a closed-form optimum on the box-circle region. Ties
/// resolve deterministically: with a zero reactive price the unit runs at
/// its real cap with unity power factor.
pub fn pv_opt(
    unit: &PvUnit,
    price_p: &[f64],
    price_q: &[f64],
    kwh_per_pu: f64,
) -> DeviceOptResult {
    let horizon = unit.irradiation.len();
    let mut schedule = DeviceSchedule::zeros(horizon);
    for t in 0..horizon {
        if !unit.is_daylight(t) {
            continue;
        }
        let cap_p = unit.adjusted_capacity(t);
        let c = unit.capacity_pu;
        let (lp, lq) = (price_p[t], price_q[t]);
        let (p, q) = if lq == 0.0 {
            if lp >= 0.0 {
                (cap_p, 0.0)
            } else {
                (0.0, 0.0)
            }
        } else if lp <= 0.0 {
            (0.0, lq.signum() * c)
        } else {
            // Unconstrained maximizer on the circle, clipped to the real cap.
            let p_hat = c * lp / (lp * lp + lq * lq).sqrt();
            let p = p_hat.min(cap_p);
            (p, lq.signum() * (c * c - p * p).max(0.0).sqrt())
        };
        schedule.real[t] = p;
        schedule.reactive[t] = q;
    }
    let value = schedule.value(price_p, price_q, kwh_per_pu);
    DeviceOptResult { schedule, value }
}

/// Cost-minimizing EV schedule against announced nodal prices ($/kWh).
///
/// A small conic program: box and circle constraints per plugged hour plus
/// the SoC chain. `cyclic` activates the daily wrap constraint when the
/// itinerary declares one. Degenerate price ties are broken toward earlier
/// charging by an epsilon cost that does not affect the reported value.
pub fn ev_opt(
    unit: &EvUnit,
    price_p: &[f64],
    price_q: &[f64],
    kwh_per_pu: f64,
    cyclic: bool,
    solver: &dyn ConicSolver,
) -> Result<DeviceOptResult, DerError> {
    let horizon = price_p.len();
    let plugged = unit.plugged_hours();
    if plugged.is_empty() {
        return Err(DerError::BadDevice("ev is never plugged in".into()));
    }
    let price_scale = price_p
        .iter()
        .chain(price_q)
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1.0);

    let mut pb = ConicProblem::new();
    // One (p, q) pair per plugged hour; objective in $ with a tiny
    // earliest-hour preference on p.
    let mut p_var = vec![usize::MAX; horizon];
    let mut q_var = vec![usize::MAX; horizon];
    for &(h, _) in &plugged {
        let tie = TIE_BREAK_EPS * price_scale * (h + 1) as f64 / horizon as f64;
        p_var[h] = pb.add_var((price_p[h] + tie) * kwh_per_pu);
        q_var[h] = pb.add_var(price_q[h] * kwh_per_pu);
    }
    // SoC at each arrival/departure boundary.
    let z_count = unit.itinerary.intervals.len();
    let arrive_var: Vec<usize> = (0..z_count).map(|_| pb.add_var(0.0)).collect();
    let depart_var: Vec<usize> = (0..z_count).map(|_| pb.add_var(0.0)).collect();

    for (z, interval) in unit.itinerary.intervals.iter().enumerate() {
        // u(depart) - u(arrive) - sum of charging = 0.
        let mut row = vec![(depart_var[z], 1.0), (arrive_var[z], -1.0)];
        for h in interval.hours() {
            row.push((p_var[h], -1.0));
        }
        pb.add_eq(row, 0.0);
        if z + 1 < z_count {
            pb.add_eq(
                vec![(arrive_var[z + 1], 1.0), (depart_var[z], -1.0)],
                -unit.itinerary.trip_drops[z],
            );
        }
    }
    match (cyclic, unit.itinerary.wrap_drop) {
        (true, Some(wrap)) => {
            pb.add_eq(
                vec![(arrive_var[0], 1.0), (depart_var[z_count - 1], -1.0)],
                -wrap,
            );
        }
        _ => {
            pb.add_eq(vec![(arrive_var[0], 1.0)], unit.itinerary.initial_soc);
        }
    }

    for &(h, _) in &plugged {
        pb.add_ineq(vec![(p_var[h], 1.0)], unit.max_charge_rate);
        pb.add_ineq(vec![(p_var[h], -1.0)], 0.0);
        pb.add_soc(SocBlock {
            coeffs: vec![vec![], vec![(p_var[h], -1.0)], vec![(q_var[h], -1.0)]],
            rhs: vec![unit.charger_capacity, 0.0, 0.0],
        });
    }
    for z in 0..z_count {
        pb.add_ineq(vec![(arrive_var[z], -1.0)], 0.0);
        pb.add_ineq(vec![(depart_var[z], 1.0)], unit.battery_capacity);
        let min_soc = unit.itinerary.intervals[z].min_soc_at_depart.unwrap_or(0.0);
        pb.add_ineq(vec![(depart_var[z], -1.0)], -min_soc);
    }

    let solution = solver
        .solve(&pb, &SolverConfig::default())
        .map_err(|err| match err {
            SolveError::Infeasible => DerError::InfeasibleItinerary(
                "charging requirements exceed what the plug windows allow".into(),
            ),
            other => DerError::Solver(other),
        })?;

    let mut schedule = DeviceSchedule::zeros(horizon);
    for &(h, _) in &plugged {
        schedule.real[h] = solution.x[p_var[h]].max(0.0);
        schedule.reactive[h] = solution.x[q_var[h]];
    }
    // Report the value at the true prices, without the tie-break term.
    let value = schedule.value(price_p, price_q, kwh_per_pu);
    Ok(DeviceOptResult { schedule, value })
}

/// Convenience wrapper running [`ev_opt`] with the default backend.
pub fn ev_opt_default(
    unit: &EvUnit,
    price_p: &[f64],
    price_q: &[f64],
    kwh_per_pu: f64,
    cyclic: bool,
) -> Result<DeviceOptResult, DerError> {
    ev_opt(unit, price_p, price_q, kwh_per_pu, cyclic, &ClarabelSolver)
}
