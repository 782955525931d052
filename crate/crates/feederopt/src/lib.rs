//! Day-ahead operational planning for radial distribution feeders.
//!
//! The crate co-optimizes distributed energy resource (EV/PV) schedules with
//! network losses and transformer insulation aging over a 24-hour horizon,
//! using a branch-flow (DistFlow) second-order-cone relaxation, and then
//! extracts distribution locational marginal prices (DLMPs) from the duals
//! along with their additive decomposition into loss, degradation, voltage,
//! and ampacity components.
//!
//! Module map:
//! * [`net`] — radial network model, feeder file schema, per-unit handling.
//! * [`thermal`] — transformer hot-spot dynamics, aging factor, and the
//!   affine model embedded in the optimization.
//! * [`der`] — PV/EV feasible sets and device-level self-scheduling.
//! * [`conic`] — abstract conic-program contract and solver backend.
//! * [`powerflow`] — exact DistFlow sweep solver for fixed injections.
//! * [`opf`] — day-ahead problem assembly, solve, and exactness checks.
//! * [`pricing`] — DLMP extraction, sensitivities, and decomposition.
//! * [`schedules`] — the four scheduling options and comparison harness.
//! * [`synth`] — deterministic synthetic feeder generation.
//! * [`report`] — CSV emitters and the run manifest.

pub mod conic;
pub mod der;
pub mod net;
pub mod opf;
pub mod powerflow;
pub mod pricing;
pub mod report;
pub mod schedules;
pub mod synth;
pub mod thermal;
