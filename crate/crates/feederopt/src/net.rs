//! Radial network data model, feeder file ingestion, and per-unit handling.
//!
//! A feeder is described on disk as a single TOML document in physical units
//! (ohms, amps, kW, kV) and normalized at load time into an immutable
//! [`Feeder`] holding everything in per-unit. Node 0 is always the root
//! (substation); every other node has exactly one parent and one incoming
//! line, so lines are indexed by their downstream node.
//!
//! Per-unit conventions (balanced three-phase equivalents):
//! `z_base = v_kv² · 1000 / s_kva` ohms and `i_base = s_kva / (√3 · v_kv)`
//! amps per voltage level. Transformer lines may bridge two levels; their
//! impedance and ampacity are referred to the level of the downstream node.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::thermal::TransformerParams;

/// Index of a node; 0 is the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Index of a line; lines are stored in downstream-node order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineId(pub usize);

impl NodeId {
    pub fn idx(self) -> usize {
        self.0
    }
}

impl LineId {
    pub fn idx(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}", self.0)
    }
}

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("cannot read feeder file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("feeder file parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("schema violation in field `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("tree violation: {0}")]
    Tree(String),
    #[error("series `{name}` has {got} entries, horizon is {expected}")]
    SeriesLength {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("voltage level `{0}` is not declared in [bases]")]
    MissingLevel(String),
    #[error("transformer `{0}` referenced by a line is not declared")]
    MissingTransformer(String),
    #[error("load profile `{0}` referenced by a node is not declared")]
    MissingProfile(String),
}

fn schema_err(field: &str, reason: impl Into<String>) -> FeederError {
    FeederError::Schema {
        field: field.to_string(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------------------
// On-disk schema (physical units)
// ---------------------------------------------------------------------------

/// Raw feeder description exactly as stored on disk, in physical units.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeederFile {
    pub meta: MetaSection,
    pub bases: BasesSection,
    pub nodes: Vec<NodeEntry>,
    pub lines: Vec<LineEntry>,
    #[serde(default)]
    pub transformers: BTreeMap<String, TransformerEntry>,
    #[serde(default)]
    pub profiles: BTreeMap<String, Vec<f64>>,
    pub series: SeriesSection,
    #[serde(default)]
    pub pv: Vec<PvEntry>,
    #[serde(default)]
    pub ev: Vec<EvEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetaSection {
    pub name: String,
    #[serde(default = "default_horizon")]
    pub horizon_hours: usize,
    #[serde(default = "default_dt")]
    pub dt_hours: f64,
    /// Substation voltage setpoint, pu (the root bus is held at this value).
    #[serde(default = "default_root_voltage")]
    pub root_voltage_pu: f64,
}

fn default_horizon() -> usize {
    24
}
fn default_dt() -> f64 {
    1.0
}
fn default_root_voltage() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasesSection {
    pub s_kva: f64,
    pub levels: Vec<LevelEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelEntry {
    pub name: String,
    pub v_kv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeEntry {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    pub level: String,
    pub vmin_pu: f64,
    pub vmax_pu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_factor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LineEntry {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
    pub ampacity_a: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformer: Option<String>,
}

/// Transformer nameplate data; thermal constants default to the
/// loading-guide recommended values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformerEntry {
    pub rated_kva: f64,
    pub loss_ratio: f64,
    pub top_oil_rise_c: f64,
    pub hot_spot_rise_c: f64,
    #[serde(default = "default_tau")]
    pub tau_oil_h: f64,
    #[serde(default = "default_k11")]
    pub k11: f64,
    #[serde(default = "default_exponent")]
    pub oil_exponent: f64,
    #[serde(default = "default_exponent")]
    pub winding_exponent: f64,
    pub cost_per_hour: f64,
}

fn default_tau() -> f64 {
    3.0
}
fn default_k11() -> f64 {
    1.0
}
fn default_exponent() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeriesSection {
    pub lmp_per_kwh: Vec<f64>,
    pub q_price_per_kwh: Vec<f64>,
    pub ambient_c: Vec<f64>,
    pub irradiation: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PvEntry {
    pub node: usize,
    pub kva: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvEntry {
    pub battery_kwh: f64,
    pub charger_kva: f64,
    pub max_rate_kw: f64,
    #[serde(default)]
    pub initial_soc_kwh: f64,
    /// Energy consumed between consecutive plug intervals, one entry per gap.
    #[serde(default)]
    pub trip_kwh: Vec<f64>,
    /// Energy consumed between the last departure and the first arrival of
    /// the next day; present iff the itinerary closes on itself daily.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrap_trip_kwh: Option<f64>,
    pub plug: Vec<PlugEntry>,
}

/// One plug-in interval. `arrive_hour`/`depart_hour` are hour boundaries in
/// `0..=T`; the vehicle charges during hours `arrive_hour..depart_hour`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlugEntry {
    pub node: usize,
    pub arrive_hour: usize,
    pub depart_hour: usize,
    #[serde(default)]
    pub full_at_depart: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_soc_kwh: Option<f64>,
}

// ---------------------------------------------------------------------------
// In-memory model (per-unit)
// ---------------------------------------------------------------------------

/// Per-unit base system: one apparent-power base and one voltage base per
/// level, with derived impedance and current bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub s_kva: f64,
    pub levels: Vec<VoltageLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageLevel {
    pub name: String,
    pub v_kv: f64,
}

impl PerUnitBase {
    pub fn level_index(&self, name: &str) -> Option<usize> {
        self.levels.iter().position(|l| l.name == name)
    }

    pub fn z_base_ohm(&self, level: usize) -> f64 {
        let v = self.levels[level].v_kv;
        v * v * 1000.0 / self.s_kva
    }

    pub fn i_base_a(&self, level: usize) -> f64 {
        self.s_kva / (3.0f64.sqrt() * self.levels[level].v_kv)
    }
}

/// Hourly real-power draw of one node plus its power factor; reactive power
/// is derived as `p · tan(acos(pf))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub profile_name: String,
    pub real_kw: Vec<f64>,
    pub power_factor: f64,
}

impl LoadProfile {
    pub fn reactive_kvar(&self) -> Vec<f64> {
        let tan_phi = self.power_factor.acos().tan();
        self.real_kw.iter().map(|p| p * tan_phi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub level: usize,
    /// Squared voltage limits, pu².
    pub voltage_min_sq: f64,
    pub voltage_max_sq: f64,
    pub load: Option<LoadProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: LineId,
    pub from: NodeId,
    pub to: NodeId,
    pub resistance_pu: f64,
    pub reactance_pu: f64,
    /// Squared ampacity, pu².
    pub ampacity_sq_pu: f64,
    pub transformer: Option<TransformerParams>,
    /// Name of the transformer table entry, kept for file round-trips.
    pub transformer_name: Option<String>,
}

impl Line {
    pub fn is_transformer(&self) -> bool {
        self.transformer.is_some()
    }
}

/// Validated, per-unit radial feeder. Immutable after construction and safe
/// to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feeder {
    pub name: String,
    pub horizon: usize,
    pub dt_hours: f64,
    pub base: PerUnitBase,
    pub nodes: Vec<Node>,
    pub lines: Vec<Line>,
    /// Incoming line of each node (None for the root).
    pub line_into: Vec<Option<LineId>>,
    /// Outgoing (child) lines of each node.
    pub children: Vec<Vec<LineId>>,
    /// Nodes in breadth-first order from the root.
    pub topo_order: Vec<NodeId>,
    /// Fixed real load per node and hour, pu.
    pub load_p: Vec<Vec<f64>>,
    /// Fixed reactive load per node and hour, pu.
    pub load_q: Vec<Vec<f64>>,
    /// Substation real-power price, $/kWh.
    pub lmp: Vec<f64>,
    /// Substation reactive-power price, $/kvarh.
    pub q_price: Vec<f64>,
    pub ambient_c: Vec<f64>,
    /// PV irradiation adjustment factor per hour, in [0, 1].
    pub irradiation: Vec<f64>,
    /// Squared root voltage setpoint, pu².
    pub root_voltage_sq: f64,
}

impl Feeder {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn line(&self, id: LineId) -> &Line {
        &self.lines[id.idx()]
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.idx()]
    }

    /// Lines carrying a transformer, with their thermal parameters.
    pub fn transformer_lines(&self) -> Vec<(LineId, &TransformerParams)> {
        self.lines
            .iter()
            .filter_map(|l| l.transformer.as_ref().map(|p| (l.id, p)))
            .collect()
    }

    /// For each node, the unique line path from the root to that node, in
    /// root-first order. The root's path is empty.
    pub fn downstream_paths(&self) -> Vec<Vec<LineId>> {
        let mut paths: Vec<Vec<LineId>> = vec![Vec::new(); self.num_nodes()];
        for &node in &self.topo_order {
            if let Some(line) = self.line_into[node.idx()] {
                let parent = self.lines[line.idx()].from;
                let mut path = paths[parent.idx()].clone();
                path.push(line);
                paths[node.idx()] = path;
            }
        }
        paths
    }

    /// Energy represented by one pu of power over one step, kWh.
    pub fn pu_to_kwh(&self) -> f64 {
        self.base.s_kva * self.dt_hours
    }
}

// ---------------------------------------------------------------------------
// Conversion and validation
// ---------------------------------------------------------------------------

/// Reads a feeder file from disk without validating it.
pub fn read_feeder_file(path: impl AsRef<Path>) -> Result<FeederFile, FeederError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| FeederError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(toml::from_str(&text)?)
}

/// Loads, validates, and normalizes a feeder file.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<Feeder, FeederError> {
    to_per_unit(&read_feeder_file(path)?)
}

/// Validates a raw physical-unit description and converts it to per-unit.
pub fn to_per_unit(file: &FeederFile) -> Result<Feeder, FeederError> {
    let horizon = file.meta.horizon_hours;
    if horizon == 0 {
        return Err(schema_err("meta.horizon_hours", "horizon must be positive"));
    }
    if file.meta.dt_hours <= 0.0 {
        return Err(schema_err("meta.dt_hours", "step length must be positive"));
    }
    if file.bases.s_kva <= 0.0 {
        return Err(schema_err("bases.s_kva", "power base must be positive"));
    }
    if file.bases.levels.is_empty() {
        return Err(schema_err("bases.levels", "at least one voltage level required"));
    }
    for level in &file.bases.levels {
        if level.v_kv <= 0.0 {
            return Err(schema_err("bases.levels.v_kv", "voltage base must be positive"));
        }
    }
    let base = PerUnitBase {
        s_kva: file.bases.s_kva,
        levels: file
            .bases
            .levels
            .iter()
            .map(|l| VoltageLevel {
                name: l.name.clone(),
                v_kv: l.v_kv,
            })
            .collect(),
    };

    check_series(file, horizon)?;

    let nodes = convert_nodes(file, &base, horizon)?;
    let n = nodes.len();
    let lines = convert_lines(file, &base, &nodes)?;
    validate_tree(&nodes, &lines)?;

    let mut line_into = vec![None; n];
    let mut children: Vec<Vec<LineId>> = vec![Vec::new(); n];
    for line in &lines {
        line_into[line.to.idx()] = Some(line.id);
        children[line.from.idx()].push(line.id);
    }

    // Breadth-first order from the root; validate_tree guarantees reach.
    let mut topo_order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::from([NodeId(0)]);
    while let Some(node) = queue.pop_front() {
        topo_order.push(node);
        for &line in &children[node.idx()] {
            queue.push_back(lines[line.idx()].to);
        }
    }

    let mut load_p = vec![vec![0.0; horizon]; n];
    let mut load_q = vec![vec![0.0; horizon]; n];
    for node in &nodes {
        if let Some(load) = &node.load {
            let q = load.reactive_kvar();
            for t in 0..horizon {
                load_p[node.id.idx()][t] = load.real_kw[t] / base.s_kva;
                load_q[node.id.idx()][t] = q[t] / base.s_kva;
            }
        }
    }

    let v0 = file.meta.root_voltage_pu;
    if v0 <= 0.0 {
        return Err(schema_err("meta.root_voltage_pu", "setpoint must be positive"));
    }

    Ok(Feeder {
        name: file.meta.name.clone(),
        horizon,
        dt_hours: file.meta.dt_hours,
        base,
        nodes,
        lines,
        line_into,
        children,
        topo_order,
        load_p,
        load_q,
        lmp: file.series.lmp_per_kwh.clone(),
        q_price: file.series.q_price_per_kwh.clone(),
        ambient_c: file.series.ambient_c.clone(),
        irradiation: file.series.irradiation.clone(),
        root_voltage_sq: v0 * v0,
    })
}

/// Reconstructs the physical-unit description from a per-unit feeder.
/// Composing with [`to_per_unit`] is the identity up to float rounding.
pub fn from_per_unit(feeder: &Feeder) -> FeederFile {
    let mut transformers = BTreeMap::new();
    let lines = feeder
        .lines
        .iter()
        .map(|line| {
            let level = feeder.nodes[line.to.idx()].level;
            let z_base = feeder.base.z_base_ohm(level);
            let i_base = feeder.base.i_base_a(level);
            if let (Some(params), Some(name)) = (&line.transformer, &line.transformer_name) {
                transformers.insert(
                    name.clone(),
                    TransformerEntry {
                        rated_kva: params.rated_current_sq_pu.sqrt() * feeder.base.s_kva,
                        loss_ratio: params.loss_ratio,
                        top_oil_rise_c: params.top_oil_rise_rated_c,
                        hot_spot_rise_c: params.hot_spot_rise_rated_c,
                        tau_oil_h: params.oil_time_constant_h,
                        k11: params.k11,
                        oil_exponent: params.oil_exponent,
                        winding_exponent: params.winding_exponent,
                        cost_per_hour: params.hourly_cost,
                    },
                );
            }
            LineEntry {
                from: line.from.idx(),
                to: line.to.idx(),
                r_ohm: line.resistance_pu * z_base,
                x_ohm: line.reactance_pu * z_base,
                ampacity_a: line.ampacity_sq_pu.sqrt() * i_base,
                transformer: line.transformer_name.clone(),
            }
        })
        .collect();

    let mut profiles = BTreeMap::new();
    let nodes = feeder
        .nodes
        .iter()
        .map(|node| {
            let (load_profile, power_factor) = match &node.load {
                Some(load) => {
                    profiles.insert(load.profile_name.clone(), load.real_kw.clone());
                    (Some(load.profile_name.clone()), Some(load.power_factor))
                }
                None => (None, None),
            };
            NodeEntry {
                id: node.id.idx(),
                parent: node.parent.map(NodeId::idx),
                level: feeder.base.levels[node.level].name.clone(),
                vmin_pu: node.voltage_min_sq.sqrt(),
                vmax_pu: node.voltage_max_sq.sqrt(),
                load_profile,
                power_factor,
            }
        })
        .collect();

    FeederFile {
        meta: MetaSection {
            name: feeder.name.clone(),
            horizon_hours: feeder.horizon,
            dt_hours: feeder.dt_hours,
            root_voltage_pu: feeder.root_voltage_sq.sqrt(),
        },
        bases: BasesSection {
            s_kva: feeder.base.s_kva,
            levels: feeder
                .base
                .levels
                .iter()
                .map(|l| LevelEntry {
                    name: l.name.clone(),
                    v_kv: l.v_kv,
                })
                .collect(),
        },
        nodes,
        lines,
        transformers,
        profiles,
        series: SeriesSection {
            lmp_per_kwh: feeder.lmp.clone(),
            q_price_per_kwh: feeder.q_price.clone(),
            ambient_c: feeder.ambient_c.clone(),
            irradiation: feeder.irradiation.clone(),
        },
        pv: Vec::new(),
        ev: Vec::new(),
    }
}

fn check_series(file: &FeederFile, horizon: usize) -> Result<(), FeederError> {
    let series = [
        ("series.lmp_per_kwh", file.series.lmp_per_kwh.len()),
        ("series.q_price_per_kwh", file.series.q_price_per_kwh.len()),
        ("series.ambient_c", file.series.ambient_c.len()),
        ("series.irradiation", file.series.irradiation.len()),
    ];
    for (name, got) in series {
        if got != horizon {
            return Err(FeederError::SeriesLength {
                name: name.to_string(),
                expected: horizon,
                got,
            });
        }
    }
    for (name, profile) in &file.profiles {
        if profile.len() != horizon {
            return Err(FeederError::SeriesLength {
                name: format!("profiles.{name}"),
                expected: horizon,
                got: profile.len(),
            });
        }
        if profile.iter().any(|p| *p < 0.0) {
            return Err(schema_err(&format!("profiles.{name}"), "load must be nonnegative"));
        }
    }
    if file.series.lmp_per_kwh.iter().any(|c| *c <= 0.0) {
        return Err(schema_err("series.lmp_per_kwh", "prices must be positive"));
    }
    if file.series.irradiation.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(schema_err("series.irradiation", "values must lie in [0, 1]"));
    }
    Ok(())
}

fn convert_nodes(
    file: &FeederFile,
    base: &PerUnitBase,
    horizon: usize,
) -> Result<Vec<Node>, FeederError> {
    let n = file.nodes.len();
    if n < 2 {
        return Err(schema_err("nodes", "a feeder needs a root and at least one load node"));
    }
    let mut nodes: Vec<Option<Node>> = vec![None; n];
    for entry in &file.nodes {
        if entry.id >= n {
            return Err(schema_err(
                "nodes.id",
                format!("ids must be contiguous 0..{}, found {}", n - 1, entry.id),
            ));
        }
        if nodes[entry.id].is_some() {
            return Err(schema_err("nodes.id", format!("duplicate node id {}", entry.id)));
        }
        if !(entry.vmin_pu > 0.0 && entry.vmin_pu < entry.vmax_pu) {
            return Err(schema_err(
                "nodes.vmin_pu",
                format!("need 0 < vmin < vmax at node {}", entry.id),
            ));
        }
        let level = base
            .level_index(&entry.level)
            .ok_or_else(|| FeederError::MissingLevel(entry.level.clone()))?;
        let load = match &entry.load_profile {
            Some(name) => {
                let kw = file
                    .profiles
                    .get(name)
                    .ok_or_else(|| FeederError::MissingProfile(name.clone()))?;
                let pf = entry.power_factor.ok_or_else(|| {
                    schema_err(
                        "nodes.power_factor",
                        format!("node {} has a load profile but no power factor", entry.id),
                    )
                })?;
                if !(pf > 0.0 && pf <= 1.0) {
                    return Err(schema_err(
                        "nodes.power_factor",
                        format!("power factor at node {} must lie in (0, 1]", entry.id),
                    ));
                }
                debug_assert_eq!(kw.len(), horizon);
                Some(LoadProfile {
                    profile_name: name.clone(),
                    real_kw: kw.clone(),
                    power_factor: pf,
                })
            }
            None => None,
        };
        nodes[entry.id] = Some(Node {
            id: NodeId(entry.id),
            parent: entry.parent.map(NodeId),
            level,
            voltage_min_sq: entry.vmin_pu * entry.vmin_pu,
            voltage_max_sq: entry.vmax_pu * entry.vmax_pu,
            load,
        });
    }
    let nodes: Vec<Node> = nodes.into_iter().map(Option::unwrap).collect();
    if nodes[0].parent.is_some() {
        return Err(FeederError::Tree("node 0 must be the root (no parent)".into()));
    }
    for node in &nodes[1..] {
        if node.parent.is_none() {
            return Err(FeederError::Tree(format!(
                "{} has no parent; only the root may omit one",
                node.id
            )));
        }
    }
    Ok(nodes)
}

fn convert_lines(
    file: &FeederFile,
    base: &PerUnitBase,
    nodes: &[Node],
) -> Result<Vec<Line>, FeederError> {
    let n = nodes.len();
    if file.lines.len() != n - 1 {
        return Err(FeederError::Tree(format!(
            "{} nodes require exactly {} lines, found {}",
            n,
            n - 1,
            file.lines.len()
        )));
    }
    let mut seen_to = vec![false; n];
    let mut lines = Vec::with_capacity(file.lines.len());
    for entry in &file.lines {
        if entry.from >= n || entry.to >= n {
            return Err(schema_err(
                "lines",
                format!("line {}->{} references an unknown node", entry.from, entry.to),
            ));
        }
        if entry.to == 0 {
            return Err(FeederError::Tree("no line may terminate at the root".into()));
        }
        if seen_to[entry.to] {
            return Err(FeederError::Tree(format!(
                "node {} has more than one incoming line",
                entry.to
            )));
        }
        seen_to[entry.to] = true;
        if nodes[entry.to].parent != Some(NodeId(entry.from)) {
            return Err(FeederError::Tree(format!(
                "line {}->{} disagrees with node {}'s parent pointer",
                entry.from, entry.to, entry.to
            )));
        }
        if entry.r_ohm < 0.0 {
            return Err(schema_err("lines.r_ohm", "resistance must be nonnegative"));
        }
        if entry.ampacity_a <= 0.0 {
            return Err(schema_err("lines.ampacity_a", "ampacity must be positive"));
        }
        let transformer = match &entry.transformer {
            Some(name) => {
                let spec = file
                    .transformers
                    .get(name)
                    .ok_or_else(|| FeederError::MissingTransformer(name.clone()))?;
                let rated_current_pu = spec.rated_kva / base.s_kva;
                Some(TransformerParams {
                    rated_current_sq_pu: rated_current_pu * rated_current_pu,
                    loss_ratio: spec.loss_ratio,
                    top_oil_rise_rated_c: spec.top_oil_rise_c,
                    hot_spot_rise_rated_c: spec.hot_spot_rise_c,
                    oil_time_constant_h: spec.tau_oil_h,
                    k11: spec.k11,
                    oil_exponent: spec.oil_exponent,
                    winding_exponent: spec.winding_exponent,
                    hourly_cost: spec.cost_per_hour,
                })
            }
            None => {
                if nodes[entry.from].level != nodes[entry.to].level {
                    return Err(schema_err(
                        "lines",
                        format!(
                            "line {}->{} bridges voltage levels without a transformer",
                            entry.from, entry.to
                        ),
                    ));
                }
                None
            }
        };
        // Impedance and ampacity are referred to the downstream level.
        let level = nodes[entry.to].level;
        let z_base = base.z_base_ohm(level);
        let i_base = base.i_base_a(level);
        let amp_pu = entry.ampacity_a / i_base;
        lines.push(Line {
            id: LineId(lines.len()),
            from: NodeId(entry.from),
            to: NodeId(entry.to),
            resistance_pu: entry.r_ohm / z_base,
            reactance_pu: entry.x_ohm / z_base,
            ampacity_sq_pu: amp_pu * amp_pu,
            transformer,
            transformer_name: entry.transformer.clone(),
        });
    }
    Ok(lines)
}

fn validate_tree(nodes: &[Node], lines: &[Line]) -> Result<(), FeederError> {
    let n = nodes.len();
    debug_assert_eq!(lines.len(), n - 1);
    // Every node must reach the root through parent pointers without cycles.
    for start in 1..n {
        let mut hops = 0;
        let mut cursor = start;
        loop {
            match nodes[cursor].parent {
                None => break, // reached the root
                Some(p) => {
                    cursor = p.idx();
                    hops += 1;
                    if hops >= n {
                        return Err(FeederError::Tree(format!(
                            "cycle detected on the parent chain starting at node {start}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}
