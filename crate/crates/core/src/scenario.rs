//! Scenario file loading, validation and persistence.
//!
//! A scenario is one JSON document. The grid case is either inlined or
//! referenced as a directory of `bus.csv`, `branch.csv` and `gen.csv` tables
//! relative to the scenario file:
//!
//! ```json
//! "grid": { "tables": "grid9", "base_mva": 100.0 }
//! ```
//!
//! Saving always inlines the grid, so `load(save(x)) == x`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::choice::{ChoiceCoefficients, EvAgent, ProviderConfig};
use crate::error::{parse_error, Error, Result};
use crate::grid::GridCase;
use crate::road::{NodeId, RoadNetwork, Site};

pub const PROVIDER_COUNT: usize = 3;

fn default_true() -> bool {
    true
}

fn default_horizon() -> f64 {
    24.0
}

fn default_bracket() -> f64 {
    2.0
}

fn default_belief_draws() -> usize {
    1000
}

/// Planner knobs: penalty weight, QoS thresholds, cost distribution and numerics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Grid-penalty weight (dimensionless).
    pub w: f64,
    /// Maximum average delay probability.
    pub delay_threshold: f64,
    /// Required average number of accessible stations along a route.
    pub coverage_threshold: f64,
    /// "Near" distance for the destination indicator and coverage, km.
    pub d_th: f64,
    #[serde(default = "default_true")]
    pub outside_good_enabled: bool,
    /// Placement costs are uniform on [theta_lower, theta_upper].
    pub theta_lower: f64,
    pub theta_upper: f64,
    pub monte_carlo_runs: usize,
    /// Apply the coverage constraint literally as `coverage <= threshold`.
    #[serde(default)]
    pub coverage_at_most: bool,
    /// Whether candidate policies are screened by QoS at all.
    #[serde(default = "default_true")]
    pub qos_filter: bool,
    /// Hours over which station energy is averaged into grid power.
    #[serde(default = "default_horizon")]
    pub horizon_hours: f64,
    /// Width of the price search bracket above the highest own LMP, currency/kWh.
    #[serde(default = "default_bracket")]
    pub price_bracket: f64,
    /// Draws for the belief expectation when it cannot be enumerated.
    #[serde(default = "default_belief_draws")]
    pub belief_draws: usize,
}

impl PlannerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.w >= 0.0) {
            out.push(format!("planner.w must be >= 0, got {}", self.w));
        }
        if !(0.0..=1.0).contains(&self.delay_threshold) {
            out.push(format!("planner.delay_threshold must lie in [0, 1], got {}", self.delay_threshold));
        }
        if !(self.coverage_threshold >= 0.0) {
            out.push(format!("planner.coverage_threshold must be >= 0, got {}", self.coverage_threshold));
        }
        if !(self.d_th >= 0.0) {
            out.push(format!("planner.d_th must be >= 0, got {}", self.d_th));
        }
        if !(self.theta_lower <= self.theta_upper) {
            out.push(format!("planner.theta_lower {} exceeds theta_upper {}", self.theta_lower, self.theta_upper));
        }
        if self.monte_carlo_runs < 1 {
            out.push("planner.monte_carlo_runs must be >= 1".into());
        }
        if !(self.horizon_hours > 0.0) {
            out.push("planner.horizon_hours must be > 0".into());
        }
        if !(self.price_bracket > 0.0) {
            out.push("planner.price_bracket must be > 0".into());
        }
        if self.belief_draws < 1000 {
            out.push("planner.belief_draws must be >= 1000".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub label: String,
    pub ev_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DestinationCategory {
    pub name: String,
    pub weight: f64,
    pub nodes: Vec<NodeId>,
}

fn default_range() -> f64 {
    40.0
}

fn default_speed() -> f64 {
    30.0
}

fn default_jitter() -> f64 {
    0.1
}

/// Synthetic travel-pattern statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TravelConfig {
    /// Empty means every EV drives to its own configured destination.
    #[serde(default)]
    pub destination_categories: Vec<DestinationCategory>,
    /// Relative departure weights over equal bins of the day; empty means uniform.
    #[serde(default)]
    pub departure_weights: Vec<f64>,
    /// A trip needs a charge with probability `min(1, route_km / electric_range_km)`.
    #[serde(default = "default_range")]
    pub electric_range_km: f64,
    #[serde(default = "default_speed")]
    pub speed_kmh: f64,
    /// Energy per charge for generated EVs, kWh: [Q_a, Q_b].
    pub demand_range_kwh: (f64, f64),
    /// Relative income jitter of replicated EVs.
    #[serde(default = "default_jitter")]
    pub income_jitter: f64,
}

impl TravelConfig {
    fn problems(&self, net: Option<&RoadNetwork>) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.destination_categories {
            if !(c.weight >= 0.0) {
                out.push(format!("destination category {} has a negative weight", c.name));
            }
            if c.nodes.is_empty() {
                out.push(format!("destination category {} lists no nodes", c.name));
            }
            if let Some(net) = net {
                for &n in &c.nodes {
                    if !net.contains(n) {
                        out.push(format!("destination category {} references unknown node {n}", c.name));
                    }
                }
            }
        }
        if !self.destination_categories.is_empty() && self.destination_categories.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            out.push("destination category weights sum to zero".into());
        }
        if self.departure_weights.iter().any(|w| !(*w >= 0.0)) {
            out.push("departure weights must be >= 0".into());
        }
        if !self.departure_weights.is_empty() && self.departure_weights.iter().sum::<f64>() <= 0.0 {
            out.push("departure weights sum to zero".into());
        }
        if !(self.electric_range_km > 0.0) {
            out.push("travel.electric_range_km must be > 0".into());
        }
        if !(self.speed_kmh > 0.0) {
            out.push("travel.speed_kmh must be > 0".into());
        }
        let (a, b) = self.demand_range_kwh;
        if !(a > 0.0 && a <= b) {
            out.push(format!("travel.demand_range_kwh must satisfy 0 < Q_a <= Q_b, got [{a}, {b}]"));
        }
        if !(0.0..1.0).contains(&self.income_jitter) {
            out.push("travel.income_jitter must lie in [0, 1)".into());
        }
        out
    }
}

/// The full planning world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub road_network: RoadNetwork,
    pub agents: Vec<EvAgent>,
    pub sites: Vec<Site>,
    pub providers: Vec<ProviderConfig>,
    pub coefficients: ChoiceCoefficients,
    pub grid: GridCase,
    pub planner: PlannerConfig,
    pub stages: Vec<StageConfig>,
    pub travel: TravelConfig,
    pub rng_seed: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GridSource {
    Tables { tables: String, base_mva: f64 },
    Inline(GridCase),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    road_network: serde_json::Value,
    agents: Vec<EvAgent>,
    sites: Vec<Site>,
    providers: Vec<ProviderConfig>,
    coefficients: ChoiceCoefficients,
    grid: GridSource,
    planner: PlannerConfig,
    stages: Vec<StageConfig>,
    travel: TravelConfig,
    rng_seed: u64,
}

impl Scenario {
    /// Number of candidate sites, L.
    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// Every violated invariant, empty when the scenario is valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let net = &self.road_network;
        if self.providers.len() != PROVIDER_COUNT {
            out.push(format!("expected exactly {PROVIDER_COUNT} providers, got {}", self.providers.len()));
        }
        for (k, p) in self.providers.iter().enumerate() {
            out.extend(p.problems(k));
        }
        out.extend(self.coefficients.problems(self.providers.len()));
        out.extend(self.grid.problems());
        out.extend(self.planner.problems());
        out.extend(self.travel.problems(Some(net)));
        let mut ids = std::collections::HashSet::new();
        for s in &self.sites {
            if !ids.insert(&s.id) {
                out.push(format!("site {} is duplicated", s.id));
            }
            if !net.contains(s.road_node) {
                out.push(format!("site {} references unknown road node {}", s.id, s.road_node));
            }
            if self.grid.bus_index(s.bus).is_err() {
                out.push(format!("site {} references unknown bus {}", s.id, s.bus));
            }
            let a = s.amenities;
            if a.r > 1 || a.g > 1 || a.m > 1 {
                out.push(format!("site {} amenities must be 0 or 1", s.id));
            }
            if let Some(owner) = s.level_owner {
                if owner >= self.providers.len() {
                    out.push(format!("site {} level_owner {owner} is not a provider index", s.id));
                }
            }
        }
        if self.agents.is_empty() {
            out.push("scenario has no EV agents".into());
        }
        let (qa, qb) = self.travel.demand_range_kwh;
        for a in &self.agents {
            if !net.contains(a.home) {
                out.push(format!("agent {} home {} is not a road node", a.id, a.home));
            }
            if !net.contains(a.destination) {
                out.push(format!("agent {} destination {} is not a road node", a.id, a.destination));
            }
            if !(a.income > 0.0) {
                out.push(format!("agent {} income must be > 0", a.id));
            }
            if !(a.demand_kwh >= qa && a.demand_kwh <= qb) {
                out.push(format!("agent {} demand {} kWh outside [{qa}, {qb}]", a.id, a.demand_kwh));
            }
        }
        if self.stages.is_empty() {
            out.push("scenario defines no stages".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.ev_count == 0 {
                out.push(format!("stage {} ({}) must have ev_count > 0", i + 1, s.label));
            }
            if i > 0 && s.ev_count <= self.stages[i - 1].ev_count {
                out.push(format!("stage {} ({}) EV count must exceed the previous stage", i + 1, s.label));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { problems })
        }
    }

    /// Parses and validates a scenario document. `base_dir` resolves grid table paths.
    pub fn from_json(text: &str, base_dir: &Path, origin: &Path) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text)
            .map_err(|e| parse_error(origin, format!("line {} column {}: {e}", e.line(), e.column())))?;
        let data: NetworkParts = serde_json::from_value(file.road_network)
            .map_err(|e| parse_error(origin, format!("road_network: {e}")))?;
        let net_problems = RoadNetwork::problems(&data.nodes, &data.edges);
        if !net_problems.is_empty() {
            return Err(Error::Validation { problems: net_problems });
        }
        let road_network = RoadNetwork::new(data.nodes, data.edges)?;
        let grid = match file.grid {
            GridSource::Inline(g) => g,
            GridSource::Tables { tables, base_mva } => GridCase::read_tables(&base_dir.join(tables), base_mva)?,
        };
        let scenario = Scenario {
            road_network,
            agents: file.agents,
            sites: file.sites,
            providers: file.providers,
            coefficients: file.coefficients,
            grid,
            planner: file.planner,
            stages: file.stages,
            travel: file.travel,
            rng_seed: file.rng_seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Deserialize)]
struct NetworkParts {
    nodes: Vec<crate::road::Node>,
    edges: Vec<crate::road::Edge>,
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_error(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    Scenario::from_json(&text, dir, path)
}

pub fn save_scenario(scenario: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, scenario.to_json()? + "\n")?;
    Ok(())
}
