//! Scenario-derived caches shared by the demand, grid and simulation layers.

use rand::Rng as _;

use crate::choice::{nest_utility, station_utility_cached, EvAgent};
use crate::error::Result;
use crate::grid::{solve_power_flow, PowerFlowSolution};
use crate::market::{Market, MarketAgent};
use crate::road::DistanceTable;
use crate::scenario::Scenario;
use crate::seed;

/// A validated scenario plus the all-pairs road distances, each site's bus
/// index and the base-case power flow.
#[derive(Debug)]
pub struct World {
    pub scenario: Scenario,
    pub distances: DistanceTable,
    pub site_buses: Vec<usize>,
    pub base_flow: PowerFlowSolution<f64>,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let distances = scenario.road_network.distance_table();
        let site_buses = scenario.sites.iter().map(|s| scenario.grid.bus_index(s.bus)).collect::<Result<_>>()?;
        let base_flow = solve_power_flow::<f64>(&scenario.grid, &[])?;
        if !base_flow.converged {
            return Err(crate::error::Error::Invalid(format!(
                "base-case power flow did not converge (residual {:e})",
                base_flow.max_residual
            )));
        }
        Ok(World { scenario, distances, site_buses, base_flow })
    }

    pub fn providers(&self) -> usize {
        self.scenario.providers.len()
    }

    pub fn sites(&self) -> usize {
        self.scenario.sites.len()
    }

    pub fn lmp(&self) -> Vec<f64> {
        self.site_buses.iter().map(|&b| self.scenario.grid.buses[b].lmp).collect()
    }

    /// The stage's EV population. Configured agents are used in order; when more
    /// EVs are requested they are replicated cyclically with jittered income and
    /// a fresh demand drawn from `[Q_a, Q_b]`.
    pub fn population(&self, ev_count: usize) -> Vec<EvAgent> {
        let agents = &self.scenario.agents;
        let travel = &self.scenario.travel;
        let mut rng = seed::stream(self.scenario.rng_seed, "population", &[ev_count as u64]);
        (0..ev_count)
            .map(|i| {
                let base = &agents[i % agents.len()];
                if i < agents.len() {
                    return base.clone();
                }
                let jitter = travel.income_jitter;
                let scale = if jitter > 0.0 { rng.random_range(1.0 - jitter..=1.0 + jitter) } else { 1.0 };
                let (qa, qb) = travel.demand_range_kwh;
                let demand = if qb > qa { rng.random_range(qa..=qb) } else { qa };
                EvAgent {
                    id: (agents.iter().map(|a| a.id).max().unwrap_or(0) as usize + 1 + i - agents.len()) as u32,
                    home: base.home,
                    destination: base.destination,
                    income: base.income * scale,
                    demand_kwh: demand,
                }
            })
            .collect()
    }

    /// Price-independent site utility of every provider's nest for a trip.
    pub fn site_utilities(&self, origin: u32, destination: u32) -> Result<Vec<Vec<f64>>> {
        let coeffs = &self.scenario.coefficients;
        let d_th = self.scenario.planner.d_th;
        let probe = EvAgent { id: 0, home: origin, destination, income: 1.0, demand_kwh: 0.0 };
        coeffs
            .nests
            .iter()
            .map(|nest| {
                self.scenario
                    .sites
                    .iter()
                    .map(|site| station_utility_cached(nest, site, &probe, &self.distances, d_th))
                    .collect()
            })
            .collect()
    }

    /// Demand model for a population.
    pub fn market(&self, population: &[EvAgent]) -> Result<Market<f64>> {
        let s = &self.scenario;
        let agents = population
            .iter()
            .map(|a| {
                Ok(MarketAgent {
                    demand_kwh: a.demand_kwh,
                    price_slope: s.coefficients.beta / a.income,
                    site_utility: self.site_utilities(a.home, a.destination)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let nest_constant = s
            .providers
            .iter()
            .map(|p| nest_utility(s.coefficients.alpha, s.coefficients.beta, p.mean_charge_hours, 0.0, 1.0))
            .collect();
        Ok(Market {
            agents,
            nest_constant,
            sigma: s.coefficients.nests.iter().map(|n| n.sigma).collect(),
            lmp: self.lmp(),
            outside_good: s.planner.outside_good_enabled,
            bracket_width: s.planner.price_bracket,
        })
    }
}
