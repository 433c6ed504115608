//! Monte-Carlo trip simulation, station queueing and the QoS estimators.
//!
//! One run is one simulated day: every EV makes one trip, trips long enough to
//! need a charge pick a station by sampling the nested-logit probabilities, and
//! each station serves its arrivals first-come first-served on its plugs. An
//! attempt is delayed when every plug is busy at the arrival instant.
//!
//! Streams are labeled per stage and run, so a run's trips and its choice draws
//! are identical for every joint placement and price vector it is evaluated at.

use std::collections::{BinaryHeap, HashMap};
use std::cmp::Reverse;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{choice_probabilities, ChoiceSet, EvAgent, Nest};
use crate::error::Result;
use crate::market::JointPlacement;
use crate::road::{NodeId, Route};
use crate::seed::{self, Rng};
use crate::world::World;

const MINUTES_PER_DAY: f64 = 1440.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripSample {
    pub agent: u32,
    /// Position of the EV in the stage population.
    pub agent_index: usize,
    /// Minutes after midnight.
    pub departure_min: f64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub route: Route,
    pub needs_charge: bool,
}

fn weighted_index(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// One trip per EV: destination from the category weights (or the EV's own
/// destination), departure from the diurnal weights, and a charge need with
/// probability `min(1, route_km / electric_range_km)`.
pub fn sample_trips(world: &World, population: &[EvAgent], rng: &mut Rng) -> Result<Vec<TripSample>> {
    let travel = &world.scenario.travel;
    let net = &world.scenario.road_network;
    let cat_weights: Vec<f64> = travel.destination_categories.iter().map(|c| c.weight).collect();
    let mut routes: HashMap<(NodeId, NodeId), Route> = HashMap::new();
    let mut trips = Vec::with_capacity(population.len());
    for (i, agent) in population.iter().enumerate() {
        let destination = if cat_weights.is_empty() {
            agent.destination
        } else {
            let cat = &travel.destination_categories[weighted_index(rng, &cat_weights)];
            cat.nodes[rng.random_range(0..cat.nodes.len())]
        };
        let departure_min = if travel.departure_weights.is_empty() {
            rng.random::<f64>() * MINUTES_PER_DAY
        } else {
            let bins = travel.departure_weights.len() as f64;
            let bin = weighted_index(rng, &travel.departure_weights) as f64;
            (bin + rng.random::<f64>()) * MINUTES_PER_DAY / bins
        };
        let route = match routes.get(&(agent.home, destination)) {
            Some(r) => r.clone(),
            None => {
                let r = net.shortest_path(agent.home, destination)?;
                routes.insert((agent.home, destination), r.clone());
                r
            }
        };
        let charge_probability = (route.length / travel.electric_range_km).min(1.0);
        let needs_charge = rng.random::<f64>() < charge_probability;
        trips.push(TripSample {
            agent: agent.id,
            agent_index: i,
            departure_min,
            origin: agent.home,
            destination,
            route,
            needs_charge,
        });
    }
    Ok(trips)
}

/// A day's trips with everything that does not depend on placement or prices.
#[derive(Clone, Debug)]
pub struct RunTrips {
    pub trips: Vec<TripSample>,
    /// `site_utility[t][k][j]`
    site_utility: Vec<Vec<Vec<f64>>>,
    /// Sites within `d_th` of each trip's route.
    covered: Vec<Vec<bool>>,
    /// Travel time from trip origin to each site, minutes.
    minutes_to_site: Vec<Vec<f64>>,
}

impl RunTrips {
    pub fn prepare(world: &World, trips: Vec<TripSample>) -> Result<Self> {
        let d_th = world.scenario.planner.d_th;
        let speed = world.scenario.travel.speed_kmh;
        let mut site_utility = Vec::with_capacity(trips.len());
        let mut covered = Vec::with_capacity(trips.len());
        let mut minutes_to_site = Vec::with_capacity(trips.len());
        for t in &trips {
            site_utility.push(world.site_utilities(t.origin, t.destination)?);
            let mut cov = Vec::with_capacity(world.sites());
            let mut mins = Vec::with_capacity(world.sites());
            for site in &world.scenario.sites {
                let mut nearest = f64::INFINITY;
                for &n in &t.route.nodes {
                    nearest = nearest.min(world.distances.get_or_inf(site.road_node, n)?);
                }
                cov.push(nearest <= d_th);
                mins.push(world.distances.get_or_inf(t.origin, site.road_node)? / speed * 60.0);
            }
            covered.push(cov);
            minutes_to_site.push(mins);
        }
        Ok(RunTrips { trips, site_utility, covered, minutes_to_site })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceAttempt {
    pub agent: u32,
    pub provider: usize,
    pub site: usize,
    pub arrival_min: f64,
    pub duration_min: f64,
    pub delayed: bool,
}

/// Delay flags for arrivals `(arrival, tie_key, duration)` at one station with
/// `plugs` servers (`None` = unlimited), in input order.
pub fn queue_delays(arrivals: &[(f64, u32, f64)], plugs: Option<u32>) -> Vec<bool> {
    let Some(plugs) = plugs else {
        return vec![false; arrivals.len()];
    };
    let mut order: Vec<usize> = (0..arrivals.len()).collect();
    order.sort_by(|&a, &b| arrivals[a].0.total_cmp(&arrivals[b].0).then(arrivals[a].1.cmp(&arrivals[b].1)));
    // min-heap of plug release times, bit patterns of non-negative finite f64 order correctly
    let mut free: BinaryHeap<Reverse<u64>> = (0..plugs).map(|_| Reverse(0f64.to_bits())).collect();
    let mut delayed = vec![false; arrivals.len()];
    for i in order {
        let (arrival, _, duration) = arrivals[i];
        let Reverse(bits) = free.pop().expect("at least one plug");
        let release = f64::from_bits(bits);
        delayed[i] = release > arrival;
        let end = release.max(arrival) + duration;
        free.push(Reverse(end.max(0.0).to_bits()));
    }
    delayed
}

/// Station choice and queueing for one run of trips.
pub fn simulate_service(
    world: &World,
    population: &[EvAgent],
    run: &RunTrips,
    joint: &JointPlacement,
    prices: &[f64],
    rng: &mut Rng,
) -> Result<Vec<ServiceAttempt>> {
    let s = &world.scenario;
    let mut attempts = Vec::new();
    for (t, trip) in run.trips.iter().enumerate() {
        if !trip.needs_charge {
            continue;
        }
        // one draw per charging trip regardless of placement keeps runs comparable
        let u: f64 = rng.random();
        let agent = &population[trip.agent_index];
        let slope = s.coefficients.beta / agent.income;
        let nests = (0..world.providers())
            .map(|k| {
                let sites: Vec<usize> = joint.0[k].built().collect();
                let base = s.coefficients.alpha / s.providers[k].mean_charge_hours + slope * prices[k];
                let utilities = sites.iter().map(|&j| base + run.site_utility[t][k][j]).collect();
                Nest { sigma: s.coefficients.nests[k].sigma, sites, utilities }
            })
            .collect();
        let set = ChoiceSet { nests, outside_good: s.planner.outside_good_enabled, price_slope: slope };
        let probs = match choice_probabilities(&set) {
            Ok(p) => p,
            Err(crate::error::Error::EmptyChoiceSet) => continue,
            Err(e) => return Err(e),
        };
        let mut acc = 0.0;
        let mut chosen = None;
        'pick: for (k, row) in probs.nests.iter().enumerate() {
            for (pos, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = Some((k, set.nests[k].sites[pos]));
                    break 'pick;
                }
            }
        }
        if chosen.is_none() && !s.planner.outside_good_enabled {
            // rounding left u above the cumulative total; take the last alternative
            chosen = probs
                .nests
                .iter()
                .enumerate()
                .rev()
                .find(|(_, row)| !row.is_empty())
                .map(|(k, _)| (k, *set.nests[k].sites.last().expect("non-empty nest")));
        }
        let Some((k, j)) = chosen else { continue };
        let power = s.providers[k].charging_power_kw();
        attempts.push(ServiceAttempt {
            agent: trip.agent,
            provider: k,
            site: j,
            arrival_min: trip.departure_min + run.minutes_to_site[t][j],
            duration_min: agent.demand_kwh / power * 60.0,
            delayed: false,
        });
    }

    let mut stations: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, a) in attempts.iter().enumerate() {
        stations.entry((a.provider, a.site)).or_default().push(i);
    }
    for ((k, _), idx) in stations {
        let arrivals: Vec<(f64, u32, f64)> =
            idx.iter().map(|&i| (attempts[i].arrival_min, attempts[i].agent, attempts[i].duration_min)).collect();
        for (&i, d) in idx.iter().zip(queue_delays(&arrivals, s.providers[k].plugs_per_station)) {
            attempts[i].delayed = d;
        }
    }
    Ok(attempts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QosEstimate {
    /// Average delay probability per provider.
    pub delay: Vec<f64>,
    pub delay_se: Vec<f64>,
    /// Average number of accessible stations along a route, per provider.
    pub coverage: Vec<f64>,
    pub coverage_se: Vec<f64>,
    pub runs: usize,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Pre-sampled Monte-Carlo runs for one stage, reusable across placements.
#[derive(Debug)]
pub struct QosEngine<'w> {
    world: &'w World,
    population: Vec<EvAgent>,
    runs: Vec<RunTrips>,
    stage: u64,
}

impl<'w> QosEngine<'w> {
    pub fn new(world: &'w World, population: Vec<EvAgent>, stage: u64, runs: usize) -> Result<Self> {
        let seed = world.scenario.rng_seed;
        let prepared = (0..runs as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = seed::stream(seed, "trips", &[stage, r]);
                let trips = sample_trips(world, &population, &mut rng)?;
                RunTrips::prepare(world, trips)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QosEngine { world, population, runs: prepared, stage })
    }

    pub fn runs(&self) -> &[RunTrips] {
        &self.runs
    }

    pub fn population(&self) -> &[EvAgent] {
        &self.population
    }

    /// Per-run (delay fractions, mean coverage) for every provider.
    fn run_metrics(&self, r: usize, joint: &JointPlacement, prices: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let kk = self.world.providers();
        let run = &self.runs[r];
        let mut rng = seed::stream(self.world.scenario.rng_seed, "service", &[self.stage, r as u64]);
        let attempts = simulate_service(self.world, &self.population, run, joint, prices, &mut rng)?;
        let mut tried = vec![0usize; kk];
        let mut delayed = vec![0usize; kk];
        for a in &attempts {
            tried[a.provider] += 1;
            delayed[a.provider] += usize::from(a.delayed);
        }
        let delay = (0..kk).map(|k| if tried[k] == 0 { 0.0 } else { delayed[k] as f64 / tried[k] as f64 }).collect();
        let n = run.trips.len();
        let coverage = (0..kk)
            .map(|k| {
                if n == 0 {
                    return 0.0;
                }
                let total: usize = run.covered.iter().map(|cov| joint.0[k].built().filter(|&j| cov[j]).count()).sum();
                total as f64 / n as f64
            })
            .collect();
        Ok((delay, coverage))
    }

    pub fn estimate(&self, joint: &JointPlacement, prices: &[f64]) -> Result<QosEstimate> {
        let kk = self.world.providers();
        let per_run = (0..self.runs.len())
            .into_par_iter()
            .map(|r| self.run_metrics(r, joint, prices))
            .collect::<Result<Vec<_>>>()?;
        let mut out = QosEstimate {
            delay: Vec::with_capacity(kk),
            delay_se: Vec::with_capacity(kk),
            coverage: Vec::with_capacity(kk),
            coverage_se: Vec::with_capacity(kk),
            runs: per_run.len(),
        };
        for k in 0..kk {
            let d: Vec<f64> = per_run.iter().map(|(d, _)| d[k]).collect();
            let c: Vec<f64> = per_run.iter().map(|(_, c)| c[k]).collect();
            let (dm, ds) = mean_and_se(&d);
            let (cm, cs) = mean_and_se(&c);
            out.delay.push(dm);
            out.delay_se.push(ds);
            out.coverage.push(cm);
            out.coverage_se.push(cs);
        }
        Ok(out)
    }
}

/// Monte-Carlo QoS for a stage population at a joint placement and prices.
pub fn estimate_qos(
    world: &World,
    population: Vec<EvAgent>,
    stage: u64,
    joint: &JointPlacement,
    prices: &[f64],
    runs: usize,
) -> Result<QosEstimate> {
    QosEngine::new(world, population, stage, runs.max(1))?.estimate(joint, prices)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn of_network(net: &crate::road::RoadNetwork) -> Self {
        let mut b = BoundingBox { min_x: f64::INFINITY, min_y: f64::INFINITY, max_x: f64::NEG_INFINITY, max_y: f64::NEG_INFINITY };
        for n in net.nodes() {
            b.min_x = b.min_x.min(n.x);
            b.min_y = b.min_y.min(n.y);
            b.max_x = b.max_x.max(n.x);
            b.max_y = b.max_y.max(n.y);
        }
        b
    }

    fn cell(lo: f64, hi: f64, v: f64, resolution: usize) -> Option<usize> {
        if !(v >= lo && v <= hi) {
            return None;
        }
        let span = hi - lo;
        if span <= 0.0 {
            return Some(0);
        }
        Some((((v - lo) / span * resolution as f64) as usize).min(resolution - 1))
    }
}

/// Route-node visit counts on a `resolution x resolution` grid. Row 0 is the
/// northern (max y) edge so the matrix reads like a map.
pub fn traffic_heatmap(
    net: &crate::road::RoadNetwork,
    trips: &[TripSample],
    bbox: BoundingBox,
    resolution: usize,
) -> Result<Vec<Vec<u64>>> {
    let resolution = resolution.max(1);
    let mut grid = vec![vec![0u64; resolution]; resolution];
    for trip in trips {
        for &id in &trip.route.nodes {
            let node = net.node(id)?;
            let (Some(cx), Some(cy)) = (
                BoundingBox::cell(bbox.min_x, bbox.max_x, node.x, resolution),
                BoundingBox::cell(bbox.min_y, bbox.max_y, node.y, resolution),
            ) else {
                continue;
            };
            grid[resolution - 1 - cy][cx] += 1;
        }
    }
    Ok(grid)
}

pub fn heatmap_csv(grid: &[Vec<u64>]) -> String {
    grid.iter()
        .map(|row| row.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

/// Binary 8-bit PGM, counts scaled so the busiest cell is white.
pub fn heatmap_pgm(grid: &[Vec<u64>]) -> Vec<u8> {
    let h = grid.len();
    let w = grid.first().map_or(0, Vec::len);
    let max = grid.iter().flatten().copied().max().unwrap_or(0);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in grid {
        for &c in row {
            let v = if max == 0 { 0 } else { ((c as f64 / max as f64) * 255.0).round() as u8 };
            out.push(v);
        }
    }
    out
}
