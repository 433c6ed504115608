//! Per-stage Bayesian placement game and the multi-stage planner.
//!
//! Each provider knows its own placement costs and holds a belief over the
//! rivals' build decisions. For every candidate policy it forms the expected
//! revenue, disturbance and QoS over that belief, each term evaluated at the
//! price equilibrium of the resulting joint placement, and picks the policy
//! with the highest `E[R] - theta^T S - w E[B]` among those meeting the QoS
//! thresholds. Because the expected terms do not depend on `theta`, a policy is
//! optimal exactly when `theta` lies in the open polyhedron cut out by the
//! pairwise hyperplanes of [`hypervolume_member`].

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{provider_disturbance, JointPlacement, Market, Placement, PriceCache, PriceEquilibrium};
use crate::seed;
use crate::sim::{QosEngine, QosEstimate};
use crate::world::World;

/// Hard cap on the number of free sites a provider may enumerate.
pub const MAX_ENUMERATED_SITES: usize = 20;
/// Opponent supports up to this many outcomes are enumerated exactly.
pub const EXACT_BELIEF_LIMIT: usize = 1 << 16;

/// All policies that keep every carried site, restricted to `allowed` sites,
/// in lexicographic order of their bit strings.
pub fn enumerate_allowed(carried: &Placement, allowed: &[bool]) -> Result<Vec<Placement>> {
    let free: Vec<usize> = (0..carried.len()).filter(|&j| !carried.0[j] && allowed[j]).collect();
    if free.len() > MAX_ENUMERATED_SITES {
        return Err(Error::EnumerationCap(free.len()));
    }
    let count = 1usize << free.len();
    Ok((0..count)
        .map(|mask| {
            let mut bits = carried.0.clone();
            for (pos, &j) in free.iter().enumerate() {
                // first free site is the most significant bit
                bits[j] = mask >> (free.len() - 1 - pos) & 1 == 1;
            }
            Placement(bits)
        })
        .collect())
}

pub fn enumerate_policies(sites: usize, carried: &Placement) -> Result<Vec<Placement>> {
    if carried.len() != sites {
        return Err(Error::LengthMismatch { left: carried.len(), right: sites });
    }
    if sites > MAX_ENUMERATED_SITES {
        return Err(Error::EnumerationCap(sites));
    }
    enumerate_allowed(carried, &vec![true; sites])
}

/// Private placement-cost vector of one provider, currency per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeVector(pub Vec<f64>);

impl TypeVector {
    /// i.i.d. uniform draws on `[lower, upper]`; carried sites are sunk and cost 0.
    pub fn draw(lower: f64, upper: f64, carried: &Placement, rng: &mut seed::Rng) -> Self {
        TypeVector(
            carried
                .0
                .iter()
                .map(|&built| {
                    let v = if upper > lower { rng.random_range(lower..=upper) } else { lower };
                    if built { 0.0 } else { v }
                })
                .collect(),
        )
    }

    pub fn cost(&self, policy: &Placement) -> f64 {
        policy.built().map(|j| self.0[j]).sum()
    }
}

/// A provider's conjecture about its rivals' placements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Belief {
    /// Each free rival bit is built independently with this probability.
    Independent { p: f64 },
    /// Explicit distribution over rival placements (rivals in provider order, self omitted).
    Explicit(Vec<(Vec<Placement>, f64)>),
}

impl Default for Belief {
    fn default() -> Self {
        Belief::Independent { p: 0.5 }
    }
}

/// Rival outcomes with their probabilities.
pub type Support = Vec<(Vec<Placement>, f64)>;

impl Belief {
    /// Support over rivals of `provider`. Carried rival sites stay built and
    /// sites a rival may not use stay empty. Large independent supports are
    /// replaced by `draws` equally weighted samples from `rng`.
    pub fn support(
        &self,
        provider: usize,
        carried: &JointPlacement,
        allowed: &[Vec<bool>],
        draws: usize,
        rng: &mut seed::Rng,
    ) -> Result<Support> {
        match self {
            Belief::Explicit(list) => {
                let total: f64 = list.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("belief probabilities sum to {total}")));
                }
                Ok(list.clone())
            }
            Belief::Independent { p } => {
                let rivals: Vec<usize> = (0..carried.0.len()).filter(|&m| m != provider).collect();
                let free: Vec<(usize, usize)> = rivals
                    .iter()
                    .enumerate()
                    .flat_map(|(r, &m)| {
                        (0..carried.0[m].len()).filter(move |&j| !carried.0[m].0[j] && allowed[m][j]).map(move |j| (r, j))
                    })
                    .collect();
                let base: Vec<Placement> = rivals.iter().map(|&m| carried.0[m].clone()).collect();
                let exact = free.len() < usize::BITS as usize && (1usize << free.len()) <= EXACT_BELIEF_LIMIT;
                if exact {
                    Ok((0..1usize << free.len())
                        .map(|mask| {
                            let mut outcome = base.clone();
                            let mut prob = 1.0;
                            for (pos, &(r, j)) in free.iter().enumerate() {
                                let on = mask >> (free.len() - 1 - pos) & 1 == 1;
                                outcome[r].0[j] = on;
                                prob *= if on { *p } else { 1.0 - p };
                            }
                            (outcome, prob)
                        })
                        .filter(|(_, prob)| *prob > 0.0)
                        .collect())
                } else {
                    let weight = 1.0 / draws as f64;
                    Ok((0..draws)
                        .map(|_| {
                            let mut outcome = base.clone();
                            for &(r, j) in &free {
                                outcome[r].0[j] = rng.random::<f64>() < *p;
                            }
                            (outcome, weight)
                        })
                        .collect())
                }
            }
        }
    }
}

/// Inserts `policy` for `provider` among the rival placements.
pub fn compose(provider: usize, policy: &Placement, rivals: &[Placement]) -> JointPlacement {
    let mut all = rivals.to_vec();
    all.insert(provider, policy.clone());
    JointPlacement(all)
}

/// Everything the game needs about one joint placement.
#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub equilibrium: Arc<PriceEquilibrium<f64>>,
    pub demand: Vec<Vec<f64>>,
    pub revenue: Vec<f64>,
    pub disturbance: Vec<f64>,
}

/// Belief-weighted value of one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub expected_revenue: f64,
    pub expected_disturbance: f64,
    pub expected_delay: Option<f64>,
    pub expected_coverage: Option<f64>,
    /// Some joint placement in the support had no converged price equilibrium.
    pub pricing_flagged: bool,
}

/// Memoized evaluation of joint placements for one stage.
pub struct StageEvaluator<'w> {
    pub world: &'w World,
    pub market: Market<f64>,
    pub prices: PriceCache<f64>,
    pub qos: Option<QosEngine<'w>>,
    outcomes: Mutex<HashMap<String, Arc<JointOutcome>>>,
    qos_cache: Mutex<HashMap<String, Arc<QosEstimate>>>,
}

impl<'w> StageEvaluator<'w> {
    pub fn new(world: &'w World, stage: u64, ev_count: usize, with_qos: bool) -> Result<Self> {
        let population = world.population(ev_count);
        let market = world.market(&population)?;
        let qos = if with_qos {
            Some(QosEngine::new(world, population, stage, world.scenario.planner.monte_carlo_runs)?)
        } else {
            None
        };
        Ok(StageEvaluator {
            world,
            market,
            prices: PriceCache::new(),
            qos,
            outcomes: Mutex::new(HashMap::new()),
            qos_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn outcome(&self, joint: &JointPlacement) -> Result<Arc<JointOutcome>> {
        let key = joint.to_string();
        if let Some(hit) = self.outcomes.lock().get(&key) {
            return Ok(hit.clone());
        }
        let equilibrium = self.prices.get_or_solve(&self.market, joint)?;
        let prices = equilibrium.price_vector();
        let demand = self.market.demand(joint, &prices)?;
        let lmp = &self.market.lmp;
        let w = &self.world;
        let mut revenue = Vec::with_capacity(joint.0.len());
        let mut disturbance = Vec::with_capacity(joint.0.len());
        for (k, placement) in joint.0.iter().enumerate() {
            revenue.push(crate::market::revenue(prices[k], lmp, &demand[k], placement));
            disturbance.push(provider_disturbance(
                &w.scenario.grid,
                &w.base_flow,
                &w.site_buses,
                &demand[k],
                placement,
                w.scenario.planner.horizon_hours,
            )?);
        }
        let outcome = Arc::new(JointOutcome { equilibrium, demand, revenue, disturbance });
        Ok(self.outcomes.lock().entry(key).or_insert(outcome).clone())
    }

    pub fn qos_at(&self, joint: &JointPlacement) -> Result<Option<Arc<QosEstimate>>> {
        let Some(engine) = &self.qos else { return Ok(None) };
        let key = joint.to_string();
        if let Some(hit) = self.qos_cache.lock().get(&key) {
            return Ok(Some(hit.clone()));
        }
        let prices = self.outcome(joint)?.equilibrium.price_vector();
        let est = Arc::new(engine.estimate(joint, &prices)?);
        Ok(Some(self.qos_cache.lock().entry(key).or_insert(est).clone()))
    }

    /// Evaluates every listed joint placement in parallel, filling the caches.
    pub fn warm(&self, joints: &[JointPlacement]) -> Result<()> {
        joints.par_iter().try_for_each(|j| {
            self.outcome(j)?;
            self.qos_at(j)?;
            Ok(())
        })
    }

    /// Belief-weighted revenue, disturbance and QoS of `policy` for `provider`.
    pub fn policy_value(&self, provider: usize, policy: &Placement, support: &Support) -> Result<PolicyValue> {
        let mut v = PolicyValue {
            expected_revenue: 0.0,
            expected_disturbance: 0.0,
            expected_delay: self.qos.as_ref().map(|_| 0.0),
            expected_coverage: self.qos.as_ref().map(|_| 0.0),
            pricing_flagged: false,
        };
        for (rivals, prob) in support {
            let joint = compose(provider, policy, rivals);
            let out = self.outcome(&joint)?;
            v.expected_revenue += prob * out.revenue[provider];
            v.expected_disturbance += prob * out.disturbance[provider];
            v.pricing_flagged |= !out.equilibrium.converged;
            if let Some(q) = self.qos_at(&joint)? {
                *v.expected_delay.as_mut().expect("qos enabled") += prob * q.delay[provider];
                *v.expected_coverage.as_mut().expect("qos enabled") += prob * q.coverage[provider];
            }
        }
        Ok(v)
    }
}

/// `E[R] - theta^T S - w E[B]`.
pub fn expected_utility(value: &PolicyValue, theta: &TypeVector, policy: &Placement, w: f64) -> f64 {
    crate::market::utility(crate::market::profit(value.expected_revenue, &theta.0, policy), value.expected_disturbance, w)
}

/// QoS screen for one policy value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QosFilter {
    pub delay_max: f64,
    pub coverage_threshold: f64,
    /// Literal `coverage <= threshold` instead of `coverage >= threshold`.
    pub coverage_at_most: bool,
}

impl QosFilter {
    pub fn passes(&self, value: &PolicyValue) -> bool {
        let (Some(delay), Some(coverage)) = (value.expected_delay, value.expected_coverage) else {
            return true;
        };
        let coverage_ok = if self.coverage_at_most {
            coverage <= self.coverage_threshold
        } else {
            coverage >= self.coverage_threshold
        };
        delay <= self.delay_max && coverage_ok
    }
}

/// Index of the best feasible policy: highest expected utility, then fewer
/// stations, then lexicographically first.
pub fn best_response(
    theta: &TypeVector,
    policies: &[Placement],
    values: &[PolicyValue],
    w: f64,
    filter: Option<&QosFilter>,
    provider: usize,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (policy, value)) in policies.iter().zip(values).enumerate() {
        if let Some(f) = filter {
            if !f.passes(value) {
                continue;
            }
        }
        let u = expected_utility(value, theta, policy, w);
        let better = match best {
            None => true,
            Some((b, bu)) => u > bu || (u == bu && policy.count() < policies[b].count()),
        };
        if better {
            best = Some((i, u));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::Infeasible { provider })
}

/// Whether `theta` lies strictly inside the decision region of policy `l`:
/// `theta^T (S_j - S_l) - (ER_j - ER_l) + w (B_j - B_l) > 0` for all `j != l`.
pub fn hypervolume_member(
    theta: &TypeVector,
    l: usize,
    policies: &[Placement],
    expected_revenue: &[f64],
    disturbance: &[f64],
    w: f64,
) -> bool {
    (0..policies.len()).filter(|&j| j != l).all(|j| {
        let cost_gap = theta.cost(&policies[j]) - theta.cost(&policies[l]);
        cost_gap - (expected_revenue[j] - expected_revenue[l]) + w * (disturbance[j] - disturbance[l]) > 0.0
    })
}

/// Per-provider outcome row of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderOutcome {
    pub provider: usize,
    pub name: String,
    pub level: u8,
    pub policy: Placement,
    /// `None` when the provider runs no stations.
    pub price: Option<f64>,
    pub expected_utility: f64,
    pub delay_prob: f64,
    pub delay_se: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub newly_built: Vec<String>,
    pub total_stations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub label: String,
    pub ev_count: usize,
    pub runs: usize,
    pub prices_converged: bool,
    pub providers: Vec<ProviderOutcome>,
}

impl StageResult {
    pub fn joint_placement(&self) -> JointPlacement {
        JointPlacement(self.providers.iter().map(|p| p.policy.clone()).collect())
    }
}

pub const STAGE_CSV_HEADER: [&str; 16] = [
    "stage",
    "ev_count",
    "runs",
    "prices_converged",
    "provider",
    "name",
    "level",
    "policy",
    "price",
    "expected_utility",
    "delay_prob",
    "delay_se",
    "coverage",
    "coverage_se",
    "newly_built",
    "total_stations",
];

/// Flat CSV row: one per provider per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageRow {
    stage: String,
    ev_count: usize,
    runs: usize,
    prices_converged: bool,
    provider: usize,
    name: String,
    level: u8,
    policy: Placement,
    price: Option<f64>,
    expected_utility: f64,
    delay_prob: f64,
    delay_se: f64,
    coverage: f64,
    coverage_se: f64,
    /// Site ids joined with `;`.
    newly_built: String,
    total_stations: usize,
}

/// Writes stage results as CSV, one row per provider and stage in order.
pub fn write_stage_csv<W: std::io::Write>(results: &[StageResult], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    // written explicitly so a result without rows still carries its header
    w.write_record(STAGE_CSV_HEADER)?;
    for r in results {
        for p in &r.providers {
            w.serialize(StageRow {
                stage: r.label.clone(),
                ev_count: r.ev_count,
                runs: r.runs,
                prices_converged: r.prices_converged,
                provider: p.provider,
                name: p.name.clone(),
                level: p.level,
                policy: p.policy.clone(),
                price: p.price,
                expected_utility: p.expected_utility,
                delay_prob: p.delay_prob,
                delay_se: p.delay_se,
                coverage: p.coverage,
                coverage_se: p.coverage_se,
                newly_built: p.newly_built.join(";"),
                total_stations: p.total_stations,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn stage_csv_string(results: &[StageResult]) -> Result<String> {
    let mut buf = Vec::new();
    write_stage_csv(results, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn save_stage_result(result: &StageResult, path: &std::path::Path) -> Result<()> {
    write_stage_csv(std::slice::from_ref(result), std::fs::File::create(path)?)
}

/// Loads a single-stage CSV written by [`save_stage_result`]. A header-only
/// file yields a result with no providers and an empty label.
pub fn load_stage_result(path: &std::path::Path) -> Result<StageResult> {
    let file = std::fs::File::open(path).map_err(|e| crate::error::parse_error(path, e))?;
    let mut all = read_stage_csv(file)?;
    match all.len() {
        0 => Ok(StageResult { label: String::new(), ev_count: 0, runs: 0, prices_converged: true, providers: Vec::new() }),
        1 => Ok(all.remove(0)),
        n => Err(crate::error::parse_error(path, format!("expected one stage, found {n}"))),
    }
}

/// Inverse of [`write_stage_csv`]; consecutive rows with the same stage label
/// form one stage.
pub fn read_stage_csv<R: std::io::Read>(input: R) -> Result<Vec<StageResult>> {
    let mut results: Vec<StageResult> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize::<StageRow>() {
        let row = row?;
        let outcome = ProviderOutcome {
            provider: row.provider,
            name: row.name,
            level: row.level,
            policy: row.policy,
            price: row.price,
            expected_utility: row.expected_utility,
            delay_prob: row.delay_prob,
            delay_se: row.delay_se,
            coverage: row.coverage,
            coverage_se: row.coverage_se,
            newly_built: row.newly_built.split(';').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            total_stations: row.total_stations,
        };
        match results.last_mut() {
            Some(last) if last.label == row.stage => last.providers.push(outcome),
            _ => results.push(StageResult {
                label: row.stage,
                ev_count: row.ev_count,
                runs: row.runs,
                prices_converged: row.prices_converged,
                providers: vec![outcome],
            }),
        }
    }
    Ok(results)
}

/// Sites each provider may build on.
pub fn allowed_sites(world: &World) -> Vec<Vec<bool>> {
    (0..world.providers())
        .map(|k| world.scenario.sites.iter().map(|s| s.level_owner.is_none_or(|o| o == k)).collect())
        .collect()
}

/// Inputs to one stage solve beyond the world itself.
#[derive(Clone, Debug)]
pub struct StageInput<'a> {
    pub index: usize,
    pub label: &'a str,
    pub ev_count: usize,
    pub carried: &'a JointPlacement,
    pub belief: &'a Belief,
}

/// Intermediate values of a stage solve, kept for inspection and tests.
pub struct StageAnalysis {
    pub policies: Vec<Vec<Placement>>,
    pub values: Vec<Vec<PolicyValue>>,
    pub types: Vec<TypeVector>,
}

/// Enumerates policies and belief supports for every provider and evaluates
/// the policy values.
pub fn analyse_stage(evaluator: &StageEvaluator<'_>, input: &StageInput<'_>) -> Result<StageAnalysis> {
    let world = evaluator.world;
    let planner = &world.scenario.planner;
    let seed = world.scenario.rng_seed;
    let stage = input.index as u64;
    let allowed = allowed_sites(world);
    let kk = world.providers();

    let mut policies = Vec::with_capacity(kk);
    let mut supports = Vec::with_capacity(kk);
    let mut types = Vec::with_capacity(kk);
    for k in 0..kk {
        policies.push(enumerate_allowed(&input.carried.0[k], &allowed[k])?);
        let mut rng = seed::stream(seed, "belief", &[stage, k as u64]);
        supports.push(input.belief.support(k, input.carried, &allowed, planner.belief_draws, &mut rng)?);
        let mut rng = seed::stream(seed, "types", &[stage, k as u64]);
        types.push(TypeVector::draw(planner.theta_lower, planner.theta_upper, &input.carried.0[k], &mut rng));
    }

    let mut joints = BTreeSet::new();
    for k in 0..kk {
        for policy in &policies[k] {
            for (rivals, _) in &supports[k] {
                joints.insert(compose(k, policy, rivals).to_string());
            }
        }
    }
    let joints: Vec<JointPlacement> = joints.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    evaluator.warm(&joints)?;

    let values = (0..kk)
        .map(|k| policies[k].iter().map(|p| evaluator.policy_value(k, p, &supports[k])).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(StageAnalysis { policies, values, types })
}

/// One planning stage: types, best responses, final prices and realised QoS.
pub fn solve_stage(world: &World, input: &StageInput<'_>) -> Result<StageResult> {
    let planner = &world.scenario.planner;
    let evaluator = StageEvaluator::new(world, input.index as u64, input.ev_count, true)?;
    let analysis = analyse_stage(&evaluator, input)?;
    let filter = QosFilter {
        delay_max: planner.delay_threshold,
        coverage_threshold: planner.coverage_threshold,
        coverage_at_most: planner.coverage_at_most,
    };
    let filter = planner.qos_filter.then_some(&filter);

    let kk = world.providers();
    let mut chosen = Vec::with_capacity(kk);
    let mut utilities = Vec::with_capacity(kk);
    for k in 0..kk {
        let i = best_response(&analysis.types[k], &analysis.policies[k], &analysis.values[k], planner.w, filter, k)?;
        utilities.push(expected_utility(&analysis.values[k][i], &analysis.types[k], &analysis.policies[k][i], planner.w));
        chosen.push(analysis.policies[k][i].clone());
    }
    let joint = JointPlacement(chosen);
    let outcome = evaluator.outcome(&joint)?;
    let qos = evaluator.qos_at(&joint)?.expect("stage evaluator runs QoS");

    let providers = (0..kk)
        .map(|k| {
            let cfg = &world.scenario.providers[k];
            let policy = joint.0[k].clone();
            let newly_built = policy
                .built()
                .filter(|&j| !input.carried.0[k].0[j])
                .map(|j| world.scenario.sites[j].id.clone())
                .collect();
            ProviderOutcome {
                provider: k,
                name: cfg.name.clone(),
                level: cfg.level,
                total_stations: policy.count(),
                policy,
                price: outcome.equilibrium.prices[k],
                expected_utility: utilities[k],
                delay_prob: qos.delay[k],
                delay_se: qos.delay_se[k],
                coverage: qos.coverage[k],
                coverage_se: qos.coverage_se[k],
                newly_built,
            }
        })
        .collect();
    Ok(StageResult {
        label: input.label.to_string(),
        ev_count: input.ev_count,
        runs: qos.runs,
        prices_converged: outcome.equilibrium.converged,
        providers,
    })
}

/// Runs every configured stage in order, carrying built stations forward.
pub fn plan_multistage(world: &World, belief: &Belief) -> Result<Vec<StageResult>> {
    let mut carried = JointPlacement::empty(world.providers(), world.sites());
    let mut results = Vec::with_capacity(world.scenario.stages.len());
    for (i, stage) in world.scenario.stages.iter().enumerate() {
        let input = StageInput { index: i, label: &stage.label, ev_count: stage.ev_count, carried: &carried, belief };
        let result = solve_stage(world, &input)?;
        carried = result.joint_placement();
        results.push(result);
    }
    Ok(results)
}
