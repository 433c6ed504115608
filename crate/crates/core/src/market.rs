//! Provider revenue, profit and utility, and the Bertrand price equilibrium.
//!
//! Every provider charges one uniform price across its stations. Equilibrium
//! prices solve the first-order conditions
//!
//! ```text
//! F_k(p) = sum_n q_n sum_j s_jk [ P_jk + (p_k - c_j) dP_jk/dp_k ] = 0
//! ```
//!
//! for all providers with at least one built station. With `S_k` the nest share
//! and `M_k = sum_j (p_k - c_j) P_jk`, each agent contributes
//! `S_k + b (1 - S_k) M_k`, whose price derivatives are closed form, so the
//! Newton Jacobian is analytic as well.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::choice::{choice_probabilities, ChoiceSet, Nest, Probabilities};
use crate::error::{Error, Result};
use crate::grid::{disturbance, dispatch_with_ev, GeneratorOutput, GridCase, PowerFlowSolution};
use crate::linalg::solve_dense;
use crate::scalar::Scalar;

pub const FOC_TOLERANCE: f64 = 1e-8;
const NEWTON_MAX_ITERATIONS: usize = 100;
const BEST_RESPONSE_MAX_ROUNDS: usize = 500;

/// Build bit-vector of one provider over the candidate sites.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Placement(pub Vec<bool>);

impl Placement {
    pub fn empty(sites: usize) -> Self {
        Placement(vec![false; sites])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn built(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    /// True when every site built in `other` is also built here.
    pub fn covers(&self, other: &Placement) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| a || !b)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Invalid(format!("placement bit must be 0 or 1, got {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Placement)
    }
}

impl Serialize for Placement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Placement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Placements of all providers. Its `Display` form (`"101|000|010"`) is the cache key.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct JointPlacement(pub Vec<Placement>);

impl JointPlacement {
    pub fn empty(providers: usize, sites: usize) -> Self {
        JointPlacement(vec![Placement::empty(sites); providers])
    }

    pub fn with(&self, provider: usize, placement: Placement) -> Self {
        let mut out = self.clone();
        out.0[provider] = placement;
        out
    }
}

impl fmt::Display for JointPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, p) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str("|")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl FromStr for JointPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(['|', ',']).map(str::parse).collect::<Result<Vec<_>>>().map(JointPlacement)
    }
}

/// `R = sum_j s_j (p - c_j) psi_j`.
pub fn revenue<T: Scalar>(price: T, lmp: &[T], demand: &[T], placement: &Placement) -> T {
    placement.built().map(|j| (price - lmp[j]) * demand[j]).sum()
}

/// `Pi = R - theta^T S`.
pub fn profit<T: Scalar>(revenue: T, theta: &[T], placement: &Placement) -> T {
    revenue - placement.built().map(|j| theta[j]).sum::<T>()
}

/// `U = Pi - w B`.
pub fn utility<T: Scalar>(profit: T, disturbance: T, w: T) -> T {
    profit - w * disturbance
}

/// Result of the price solve for one joint placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceEquilibrium<T> {
    /// `None` for providers without stations.
    pub prices: Vec<Option<T>>,
    /// FOC left-hand sides at `prices` (0 for inactive providers).
    pub residuals: Vec<T>,
    pub converged: bool,
    /// True when the best-response fallback was needed.
    pub used_fallback: bool,
}

impl<T: Scalar> PriceEquilibrium<T> {
    /// Prices with inactive providers filled by zero; they never enter demand.
    pub fn price_vector(&self) -> Vec<T> {
        self.prices.iter().map(|p| p.unwrap_or_else(T::zero)).collect()
    }

    pub fn max_residual(&self) -> T {
        self.residuals.iter().fold(T::zero(), |m, r| m.max(r.abs()))
    }
}

/// One agent as seen by the market: demand weight, price slope and the
/// price-independent part of every (provider, site) utility.
#[derive(Clone, Debug)]
pub struct MarketAgent<T> {
    pub demand_kwh: T,
    /// beta / income
    pub price_slope: T,
    /// `site_utility[k][j]`
    pub site_utility: Vec<Vec<T>>,
}

/// Everything needed to price a joint placement.
#[derive(Clone, Debug)]
pub struct Market<T> {
    pub agents: Vec<MarketAgent<T>>,
    /// `alpha / t_k` per provider.
    pub nest_constant: Vec<T>,
    pub sigma: Vec<T>,
    /// LMP at each site's bus.
    pub lmp: Vec<T>,
    pub outside_good: bool,
    /// Upper end of the price bracket above the highest own LMP.
    pub bracket_width: T,
}

impl<T: Scalar> Market<T> {
    pub fn providers(&self) -> usize {
        self.sigma.len()
    }

    pub fn sites(&self) -> usize {
        self.lmp.len()
    }

    pub fn choice_set(&self, agent: &MarketAgent<T>, joint: &JointPlacement, prices: &[T]) -> ChoiceSet<T> {
        let nests = (0..self.providers())
            .map(|k| {
                let sites: Vec<usize> = joint.0[k].built().collect();
                let base = self.nest_constant[k] + agent.price_slope * prices[k];
                let utilities = sites.iter().map(|&j| base + agent.site_utility[k][j]).collect();
                Nest { sigma: self.sigma[k], sites, utilities }
            })
            .collect();
        ChoiceSet { nests, outside_good: self.outside_good, price_slope: agent.price_slope }
    }

    pub fn utility_table(&self, joint: &JointPlacement, prices: &[T]) -> Vec<ChoiceSet<T>> {
        self.agents.iter().map(|a| self.choice_set(a, joint, prices)).collect()
    }

    fn probabilities(&self, joint: &JointPlacement, prices: &[T]) -> Result<Vec<(ChoiceSet<T>, Probabilities<T>)>> {
        self.agents
            .iter()
            .map(|a| {
                let set = self.choice_set(a, joint, prices);
                let p = choice_probabilities(&set)?;
                Ok((set, p))
            })
            .collect()
    }

    /// Expected kWh per provider and site.
    pub fn demand(&self, joint: &JointPlacement, prices: &[T]) -> Result<Vec<Vec<T>>> {
        let mut psi = vec![vec![T::zero(); self.sites()]; self.providers()];
        for (agent, (set, probs)) in self.agents.iter().zip(self.probabilities(joint, prices)?) {
            for (k, nest) in set.nests.iter().enumerate() {
                for (&j, &p) in nest.sites.iter().zip(&probs.nests[k]) {
                    psi[k][j] += agent.demand_kwh * p;
                }
            }
        }
        Ok(psi)
    }

    pub fn revenue(&self, provider: usize, prices: &[T], joint: &JointPlacement) -> Result<T> {
        if joint.0[provider].count() == 0 {
            return Ok(T::zero());
        }
        let psi = self.demand(joint, prices)?;
        Ok(revenue(prices[provider], &self.lmp, &psi[provider], &joint.0[provider]))
    }

    /// FOC residual vector and, optionally, its Jacobian.
    pub fn foc(&self, joint: &JointPlacement, prices: &[T], with_jacobian: bool) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let kk = self.providers();
        let mut f = vec![T::zero(); kk];
        let mut jac = if with_jacobian { vec![vec![T::zero(); kk]; kk] } else { Vec::new() };
        let active: Vec<bool> = joint.0.iter().map(|p| p.count() > 0).collect();
        for (agent, (set, probs)) in self.agents.iter().zip(self.probabilities(joint, prices)?) {
            let b = agent.price_slope;
            let q = agent.demand_kwh;
            let shares = &probs.nest_shares;
            for k in (0..kk).filter(|&k| active[k]) {
                let s = shares[k];
                let margin: T = set.nests[k].sites.iter().zip(&probs.nests[k]).map(|(&j, &p)| (prices[k] - self.lmp[j]) * p).sum();
                f[k] += q * (s + b * (T::one() - s) * margin);
                if with_jacobian {
                    for m in 0..kk {
                        let own = if m == k { T::one() } else { T::zero() };
                        let ds = b * s * (own - shares[m]);
                        let dm = own * s + margin * b * (own - shares[m]);
                        jac[k][m] += q * (ds - b * ds * margin + b * (T::one() - s) * dm);
                    }
                }
            }
        }
        Ok((f, jac))
    }

    /// Profit of `provider` at its own price `price`, rivals fixed at `prices`.
    pub fn own_profit(&self, provider: usize, price: T, prices: &[T], joint: &JointPlacement) -> Result<T> {
        let mut p = prices.to_vec();
        p[provider] = price;
        self.revenue(provider, &p, joint)
    }

    /// Price search interval of a provider: from its cheapest to its dearest LMP plus the bracket width.
    pub fn bracket(&self, placement: &Placement) -> (T, T) {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for j in placement.built() {
            lo = lo.min(self.lmp[j]);
            hi = hi.max(self.lmp[j]);
        }
        (lo, hi + self.bracket_width)
    }

    /// Golden-section maximisation of own profit over the bracket.
    pub fn best_response(&self, provider: usize, prices: &[T], joint: &JointPlacement) -> Result<T> {
        let (mut a, mut b) = self.bracket(&joint.0[provider]);
        let ratio = T::of((5f64.sqrt() - 1.0) / 2.0);
        let mut x1 = b - ratio * (b - a);
        let mut x2 = a + ratio * (b - a);
        let mut f1 = self.own_profit(provider, x1, prices, joint)?;
        let mut f2 = self.own_profit(provider, x2, prices, joint)?;
        // interval width the scalar type can still resolve
        let width = T::of(1e-11).max(T::epsilon() * T::of(4.0) * b.abs().max(T::one()));
        while b - a > width {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + ratio * (b - a);
                f2 = self.own_profit(provider, x2, prices, joint)?;
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - ratio * (b - a);
                f1 = self.own_profit(provider, x1, prices, joint)?;
            }
        }
        Ok((a + b) / T::of(2.0))
    }

    fn newton(&self, joint: &JointPlacement, start: &[T], active: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let floors: Vec<T> = (0..self.providers())
            .map(|k| if joint.0[k].count() > 0 { self.bracket(&joint.0[k]).0 } else { T::zero() })
            .collect();
        let norm = |f: &[T]| active.iter().fold(T::zero(), |m, &k| m.max(f[k].abs()));
        let mut p = start.to_vec();
        let (mut f, mut jac) = self.foc(joint, &p, true)?;
        for _ in 0..NEWTON_MAX_ITERATIONS {
            let current = norm(&f);
            if current < T::of(FOC_TOLERANCE) {
                break;
            }
            let mut a: Vec<Vec<T>> = active.iter().map(|&k| active.iter().map(|&m| jac[k][m]).collect()).collect();
            let mut step: Vec<T> = active.iter().map(|&k| -f[k]).collect();
            if solve_dense(&mut a, &mut step).is_err() {
                break;
            }
            let mut lambda = T::one();
            let mut accepted = false;
            for _ in 0..40 {
                let mut trial = p.clone();
                for (i, &k) in active.iter().enumerate() {
                    trial[k] = (p[k] + lambda * step[i]).max(floors[k]);
                }
                let (ft, _) = self.foc(joint, &trial, false)?;
                if norm(&ft) < current {
                    p = trial;
                    accepted = true;
                    break;
                }
                lambda /= T::of(2.0);
            }
            if !accepted {
                break;
            }
            (f, jac) = self.foc(joint, &p, true)?;
        }
        Ok((p, f))
    }

    /// Simultaneous root of the FOC system by damped Newton, falling back to
    /// iterated golden-section best responses when Newton stalls.
    pub fn solve_price_equilibrium(&self, joint: &JointPlacement) -> Result<PriceEquilibrium<T>> {
        let kk = self.providers();
        let active: Vec<usize> = (0..kk).filter(|&k| joint.0[k].count() > 0).collect();
        if active.is_empty() {
            return Ok(PriceEquilibrium {
                prices: vec![None; kk],
                residuals: vec![T::zero(); kk],
                converged: true,
                used_fallback: false,
            });
        }
        let mean_slope = if self.agents.is_empty() {
            -T::one()
        } else {
            self.agents.iter().map(|a| a.price_slope).sum::<T>() / T::of(self.agents.len() as f64)
        };
        let mut start = vec![T::zero(); kk];
        for &k in &active {
            let (lo, hi) = self.bracket(&joint.0[k]);
            let markup = if mean_slope < T::zero() { -T::one() / mean_slope } else { self.bracket_width };
            start[k] = (lo + markup).min((lo + hi) / T::of(2.0)).max(lo);
        }
        let tol = T::of(FOC_TOLERANCE);
        let finish = |p: Vec<T>, f: Vec<T>, used_fallback: bool| {
            let converged = active.iter().all(|&k| f[k].abs() < tol);
            let mut residuals = vec![T::zero(); kk];
            let mut prices = vec![None; kk];
            for &k in &active {
                residuals[k] = f[k];
                prices[k] = Some(p[k]);
            }
            PriceEquilibrium { prices, residuals, converged, used_fallback }
        };

        let (p, f) = self.newton(joint, &start, &active)?;
        if active.iter().all(|&k| f[k].abs() < tol) {
            return Ok(finish(p, f, false));
        }

        // best-response iteration from the Newton end point
        let mut p = p;
        for _ in 0..BEST_RESPONSE_MAX_ROUNDS {
            let mut change = T::zero();
            for &k in &active {
                let next = self.best_response(k, &p, joint)?;
                change = change.max((next - p[k]).abs());
                p[k] = next;
            }
            if change < T::of(1e-10) {
                break;
            }
        }
        let (p, f) = self.newton(joint, &p, &active)?;
        Ok(finish(p, f, true))
    }
}

/// Memo of price equilibria keyed by the joint placement.
#[derive(Debug, Default)]
pub struct PriceCache<T> {
    map: Mutex<HashMap<String, Arc<PriceEquilibrium<T>>>>,
}

impl<T: Scalar> PriceCache<T> {
    pub fn new() -> Self {
        Self { map: Mutex::new(HashMap::new()) }
    }

    pub fn get_or_solve(&self, market: &Market<T>, joint: &JointPlacement) -> Result<Arc<PriceEquilibrium<T>>> {
        let key = joint.to_string();
        if let Some(hit) = self.map.lock().get(&key) {
            return Ok(hit.clone());
        }
        let eq = Arc::new(market.solve_price_equilibrium(joint)?);
        Ok(self.map.lock().entry(key).or_insert(eq).clone())
    }

    pub fn len(&self) -> usize {
        self.map.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.lock().is_empty()
    }
}

/// Per-bus energy of one provider's stations, aligned with `grid.buses`.
pub fn bus_energy<T: Scalar>(grid: &GridCase, site_buses: &[usize], demand: &[T], placement: &Placement) -> Vec<T> {
    let mut per_bus = vec![T::zero(); grid.buses.len()];
    for j in placement.built() {
        per_bus[site_buses[j]] += demand[j];
    }
    per_bus
}

/// Disturbance attributed to one provider: only that provider's station
/// demand is superposed on the base load.
pub fn provider_disturbance<T: Scalar>(
    grid: &GridCase,
    base: &PowerFlowSolution<T>,
    site_buses: &[usize],
    demand: &[T],
    placement: &Placement,
    horizon_hours: T,
) -> Result<T> {
    let energy = bus_energy(grid, site_buses, demand, placement);
    if energy.iter().all(|&e| e == T::zero()) {
        return Ok(T::zero());
    }
    let (ev, _) = dispatch_with_ev(grid, base, &energy, horizon_hours)?;
    let base_out = GeneratorOutput { p: base.gen_p.clone(), q: base.gen_q.clone() };
    disturbance(&base_out, &ev)
}
