//! Nested-logit demand model.
//!
//! Each provider is one nest; its built sites are the alternatives inside the
//! nest. Home charging is the optional outside good with utility 0. All
//! probabilities are evaluated in the log domain:
//!
//! ```text
//! I_k      = ln sum_l exp(U_lk / sigma_k)            (nest inclusive value)
//! D        = ln( [1] + sum_t exp(sigma_t * I_t) )    ([1] only with outside good)
//! ln P_jk  = U_jk / sigma_k + (sigma_k - 1) I_k - D
//! ```
//!
//! Utilities are linear in the provider's uniform price with slope
//! `b_n = beta / income_n`, which gives the closed-form price derivatives
//! `dP_jk/dp_k = b P_jk (1 - S_k)` and `dP_jm/dp_k = -b P_jm S_k` (m != k),
//! where `S_k` is the share of nest k.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::road::{DistanceTable, NodeId, RoadNetwork, Site};
use crate::scalar::{log_sum_exp, Scalar};

/// Per-nest coefficients of the site utility and the nest dissimilarity parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestCoefficients {
    /// deviating distance weight, per km
    pub mu: f64,
    /// destination indicator weight
    pub eta: f64,
    /// restaurant
    pub gamma: f64,
    /// shopping centre
    pub lambda: f64,
    /// supermarket
    pub delta: f64,
    /// in (0, 1]; 1 means no within-nest correlation
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceCoefficients {
    /// weight of 1 / charging time, must be positive
    pub alpha: f64,
    /// weight of price / income, must be negative
    pub beta: f64,
    /// one entry per provider
    pub nests: Vec<NestCoefficients>,
}

impl ChoiceCoefficients {
    pub fn problems(&self, providers: usize) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0) {
            out.push(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.beta < 0.0) {
            out.push(format!("beta must be < 0, got {}", self.beta));
        }
        if self.nests.len() != providers {
            out.push(format!("expected {providers} nest coefficient sets, got {}", self.nests.len()));
        }
        for (k, n) in self.nests.iter().enumerate() {
            if !(n.sigma > 0.0 && n.sigma <= 1.0) {
                out.push(format!("nest {k}: sigma must lie in (0, 1], got {}", n.sigma));
            }
            if ![n.mu, n.eta, n.gamma, n.lambda, n.delta].iter().all(|v| v.is_finite()) {
                out.push(format!("nest {k}: coefficients must be finite"));
            }
        }
        out
    }
}

/// Nominal ratings of the three charging levels: (volts, amps).
pub const LEVEL_RATINGS: [(f64, f64); 3] = [(120.0, 12.0), (240.0, 32.0), (600.0, 400.0)];

/// Nominal charging power of a level in kW (volts x amps).
pub fn level_power_kw(level: u8) -> Option<f64> {
    let (v, a) = LEVEL_RATINGS.get((level as usize).checked_sub(1)?)?;
    Some(v * a / 1000.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    /// Charging level 1, 2 or 3.
    pub level: u8,
    /// Mean charging time t_k, hours.
    pub mean_charge_hours: f64,
    /// Plugs per station; `None` means unlimited.
    #[serde(default)]
    pub plugs_per_station: Option<u32>,
    /// Charging power in kW; defaults to the nominal power of `level`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_kw: Option<f64>,
}

impl ProviderConfig {
    pub fn charging_power_kw(&self) -> f64 {
        self.power_kw.or_else(|| level_power_kw(self.level)).unwrap_or(f64::NAN)
    }

    pub fn problems(&self, k: usize) -> Vec<String> {
        let mut out = Vec::new();
        if level_power_kw(self.level).is_none() {
            out.push(format!("provider {k}: level must be 1, 2 or 3, got {}", self.level));
        }
        if !(self.mean_charge_hours > 0.0) {
            out.push(format!("provider {k}: mean_charge_hours must be > 0"));
        }
        if self.plugs_per_station == Some(0) {
            out.push(format!("provider {k}: plugs_per_station must be >= 1"));
        }
        if let Some(p) = self.power_kw {
            if !(p > 0.0) {
                out.push(format!("provider {k}: power_kw must be > 0"));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvAgent {
    pub id: u32,
    pub home: NodeId,
    pub destination: NodeId,
    /// i_n, currency per year
    pub income: f64,
    /// q_n, kWh per charge
    pub demand_kwh: f64,
}

/// Observable nest utility `alpha / t_k + beta * p_k / i_n`.
pub fn nest_utility<T: Scalar>(alpha: T, beta: T, charge_hours: T, price: T, income: T) -> T {
    alpha / charge_hours + beta * price / income
}

/// Observable site utility `mu d + eta z + gamma r + lambda g + delta m`.
pub fn site_utility_terms(nest: &NestCoefficients, deviation_km: f64, at_destination: bool, site: &Site) -> f64 {
    let a = site.amenities;
    nest.mu * deviation_km
        + nest.eta * f64::from(u8::from(at_destination))
        + nest.gamma * f64::from(a.r)
        + nest.lambda * f64::from(a.g)
        + nest.delta * f64::from(a.m)
}

/// Site utility of `site` under `nest` for `agent`'s home-to-destination trip.
pub fn station_utility(
    nest: &NestCoefficients,
    site: &Site,
    agent: &EvAgent,
    net: &RoadNetwork,
    d_th: f64,
) -> Result<f64> {
    let d = crate::road::deviating_distance(net, agent.home, agent.destination, site)?;
    let z = crate::road::destination_indicator(net, agent.destination, site, d_th)?;
    Ok(site_utility_terms(nest, d, z, site))
}

/// [`station_utility`] against a precomputed distance table.
pub fn station_utility_cached(
    nest: &NestCoefficients,
    site: &Site,
    agent: &EvAgent,
    dist: &DistanceTable,
    d_th: f64,
) -> Result<f64> {
    let d = dist.deviating_distance(agent.home, agent.destination, site.road_node)?;
    let z = dist.destination_indicator(agent.destination, site.road_node, d_th)?;
    Ok(site_utility_terms(nest, d, z, site))
}

/// Built alternatives of one provider for one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Nest<T> {
    pub sigma: T,
    /// Site indices, aligned with `utilities`.
    pub sites: Vec<usize>,
    pub utilities: Vec<T>,
}

/// One agent's full choice situation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceSet<T> {
    pub nests: Vec<Nest<T>>,
    pub outside_good: bool,
    /// dU/dp_k for every alternative of nest k, i.e. beta / income.
    pub price_slope: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities<T> {
    /// Aligned with `ChoiceSet::nests[k].sites`.
    pub nests: Vec<Vec<T>>,
    /// Total share of each nest.
    pub nest_shares: Vec<T>,
    pub outside: T,
}

impl<T: Scalar> Probabilities<T> {
    pub fn total(&self) -> T {
        self.nests.iter().flatten().copied().sum::<T>() + self.outside
    }
}

/// Per-agent rows of observable utilities.
pub type UtilityTable<T> = Vec<ChoiceSet<T>>;

pub fn choice_probabilities<T: Scalar>(set: &ChoiceSet<T>) -> Result<Probabilities<T>> {
    let inclusive: Vec<Option<T>> = set
        .nests
        .iter()
        .map(|n| (!n.utilities.is_empty()).then(|| log_sum_exp(n.utilities.iter().map(|&u| u / n.sigma))))
        .collect();
    let mut terms: Vec<T> = set
        .nests
        .iter()
        .zip(&inclusive)
        .filter_map(|(n, iv)| iv.map(|iv| n.sigma * iv))
        .collect();
    if set.outside_good {
        terms.push(T::zero());
    }
    if terms.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    let denom = log_sum_exp(terms.iter().copied());
    let mut nests = Vec::with_capacity(set.nests.len());
    let mut nest_shares = Vec::with_capacity(set.nests.len());
    for (n, iv) in set.nests.iter().zip(&inclusive) {
        match iv {
            Some(iv) => {
                let within = (n.sigma - T::one()) * *iv - denom;
                nests.push(n.utilities.iter().map(|&u| (u / n.sigma + within).exp()).collect());
                nest_shares.push((n.sigma * *iv - denom).exp());
            }
            None => {
                nests.push(Vec::new());
                nest_shares.push(T::zero());
            }
        }
    }
    let outside = if set.outside_good { (-denom).exp() } else { T::zero() };
    Ok(Probabilities { nests, nest_shares, outside })
}

/// Probabilities for every agent of a utility table.
pub fn table_probabilities<T: Scalar>(table: &[ChoiceSet<T>]) -> Result<Vec<Probabilities<T>>> {
    table.iter().map(choice_probabilities).collect()
}

/// `dP_{j,m} / dp_k` for every alternative `(j, m)`, as a nest-aligned array.
pub fn price_derivatives<T: Scalar>(set: &ChoiceSet<T>, probs: &Probabilities<T>, provider: usize) -> Vec<Vec<T>> {
    let b = set.price_slope;
    let share = probs.nest_shares[provider];
    probs
        .nests
        .iter()
        .enumerate()
        .map(|(m, row)| {
            let factor = if m == provider { b * (T::one() - share) } else { -b * share };
            row.iter().map(|&p| p * factor).collect()
        })
        .collect()
}

/// Own-price gradient `dP_{j,k} / dp_k` for every built site of provider `k`.
pub fn choice_probability_price_gradient<T: Scalar>(set: &ChoiceSet<T>, provider: usize) -> Result<Vec<T>> {
    let probs = choice_probabilities(set)?;
    let b = set.price_slope;
    let share = probs.nest_shares[provider];
    Ok(probs.nests[provider].iter().map(|&p| b * p * (T::one() - share)).collect())
}

/// Expected kWh per (provider, site): `psi[k][j] = sum_n q_n P^n_{j,k}`.
pub fn charging_demand<T: Scalar>(
    table: &[ChoiceSet<T>],
    probabilities: &[Probabilities<T>],
    demand_kwh: &[T],
    n_sites: usize,
) -> Result<Vec<Vec<T>>> {
    if table.len() != probabilities.len() || table.len() != demand_kwh.len() {
        return Err(Error::LengthMismatch { left: table.len(), right: probabilities.len().min(demand_kwh.len()) });
    }
    let providers = table.first().map_or(0, |s| s.nests.len());
    let mut psi = vec![vec![T::zero(); n_sites]; providers];
    for ((set, probs), &q) in table.iter().zip(probabilities).zip(demand_kwh) {
        for (k, (nest, row)) in set.nests.iter().zip(&probs.nests).enumerate() {
            for (&j, &p) in nest.sites.iter().zip(row) {
                psi[k][j] += q * p;
            }
        }
    }
    Ok(psi)
}
