//! Independent reference implementations shared by the integration tests and
//! the acceptance target. None of these call into the code they check.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gumbel};
use rayon::prelude::*;

use evplan::choice::{ChoiceSet, Nest};
use evplan::grid::{dispatch_with_ev, solve_power_flow, BusKind, GeneratorOutput, GridCase};
use evplan::market::{JointPlacement, Market, Placement};
use evplan::road::{Edge, Node, NodeId, RoadNetwork};
use evplan::{load_scenario, World};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn world(name: &str) -> World {
    World::new(load_scenario(&fixture(name)).expect("fixture loads")).expect("fixture world")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- choice

/// Random choice situation with up to `max_nests` nests of 1..=`max_sites`
/// alternatives each (nests may come out empty when `allow_empty`).
pub fn random_choice_set(r: &mut ChaCha8Rng, max_nests: usize, max_sites: usize, outside: bool) -> ChoiceSet<f64> {
    let n_nests = r.random_range(1..=max_nests);
    let mut next_site = 0;
    let nests = (0..n_nests)
        .map(|_| {
            let m = r.random_range(1..=max_sites);
            let sites: Vec<usize> = (next_site..next_site + m).collect();
            next_site += m;
            Nest {
                sigma: r.random_range(0.2..=1.0),
                sites,
                utilities: (0..m).map(|_| r.random_range(-2.0..2.0)).collect(),
            }
        })
        .collect();
    ChoiceSet { nests, outside_good: outside, price_slope: -r.random_range(0.5..5.0) }
}

/// Textbook nested-logit shares, evaluated directly with plain exponentials.
pub fn nested_logit_direct(set: &ChoiceSet<f64>) -> (Vec<Vec<f64>>, f64) {
    let sums: Vec<f64> = set.nests.iter().map(|n| n.utilities.iter().map(|u| (u / n.sigma).exp()).sum()).collect();
    let mut denom: f64 = set.nests.iter().zip(&sums).filter(|(n, _)| !n.utilities.is_empty()).map(|(n, s)| s.powf(n.sigma)).sum();
    if set.outside_good {
        denom += 1.0;
    }
    let probs = set
        .nests
        .iter()
        .zip(&sums)
        .map(|(n, s)| n.utilities.iter().map(|u| (u / n.sigma).exp() * s.powf(n.sigma - 1.0) / denom).collect())
        .collect();
    (probs, if set.outside_good { 1.0 / denom } else { 0.0 })
}

/// Multinomial logit over every alternative (and the outside good at utility 0).
pub fn multinomial_logit(set: &ChoiceSet<f64>) -> (Vec<Vec<f64>>, f64) {
    let mut denom: f64 = set.nests.iter().flat_map(|n| n.utilities.iter()).map(|u| u.exp()).sum();
    if set.outside_good {
        denom += 1.0;
    }
    let probs = set.nests.iter().map(|n| n.utilities.iter().map(|u| u.exp() / denom).collect()).collect();
    (probs, if set.outside_good { 1.0 / denom } else { 0.0 })
}

/// Positive stable variate with Laplace transform `exp(-s^a)`, 0 < a < 1
/// (Kanter's representation).
pub fn positive_stable(a: f64, r: &mut ChaCha8Rng) -> f64 {
    let u: f64 = r.random_range(0.0..std::f64::consts::PI);
    let e: f64 = Exp1.sample(r);
    let num = (a * u).sin().powf(a) * ((1.0 - a) * u).sin().powf(1.0 - a);
    let big_a = (num / u.sin()).powf(1.0 / (1.0 - a));
    (big_a / e).powf((1.0 - a) / a)
}

/// Choice frequencies from simulated utility maximization with GEV errors:
/// within nest k, `eps_j = sigma_k (ln S_k + G_j)` with `S_k` positive stable
/// of index `sigma_k` and `G_j` standard Gumbel; the outside good draws an
/// independent standard Gumbel.
pub fn gev_simulate(set: &ChoiceSet<f64>, draws: usize, seed: u64) -> (Vec<Vec<f64>>, f64) {
    const CHUNK: usize = 50_000;
    let chunks = draws.div_ceil(CHUNK);
    let gumbel = Gumbel::new(0.0, 1.0).expect("gumbel");
    let counts: Vec<(Vec<Vec<u64>>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut counts: Vec<Vec<u64>> = set.nests.iter().map(|n| vec![0; n.utilities.len()]).collect();
            let mut outside = 0;
            let n = CHUNK.min(draws - c * CHUNK);
            for _ in 0..n {
                let mut best = if set.outside_good { gumbel.sample(&mut r) } else { f64::NEG_INFINITY };
                let mut arg = None;
                for (k, nest) in set.nests.iter().enumerate() {
                    if nest.utilities.is_empty() {
                        continue;
                    }
                    let ln_s = if nest.sigma < 1.0 { positive_stable(nest.sigma, &mut r).ln() } else { 0.0 };
                    for (j, u) in nest.utilities.iter().enumerate() {
                        let v = u + nest.sigma * (ln_s + gumbel.sample(&mut r));
                        if v > best {
                            best = v;
                            arg = Some((k, j));
                        }
                    }
                }
                match arg {
                    Some((k, j)) => counts[k][j] += 1,
                    None => outside += 1,
                }
            }
            (counts, outside)
        })
        .collect();
    let mut total: Vec<Vec<u64>> = set.nests.iter().map(|n| vec![0; n.utilities.len()]).collect();
    let mut outside = 0;
    for (c, o) in counts {
        for (t, row) in total.iter_mut().zip(c) {
            for (a, b) in t.iter_mut().zip(row) {
                *a += b;
            }
        }
        outside += o;
    }
    let d = draws as f64;
    (total.into_iter().map(|row| row.into_iter().map(|c| c as f64 / d).collect()).collect(), outside as f64 / d)
}

// ---------------------------------------------------------------- road

/// Random connected graph: a random spanning tree plus `extra` chords.
pub fn random_network(r: &mut ChaCha8Rng, n: usize, extra: usize) -> RoadNetwork {
    let nodes: Vec<Node> = (0..n as u32).map(|id| Node { id, x: r.random_range(0.0..10.0), y: r.random_range(0.0..10.0) }).collect();
    let mut edges = Vec::new();
    for v in 1..n as u32 {
        let u = r.random_range(0..v);
        edges.push(Edge { u, v, length: r.random_range(0.5..5.0) });
    }
    for _ in 0..extra {
        let u = r.random_range(0..n as u32);
        let v = r.random_range(0..n as u32);
        if u != v {
            edges.push(Edge { u, v, length: r.random_range(0.5..5.0) });
        }
    }
    RoadNetwork::new(nodes, edges).expect("valid random network")
}

/// Single-source distances by Bellman–Ford edge relaxation.
pub fn bellman_ford(net: &RoadNetwork, source: NodeId) -> HashMap<NodeId, f64> {
    let mut d: HashMap<NodeId, f64> = net.nodes().iter().map(|n| (n.id, f64::INFINITY)).collect();
    d.insert(source, 0.0);
    for _ in 0..net.nodes().len() {
        let mut changed = false;
        for e in net.edges() {
            for (a, b) in [(e.u, e.v), (e.v, e.u)] {
                let cand = d[&a] + e.length;
                if cand < d[&b] {
                    d.insert(b, cand);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    d
}

/// Every simple path from `a` to `b` with its length.
pub fn simple_paths(net: &RoadNetwork, a: NodeId, b: NodeId) -> Vec<(Vec<NodeId>, f64)> {
    let mut adj: HashMap<NodeId, Vec<(NodeId, f64)>> = HashMap::new();
    for e in net.edges() {
        adj.entry(e.u).or_default().push((e.v, e.length));
        adj.entry(e.v).or_default().push((e.u, e.length));
    }
    let mut out = Vec::new();
    let mut stack = vec![(vec![a], 0.0)];
    while let Some((path, len)) = stack.pop() {
        let last = *path.last().expect("non-empty");
        if last == b {
            out.push((path, len));
            continue;
        }
        for &(next, w) in adj.get(&last).map(Vec::as_slice).unwrap_or(&[]) {
            if !path.contains(&next) {
                let mut p = path.clone();
                p.push(next);
                stack.push((p, len + w));
            }
        }
    }
    out
}

// ---------------------------------------------------------------- grid

/// Bus admittance as `A^T diag(y) A` over a branch-bus incidence matrix,
/// plus diagonal line-charging and shunt terms.
pub fn ybus_incidence(case: &GridCase) -> Vec<Vec<Complex64>> {
    let n = case.buses.len();
    let idx: HashMap<u32, usize> = case.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let m = case.branches.len();
    let mut a = vec![vec![0.0f64; n]; m];
    let mut y_series = Vec::with_capacity(m);
    let mut shunt = vec![Complex64::new(0.0, 0.0); n];
    for (l, br) in case.branches.iter().enumerate() {
        a[l][idx[&br.from]] = 1.0;
        a[l][idx[&br.to]] = -1.0;
        let z = Complex64::new(br.r, br.x);
        y_series.push(z.inv());
        shunt[idx[&br.from]] += Complex64::new(0.0, br.b / 2.0);
        shunt[idx[&br.to]] += Complex64::new(0.0, br.b / 2.0);
    }
    for (i, b) in case.buses.iter().enumerate() {
        shunt[i] += Complex64::new(b.gs, b.bs);
    }
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = Complex64::new(0.0, 0.0);
            for l in 0..m {
                s += y_series[l] * (a[l][i] * a[l][j]);
            }
            y[i][j] = s;
        }
        y[i][i] += shunt[i];
    }
    y
}

/// Scheduled net injections (generation minus load and extra load) per bus.
pub fn scheduled(case: &GridCase, extra: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut p: Vec<f64> = case.buses.iter().map(|b| -b.p_load).collect();
    let mut q: Vec<f64> = case.buses.iter().map(|b| -b.q_load).collect();
    for (i, &(ep, eq)) in extra.iter().enumerate() {
        p[i] -= ep;
        q[i] -= eq;
    }
    for g in &case.generators {
        let i = case.buses.iter().position(|b| b.id == g.bus).expect("gen bus");
        p[i] += g.p;
        q[i] += g.q;
    }
    (p, q)
}

/// Complex power injections `V_i conj(sum_k Y_ik V_k)`.
pub fn complex_injections(y: &[Vec<Complex64>], v: &[Complex64]) -> Vec<Complex64> {
    (0..v.len()).map(|i| v[i] * (0..v.len()).map(|k| y[i][k] * v[k]).sum::<Complex64>().conj()).collect()
}

/// Gauss–Seidel power flow from a flat start. Returns (vm, va, sweeps).
pub fn gauss_seidel(case: &GridCase, extra: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>, usize) {
    let y = ybus_incidence(case);
    let n = case.buses.len();
    let (p, mut q) = scheduled(case, extra);
    let mut v: Vec<Complex64> = case
        .buses
        .iter()
        .map(|b| Complex64::new(if b.kind == BusKind::Pq { 1.0 } else { b.vm }, 0.0))
        .collect();
    for sweep in 1..=200_000 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let kind = case.buses[i].kind;
            if kind == BusKind::Slack {
                continue;
            }
            let sum_other: Complex64 = (0..n).filter(|&k| k != i).map(|k| y[i][k] * v[k]).sum();
            if kind == BusKind::Pv {
                q[i] = -(v[i].conj() * (sum_other + y[i][i] * v[i])).im;
            }
            let s = Complex64::new(p[i], -q[i]);
            let mut next = (s / v[i].conj() - sum_other) / y[i][i];
            if kind == BusKind::Pv {
                next = next * (case.buses[i].vm / next.norm());
            }
            change = change.max((next - v[i]).norm());
            v[i] = next;
        }
        if change < 1e-14 {
            return (v.iter().map(|c| c.norm()).collect(), v.iter().map(|c| c.arg()).collect(), sweep);
        }
    }
    panic!("Gauss-Seidel oracle did not converge");
}

/// Largest active/reactive mismatch at buses where it is specified
/// (P at PV and PQ buses, Q at PQ buses).
pub fn max_mismatch(case: &GridCase, extra: &[(f64, f64)], vm: &[f64], va: &[f64]) -> f64 {
    let y = ybus_incidence(case);
    let v: Vec<Complex64> = vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
    let s = complex_injections(&y, &v);
    let (p, q) = scheduled(case, extra);
    let mut worst: f64 = 0.0;
    for (i, b) in case.buses.iter().enumerate() {
        match b.kind {
            BusKind::Slack => {}
            BusKind::Pv => worst = worst.max((s[i].re - p[i]).abs()),
            BusKind::Pq => worst = worst.max((s[i].re - p[i]).abs()).max((s[i].im - q[i]).abs()),
        }
    }
    worst
}

// ---------------------------------------------------------------- market

/// Expected kWh per provider and site from the direct nested-logit formula.
pub fn direct_demand(market: &Market<f64>, prices: &[f64], joint: &JointPlacement) -> Vec<Vec<f64>> {
    let mut psi = vec![vec![0.0; market.lmp.len()]; market.providers()];
    for agent in &market.agents {
        let nests = (0..market.providers())
            .map(|m| {
                let sites: Vec<usize> = joint.0[m].built().collect();
                let utilities = sites
                    .iter()
                    .map(|&j| market.nest_constant[m] + agent.price_slope * prices[m] + agent.site_utility[m][j])
                    .collect();
                Nest { sigma: market.sigma[m], sites, utilities }
            })
            .collect();
        let set = ChoiceSet { nests, outside_good: market.outside_good, price_slope: agent.price_slope };
        let (probs, _) = nested_logit_direct(&set);
        for (m, nest) in set.nests.iter().enumerate() {
            for (pos, &j) in nest.sites.iter().enumerate() {
                psi[m][j] += agent.demand_kwh * probs[m][pos];
            }
        }
    }
    psi
}

/// Provider `k`'s profit flow `sum_n q_n sum_j (p_k - c_j) P^n_{j,k}` with
/// probabilities from the direct nested-logit formula.
pub fn direct_revenue(market: &Market<f64>, k: usize, prices: &[f64], joint: &JointPlacement) -> f64 {
    let psi = direct_demand(market, prices, joint);
    joint.0[k].built().map(|j| (prices[k] - market.lmp[j]) * psi[k][j]).sum()
}

/// Best own price on `lo, lo + step, ..., hi` with rivals held fixed.
pub fn grid_best_response(market: &Market<f64>, k: usize, prices: &[f64], joint: &JointPlacement, lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n)
        .into_par_iter()
        .map(|i| {
            let p = lo + step * i as f64;
            let mut trial = prices.to_vec();
            trial[k] = p;
            (p, direct_revenue(market, k, &trial, joint))
        })
        .reduce(|| (f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
}

// ---------------------------------------------------------------- queueing

/// Event-list simulation of a FIFO station with `plugs` servers. Departures
/// at an instant are processed before arrivals at the same instant;
/// simultaneous arrivals go in tie-key order.
pub fn event_list_delays(arrivals: &[(f64, u32, f64)], plugs: usize) -> Vec<bool> {
    #[derive(Clone, Copy, Debug)]
    enum Ev {
        Depart,
        Arrive(usize),
    }
    let mut events: Vec<(f64, u8, u32, Ev)> = arrivals.iter().enumerate().map(|(i, a)| (a.0, 1, a.1, Ev::Arrive(i))).collect();
    let mut delayed = vec![false; arrivals.len()];
    let mut busy = 0usize;
    let mut queue: std::collections::VecDeque<usize> = Default::default();
    loop {
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        if events.is_empty() {
            break;
        }
        let (t, _, _, ev) = events.remove(0);
        match ev {
            Ev::Arrive(i) => {
                if busy < plugs {
                    busy += 1;
                    events.push((t + arrivals[i].2, 0, 0, Ev::Depart));
                } else {
                    delayed[i] = true;
                    queue.push_back(i);
                }
            }
            Ev::Depart => {
                if let Some(i) = queue.pop_front() {
                    events.push((t + arrivals[i].2, 0, 0, Ev::Depart));
                } else {
                    busy -= 1;
                }
            }
        }
    }
    delayed
}

// ---------------------------------------------------------------- game

/// Brute-force expected revenue and disturbance of every policy of every
/// provider when each rival site is built with probability 1/2. Policies are
/// indexed by their bit pattern with the first site as the most significant bit.
pub struct GameOracle {
    pub sites: usize,
    pub expected_revenue: Vec<Vec<f64>>,
    pub expected_disturbance: Vec<Vec<f64>>,
}

fn bits_to_placement(mask: usize, sites: usize) -> Placement {
    Placement((0..sites).map(|j| mask >> (sites - 1 - j) & 1 == 1).collect())
}

pub fn game_oracle(world: &World, ev_count: usize) -> GameOracle {
    let kk = world.scenario.providers.len();
    let l = world.scenario.sites.len();
    let market = world.market(&world.population(ev_count)).unwrap();
    let grid = &world.scenario.grid;
    let base = solve_power_flow::<f64>(grid, &[]).unwrap();
    let base_out = GeneratorOutput { p: base.gen_p.clone(), q: base.gen_q.clone() };
    let bus_of: Vec<usize> =
        world.scenario.sites.iter().map(|s| grid.buses.iter().position(|b| b.id == s.bus).unwrap()).collect();
    let horizon = world.scenario.planner.horizon_hours;

    // every joint placement, evaluated once
    let joints = 1usize << (kk * l);
    let table: Vec<(Vec<f64>, Vec<f64>)> = (0..joints)
        .into_par_iter()
        .map(|mask| {
            let joint = JointPlacement((0..kk).map(|k| bits_to_placement(mask >> ((kk - 1 - k) * l) & ((1 << l) - 1), l)).collect());
            let prices = market.solve_price_equilibrium(&joint).unwrap().price_vector();
            let psi = direct_demand(&market, &prices, &joint);
            let mut rev = vec![0.0; kk];
            let mut dist = vec![0.0; kk];
            for k in 0..kk {
                let mut energy = vec![0.0; grid.buses.len()];
                for j in joint.0[k].built() {
                    rev[k] += (prices[k] - market.lmp[j]) * psi[k][j];
                    energy[bus_of[j]] += psi[k][j];
                }
                if energy.iter().any(|&e| e > 0.0) {
                    let (ev, _) = dispatch_with_ev(grid, &base, &energy, horizon).unwrap();
                    dist[k] = ev.p.iter().zip(&base_out.p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                        + ev.q.iter().zip(&base_out.q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
            }
            (rev, dist)
        })
        .collect();

    let rival_bits = (kk - 1) * l;
    let weight = 1.0 / (1usize << rival_bits) as f64;
    let mut expected_revenue = vec![vec![0.0; 1 << l]; kk];
    let mut expected_disturbance = vec![vec![0.0; 1 << l]; kk];
    for k in 0..kk {
        for own in 0..1usize << l {
            for rivals in 0..1usize << rival_bits {
                // splice own bits into the rival mask at provider k's slot
                let mut mask = 0usize;
                let mut r = 0;
                for m in 0..kk {
                    let part = if m == k {
                        own
                    } else {
                        let shift = (kk - 2 - r) * l;
                        r += 1;
                        rivals >> shift & ((1 << l) - 1)
                    };
                    mask = mask << l | part;
                }
                expected_revenue[k][own] += weight * table[mask].0[k];
                expected_disturbance[k][own] += weight * table[mask].1[k];
            }
        }
    }
    GameOracle { sites: l, expected_revenue, expected_disturbance }
}

impl GameOracle {
    /// Utility-maximising policy mask; ties go to fewer stations, then the smaller mask.
    pub fn best_policy(&self, k: usize, theta: &[f64], w: f64) -> usize {
        let mut best = (0usize, f64::NEG_INFINITY);
        for mask in 0..1usize << self.sites {
            let cost: f64 = (0..self.sites).filter(|&j| mask >> (self.sites - 1 - j) & 1 == 1).map(|j| theta[j]).sum();
            let u = self.expected_revenue[k][mask] - cost - w * self.expected_disturbance[k][mask];
            let fewer = mask.count_ones() < best.0.count_ones();
            if u > best.1 || (u == best.1 && fewer) {
                best = (mask, u);
            }
        }
        best.0
    }

    pub fn placement(&self, mask: usize) -> Placement {
        bits_to_placement(mask, self.sites)
    }
}
