//! AC power flow and the generator-deviation disturbance metric.
//!
//! Quantities are per-unit on the case's `base_mva` unless noted. The solver is
//! a polar Newton–Raphson on the nodal real/reactive mismatch equations:
//!
//! ```text
//! P_i = |v_i| sum_k |v_k| (G_ik cos phi_ik + B_ik sin phi_ik)
//! Q_i = |v_i| sum_k |v_k| (G_ik sin phi_ik - B_ik cos phi_ik)
//! ```

use std::collections::HashMap;
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{parse_error, Error, Result};
use crate::linalg::solve_dense;
use crate::scalar::Scalar;

pub const PF_TOLERANCE: f64 = 1e-8;
pub const PF_MAX_ITERATIONS: usize = 50;
/// Outer iterations of the loss-aware participation-factor redispatch.
const DISPATCH_MAX_ROUNDS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    #[serde(rename = "type")]
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    /// Voltage magnitude set-point for slack and PV buses.
    #[serde(default = "one")]
    pub vm: f64,
    /// Shunt conductance.
    #[serde(default)]
    pub gs: f64,
    /// Shunt susceptance.
    #[serde(default)]
    pub bs: f64,
    /// Locational marginal price, currency/kWh.
    pub lmp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance.
    #[serde(default)]
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub p: f64,
    pub q: f64,
    /// Share of incremental load this unit picks up.
    pub participation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution<T> {
    pub vm: Vec<T>,
    /// radians, slack = 0
    pub va: Vec<T>,
    pub gen_p: Vec<T>,
    pub gen_q: Vec<T>,
    /// Net injection per bus.
    pub bus_p: Vec<T>,
    pub bus_q: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    pub max_residual: T,
}

impl<T: Scalar> PowerFlowSolution<T> {
    /// Real power lost in the network (sum of net injections).
    pub fn losses(&self) -> T {
        self.bus_p.iter().copied().sum()
    }
}

/// Generator real and reactive output vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOutput<T> {
    pub p: Vec<T>,
    pub q: Vec<T>,
}

pub type Admittance<T> = Vec<Vec<Complex<T>>>;

impl GridCase {
    pub fn bus_index(&self, id: u32) -> Result<usize> {
        self.buses.iter().position(|b| b.id == id).ok_or(Error::UnknownBus(id))
    }

    pub fn slack_index(&self) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .ok_or_else(|| Error::Invalid("grid case has no slack bus".into()))
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.base_mva > 0.0) {
            out.push(format!("grid base_mva must be > 0, got {}", self.base_mva));
        }
        let slack = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slack != 1 {
            out.push(format!("grid must have exactly one slack bus, found {slack}"));
        }
        let mut ids = HashMap::new();
        for b in &self.buses {
            if ids.insert(b.id, ()).is_some() {
                out.push(format!("bus id {} is duplicated", b.id));
            }
            if ![b.p_load, b.q_load, b.vm, b.gs, b.bs, b.lmp].iter().all(|v| v.is_finite()) {
                out.push(format!("bus {} has a non-finite field", b.id));
            }
            if !(b.vm > 0.0) {
                out.push(format!("bus {} voltage set-point must be > 0", b.id));
            }
        }
        for (i, br) in self.branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !ids.contains_key(&end) {
                    out.push(format!("branch #{i} references unknown bus {end}"));
                }
            }
            if br.from == br.to {
                out.push(format!("branch #{i} connects bus {} to itself", br.from));
            }
        }
        let mut total = 0.0;
        for (g, gen) in self.generators.iter().enumerate() {
            if !ids.contains_key(&gen.bus) {
                out.push(format!("generator #{g} references unknown bus {}", gen.bus));
            }
            if !(gen.participation >= 0.0) {
                out.push(format!("generator #{g} participation factor must be >= 0"));
            }
            total += gen.participation;
        }
        if !self.generators.is_empty() && (total - 1.0).abs() > 1e-9 {
            out.push(format!("generator participation factors sum to {total}, expected 1"));
        }
        out
    }

    /// Reads `bus.csv`, `branch.csv` and `gen.csv` from `dir`.
    pub fn read_tables(dir: &Path, base_mva: f64) -> Result<Self> {
        fn table<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| parse_error(path, e))?;
            reader
                .deserialize()
                .map(|r| r.map_err(|e| parse_error(path, e)))
                .collect()
        }
        Ok(GridCase {
            base_mva,
            buses: table(&dir.join("bus.csv"))?,
            branches: table(&dir.join("branch.csv"))?,
            generators: table(&dir.join("gen.csv"))?,
        })
    }

    pub fn write_tables(&self, dir: &Path) -> Result<()> {
        fn table<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
            let mut w = csv::Writer::from_path(path)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
        std::fs::create_dir_all(dir)?;
        table(&dir.join("bus.csv"), &self.buses)?;
        table(&dir.join("branch.csv"), &self.branches)?;
        table(&dir.join("gen.csv"), &self.generators)
    }
}

/// Bus admittance matrix from series impedances, line charging and bus shunts.
pub fn build_admittance<T: Scalar>(case: &GridCase) -> Result<Admittance<T>> {
    let n = case.buses.len();
    let zero = Complex::new(T::zero(), T::zero());
    let mut y = vec![vec![zero; n]; n];
    for (i, bus) in case.buses.iter().enumerate() {
        y[i][i] += Complex::new(T::of(bus.gs), T::of(bus.bs));
    }
    for br in &case.branches {
        if br.r == 0.0 && br.x == 0.0 {
            return Err(Error::ZeroImpedance { from: br.from, to: br.to });
        }
        let f = case.bus_index(br.from)?;
        let t = case.bus_index(br.to)?;
        let series = Complex::new(T::one(), T::zero()) / Complex::new(T::of(br.r), T::of(br.x));
        let charging = Complex::new(T::zero(), T::of(br.b) / T::of(2.0));
        y[f][f] += series + charging;
        y[t][t] += series + charging;
        y[f][t] -= series;
        y[t][f] -= series;
    }
    Ok(y)
}

/// Net injections `(P_i, Q_i)` implied by voltages.
pub fn injections<T: Scalar>(y: &Admittance<T>, vm: &[T], va: &[T]) -> (Vec<T>, Vec<T>) {
    let n = vm.len();
    let mut p = vec![T::zero(); n];
    let mut q = vec![T::zero(); n];
    for i in 0..n {
        for k in 0..n {
            let (g, b) = (y[i][k].re, y[i][k].im);
            if g == T::zero() && b == T::zero() {
                continue;
            }
            let (s, c) = (va[i] - va[k]).sin_cos();
            p[i] += vm[i] * vm[k] * (g * c + b * s);
            q[i] += vm[i] * vm[k] * (g * s - b * c);
        }
    }
    (p, q)
}

/// Newton–Raphson power flow from a flat start. `extra_load` adds `(P, Q)`
/// demand per bus, aligned with `case.buses`; an empty slice means none.
/// Non-convergence is reported through [`PowerFlowSolution::converged`].
pub fn solve_power_flow<T: Scalar>(case: &GridCase, extra_load: &[(T, T)]) -> Result<PowerFlowSolution<T>> {
    let n = case.buses.len();
    if !extra_load.is_empty() && extra_load.len() != n {
        return Err(Error::LengthMismatch { left: extra_load.len(), right: n });
    }
    let slack = case.slack_index()?;
    let y = build_admittance::<T>(case)?;
    let extra = |i: usize| extra_load.get(i).copied().unwrap_or((T::zero(), T::zero()));

    let mut p_spec = vec![T::zero(); n];
    let mut q_spec = vec![T::zero(); n];
    for (i, bus) in case.buses.iter().enumerate() {
        let (ep, eq) = extra(i);
        p_spec[i] = -T::of(bus.p_load) - ep;
        q_spec[i] = -T::of(bus.q_load) - eq;
    }
    for gen in &case.generators {
        let i = case.bus_index(gen.bus)?;
        p_spec[i] += T::of(gen.p);
        q_spec[i] += T::of(gen.q);
    }

    let mut vm: Vec<T> = case
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Pq { T::one() } else { T::of(b.vm) })
        .collect();
    let mut va = vec![T::zero(); n];
    let angle_buses: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let pq_buses: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind == BusKind::Pq).collect();
    let n_angle = angle_buses.len();
    let dim = n_angle + pq_buses.len();

    let mismatch = |vm: &[T], va: &[T]| -> (Vec<T>, T, Vec<T>, Vec<T>) {
        let (p, q) = injections(&y, vm, va);
        let mut f = Vec::with_capacity(dim);
        f.extend(angle_buses.iter().map(|&i| p_spec[i] - p[i]));
        f.extend(pq_buses.iter().map(|&i| q_spec[i] - q[i]));
        let worst = f.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        (f, worst, p, q)
    };

    let (mut f, mut worst, mut p, mut q) = mismatch(&vm, &va);
    let mut iterations = 0;
    let tol = T::of(PF_TOLERANCE);
    while !(worst < tol) && iterations < PF_MAX_ITERATIONS {
        if !worst.is_finite() {
            break;
        }
        let mut jac = vec![vec![T::zero(); dim]; dim];
        // rows: dP over angle buses, then dQ over PQ buses
        // cols: d/dtheta over angle buses, then d/d|v| over PQ buses
        let row_buses = angle_buses.iter().map(|&i| (i, true)).chain(pq_buses.iter().map(|&i| (i, false)));
        for (r, (i, is_p)) in row_buses.enumerate() {
            let col_buses = angle_buses.iter().map(|&k| (k, true)).chain(pq_buses.iter().map(|&k| (k, false)));
            for (c, (k, is_angle)) in col_buses.enumerate() {
                let (g, b) = (y[i][k].re, y[i][k].im);
                jac[r][c] = if i == k {
                    match (is_p, is_angle) {
                        (true, true) => -q[i] - b * vm[i] * vm[i],
                        (true, false) => p[i] / vm[i] + g * vm[i],
                        (false, true) => p[i] - g * vm[i] * vm[i],
                        (false, false) => q[i] / vm[i] - b * vm[i],
                    }
                } else {
                    let (s, co) = (va[i] - va[k]).sin_cos();
                    match (is_p, is_angle) {
                        (true, true) => vm[i] * vm[k] * (g * s - b * co),
                        (true, false) => vm[i] * (g * co + b * s),
                        (false, true) => -vm[i] * vm[k] * (g * co + b * s),
                        (false, false) => vm[i] * (g * s - b * co),
                    }
                };
            }
        }
        solve_dense(&mut jac, &mut f)?;
        for (c, &i) in angle_buses.iter().enumerate() {
            va[i] += f[c];
        }
        for (c, &i) in pq_buses.iter().enumerate() {
            vm[i] += f[n_angle + c];
        }
        iterations += 1;
        (f, worst, p, q) = mismatch(&vm, &va);
    }
    let _ = f;

    let (gen_p, gen_q) = generator_outputs(case, &p, &q, extra_load)?;
    Ok(PowerFlowSolution {
        vm,
        va,
        gen_p,
        gen_q,
        bus_p: p,
        bus_q: q,
        converged: worst < tol,
        iterations,
        max_residual: worst,
    })
}

/// Splits solved bus injections back onto generators. The slack bus absorbs
/// the real-power balance (shared by participation factor, or evenly when all
/// factors there are zero); slack and PV buses absorb reactive balance evenly.
fn generator_outputs<T: Scalar>(case: &GridCase, p: &[T], q: &[T], extra: &[(T, T)]) -> Result<(Vec<T>, Vec<T>)> {
    let mut gen_p: Vec<T> = case.generators.iter().map(|g| T::of(g.p)).collect();
    let mut gen_q: Vec<T> = case.generators.iter().map(|g| T::of(g.q)).collect();
    for (i, bus) in case.buses.iter().enumerate() {
        if bus.kind == BusKind::Pq {
            continue;
        }
        let at_bus: Vec<usize> = (0..case.generators.len()).filter(|&g| case.generators[g].bus == bus.id).collect();
        if at_bus.is_empty() {
            continue;
        }
        let (ep, eq) = extra.get(i).copied().unwrap_or((T::zero(), T::zero()));
        let even = T::one() / T::of(at_bus.len() as f64);
        let q_total = q[i] + T::of(bus.q_load) + eq;
        for &g in &at_bus {
            gen_q[g] = q_total * even;
        }
        if bus.kind == BusKind::Slack {
            let p_total = p[i] + T::of(bus.p_load) + ep;
            let weight: f64 = at_bus.iter().map(|&g| case.generators[g].participation).sum();
            for &g in &at_bus {
                let share = if weight > 0.0 { T::of(case.generators[g].participation / weight) } else { even };
                gen_p[g] = p_total * share;
            }
        }
    }
    Ok((gen_p, gen_q))
}

/// Converts per-bus EV energy (kWh over `horizon_hours`) into per-unit real power.
pub fn energy_to_power<T: Scalar>(case: &GridCase, ev_kwh: &[T], horizon_hours: T) -> Vec<(T, T)> {
    let scale = horizon_hours * T::of(case.base_mva) * T::of(1000.0);
    ev_kwh.iter().map(|&e| (e / scale, T::zero())).collect()
}

/// Base-case generator output and the output after superposing EV load with
/// participation-factor redispatch. Non-slack units move by their share of the
/// added load plus incremental losses; the slack unit closes what remains.
pub fn dispatch_with_ev<T: Scalar>(
    case: &GridCase,
    base: &PowerFlowSolution<T>,
    ev_kwh: &[T],
    horizon_hours: T,
) -> Result<(GeneratorOutput<T>, PowerFlowSolution<T>)> {
    if ev_kwh.len() != case.buses.len() {
        return Err(Error::LengthMismatch { left: ev_kwh.len(), right: case.buses.len() });
    }
    if !(horizon_hours > T::zero()) {
        return Err(Error::Invalid("dispatch horizon must be positive".into()));
    }
    if ev_kwh.iter().any(|&e| !(e >= T::zero()) || !e.is_finite()) {
        return Err(Error::Invalid("EV load must be finite and non-negative".into()));
    }
    let extra = energy_to_power(case, ev_kwh, horizon_hours);
    let added: T = extra.iter().map(|e| e.0).sum();
    let slack_bus = case.buses[case.slack_index()?].id;
    let base_losses = base.losses();

    let mut shifted = case.clone();
    let mut delta = added;
    let mut solution = None;
    for _ in 0..DISPATCH_MAX_ROUNDS {
        for (g, gen) in shifted.generators.iter_mut().enumerate() {
            if gen.bus != slack_bus {
                gen.p = (base.gen_p[g] + T::of(case.generators[g].participation) * delta).as_f64();
            }
        }
        let sol = solve_power_flow(&shifted, &extra)?;
        let next = added + (sol.losses() - base_losses);
        let done = (next - delta).abs() <= T::of(1e-12) || !sol.converged;
        delta = next;
        solution = Some(sol);
        if done {
            break;
        }
    }
    let sol = solution.expect("at least one dispatch round");
    Ok((GeneratorOutput { p: sol.gen_p.clone(), q: sol.gen_q.clone() }, sol))
}

/// Squared 2-norm deviation of generator real and reactive output.
pub fn disturbance<T: Scalar>(base: &GeneratorOutput<T>, ev: &GeneratorOutput<T>) -> Result<T> {
    if base.p.len() != ev.p.len() {
        return Err(Error::LengthMismatch { left: base.p.len(), right: ev.p.len() });
    }
    if base.q.len() != ev.q.len() {
        return Err(Error::LengthMismatch { left: base.q.len(), right: ev.q.len() });
    }
    let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
    Ok(sq(&base.p, &ev.p) + sq(&base.q, &ev.q))
}

pub fn lmp_at(case: &GridCase, bus: u32) -> Result<f64> {
    Ok(case.buses[case.bus_index(bus)?].lmp)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn two_bus(p: f64, q: f64) -> GridCase {
        GridCase {
            base_mva: 100.0,
            buses: vec![
                Bus { id: 1, kind: BusKind::Slack, p_load: 0.0, q_load: 0.0, vm: 1.0, gs: 0.0, bs: 0.0, lmp: 0.05 },
                Bus { id: 2, kind: BusKind::Pq, p_load: p, q_load: q, vm: 1.0, gs: 0.0, bs: 0.0, lmp: 0.08 },
            ],
            branches: vec![Branch { from: 1, to: 2, r: 0.01, x: 0.1, b: 0.0 }],
            generators: vec![Generator { bus: 1, p: 0.0, q: 0.0, participation: 1.0 }],
        }
    }

    #[test]
    fn admittance_without_branches() {
        let mut case = two_bus(0.0, 0.0);
        case.branches.clear();
        let y = build_admittance::<f64>(&case).unwrap();
        assert!(y.iter().flatten().all(|v| v.norm() == 0.0));
        case.buses[1].bs = 0.2;
        let y = build_admittance::<f64>(&case).unwrap();
        assert_eq!(y[1][1], Complex::new(0.0, 0.2));
    }

    #[test]
    fn admittance_two_bus() {
        let y = build_admittance::<f64>(&two_bus(0.0, 0.0)).unwrap();
        let series = Complex::new(1.0, 0.0) / Complex::new(0.01, 0.1);
        assert!((y[0][1] + series).norm() < 1e-14);
        assert!((y[0][0] - series).norm() < 1e-14);
        assert_eq!(y[0][1], y[1][0]);
    }

    #[test]
    fn zero_impedance_branch_is_rejected() {
        let mut case = two_bus(0.0, 0.0);
        case.branches[0].r = 0.0;
        case.branches[0].x = 0.0;
        assert!(matches!(build_admittance::<f64>(&case), Err(Error::ZeroImpedance { from: 1, to: 2 })));
    }

    #[test]
    fn flat_case_stays_flat() {
        let sol = solve_power_flow::<f64>(&two_bus(0.0, 0.0), &[]).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.vm, vec![1.0, 1.0]);
        assert_eq!(sol.va, vec![0.0, 0.0]);
        assert_eq!(sol.gen_p, vec![0.0]);
    }

    #[test]
    fn two_bus_balance() {
        let sol = solve_power_flow::<f64>(&two_bus(0.5, 0.2), &[]).unwrap();
        assert!(sol.converged);
        assert!(sol.losses() > 0.0);
        assert!((sol.gen_p[0] - 0.5 - sol.losses()).abs() < 1e-8);
        assert!(sol.vm[1] < 1.0);
    }

    #[test]
    fn disturbance_examples() {
        let a = GeneratorOutput::<f64> { p: vec![1.0, 2.0], q: vec![0.5, 0.1] };
        assert_eq!(disturbance(&a, &a).unwrap(), 0.0);
        let b = GeneratorOutput { p: vec![0.7, 2.4], q: vec![0.5, 0.1] };
        assert!((disturbance(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        let c = GeneratorOutput { p: vec![0.7], q: vec![0.5] };
        assert!(matches!(disturbance(&a, &c), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn lmp_lookup() {
        let case = two_bus(0.0, 0.0);
        assert_eq!(lmp_at(&case, 2).unwrap(), 0.08);
        assert!(matches!(lmp_at(&case, 9), Err(Error::UnknownBus(9))));
    }

    #[test]
    fn zero_ev_load_reproduces_base() {
        let case = two_bus(0.5, 0.2);
        let base = solve_power_flow::<f64>(&case, &[]).unwrap();
        let (out, _) = dispatch_with_ev(&case, &base, &[0.0, 0.0], 24.0).unwrap();
        assert_eq!(out.p, base.gen_p);
        assert_eq!(out.q, base.gen_q);
    }

    #[test]
    fn validation_catches_bad_factors() {
        let mut case = two_bus(0.0, 0.0);
        case.generators[0].participation = 0.5;
        case.buses[1].kind = BusKind::Slack;
        assert_eq!(case.problems().len(), 2);
    }
}
