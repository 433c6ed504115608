//! Command-line front end. Every subcommand loads a scenario, applies flag
//! overrides and runs one layer of the pipeline.
//!
//! Errors are reported on stderr as one JSON object
//! `{"error":{"kind":..,"message":..}}`. Exit status is 0 on success, 1 for
//! domain errors and 2 for usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::{Error, Result};
use crate::game::{self, Belief, StageInput};
use crate::grid::{dispatch_with_ev, disturbance, GeneratorOutput};
use crate::market::{bus_energy, provider_disturbance, JointPlacement};
use crate::scenario::load_scenario;
use crate::seed;
use crate::sim::{heatmap_csv, heatmap_pgm, sample_trips, traffic_heatmap, BoundingBox};
use crate::world::World;

#[derive(Parser, Debug)]
#[command(name = "evplan", version, about = "Competitive EV charging station placement planner")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario JSON file.
    #[arg(long, value_name = "PATH")]
    scenario: PathBuf,
    /// Output directory; created if missing. Without it results go to stdout.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master RNG seed (unsigned 64-bit), overrides the scenario's.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Grid-penalty weight on the disturbance term (dimensionless, >= 0).
    #[arg(long, value_name = "W")]
    w: Option<f64>,
    /// Maximum average delay probability a policy may have (probability, 0..1).
    #[arg(long = "delay-max", value_name = "PROB")]
    delay_max: Option<f64>,
    /// Required average number of accessible stations along a route (stations per trip).
    #[arg(long = "coverage-min", value_name = "STATIONS")]
    coverage_min: Option<f64>,
    /// Distance threshold for "near" a destination or route (km).
    #[arg(long, value_name = "KM")]
    dth: Option<f64>,
    /// Monte-Carlo runs (simulated days) per QoS estimate (count).
    #[arg(long, value_name = "N")]
    runs: Option<usize>,
    /// Include the home-charging outside option in the choice model.
    #[arg(long = "outside-good", value_enum, value_name = "on|off")]
    outside_good: Option<Toggle>,
}

#[derive(Args, Debug, Clone)]
struct StageArg {
    /// Stage index (0-based); its EV count sets the population (EVs).
    #[arg(long, default_value_t = 0, value_name = "INDEX")]
    stage: usize,
}

#[derive(Args, Debug, Clone)]
struct PlacementArg {
    /// Joint placement, one 0/1 string per provider separated by '|', e.g. "101|010|000".
    /// Defaults to no stations.
    #[arg(long, value_name = "BITS|BITS|BITS")]
    placement: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a scenario file and its grid base case.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Choice probabilities and expected demand (kWh) per site at equilibrium prices (currency/kWh).
    Demand {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArg,
        #[command(flatten)]
        placement: PlacementArg,
    },
    /// Base and EV-loaded AC power flow (per unit) plus the disturbance B (pu^2) per provider.
    Powerflow {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArg,
        #[command(flatten)]
        placement: PlacementArg,
    },
    /// Price equilibrium (currency/kWh) for a joint placement.
    Prices {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArg,
        #[command(flatten)]
        placement: PlacementArg,
    },
    /// Solve one stage of the placement game.
    SolveStage {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArg,
        /// Stations already built, same format as --placement. Defaults to none.
        #[arg(long, value_name = "BITS|BITS|BITS")]
        carried: Option<String>,
    },
    /// Run every configured stage in order; writes plan.csv and stage_<i>.csv.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Traffic heatmap (route-node visit counts) of one simulated day, as CSV and PGM.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stage: StageArg,
        /// Cells per side of the square heatmap (cells).
        #[arg(long, default_value_t = 64, value_name = "CELLS")]
        resolution: usize,
        /// Monte-Carlo run whose trips are drawn (index).
        #[arg(long, default_value_t = 0, value_name = "INDEX")]
        run: u64,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(cli.command)),
            Err(e) => Err(Error::Invalid(format!("thread pool: {e}"))),
        },
        None => execute(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let report = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{report}");
            1
        }
    }
}

fn load_world(common: &Common) -> Result<World> {
    let mut scenario = load_scenario(&common.scenario)?;
    let p = &mut scenario.planner;
    if let Some(s) = common.seed {
        scenario.rng_seed = s;
    }
    if let Some(w) = common.w {
        p.w = w;
    }
    if let Some(v) = common.delay_max {
        p.delay_threshold = v;
    }
    if let Some(v) = common.coverage_min {
        p.coverage_threshold = v;
    }
    if let Some(v) = common.dth {
        p.d_th = v;
    }
    if let Some(v) = common.runs {
        p.monte_carlo_runs = v;
    }
    if let Some(t) = common.outside_good {
        p.outside_good_enabled = t == Toggle::On;
    }
    World::new(scenario)
}

fn stage_ev_count(world: &World, stage: usize) -> Result<usize> {
    let stages = &world.scenario.stages;
    if stages.is_empty() && stage == 0 {
        return Ok(world.scenario.agents.len());
    }
    stages
        .get(stage)
        .map(|s| s.ev_count)
        .ok_or_else(|| Error::Invalid(format!("stage {stage} not configured ({} stages)", stages.len())))
}

fn joint_arg(world: &World, text: Option<&str>) -> Result<JointPlacement> {
    let joint = match text {
        Some(t) => t.parse::<JointPlacement>()?,
        None => JointPlacement::empty(world.providers(), world.sites()),
    };
    if joint.0.len() != world.providers() {
        return Err(Error::LengthMismatch { left: joint.0.len(), right: world.providers() });
    }
    if let Some(bad) = joint.0.iter().find(|p| p.len() != world.sites()) {
        return Err(Error::LengthMismatch { left: bad.len(), right: world.sites() });
    }
    Ok(joint)
}

/// Writes `name` under `--out`, or prints it to stdout.
fn emit(out: Option<&Path>, name: &str, bytes: &[u8]) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), bytes)?;
        }
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn json_bytes(value: &serde_json::Value) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Validate { common } => {
            let world = load_world(&common)?;
            let s = &world.scenario;
            let report = json!({
                "valid": true,
                "nodes": s.road_network.len(),
                "edges": s.road_network.edges().len(),
                "sites": world.sites(),
                "providers": world.providers(),
                "agents": s.agents.len(),
                "buses": s.grid.buses.len(),
                "stages": s.stages.len(),
                "base_flow_iterations": world.base_flow.iterations,
            });
            emit(common.out.as_deref(), "validate.json", &json_bytes(&report)?)
        }
        Command::Demand { common, stage, placement } => {
            let world = load_world(&common)?;
            let joint = joint_arg(&world, placement.placement.as_deref())?;
            let market = world.market(&world.population(stage_ev_count(&world, stage.stage)?))?;
            let eq = market.solve_price_equilibrium(&joint)?;
            let prices = eq.price_vector();
            let demand = market.demand(&joint, &prices)?;
            // expected number of EVs choosing each station
            let mut mass = vec![vec![0.0; world.sites()]; world.providers()];
            for agent in &market.agents {
                let set = market.choice_set(agent, &joint, &prices);
                let probs = crate::choice::choice_probabilities(&set)?;
                for (k, nest) in set.nests.iter().enumerate() {
                    for (pos, &j) in nest.sites.iter().enumerate() {
                        mass[k][j] += probs.nests[k][pos];
                    }
                }
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["provider", "site", "built", "price", "expected_evs", "demand_kwh"])?;
            for k in 0..world.providers() {
                for (j, site) in world.scenario.sites.iter().enumerate() {
                    let built = joint.0[k].0[j];
                    w.write_record([
                        k.to_string(),
                        site.id.clone(),
                        u8::from(built).to_string(),
                        eq.prices[k].map(|p| p.to_string()).unwrap_or_default(),
                        mass[k][j].to_string(),
                        demand[k][j].to_string(),
                    ])?;
                }
            }
            emit(common.out.as_deref(), "demand.csv", &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        }
        Command::Powerflow { common, stage, placement } => {
            let world = load_world(&common)?;
            let joint = joint_arg(&world, placement.placement.as_deref())?;
            let market = world.market(&world.population(stage_ev_count(&world, stage.stage)?))?;
            let eq = market.solve_price_equilibrium(&joint)?;
            let demand = market.demand(&joint, &eq.price_vector())?;
            let grid = &world.scenario.grid;
            let horizon = world.scenario.planner.horizon_hours;
            let mut total_energy = vec![0.0; grid.buses.len()];
            let mut per_provider = Vec::with_capacity(world.providers());
            for k in 0..world.providers() {
                let e = bus_energy(grid, &world.site_buses, &demand[k], &joint.0[k]);
                for (t, v) in total_energy.iter_mut().zip(&e) {
                    *t += v;
                }
                per_provider.push(provider_disturbance(
                    grid,
                    &world.base_flow,
                    &world.site_buses,
                    &demand[k],
                    &joint.0[k],
                    horizon,
                )?);
            }
            let (ev_gen, ev_flow) = dispatch_with_ev(grid, &world.base_flow, &total_energy, horizon)?;
            let base_gen = GeneratorOutput { p: world.base_flow.gen_p.clone(), q: world.base_flow.gen_q.clone() };
            let total_b = disturbance(&base_gen, &ev_gen)?;
            let base = &world.base_flow;
            let buses: Vec<_> = grid
                .buses
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    json!({
                        "bus": b.id,
                        "ev_kwh": total_energy[i],
                        "vm_base": base.vm[i], "va_base_deg": base.va[i].to_degrees(),
                        "vm_ev": ev_flow.vm[i], "va_ev_deg": ev_flow.va[i].to_degrees(),
                    })
                })
                .collect();
            let report = json!({
                "converged": ev_flow.converged,
                "iterations": ev_flow.iterations,
                "max_residual_pu": ev_flow.max_residual,
                "losses_base_pu": base.losses(),
                "losses_ev_pu": ev_flow.losses(),
                "disturbance": total_b,
                "disturbance_by_provider": per_provider,
                "gen_p_base_pu": base.gen_p, "gen_q_base_pu": base.gen_q,
                "gen_p_ev_pu": ev_gen.p, "gen_q_ev_pu": ev_gen.q,
                "buses": buses,
            });
            emit(common.out.as_deref(), "powerflow.json", &json_bytes(&report)?)
        }
        Command::Prices { common, stage, placement } => {
            let world = load_world(&common)?;
            let joint = joint_arg(&world, placement.placement.as_deref())?;
            let market = world.market(&world.population(stage_ev_count(&world, stage.stage)?))?;
            let eq = market.solve_price_equilibrium(&joint)?;
            let report = json!({
                "placement": joint.to_string(),
                "prices": eq.prices,
                "foc_residuals": eq.residuals,
                "converged": eq.converged,
                "used_fallback": eq.used_fallback,
            });
            emit(common.out.as_deref(), "prices.json", &json_bytes(&report)?)
        }
        Command::SolveStage { common, stage, carried } => {
            let world = load_world(&common)?;
            let carried = joint_arg(&world, carried.as_deref())?;
            let ev_count = stage_ev_count(&world, stage.stage)?;
            let label = world.scenario.stages.get(stage.stage).map_or_else(|| format!("stage{}", stage.stage), |s| s.label.clone());
            let belief = Belief::default();
            let input = StageInput { index: stage.stage, label: &label, ev_count, carried: &carried, belief: &belief };
            let result = game::solve_stage(&world, &input)?;
            let out = common.out.as_deref();
            match out {
                Some(_) => {
                    emit(out, "stage.csv", game::stage_csv_string(std::slice::from_ref(&result))?.as_bytes())?;
                    emit(out, "stage.json", &json_bytes(&serde_json::to_value(&result)?)?)
                }
                None => emit(None, "", game::stage_csv_string(std::slice::from_ref(&result))?.as_bytes()),
            }
        }
        Command::Plan { common } => {
            let world = load_world(&common)?;
            let results = game::plan_multistage(&world, &Belief::default())?;
            let out = common.out.as_deref();
            if out.is_some() {
                for (i, r) in results.iter().enumerate() {
                    emit(out, &format!("stage_{i}.csv"), game::stage_csv_string(std::slice::from_ref(r))?.as_bytes())?;
                }
                emit(out, "plan.json", &json_bytes(&serde_json::to_value(&results)?)?)?;
            }
            emit(out, "plan.csv", game::stage_csv_string(&results)?.as_bytes())
        }
        Command::Heatmap { common, stage, resolution, run } => {
            let world = load_world(&common)?;
            let population = world.population(stage_ev_count(&world, stage.stage)?);
            let mut rng = seed::stream(world.scenario.rng_seed, "trips", &[stage.stage as u64, run]);
            let trips = sample_trips(&world, &population, &mut rng)?;
            let net = &world.scenario.road_network;
            let grid = traffic_heatmap(net, &trips, BoundingBox::of_network(net), resolution)?;
            let out = common.out.as_deref();
            if out.is_some() {
                emit(out, "heatmap.pgm", &heatmap_pgm(&grid))?;
            }
            emit(out, "heatmap.csv", heatmap_csv(&grid).as_bytes())
        }
    }
}
