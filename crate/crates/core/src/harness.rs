//! Offline data collection and closed-loop runs on the regional plant.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deepc::{DeePCController, RecentWindow};
use crate::error::{Error, Result};
use crate::lti::{check_generalized_pe, format_float, split_past_future, HankelMatrix, Trajectory};
use crate::mfd_fit::{self, MfdEstimate};
use crate::mpc::{self, LinearMpcConfig};
use crate::plant::{self, ActuatorMap, DemandProfile, PlantState};
use crate::qp::QpSettings;
use crate::scenario::{ReferenceSpec, ScenarioConfig};

/// Cycle-level plant wrapper: holds split fractions for one duty cycle and
/// reports cycle-averaged densities, flows and demands.
pub struct Simulator {
    cfg: ScenarioConfig,
    actuators: ActuatorMap,
    demand: DemandProfile,
    state: PlantState,
    rng: ChaCha8Rng,
    /// Demand time wraps with this period when set.
    demand_period_s: Option<f64>,
    steps: Vec<StepRecord>,
}

/// Averages over one duty cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSample {
    pub rho: DVector<f64>,
    pub phi: DVector<f64>,
    /// OD demand rates in veh/h, row-major over `(origin, destination)`.
    pub demand: DVector<f64>,
}

/// Plant state after one integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub n: Vec<f64>,
    pub queue: Vec<f64>,
    pub rho: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            actuators: cfg.actuator_map()?,
            demand: cfg.demand_profile()?,
            state: PlantState::empty(cfg.network.len()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            demand_period_s: None,
            steps: Vec::new(),
            cfg: cfg.clone(),
        })
    }

    pub fn with_cyclic_demand(mut self, period_s: f64) -> Self {
        self.demand_period_s = Some(period_s);
        self
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    fn demand_at(&self, t: f64) -> DMatrix<f64> {
        let t = match self.demand_period_s {
            Some(p) => t.rem_euclid(p),
            None => t,
        };
        self.demand.rates_at(t, self.cfg.network.len())
    }

    /// Noise-free cycle-averaged OD demand (veh/h) of cycle `k`.
    pub fn forecast(&self, k: usize) -> DVector<f64> {
        let t = &self.cfg.timing;
        let r = self.cfg.network.len();
        let steps = t.steps_per_cycle();
        let mut acc = DMatrix::zeros(r, r);
        for s in 0..steps {
            acc += self.demand_at(k as f64 * t.duty_cycle_s + s as f64 * t.plant_step_s);
        }
        let acc = acc * (3600.0 / steps as f64);
        DVector::from_fn(r * r, |c, _| acc[(c / r, c % r)])
    }

    /// Runs one duty cycle with demand scaled by `demand_factor`.
    pub fn run_cycle(&mut self, lambda: &[f64], demand_factor: f64) -> CycleSample {
        let t = self.cfg.timing.clone();
        let r = self.cfg.network.len();
        let steps = t.steps_per_cycle();
        let mut rho = DVector::zeros(r);
        let mut phi = DVector::zeros(r);
        let mut dem = DMatrix::zeros(r, r);
        for _ in 0..steps {
            let d = self.demand_at(self.state.time_s) * demand_factor;
            self.state = plant::step(&self.state, &self.cfg.network, &self.actuators, &d, lambda, t.plant_step_s);
            let (rh, ph) = plant::read_sensors(&self.state, &self.cfg.network, &self.cfg.sensors, &mut self.rng);
            rho += &rh;
            phi += &ph;
            dem += d;
            let acc = self.state.accumulation();
            self.steps.push(StepRecord {
                step: self.state.step,
                n: acc.iter().copied().collect(),
                queue: (0..r).map(|i| self.state.queue.row(i).sum()).collect(),
                rho: rh.iter().copied().collect(),
                phi: ph.iter().copied().collect(),
                lambda: lambda.to_vec(),
            });
        }
        let k = steps as f64;
        let dem = dem * (3600.0 / k);
        CycleSample { rho: rho / k, phi: phi / k, demand: DVector::from_fn(r * r, |c, _| dem[(c / r, c % r)]) }
    }
}

/// Rank diagnostics of collected data in the form usable without a known
/// plant order: the input block must have full row rank over the channels
/// that are not identically zero, and the full Hankel matrix must exceed it
/// by at least the assumed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationReport {
    pub depth: usize,
    pub active_inputs: usize,
    pub input_rank: usize,
    pub full_rank: usize,
    pub required_rank: usize,
    pub satisfied: bool,
}

pub fn excitation_report(data: &Trajectory, depth: usize, order: usize) -> Result<ExcitationReport> {
    let u = data.inputs();
    let active: Vec<usize> = (0..u.nrows()).filter(|&i| u.row(i).amax() > 0.0).collect();
    let u_act = u.select_rows(active.iter());
    let hu = HankelMatrix::from_signal(&u_act, depth)?;
    let input = check_generalized_pe(&hu, active.len(), 0);
    let mut w = u_act.clone().resize_vertically(active.len() + data.output_dim(), 0.0);
    w.rows_mut(active.len(), data.output_dim()).copy_from(&data.outputs());
    let hw = HankelMatrix::from_signal(&w, depth)?;
    let full = check_generalized_pe(&hw, active.len(), order);
    let required = active.len() * depth + order;
    Ok(ExcitationReport {
        depth,
        active_inputs: active.len(),
        input_rank: input.rank,
        full_rank: full.rank,
        required_rank: required,
        satisfied: input.satisfied && full.rank >= required,
    })
}

/// Result of an offline collection run.
#[derive(Debug, Clone)]
pub struct Collection {
    pub data: Trajectory,
    /// Per-region `(density, flow)` samples at plant resolution.
    pub scatter: Vec<Vec<(f64, f64)>>,
    pub report: ExcitationReport,
}

/// Excites the plant with uniformly random split fractions held per duty
/// cycle and cyclic, randomly scaled demand.
pub fn collect(cfg: &ScenarioConfig, seed: u64) -> Result<Collection> {
    let c = &cfg.collection;
    let depth = cfg.deepc.t_ini + cfg.deepc.t_f;
    if c.cycles < depth {
        return Err(Error::dim(format!("{} cycles cannot fill a Hankel matrix of depth {depth}", c.cycles)));
    }
    let lo = c.lambda_min.clone().unwrap_or_else(|| cfg.actuators.iter().map(|a| a.lambda_min).collect());
    let hi = c.lambda_max.clone().unwrap_or_else(|| cfg.actuators.iter().map(|a| a.lambda_max).collect());
    let period = cfg.timing.horizon_cycles as f64 * cfg.timing.duty_cycle_s;
    let mut sim = Simulator::new(cfg, seed ^ 0x5eed)?.with_cyclic_demand(period);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, m, p) = (cfg.actuators.len(), cfg.inputs(), cfg.network.len());
    let mut u = DMatrix::zeros(m, c.cycles);
    let mut y = DMatrix::zeros(p, c.cycles);
    for k in 0..c.cycles {
        let lambda: Vec<f64> = (0..l).map(|a| rng.gen_range(lo[a]..=hi[a])).collect();
        let factor = 1.0 + c.demand_jitter * rng.gen_range(-1.0..=1.0);
        let s = sim.run_cycle(&lambda, factor);
        for a in 0..l {
            u[(a, k)] = lambda[a];
        }
        u.view_mut((l, k), (m - l, 1)).copy_from(&s.demand);
        y.set_column(k, &s.rho);
    }
    let scatter = (0..p).map(|i| sim.steps().iter().map(|st| (st.rho[i], st.phi[i])).collect()).collect();
    let data = Trajectory::from_parts(&u, &y)?;
    let order = c.order_estimate.unwrap_or(p);
    let report = excitation_report(&data, depth, order)?;
    Ok(Collection { data, scatter, report })
}

/// Writes per-region scatter as `region,density,flow`.
pub fn write_scatter<W: Write>(scatter: &[Vec<(f64, f64)>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["region", "density", "flow"])?;
    for (i, pts) in scatter.iter().enumerate() {
        for &(r, f) in pts {
            w.write_record([i.to_string(), format_float(r), format_float(f)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_scatter<R: Read>(reader: R) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<Vec<(f64, f64)>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| rec.get(c).and_then(|s| s.trim().parse::<f64>().ok());
        let (Some(i), Some(r), Some(f)) = (parse(0), parse(1), parse(2)) else {
            return Err(Error::Parse { line: k + 2, msg: "expected region,density,flow".into() });
        };
        let i = i as usize;
        if out.len() <= i {
            out.resize(i + 1, Vec::new());
        }
        out[i].push((r, f));
    }
    Ok(out)
}

/// Fits one quartic MFD per region.
pub fn fit_regions(scatter: &[Vec<(f64, f64)>]) -> Result<BTreeMap<usize, MfdEstimate>> {
    scatter.iter().enumerate().map(|(i, pts)| Ok((i, mfd_fit::fit(pts)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Baseline,
    Mpc,
    Deepc,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Baseline => "baseline",
            ControllerKind::Mpc => "mpc",
            ControllerKind::Deepc => "deepc",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "mpc" => Ok(Self::Mpc),
            "deepc" => Ok(Self::Deepc),
            other => Err(Error::config(format!("unknown controller `{other}`"))),
        }
    }
}

/// One controller step of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    pub phi: Vec<f64>,
    pub demand: Vec<f64>,
    /// `solved`, `held`, `warmup`, `fixed` or a degraded solver status.
    pub status: String,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub controller: String,
    pub period_cycles: usize,
    pub actuators: Vec<String>,
    pub regions: Vec<String>,
    pub plant_step_s: f64,
    pub cycles: Vec<CycleRecord>,
    pub steps: Vec<StepRecord>,
    pub time_spent_veh_s: f64,
    pub trips_completed_veh: f64,
    pub demand_veh: f64,
    pub degraded_steps: usize,
}

/// What a closed-loop run needs besides the scenario.
#[derive(Debug, Clone)]
pub struct RunInputs<'a> {
    pub controller: ControllerKind,
    pub period_cycles: usize,
    /// Collected data; required for DeePC.
    pub data: Option<&'a Trajectory>,
    /// Density reference; required for DeePC.
    pub reference: Option<DVector<f64>>,
    pub rho_max: Option<Vec<f64>>,
}

/// DeePC density reference per the scenario: fixed, or the critical densities
/// of quartic fits to `scatter`.
pub fn deepc_reference(cfg: &ScenarioConfig, scatter: Option<&[Vec<(f64, f64)>]>) -> Result<(DVector<f64>, Vec<f64>)> {
    let fallback: Vec<f64> = cfg.network.rho_max();
    let mut rho_max = cfg.deepc.rho_max_veh_per_km.clone().unwrap_or(fallback.clone());
    let reference = match &cfg.deepc.reference {
        ReferenceSpec::Fixed { rho_veh_per_km } => DVector::from_vec(rho_veh_per_km.clone()),
        ReferenceSpec::Fitted => {
            let scatter = scatter.ok_or_else(|| Error::config("fitted reference requires collected scatter"))?;
            let fits = fit_regions(scatter)?;
            if cfg.deepc.rho_max_veh_per_km.is_none() {
                for (i, est) in &fits {
                    match est.rho_max {
                        Some(r) => rho_max[*i] = r.min(fallback[*i]),
                        None => log::warn!("region {i}: {}", est.diagnostic.as_deref().unwrap_or("no maximal density")),
                    }
                }
            }
            mfd_fit::critical_reference(&fits, cfg.network.len())?
        }
    };
    Ok((reference, rho_max))
}

/// Runs the scenario in closed loop for `timing.horizon_cycles` duty cycles.
pub fn run_closed_loop(cfg: &ScenarioConfig, inputs: &RunInputs) -> Result<RunRecord> {
    if inputs.period_cycles == 0 {
        return Err(Error::arg("controller period must be positive"));
    }
    let mut sim = Simulator::new(cfg, cfg.seed)?;
    let actuators = cfg.actuator_map()?;
    let defaults = actuators.defaults();
    let horizon = cfg.timing.horizon_cycles;
    let (l, p) = (actuators.len(), cfg.network.len());

    let mut deepc = match inputs.controller {
        ControllerKind::Deepc => {
            let data = inputs.data.ok_or_else(|| Error::config("DeePC requires collected data"))?;
            let y_ref = inputs.reference.clone().ok_or_else(|| Error::config("DeePC requires a density reference"))?;
            let rho_max = inputs.rho_max.clone().unwrap_or_else(|| cfg.network.rho_max());
            let dc = cfg.deepc_config(rho_max);
            if data.input_dim() != cfg.inputs() || data.output_dim() != p {
                return Err(Error::config("collected data does not match the scenario dimensions"));
            }
            let blocks = split_past_future(&data.inputs(), &data.outputs(), dc.t_ini, dc.t_f)?;
            // the window is replaced by measurements before the first solve
            let window = RecentWindow::new(
                DVector::zeros(dc.inputs() * dc.t_ini),
                DVector::zeros(p * dc.t_ini),
                dc.inputs(),
                p,
                dc.t_ini,
            )?;
            Some(DeePCController::new(
                dc,
                blocks,
                window,
                y_ref,
                DVector::from_vec(defaults.clone()),
                QpSettings::default(),
            )?)
        }
        _ => None,
    };
    let mpc_cfg = match inputs.controller {
        ControllerKind::Mpc => {
            let pwa = mpc::network_pwa(&cfg.network, cfg.mpc.pwa_pieces)?;
            let mut c = LinearMpcConfig::new(
                &cfg.network,
                &actuators,
                pwa,
                cfg.mpc.horizon_cycles,
                cfg.timing.duty_cycle_s,
            )?;
            c.rate_limit = cfg.mpc.rate_limit_veh_per_s;
            Some(c)
        }
        _ => None,
    };
    let t_ini = cfg.deepc.t_ini;

    let mut cycles = Vec::with_capacity(horizon);
    let mut lambda = defaults.clone();
    let mut degraded = 0;
    for k in 0..horizon {
        let mut status = "held".to_string();
        let mut iterations = 0;
        let mut objective = f64::NAN;
        let due = k % inputs.period_cycles == 0;
        match inputs.controller {
            ControllerKind::Baseline => {
                lambda = defaults.clone();
                status = "fixed".into();
            }
            ControllerKind::Deepc => {
                let ctrl = deepc.as_ref().expect("controller built above");
                if k < t_ini {
                    lambda = defaults.clone();
                    status = "warmup".into();
                } else if (k - t_ini) % inputs.period_cycles == 0 {
                    let t_f = ctrl.config().t_f;
                    let d_bar = DVector::from_iterator(
                        (p * p) * t_f,
                        (0..t_f).flat_map(|i| sim.forecast(k + i).iter().copied().collect::<Vec<_>>()),
                    );
                    let plan = ctrl.plan(&d_bar)?;
                    lambda = plan.inputs.column(0).rows(0, l).iter().copied().collect();
                    iterations = plan.iterations;
                    objective = plan.objective;
                    status = if plan.degraded {
                        degraded += 1;
                        format!("{:?}", plan.status).to_lowercase()
                    } else {
                        "solved".into()
                    };
                }
            }
            ControllerKind::Mpc => {
                if due {
                    let c = mpc_cfg.as_ref().expect("controller built above");
                    let forecast: Vec<DMatrix<f64>> = (0..c.horizon)
                        .map(|i| {
                            let f = sim.forecast(k + i) / 3600.0;
                            DMatrix::from_fn(p, p, |a, b| f[a * p + b])
                        })
                        .collect();
                    let dec = mpc::solve_step(sim.state(), &cfg.network, &actuators, c, &forecast)?;
                    lambda = dec.lambda.clone();
                    iterations = dec.iterations;
                    objective = dec.objective;
                    status = if dec.status == crate::qp::QpStatus::Optimal {
                        "solved".into()
                    } else {
                        degraded += 1;
                        format!("{:?}", dec.status).to_lowercase()
                    };
                }
            }
        }
        let s = sim.run_cycle(&lambda, 1.0);
        if let Some(ctrl) = deepc.as_mut() {
            let mut u = DVector::zeros(cfg.inputs());
            for a in 0..l {
                u[a] = lambda[a];
            }
            u.rows_mut(l, p * p).copy_from(&s.demand);
            ctrl.observe(&u, &s.rho);
        }
        cycles.push(CycleRecord {
            cycle: k,
            lambda: lambda.clone(),
            rho: s.rho.iter().copied().collect(),
            phi: s.phi.iter().copied().collect(),
            demand: s.demand.iter().copied().collect(),
            status,
            iterations,
            objective,
        });
    }
    let state = sim.state();
    Ok(RunRecord {
        controller: inputs.controller.name().to_string(),
        period_cycles: inputs.period_cycles,
        actuators: cfg.actuators.iter().map(|a| a.name.clone()).collect(),
        regions: cfg.network.regions().iter().map(|r| r.name.clone()).collect(),
        plant_step_s: cfg.timing.plant_step_s,
        time_spent_veh_s: state.time_spent_veh_s,
        trips_completed_veh: state.trips_completed_veh,
        demand_veh: state.entered_veh + state.queued(),
        degraded_steps: degraded,
        steps: sim.steps().to_vec(),
        cycles,
    })
}

impl RunRecord {
    /// Writes the per-cycle log.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let r = self.regions.len();
        let mut header = vec!["cycle".to_string()];
        header.extend(self.actuators.iter().map(|a| format!("lambda_{a}")));
        header.extend((0..r).map(|i| format!("rho_{i}")));
        header.extend((0..r).map(|i| format!("phi_{i}")));
        header.extend((0..r * r).map(|c| format!("demand_{}_{}", c / r, c % r)));
        header.extend(["status", "iterations", "objective"].map(String::from));
        w.write_record(&header)?;
        for c in &self.cycles {
            let mut row = vec![c.cycle.to_string()];
            row.extend(c.lambda.iter().chain(&c.rho).chain(&c.phi).chain(&c.demand).map(|v| format_float(*v)));
            row.push(c.status.clone());
            row.push(c.iterations.to_string());
            row.push(format_float(c.objective));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the plant-step dump `k,region,n,queue,rho,phi`.
    pub fn write_state<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "region", "n", "queue", "rho", "phi"])?;
        for s in &self.steps {
            for i in 0..s.n.len() {
                w.write_record([
                    s.step.to_string(),
                    i.to_string(),
                    format_float(s.n[i]),
                    format_float(s.queue[i]),
                    format_float(s.rho[i]),
                    format_float(s.phi[i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the plant-step dump `k,actuator,lambda`.
    pub fn write_inputs<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "actuator", "lambda"])?;
        for s in &self.steps {
            for (a, v) in s.lambda.iter().enumerate() {
                w.write_record([s.step.to_string(), a.to_string(), format_float(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes run-level aggregates as `key,value` rows.
    pub fn write_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["key", "value"])?;
        let rows = [
            ("controller", self.controller.clone()),
            ("period_cycles", self.period_cycles.to_string()),
            ("plant_step_s", format_float(self.plant_step_s)),
            ("time_spent_veh_s", format_float(self.time_spent_veh_s)),
            ("trips_completed_veh", format_float(self.trips_completed_veh)),
            ("demand_veh", format_float(self.demand_veh)),
            ("degraded_steps", self.degraded_steps.to_string()),
            ("regions", self.regions.join(";")),
        ];
        for (k, v) in rows {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Applied split fractions, actuators by cycles.
    pub fn lambda_matrix(&self) -> DMatrix<f64> {
        let l = self.actuators.len();
        DMatrix::from_fn(l, self.cycles.len(), |a, k| self.cycles[k].lambda[a])
    }

    /// Reads the files written by [`RunRecord::write_csv`],
    /// [`RunRecord::write_state`] and [`RunRecord::write_summary`]. Time
    /// spent is recomputed from the state dump.
    pub fn read<R1: Read, R2: Read, R3: Read>(cycles: R1, state: R2, summary: R3) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut rdr = csv::Reader::from_reader(summary);
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            match (rec.get(0), rec.get(1)) {
                (Some(key), Some(v)) => meta.insert(key.to_string(), v.to_string()),
                _ => return Err(Error::Parse { line: k + 2, msg: "expected key,value".into() }),
            };
        }
        let field = |key: &str| -> Result<String> {
            meta.get(key).cloned().ok_or_else(|| Error::Parse { line: 1, msg: format!("summary lacks `{key}`") })
        };
        let number = |key: &str| -> Result<f64> {
            field(key)?.parse().map_err(|_| Error::Parse { line: 1, msg: format!("summary `{key}` is not numeric") })
        };
        let plant_step_s = number("plant_step_s")?;
        let mut rdr = csv::Reader::from_reader(cycles);
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let actuators: Vec<String> =
            header.iter().filter_map(|h| h.strip_prefix("lambda_").map(String::from)).collect();
        let r = header.iter().filter(|h| h.starts_with("rho_")).count();
        let l = actuators.len();
        let expected = 1 + l + 2 * r + r * r + 3;
        if header.len() != expected || r == 0 {
            return Err(Error::Parse { line: 1, msg: "unrecognized run log header".into() });
        }
        let mut cycles_out = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse { line, msg: format!("column {} is not numeric", c + 1) })
            };
            let vals = |from: usize, len: usize| -> Result<Vec<f64>> { (from..from + len).map(num).collect() };
            cycles_out.push(CycleRecord {
                cycle: num(0)? as usize,
                lambda: vals(1, l)?,
                rho: vals(1 + l, r)?,
                phi: vals(1 + l + r, r)?,
                demand: vals(1 + l + 2 * r, r * r)?,
                status: rec.get(expected - 3).unwrap_or_default().to_string(),
                iterations: num(expected - 2)? as usize,
                objective: num(expected - 1)?,
            });
        }
        let mut rdr = csv::Reader::from_reader(state);
        let mut steps: Vec<StepRecord> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse { line, msg: format!("column {} is not numeric", c + 1) })
            };
            let step = num(0)? as u64;
            if steps.last().map_or(true, |s| s.step != step) {
                steps.push(StepRecord { step, n: vec![], queue: vec![], rho: vec![], phi: vec![], lambda: vec![] });
            }
            let s = steps.last_mut().expect("pushed above");
            s.n.push(num(2)?);
            s.queue.push(num(3)?);
            s.rho.push(num(4)?);
            s.phi.push(num(5)?);
        }
        let time_spent = plant_step_s * steps.iter().map(|s| s.n.iter().chain(&s.queue).sum::<f64>()).sum::<f64>();
        let regions: Vec<String> = field("regions")?.split(';').map(String::from).collect();
        if regions.len() != r {
            return Err(Error::Parse { line: 1, msg: "summary region count differs from the run log".into() });
        }
        Ok(RunRecord {
            controller: field("controller")?,
            period_cycles: number("period_cycles")? as usize,
            actuators,
            regions,
            plant_step_s,
            cycles: cycles_out,
            steps,
            time_spent_veh_s: time_spent,
            trips_completed_veh: number("trips_completed_veh")?,
            demand_veh: number("demand_veh")?,
            degraded_steps: number("degraded_steps")? as usize,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::stress();
        cfg.timing.horizon_cycles = 16;
        cfg.collection.cycles = 60;
        cfg
    }

    fn baseline(cfg: &ScenarioConfig) -> RunRecord {
        let inputs =
            RunInputs { controller: ControllerKind::Baseline, period_cycles: 1, data: None, reference: None, rho_max: None };
        run_closed_loop(cfg, &inputs).unwrap()
    }

    #[test]
    fn collection_is_seeded() {
        let cfg = short();
        let a = collect(&cfg, 3).unwrap();
        let b = collect(&cfg, 3).unwrap();
        let c = collect(&cfg, 4).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.scatter, b.scatter);
        assert_ne!(a.data, c.data);
        assert_eq!(a.data.len(), 60);
        assert_eq!(a.scatter[0].len(), 60 * cfg.timing.steps_per_cycle());
    }

    #[test]
    fn collection_spans_the_split_range() {
        let cfg = short();
        let col = collect(&cfg, 1).unwrap();
        let lam = col.data.inputs().row(0).into_owned();
        assert!(lam.min() >= 0.2 && lam.max() <= 0.4);
        assert!(col.report.satisfied, "{:?}", col.report);
    }

    #[test]
    fn collection_shorter_than_hankel_depth_is_refused() {
        let mut cfg = short();
        cfg.collection.cycles = cfg.deepc.t_ini + cfg.deepc.t_f - 1;
        assert!(matches!(collect(&cfg, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = short();
        let dump = |r: &RunRecord| {
            let (mut c, mut s) = (Vec::new(), Vec::new());
            r.write_csv(&mut c).unwrap();
            r.write_state(&mut s).unwrap();
            (c, s)
        };
        assert_eq!(dump(&baseline(&cfg)), dump(&baseline(&cfg)));
    }

    #[test]
    fn time_spent_matches_state_dump() {
        let cfg = short();
        let run = baseline(&cfg);
        let tts: f64 =
            cfg.timing.plant_step_s * run.steps.iter().map(|s| s.n.iter().chain(&s.queue).sum::<f64>()).sum::<f64>();
        assert!((tts - run.time_spent_veh_s).abs() <= 1e-9 * tts.max(1.0));
        assert_eq!(run.steps.len(), 16 * cfg.timing.steps_per_cycle());
    }

    #[test]
    fn run_record_round_trips_through_csv() {
        let cfg = short();
        let run = baseline(&cfg);
        let (mut c, mut s, mut m) = (Vec::new(), Vec::new(), Vec::new());
        run.write_csv(&mut c).unwrap();
        run.write_state(&mut s).unwrap();
        run.write_summary(&mut m).unwrap();
        let back = RunRecord::read(c.as_slice(), s.as_slice(), m.as_slice()).unwrap();
        assert_eq!(back.controller, "baseline");
        assert_eq!(back.regions, run.regions);
        assert_eq!(back.actuators, run.actuators);
        assert_eq!(back.cycles.len(), run.cycles.len());
        for (a, b) in back.cycles.iter().zip(&run.cycles) {
            assert_eq!(a.status, b.status);
            assert!(a.rho.iter().zip(&b.rho).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0)));
        }
        let rel = (back.time_spent_veh_s - run.time_spent_veh_s).abs() / run.time_spent_veh_s;
        assert!(rel < 1e-12, "{rel}");
    }

    #[test]
    fn corrupt_run_log_reports_line() {
        let cfg = short();
        let run = baseline(&cfg);
        let (mut c, mut s, mut m) = (Vec::new(), Vec::new(), Vec::new());
        run.write_csv(&mut c).unwrap();
        run.write_state(&mut s).unwrap();
        run.write_summary(&mut m).unwrap();
        let text = String::from_utf8(c).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen(',', ",x", 1);
        let bad = lines.join("\n");
        match RunRecord::read(bad.as_bytes(), s.as_slice(), m.as_slice()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scatter_round_trips() {
        let scatter = vec![vec![(1.0, 2.0), (3.5, 4.25)], vec![(0.0, 0.0)]];
        let mut buf = Vec::new();
        write_scatter(&scatter, &mut buf).unwrap();
        assert_eq!(read_scatter(buf.as_slice()).unwrap(), scatter);
    }

    #[test]
    fn controller_names_parse() {
        for k in [ControllerKind::Baseline, ControllerKind::Mpc, ControllerKind::Deepc] {
            assert_eq!(k.name().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("pid".parse::<ControllerKind>().unwrap_err().is_config_error());
    }

    #[test]
    fn deepc_needs_data() {
        let cfg = short();
        let inputs =
            RunInputs { controller: ControllerKind::Deepc, period_cycles: 1, data: None, reference: None, rho_max: None };
        assert!(run_closed_loop(&cfg, &inputs).unwrap_err().is_config_error());
    }

    #[test]
    fn short_deepc_run_stays_within_bounds() {
        let mut cfg = short();
        cfg.deepc.reference = ReferenceSpec::Fixed { rho_veh_per_km: vec![30.0, 30.0] };
        let col = collect(&cfg, cfg.seed).unwrap();
        let (y_ref, rho_max) = deepc_reference(&cfg, Some(&col.scatter)).unwrap();
        let inputs = RunInputs {
            controller: ControllerKind::Deepc,
            period_cycles: 1,
            data: Some(&col.data),
            reference: Some(y_ref),
            rho_max: Some(rho_max),
        };
        let run = run_closed_loop(&cfg, &inputs).unwrap();
        for c in &run.cycles {
            assert!(c.lambda.iter().all(|&l| (0.1..=0.9).contains(&l)));
        }
        assert!(run.cycles[..cfg.deepc.t_ini].iter().all(|c| c.status == "warmup"));
    }
}
