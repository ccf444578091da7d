//! Command-line pipeline: collect excitation data, fit MFDs, partition road
//! graphs, run closed-loop experiments and export analyses.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use urbanflow_core::analysis::{self, MetricsSummary};
use urbanflow_core::harness::{self, ControllerKind, RunInputs, RunRecord};
use urbanflow_core::lti::Trajectory;
use urbanflow_core::partitioner::{self, Normalization, SymNmfOptions};
use urbanflow_core::scenario::{ReferenceSpec, ScenarioConfig};
use urbanflow_core::Error;

#[derive(Parser)]
#[command(name = "urbanflow", version, about = "Perimeter-control experiments on macroscopic traffic networks")]
struct Cli {
    /// Directory receiving all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArg {
    /// Scenario TOML file, or `stress` for the bundled two-region scenario.
    #[arg(long)]
    config: String,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the plant with random split fractions and record the trajectory.
    Collect {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Number of duty cycles to record.
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// Fit a quartic MFD per region to a `region,density,flow` scatter.
    FitMfd {
        #[arg(long)]
        scatter: PathBuf,
        /// Upper density of the exported curves; defaults to the largest sample.
        #[arg(long)]
        upper: Option<f64>,
    },
    /// Partition a road graph into homogeneous regions.
    Partition {
        /// `road_id,density` file.
        #[arg(long)]
        roads: PathBuf,
        /// `road_a,road_b` file.
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        regions: usize,
        /// Snake length; defaults to half the road count.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        decay: f64,
        /// Use the non-symmetric degree normalization.
        #[arg(long)]
        asymmetric: bool,
    },
    /// Run the scenario in closed loop.
    Run {
        #[command(flatten)]
        scenario: ScenarioArg,
        #[arg(long, value_parser = parse_controller)]
        controller: ControllerKind,
        /// Duty cycles between controller updates.
        #[arg(long)]
        period: Option<usize>,
        /// Run periods 1, 3 and 6 in parallel instead of a single period.
        #[arg(long)]
        sweep: bool,
        /// Collected trajectory (required for deepc).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Collected scatter (required for a fitted deepc reference).
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Export PCA, metrics and MFD comparison for finished runs.
    Analyze {
        #[command(flatten)]
        scenario: ScenarioArg,
        /// Run directory; the first one is decomposed, all are summarized.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Run whose MFD the first run is compared against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        components: Option<usize>,
    },
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failed command with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config_error() { 2 } else { 1 };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

type Summary = Vec<(&'static str, String)>;

fn quote(v: &str) -> String {
    if v.is_empty() || v.contains(|c: char| c.is_whitespace() || c == '"' || c == '=') {
        format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))
    } else {
        v.to_string()
    }
}

fn key_values(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={}", quote(v))).collect::<Vec<_>>().join(" ")
}

fn load_scenario(arg: &ScenarioArg, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = if arg.config == "stress" {
        ScenarioConfig::stress()
    } else {
        ScenarioConfig::load(Path::new(&arg.config)).map_err(|e| {
            let f = Failure::from(e);
            Failure { message: format!("{}: {}", arg.config, f.message), ..f }
        })?
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn collect(cli: &Cli, scenario: &ScenarioArg, cycles: Option<usize>) -> Result<Summary, Failure> {
    let mut cfg = load_scenario(scenario, cli.seed)?;
    if let Some(c) = cycles {
        cfg.collection.cycles = c;
    }
    let depth = cfg.deepc.t_ini + cfg.deepc.t_f;
    if cfg.collection.cycles < depth {
        return Err(Failure::config(format!(
            "{} cycles are fewer than T_ini + T_f = {depth}",
            cfg.collection.cycles
        )));
    }
    let col = harness::collect(&cfg, cfg.seed)?;
    col.data.write_csv(create(&cli.out.join("data.csv"))?)?;
    harness::write_scatter(&col.scatter, create(&cli.out.join("scatter.csv"))?)?;
    let r = &col.report;
    let summary = vec![
        ("rows", col.data.len().to_string()),
        ("depth", r.depth.to_string()),
        ("input_rank", r.input_rank.to_string()),
        ("full_rank", r.full_rank.to_string()),
        ("required_rank", r.required_rank.to_string()),
        ("pe", if r.satisfied { "pass" } else { "fail" }.to_string()),
    ];
    if !r.satisfied {
        return Err(Failure::domain(format!(
            "data are not persistently exciting at depth {}: input rank {} of {}, full rank {} below {}",
            r.depth,
            r.input_rank,
            r.active_inputs * r.depth,
            r.full_rank,
            r.required_rank
        )));
    }
    Ok(summary)
}

fn fit_mfd(cli: &Cli, scatter: &Path, upper: Option<f64>) -> Result<Summary, Failure> {
    let points = harness::read_scatter(open(scatter)?)?;
    let fits = harness::fit_regions(&points)?;
    let mut w = csv::Writer::from_writer(create(&cli.out.join("mfd_summary.csv"))?);
    w.write_record(["region", "rho_cr", "rho_max", "rmse"]).map_err(Error::from)?;
    let mut curve = csv::Writer::from_writer(create(&cli.out.join("mfd_curve.csv"))?);
    curve.write_record(["region", "density", "flow"]).map_err(Error::from)?;
    let mut crit = Vec::new();
    for (i, est) in &fits {
        let hi = upper.unwrap_or_else(|| points[*i].iter().map(|p| p.0).fold(0.0, f64::max));
        w.write_record([
            i.to_string(),
            format!("{:?}", est.rho_cr),
            est.rho_max.map(|v| format!("{v:?}")).unwrap_or_default(),
            format!("{:?}", est.rmse),
        ])
        .map_err(Error::from)?;
        for (d, f) in est.curve(hi, 200) {
            curve.write_record([i.to_string(), format!("{d:?}"), format!("{f:?}")]).map_err(Error::from)?;
        }
        if let Some(d) = &est.diagnostic {
            log::warn!("region {i}: {d}");
        }
        crit.push(format!("{:.3}", est.rho_cr));
    }
    w.flush()?;
    curve.flush()?;
    Ok(vec![("regions", fits.len().to_string()), ("rho_cr", crit.join(";"))])
}

fn partition(cli: &Cli, cmd: &Command) -> Result<Summary, Failure> {
    let Command::Partition { roads, edges, regions, depth, decay, asymmetric } = cmd else { unreachable!() };
    let graph = partitioner::read_graph(open(roads)?, open(edges)?)?;
    if *regions > graph.len() {
        return Err(Failure::domain(format!("{regions} regions requested for {} roads", graph.len())));
    }
    let m = depth.unwrap_or((graph.len() / 2).max(1));
    let mut opts = SymNmfOptions::new(*regions, cli.seed.unwrap_or(0));
    if *asymmetric {
        opts.normalization = Normalization::Asymmetric;
    }
    let p = partitioner::partition(&graph, m, *decay, &opts)?;
    partitioner::write_assignment(&p.assignment, create(&cli.out.join("partition.csv"))?)?;
    let objective = p.factorization.objective.last().copied().unwrap_or(0.0);
    Ok(vec![
        ("roads", graph.len().to_string()),
        ("regions", regions.to_string()),
        ("depth", m.to_string()),
        ("iterations", p.factorization.iterations.to_string()),
        ("objective", format!("{objective:?}")),
        ("repaired_roads", p.repaired_roads.to_string()),
    ])
}

fn run_dir(out: &Path, controller: ControllerKind, period: usize) -> PathBuf {
    out.join(format!("run_{}_p{period}", controller.name()))
}

fn write_run(run: &RunRecord, dir: &Path) -> Result<(), Failure> {
    run.write_csv(create(&dir.join("cycles.csv"))?)?;
    run.write_state(create(&dir.join("state.csv"))?)?;
    run.write_inputs(create(&dir.join("inputs.csv"))?)?;
    run.write_summary(create(&dir.join("summary.csv"))?)?;
    Ok(())
}

fn run(cli: &Cli, cmd: &Command) -> Result<Summary, Failure> {
    let Command::Run { scenario, controller, period, sweep, data, scatter } = cmd else { unreachable!() };
    let cfg = load_scenario(scenario, cli.seed)?;
    let controller = *controller;
    let default_period = match controller {
        ControllerKind::Mpc => cfg.mpc.period_cycles,
        _ => cfg.deepc.period_cycles,
    };
    let periods: Vec<usize> = if *sweep { vec![1, 3, 6] } else { vec![period.unwrap_or(default_period)] };

    let (trajectory, reference, rho_max) = if controller == ControllerKind::Deepc {
        let path = data.as_ref().ok_or_else(|| Failure::config("deepc needs --data with a collected trajectory"))?;
        let traj = Trajectory::read_csv(open(path)?)?;
        let points = match (&cfg.deepc.reference, scatter) {
            (ReferenceSpec::Fitted, None) => {
                return Err(Failure::config("a fitted reference needs --scatter with the collected scatter"))
            }
            (_, Some(p)) => Some(harness::read_scatter(open(p)?)?),
            (_, None) => None,
        };
        let (y_ref, rho_max) = harness::deepc_reference(&cfg, points.as_deref())?;
        (Some(traj), Some(y_ref), Some(rho_max))
    } else {
        (None, None, None)
    };

    let results: Vec<Result<RunRecord, Error>> = std::thread::scope(|s| {
        let handles: Vec<_> = periods
            .iter()
            .map(|&p| {
                let inputs = RunInputs {
                    controller,
                    period_cycles: p,
                    data: trajectory.as_ref(),
                    reference: reference.clone(),
                    rho_max: rho_max.clone(),
                };
                let cfg = &cfg;
                s.spawn(move || harness::run_closed_loop(cfg, &inputs))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });

    let network_rho_max = cfg.network.rho_max();
    let mut summary = vec![("controller", controller.name().to_string())];
    let mut tts = Vec::new();
    let mut gridlock = Vec::new();
    let mut degraded = 0;
    let mut solves = 0;
    for (res, &p) in results.into_iter().zip(&periods) {
        let record = res?;
        write_run(&record, &run_dir(&cli.out, controller, p))?;
        let m = analysis::summarize_run(&record, &network_rho_max)?;
        tts.push(format!("{:.3}", m.total_time_spent_veh_h));
        gridlock.push(m.gridlock.to_string());
        degraded += record.degraded_steps;
        solves += record.cycles.iter().filter(|c| !matches!(c.status.as_str(), "held" | "warmup" | "fixed")).count();
    }
    summary.push(("periods", periods.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";")));
    summary.push(("tts_veh_h", tts.join(";")));
    summary.push(("gridlock", gridlock.join(";")));
    summary.push(("degraded_steps", degraded.to_string()));
    if degraded > 0 {
        log::warn!("{degraded} of {solves} controller solves fell back to default splits");
    }
    if 2 * degraded > solves {
        return Err(Failure::domain(format!("{degraded} of {solves} controller solves failed")));
    }
    Ok(summary)
}

fn read_run(dir: &Path) -> Result<RunRecord, Failure> {
    Ok(RunRecord::read(open(&dir.join("cycles.csv"))?, open(&dir.join("state.csv"))?, open(&dir.join("summary.csv"))?)?)
}

fn analyze(cli: &Cli, cmd: &Command) -> Result<Summary, Failure> {
    let Command::Analyze { scenario, runs, reference, components } = cmd else { unreachable!() };
    let cfg = load_scenario(scenario, cli.seed)?;
    let rho_max = cfg.network.rho_max();
    let records: Vec<RunRecord> = runs.iter().map(|d| read_run(d)).collect::<Result<_, _>>()?;
    let primary = &records[0];

    let metrics: Vec<MetricsSummary> =
        records.iter().map(|r| analysis::summarize_run(r, &rho_max)).collect::<Result<_, _>>()?;
    analysis::write_metrics(&metrics, create(&cli.out.join("metrics_summary.csv"))?)?;

    let baseline = reference.as_deref().map(read_run).transpose()?;
    let mut comparisons = Vec::new();
    let mut upper: f64 = 0.0;
    for (i, name) in primary.regions.iter().enumerate() {
        let own = analysis::region_scatter(primary, i);
        upper = upper.max(own.iter().map(|p| p.0).fold(0.0, f64::max));
        let result = match &baseline {
            Some(b) => {
                let other = analysis::region_scatter(b, i);
                upper = upper.max(other.iter().map(|p| p.0).fold(0.0, f64::max));
                analysis::compare_mfds(name, [&b.controller, &primary.controller], &other, &own)
            }
            None => analysis::compare_mfds(name, [&primary.controller, &primary.controller], &own, &own),
        };
        match result {
            Ok(c) => comparisons.push(c),
            Err(e) => log::warn!("region {name}: no MFD comparison ({e})"),
        }
    }
    analysis::write_mfd_comparison(&comparisons, upper, 200, create(&cli.out.join("mfd_comparison.csv"))?)?;

    let lambda = primary.lambda_matrix();
    let k = components.unwrap_or(lambda.nrows().min(3));
    let pca = analysis::pca(&lambda, k)?;
    analysis::write_pca_components(&pca, create(&cli.out.join("pca_components.csv"))?)?;
    analysis::write_loadings(&pca, &primary.actuators, create(&cli.out.join("loadings.csv"))?)?;
    let evr: Vec<String> = pca.evr.iter().map(|v| format!("{v:.4}")).collect();
    let ranking = analysis::rank_actuators(&pca.components.column(0).iter().copied().collect::<Vec<_>>());
    let order: Vec<&str> = ranking.order.iter().map(|(a, _)| primary.actuators[*a].as_str()).collect();
    Ok(vec![
        ("runs", records.len().to_string()),
        ("evr", evr.join(";")),
        ("pc1_order", order.join(";")),
        ("mfd_regions", comparisons.len().to_string()),
    ])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let name = match &cli.command {
        Command::Collect { .. } => "collect",
        Command::FitMfd { .. } => "fit-mfd",
        Command::Partition { .. } => "partition",
        Command::Run { .. } => "run",
        Command::Analyze { .. } => "analyze",
    };
    let result = match &cli.command {
        Command::Collect { scenario, cycles } => collect(&cli, scenario, *cycles),
        Command::FitMfd { scatter, upper } => fit_mfd(&cli, scatter, *upper),
        Command::Partition { .. } => partition(&cli, &cli.command),
        Command::Run { .. } => run(&cli, &cli.command),
        Command::Analyze { .. } => analyze(&cli, &cli.command),
    };
    let mut pairs = vec![("command", name.to_string())];
    match result {
        Ok(summary) => {
            pairs.push(("status", "ok".into()));
            pairs.extend(summary);
            pairs.push(("out", cli.out.display().to_string()));
            println!("{}", key_values(&pairs));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            pairs.push(("status", "error".into()));
            pairs.push(("code", f.code.to_string()));
            pairs.push(("message", f.message));
            println!("{}", key_values(&pairs));
            ExitCode::from(f.code)
        }
    }
}
