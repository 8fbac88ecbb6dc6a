#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use eqrl_core::agents::{initialise, resume, AgentKind, Checkpoint, ModelConfig, TrainLog};
use eqrl_core::bounds::{bounds_csv, compare_bounds, fig8_sweep, log_horizons};
use eqrl_core::evaluation::{
    evaluate, metrics_csv, parse_metrics_csv, value_accuracy, EvalConfig, MetricsRow,
};
use eqrl_core::exec::{init_threads, map_indexed, Exec};
use eqrl_core::geometry::{generate_dataset, Dataset, GenerateConfig, OccupancyMap, Regime, State};
use eqrl_core::objectives::{ObjectiveConfig, TrainConfig, Variant};
use eqrl_core::oracle::{solve_distance_field, DistanceField, Method};
use eqrl_core::plot::{bounds_svg, learning_curve_svg, METRIC_COLUMNS};

const EXIT_HELP: &str =
    "Exit codes: 0 success, 2 invalid input or configuration, 3 non-finite values during training.

Set EQRL_THREADS to cap the number of worker threads.";

#[derive(Parser)]
#[command(name = "eqrl", version, about = "Quasimetric value learning in 2-D mazes", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset map, or validate and normalise a map file.
    GenMap {
        #[arg(long, conflicts_with = "from")]
        preset: Option<String>,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an offline dataset plus a JSON sidecar.
    GenData {
        /// Map file or preset name.
        #[arg(long)]
        map: String,
        #[arg(long, default_value = "navigate")]
        regime: String,
        #[arg(long, default_value_t = 500)]
        n_traj: usize,
        #[arg(long)]
        traj_len: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one agent per seed with periodic evaluation.
    Train(TrainArgs),
    /// Evaluate checkpoints and write a metrics table.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        map: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_goals: Option<usize>,
        #[arg(long)]
        episodes_per_goal: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the oracle distance field for one goal.
    Oracle {
        #[arg(long)]
        map: String,
        /// Goal as `x,y`.
        #[arg(long, value_parser = parse_point)]
        goal: (f64, f64),
        #[arg(long, default_value = "fast_marching")]
        method: String,
        /// Oracle cell size in world units.
        #[arg(long, default_value_t = 0.25)]
        cell: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate the error-probability bounds over a range of horizons.
    Bounds {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.01)]
        rho: f64,
        #[arg(long, default_value_t = 10.0)]
        t_min: f64,
        #[arg(long, default_value_t = 1e4)]
        t_max: f64,
        #[arg(long, default_value_t = 61)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Render learning curves from a metrics table.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "success_rate")]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    map: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Budget of every training phase.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    n_goals: Option<usize>,
    #[arg(long)]
    episodes_per_goal: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolved configuration of a training run; echoed as JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    map: String,
    dataset: Option<PathBuf>,
    kind: AgentKind,
    /// `desk` or `paper`.
    model: String,
    seeds: Vec<u64>,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    eval_every: u64,
    /// Oracle goals used for value accuracy in each evaluation.
    accuracy_goals: usize,
    accuracy_pairs: usize,
    out: PathBuf,
    train: TrainConfig,
    objective: ObjectiveConfig,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            map: "maze7".into(),
            dataset: None,
            kind: AgentKind::Flat,
            model: "desk".into(),
            seeds: vec![0],
            eval_every: 10_000,
            accuracy_goals: 4,
            accuracy_pairs: 1000,
            out: PathBuf::from("run"),
            train: TrainConfig::default(),
            objective: ObjectiveConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let mut it = s.split(',').map(|p| p.trim().parse::<f64>());
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(x)), Some(Ok(y)), None) => Ok((x, y)),
        _ => Err(format!("expected `x,y`, got {s:?}")),
    }
}

fn load_map(spec: &str) -> Result<OccupancyMap> {
    let p = Path::new(spec);
    if p.exists() {
        let text = fs::read_to_string(p).with_context(|| format!("reading map {}", p.display()))?;
        return OccupancyMap::parse(&text).with_context(|| format!("parsing map {}", p.display()));
    }
    OccupancyMap::preset(spec)
        .with_context(|| format!("{spec:?} is neither a map file nor a preset"))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
    Dataset::from_bytes(&bytes).with_context(|| format!("decoding dataset {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn pretty(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn refined(map: &OccupancyMap, cell: f64) -> Result<OccupancyMap> {
    if !(cell > 0.0) {
        bail!(eqrl_core::Error::InvalidConfig(
            "oracle cell size must be positive".into()
        ));
    }
    Ok(map.refined((map.resolution() / cell).ceil().max(1.0) as usize))
}

fn cmd_gen_map(preset: Option<String>, from: Option<PathBuf>, out: &Path) -> Result<()> {
    let map = match (preset, from) {
        (Some(p), _) => OccupancyMap::preset(&p)?,
        (None, Some(f)) => load_map(&f.to_string_lossy())?,
        (None, None) => bail!(eqrl_core::Error::InvalidConfig(
            "pass --preset or --from".into()
        )),
    };
    write(out, map.to_text())?;
    println!(
        "map {}x{} resolution {} free cells {} -> {}",
        map.width(),
        map.height(),
        map.resolution(),
        map.free_cells().len(),
        out.display()
    );
    Ok(())
}

fn parse_regime(s: &str) -> Result<Regime> {
    Ok(match s {
        "navigate" => Regime::Navigate,
        "stitch" => Regime::Stitch,
        "trajectory_free" => Regime::TrajectoryFree,
        other => bail!(eqrl_core::Error::InvalidConfig(format!(
            "unknown regime {other:?}"
        ))),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    map: &str,
    regime: &str,
    n_traj: usize,
    traj_len: Option<usize>,
    noise: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let map = load_map(map)?;
    let mut cfg = GenerateConfig::new(parse_regime(regime)?, n_traj, seed);
    if let Some(n) = traj_len {
        cfg.traj_len = n;
    }
    if let Some(s) = noise {
        if !(s >= 0.0) {
            bail!(eqrl_core::Error::InvalidConfig(
                "noise must be non-negative".into()
            ));
        }
        cfg.noise = s;
    }
    let data = generate_dataset(&map, &cfg)?;
    write(out, data.to_bytes())?;
    let mut side = data.sidecar();
    side["config"] = serde_json::to_value(&cfg)?;
    side["map_fingerprint"] = format!("{:016x}", map.fingerprint()).into();
    write(&sidecar_path(out), pretty(&side)?)?;
    println!(
        "{} dataset: {} trajectories, {} transitions, {} pairs -> {}",
        data.regime.name(),
        data.trajectories.len(),
        data.n_transitions(),
        data.pairs.len(),
        out.display()
    );
    Ok(())
}

fn resolve_run(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text)
                .map_err(|e| eqrl_core::Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = &args.map {
        cfg.map = m.clone();
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(k) = &args.kind {
        cfg.kind = k.parse()?;
    }
    if let Some(v) = &args.variant {
        cfg.objective.variant = v.parse::<Variant>()?;
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(n) = args.steps {
        cfg.train.value_steps = n;
        cfg.train.high_steps = n;
        cfg.train.low_steps = n;
    }
    if let Some(n) = args.eval_every {
        cfg.eval_every = n;
    }
    if let Some(n) = args.n_goals {
        cfg.eval.n_goals = n;
    }
    if let Some(n) = args.episodes_per_goal {
        cfg.eval.episodes_per_goal = n;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if cfg.seeds.is_empty() {
        bail!(eqrl_core::Error::InvalidConfig("seed list is empty".into()));
    }
    if cfg.dataset.is_none() {
        bail!(eqrl_core::Error::InvalidConfig(
            "train needs a dataset (--dataset or `dataset` in the config)".into()
        ));
    }
    cfg.eval.validate()?;
    Ok(cfg)
}

/// Oracle fields at goals drawn from `seed`, for value-accuracy rows.
fn accuracy_fields(map: &OccupancyMap, n: usize, seed: u64) -> Result<Vec<DistanceField>> {
    let fine = refined(map, 0.25)?;
    let free = map.free_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (ix, iy) = free[rand::Rng::random_range(&mut rng, 0..free.len())];
            Ok(solve_distance_field(
                &fine,
                map.cell_center(ix, iy),
                Method::FastMarching,
            )?)
        })
        .collect()
}

fn metrics_row(
    run_id: &str,
    ck: &Checkpoint,
    map: &OccupancyMap,
    fields: &[DistanceField],
    cfg: &RunConfig,
) -> Result<MetricsRow> {
    let m = evaluate(ck, map, &cfg.eval)?;
    let acc = value_accuracy(
        &ck.bundle.quasimetric,
        map,
        fields,
        cfg.accuracy_pairs,
        cfg.eval.seed,
    )?;
    Ok(MetricsRow {
        run_id: run_id.into(),
        seed: ck.train.seed,
        step: ck.step,
        success_rate: m.success_rate,
        collision_rate: m.collision_rate,
        spearman: acc.spearman,
        rel_error: acc.rel_error,
        lipschitz_ratio: acc.lipschitz_ratio,
    })
}

fn run_id(cfg: &RunConfig) -> String {
    format!("{}_{}", cfg.kind.name(), cfg.objective.variant.name())
}

/// Trains one seed, logging an evaluation row at each interval.
fn train_seed(
    cfg: &RunConfig,
    map: &OccupancyMap,
    data: &Dataset,
    fields: &[DistanceField],
    seed: u64,
) -> Result<(Checkpoint, TrainLog, Vec<MetricsRow>)> {
    let model = ModelConfig::preset(&cfg.model)?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut ck = initialise(map, data, cfg.kind, &model, &train, &cfg.objective)?;
    let total = ck.total_steps();
    let id = run_id(cfg);
    let mut log = TrainLog::default();
    let mut rows = Vec::new();
    while ck.step < total {
        let next = match ck.step.checked_div(cfg.eval_every) {
            Some(q) => ((q + 1) * cfg.eval_every).min(total),
            None => total,
        };
        match resume(&mut ck, data, next) {
            Ok(part) => {
                log.value.extend(part.value);
                log.other.extend(part.other);
            }
            Err(e @ eqrl_core::Error::NaNDetected { .. }) => {
                let eqrl_core::Error::NaNDetected { batch, .. } = &e else {
                    unreachable!()
                };
                let path = cfg.out.join(format!("nan_seed{seed}.json"));
                write(&path, batch)?;
                return Err(anyhow::Error::new(e).context(format!(
                    "seed {seed}: offending batch written to {}",
                    path.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        rows.push(metrics_row(&id, &ck, map, fields, cfg)?);
    }
    Ok((ck, log, rows))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_run(args)?;
    let map = load_map(&cfg.map)?;
    let data = load_dataset(cfg.dataset.as_ref().expect("checked in resolve_run"))?;
    // fail fast on configuration problems before any directory is touched
    initialise(
        &map,
        &data,
        cfg.kind,
        &ModelConfig::preset(&cfg.model)?,
        &cfg.train,
        &cfg.objective,
    )?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("config.json"), pretty(&cfg)?)?;
    let fields = accuracy_fields(&map, cfg.accuracy_goals, cfg.eval.seed)?;
    let results = map_indexed(Exec::Parallel, cfg.seeds.len(), |i| {
        train_seed(&cfg, &map, &data, &fields, cfg.seeds[i])
    });
    let mut all_rows = Vec::new();
    for (seed, res) in cfg.seeds.iter().zip(results) {
        let (ck, log, rows) = res?;
        write(
            &cfg.out.join(format!("checkpoint_seed{seed}.bin")),
            ck.to_bytes(),
        )?;
        write(
            &cfg.out.join(format!("diagnostics_seed{seed}.csv")),
            log.diagnostics_csv(cfg.objective.variant),
        )?;
        if let Some(last) = rows.last() {
            println!(
                "seed {seed}: step {} success {:.1}% collisions {:.1}% spearman {:.3}",
                last.step, last.success_rate, last.collision_rate, last.spearman
            );
        } else {
            println!("seed {seed}: no training steps");
        }
        all_rows.extend(rows);
    }
    write(&cfg.out.join("metrics.csv"), metrics_csv(&all_rows))?;
    write(
        &cfg.out.join("success_rate.svg"),
        learning_curve_svg(&all_rows, "success_rate")?,
    )?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoints: &[PathBuf],
    map: &str,
    config: Option<&Path>,
    n_goals: Option<usize>,
    episodes_per_goal: Option<usize>,
    max_steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let map = load_map(map)?;
    let mut eval: EvalConfig = match config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text)
                .map_err(|e| eqrl_core::Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => EvalConfig::default(),
    };
    eval.n_goals = n_goals.unwrap_or(eval.n_goals);
    eval.episodes_per_goal = episodes_per_goal.unwrap_or(eval.episodes_per_goal);
    eval.max_steps = max_steps.unwrap_or(eval.max_steps);
    eval.seed = seed.unwrap_or(eval.seed);
    eval.validate()?;
    let fields = accuracy_fields(&map, 4, eval.seed)?;
    let mut rows = Vec::new();
    for path in checkpoints {
        let bytes =
            fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ck = Checkpoint::from_bytes(&bytes)
            .with_context(|| format!("decoding checkpoint {}", path.display()))?;
        let m = evaluate(&ck, &map, &eval)?;
        let acc = value_accuracy(&ck.bundle.quasimetric, &map, &fields, 1000, eval.seed)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        println!(
            "{id}: {} episodes, success {:.1}%, collisions {:.1}%",
            m.episodes, m.success_rate, m.collision_rate
        );
        rows.push(MetricsRow {
            run_id: id,
            seed: ck.train.seed,
            step: ck.step,
            success_rate: m.success_rate,
            collision_rate: m.collision_rate,
            spearman: acc.spearman,
            rel_error: acc.rel_error,
            lipschitz_ratio: acc.lipschitz_ratio,
        });
    }
    write(out, metrics_csv(&rows))?;
    write(&sidecar_path(out), pretty(&eval)?)?;
    Ok(())
}

fn cmd_oracle(map: &str, goal: (f64, f64), method: &str, cell: f64, out: &Path) -> Result<()> {
    let map = load_map(map)?;
    let method = match method {
        "fast_marching" => Method::FastMarching,
        "dijkstra16" => Method::Dijkstra16,
        other => bail!(eqrl_core::Error::InvalidConfig(format!(
            "unknown method {other:?}"
        ))),
    };
    let field = solve_distance_field(&refined(&map, cell)?, State::new(goal.0, goal.1), method)?;
    write(out, field.to_csv())?;
    write(&sidecar_path(out), pretty(&field.sidecar())?)?;
    println!(
        "field {}x{} cells -> {}",
        field.width(),
        field.height(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bounds(
    preset: Option<&str>,
    sigma: f64,
    rho: f64,
    t_min: f64,
    t_max: f64,
    n: usize,
    out: &Path,
    svg: Option<&Path>,
) -> Result<()> {
    let rows = match preset {
        Some("fig8") => fig8_sweep(),
        Some(other) => bail!(eqrl_core::Error::InvalidConfig(format!(
            "unknown bounds preset {other:?}"
        ))),
        None => {
            if !(t_min >= 1.0 && t_max >= t_min) {
                bail!(eqrl_core::Error::InvalidConfig(
                    "need 1 ≤ t_min ≤ t_max".into()
                ));
            }
            compare_bounds(&log_horizons(t_min, t_max, n), sigma, rho)?
        }
    };
    let csv = bounds_csv(&rows);
    print!("{csv}");
    write(out, &csv)?;
    if let Some(p) = svg {
        write(p, bounds_svg(&rows)?)?;
    }
    Ok(())
}

fn cmd_plot(metrics: &Path, metric: &str, out: &Path) -> Result<()> {
    if !METRIC_COLUMNS.contains(&metric) {
        bail!(eqrl_core::Error::InvalidConfig(format!(
            "metric must be one of {}",
            METRIC_COLUMNS.join(", ")
        )));
    }
    let text =
        fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let rows = parse_metrics_csv(&text)?;
    write(out, learning_curve_svg(&rows, metric)?)?;
    println!("{} rows -> {}", rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMap { preset, from, out } => cmd_gen_map(preset, from, &out),
        Command::GenData {
            map,
            regime,
            n_traj,
            traj_len,
            noise,
            seed,
            out,
        } => cmd_gen_data(&map, &regime, n_traj, traj_len, noise, seed, &out),
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            map,
            config,
            n_goals,
            episodes_per_goal,
            max_steps,
            seed,
            out,
        } => cmd_eval(
            &checkpoint,
            &map,
            config.as_deref(),
            n_goals,
            episodes_per_goal,
            max_steps,
            seed,
            &out,
        ),
        Command::Oracle {
            map,
            goal,
            method,
            cell,
            out,
        } => cmd_oracle(&map, goal, &method, cell, &out),
        Command::Bounds {
            preset,
            sigma,
            rho,
            t_min,
            t_max,
            n,
            out,
            svg,
        } => cmd_bounds(
            preset.as_deref(),
            sigma,
            rho,
            t_min,
            t_max,
            n,
            &out,
            svg.as_deref(),
        ),
        Command::Plot {
            metrics,
            metric,
            out,
        } => cmd_plot(&metrics, &metric, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let nan = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<eqrl_core::Error>(),
            Some(eqrl_core::Error::NaNDetected { .. })
        )
    });
    if nan {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("EQRL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        init_threads(n);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
