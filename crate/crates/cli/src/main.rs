use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use zoolab_core::attack::{
    expected_label_accuracy, run_campaign, AttackBudget, CampaignMode, CampaignResult,
    DEFAULT_QUERY_BUDGET,
};
use zoolab_core::fingerprint::fingerprint;
use zoolab_core::router::compute_sensitivities;
use zoolab_core::simlab::{
    complexity_experiment, min_fidelity, reference_zoo, tradeoff_experiment, ComplexityConfig,
    TradeoffConfig, CSV_SCHEMA_VERSION,
};
use zoolab_core::wire::{RemoteEndpoint, ServeMode, Server, ServerConfig};
use zoolab_core::{Error, FrontierEstimate, GranularityConfig, ZooFile};

const EXIT_CONFIG: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

#[derive(Parser)]
#[command(name = "zoolab", version, about = "Model-less inference serving lab")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// JSON file with default values for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a zoo over TCP.
    Serve(ServeArgs),
    /// Recover the frontier of a running server.
    Fingerprint(FingerprintArgs),
    /// Run a labeling campaign against a running server.
    Attack(AttackArgs),
    /// Run an in-process experiment suite and write a CSV.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    zoo: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    /// Enable the noise defense with this privacy parameter.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Service,
    Experiment,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long = "l-up")]
    l_up: Option<f64>,
    #[arg(long = "acc-g")]
    acc_g: Option<f64>,
    #[arg(long = "lat-g")]
    lat_g: Option<f64>,
}

#[derive(Args)]
struct FingerprintArgs {
    /// host:port of the server.
    #[arg(long)]
    endpoint: Option<String>,
    #[command(flatten)]
    grid: GridArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long = "latency-budget")]
    latency_budget: Option<f64>,
    #[arg(long = "query-budget")]
    query_budget: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<AttackMode>,
    #[command(flatten)]
    grid: GridArgs,
    /// Zoo file used only to compute surrogate accuracy from the trigger PMF.
    #[arg(long)]
    zoo: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackMode {
    Fingerprint,
    Naive,
}

#[derive(Subcommand)]
enum Experiment {
    /// Fingerprint query count versus frontier size.
    Complexity(ComplexityArgs),
    /// Goodput and victim mass versus epsilon.
    Tradeoff(TradeoffArgs),
}

#[derive(Args)]
struct ComplexityArgs {
    /// Comma-separated frontier sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<u32>,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TradeoffArgs {
    /// Comma-separated latency budgets in ms.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<u32>,
    #[arg(long = "query-budget")]
    query_budget: Option<u64>,
    /// Zoo file; the built-in reference zoo when absent.
    #[arg(long)]
    zoo: Option<PathBuf>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Values from `--config`, looked up by flag name with `-` or `_`.
struct FileConfig(Map<String, Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self(Map::new()));
        };
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(map)) => Ok(Self(map)),
            Ok(_) => Err(config_err("config file must hold a JSON object")),
            Err(e) => Err(config_err(format!(
                "invalid config {}: {e}",
                path.display()
            ))),
        }
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        self.0
            .get(key)
            .or_else(|| self.0.get(&key.replace('_', "-")))
    }

    fn f64(&self, key: &str) -> anyhow::Result<Option<f64>> {
        self.raw(key)
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| config_err(format!("config `{key}` must be a number")))
            })
            .transpose()
    }

    fn u64(&self, key: &str) -> anyhow::Result<Option<u64>> {
        self.raw(key)
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| config_err(format!("config `{key}` must be an integer")))
            })
            .transpose()
    }

    fn str(&self, key: &str) -> anyhow::Result<Option<String>> {
        self.raw(key)
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| config_err(format!("config `{key}` must be a string")))
            })
            .transpose()
    }

    fn f64s(&self, key: &str) -> anyhow::Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| {
                v.as_array()
                    .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| config_err(format!("config `{key}` must be a list of numbers")))
            })
            .transpose()
    }

    fn value_enum<T: ValueEnum>(&self, key: &str) -> anyhow::Result<Option<T>> {
        self.str(key)?
            .map(|s| {
                T::from_str(&s, true)
                    .map_err(|_| config_err(format!("config `{key}`: bad value `{s}`")))
            })
            .transpose()
    }
}

fn required<T>(v: Option<T>, flag: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| config_err(format!("missing required --{flag}")))
}

fn load_zoo(path: &Path) -> anyhow::Result<ZooFile> {
    ZooFile::load(path).map_err(|e| config_err(format!("zoo {}: {e}", path.display())))
}

fn grid(
    args: &GridArgs,
    cfg: &FileConfig,
    default: GranularityConfig,
) -> anyhow::Result<GranularityConfig> {
    let acc_g = args.acc_g.or(cfg.f64("acc_g")?).unwrap_or(default.acc_g);
    let lat_g = args.lat_g.or(cfg.f64("lat_g")?).unwrap_or(default.lat_g);
    let l_up = args.l_up.or(cfg.f64("l_up")?).unwrap_or(default.l_up);
    GranularityConfig::new(acc_g, lat_g, l_up).map_err(|e| config_err(e.to_string()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn to_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

struct Globals {
    seed: u64,
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::NoFeasibleVictim { .. } | Error::BudgetExhausted { .. }) => EXIT_INFEASIBLE,
        Some(
            Error::Io(_)
            | Error::Protocol(_)
            | Error::Remote { .. }
            | Error::Malformed(_)
            | Error::NotServing
            | Error::TelemetryUnavailable,
        ) => EXIT_PROTOCOL,
        Some(_) => EXIT_CONFIG,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let globals = Globals {
        seed: cli.seed.or(cfg.u64("seed")?).unwrap_or(0),
        format: match cli.format {
            Some(f) => f,
            None => cfg.value_enum("format")?.unwrap_or(Format::Json),
        },
    };
    match cli.command {
        Command::Serve(a) => serve(a, &cfg, &globals),
        Command::Fingerprint(a) => cmd_fingerprint(a, &cfg, &globals),
        Command::Attack(a) => attack(a, &cfg, &globals),
        Command::Experiment(Experiment::Complexity(a)) => complexity(a, &cfg, &globals),
        Command::Experiment(Experiment::Tradeoff(a)) => tradeoff(a, &cfg, &globals),
    }
}

fn serve(a: ServeArgs, cfg: &FileConfig, g: &Globals) -> anyhow::Result<()> {
    let zoo_path = required(a.zoo.or(cfg.str("zoo")?.map(PathBuf::from)), "zoo")?;
    let port = match a.port {
        Some(p) => p,
        None => cfg
            .u64("port")?
            .map(|p| u16::try_from(p).map_err(|_| config_err("port out of range")))
            .transpose()?
            .unwrap_or(0),
    };
    let epsilon = a.epsilon.or(cfg.f64("epsilon")?);
    let mode = match a.mode {
        Some(m) => m,
        None => cfg.value_enum("mode")?.unwrap_or(Mode::Service),
    };
    let zoo = load_zoo(&zoo_path)?;
    let frontier = zoo.frontier()?;
    let (delta_acc, delta_lat) = compute_sensitivities(&frontier)?;

    let serve_mode = match mode {
        Mode::Service => ServeMode::Service,
        Mode::Experiment => ServeMode::Experiment,
    };
    let config = ServerConfig::new(zoo.granularity, serve_mode, g.seed).with_epsilon(epsilon);
    let server = Server::bind(("127.0.0.1", port), config)?;
    for m in &zoo.models {
        server.register(m.clone())?;
    }
    let defense = server.start_serving()?;
    let startup = json!({
        "event": "listening",
        "addr": server.local_addr()?.to_string(),
        "config": {
            "zoo": zoo_path.display().to_string(),
            "port": port,
            "epsilon": epsilon,
            "mode": serve_mode,
            "seed": g.seed,
        },
        "frontier_size": frontier.len(),
        "sensitivities": { "delta_acc": delta_acc, "delta_lat": delta_lat },
        "defense": defense,
    });
    println!("{startup}");
    std::io::stdout().flush()?;
    server.run()?;
    Ok(())
}

fn estimate_csv(header: &str, est: &FrontierEstimate) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# zoolab fingerprint schema_version={CSV_SCHEMA_VERSION}"
    );
    let _ = writeln!(out, "# {header}");
    out.push_str("accuracy,latency_ms\n");
    for r in &est.rows {
        let _ = writeln!(out, "{},{}", r.accuracy, r.latency_ms);
    }
    let _ = writeln!(out, "# queries_spent={}", est.queries_spent);
    out
}

fn connect(endpoint: &str, grid: GranularityConfig) -> anyhow::Result<RemoteEndpoint> {
    let ep =
        RemoteEndpoint::connect(endpoint).with_context(|| format!("connecting to {endpoint}"))?;
    Ok(ep.with_granularity(grid))
}

fn attacker_default_grid() -> GranularityConfig {
    reference_zoo().granularity
}

fn cmd_fingerprint(a: FingerprintArgs, cfg: &FileConfig, g: &Globals) -> anyhow::Result<()> {
    let endpoint = required(a.endpoint.or(cfg.str("endpoint")?), "endpoint")?;
    let grid = grid(&a.grid, cfg, attacker_default_grid())?;
    let out = a.out.or(cfg.str("out")?.map(PathBuf::from));
    let mut ep = connect(&endpoint, grid)?;
    let est = fingerprint(&mut ep, &grid)?;
    let config = json!({ "endpoint": endpoint, "granularity": grid, "seed": g.seed });
    let text = match g.format {
        Format::Json => to_json(&json!({
            "schema_version": CSV_SCHEMA_VERSION,
            "config": config,
            "rows": est.rows,
            "queries_spent": est.queries_spent,
            "consistent": est.is_consistent(),
        })),
        Format::Csv => estimate_csv(&config.to_string(), &est),
    };
    emit(out.as_deref(), &text)
}

fn attack(a: AttackArgs, cfg: &FileConfig, g: &Globals) -> anyhow::Result<()> {
    let endpoint = required(a.endpoint.or(cfg.str("endpoint")?), "endpoint")?;
    let latency_budget = required(
        a.latency_budget.or(cfg.f64("latency_budget")?),
        "latency-budget",
    )?;
    let query_budget = a
        .query_budget
        .or(cfg.u64("query_budget")?)
        .unwrap_or(DEFAULT_QUERY_BUDGET);
    let mode = match a.mode {
        Some(m) => m,
        None => cfg.value_enum("mode")?.unwrap_or(AttackMode::Fingerprint),
    };
    let grid = grid(&a.grid, cfg, attacker_default_grid())?;
    let zoo_path = a.zoo.or(cfg.str("zoo")?.map(PathBuf::from));
    let out = a.out.or(cfg.str("out")?.map(PathBuf::from));
    let budget =
        AttackBudget::new(latency_budget, query_budget).map_err(|e| config_err(e.to_string()))?;
    let frontier = zoo_path
        .as_deref()
        .map(load_zoo)
        .transpose()?
        .map(|z| z.frontier())
        .transpose()?;

    let campaign_mode = match mode {
        AttackMode::Fingerprint => CampaignMode::Fingerprint,
        AttackMode::Naive => CampaignMode::Naive,
    };
    let mut ep = connect(&endpoint, grid)?;
    let result = run_campaign(&mut ep, &budget, &grid, campaign_mode)?;

    let pmf = result.trigger_pmf();
    let ela = match (&frontier, pmf.is_empty()) {
        (Some(f), false) => Some(expected_label_accuracy(&pmf, f)),
        _ => None,
    };
    let floor = result
        .victim
        .map(|v| min_fidelity(v.acc_spec, v.acc_spec))
        .transpose()?;
    let config = json!({
        "endpoint": endpoint,
        "latency_budget": latency_budget,
        "query_budget": query_budget,
        "mode": campaign_mode,
        "granularity": grid,
        "zoo": zoo_path.as_ref().map(|p| p.display().to_string()),
        "seed": g.seed,
    });
    let text = match g.format {
        Format::Json => to_json(&attack_json(&result, config, &pmf, ela, floor)),
        Format::Csv => attack_csv(&result, &config, &pmf, ela, floor),
    };
    emit(out.as_deref(), &text)
}

fn attack_json(
    r: &CampaignResult,
    config: Value,
    pmf: &std::collections::BTreeMap<String, f64>,
    ela: Option<f64>,
    floor: Option<f64>,
) -> Value {
    json!({
        "schema_version": CSV_SCHEMA_VERSION,
        "config": config,
        "estimate": r.estimate,
        "victim": r.victim,
        "breakdown": {
            "fingerprinting": r.queries_fingerprinting,
            "labeling": r.queries_labeling,
            "successful": r.queries_successful,
            "failed": r.queries_failed,
            "total": r.queries_fingerprinting + r.queries_labeling,
        },
        "labeled_examples": r.labeled_examples.len(),
        "trigger_histogram": r.trigger_histogram,
        "trigger_pmf": pmf,
        "labeling_goodput": r.labeling_goodput(),
        "surrogates": {
            "expected_label_accuracy": ela,
            "fidelity_floor_at_victim_accuracy": floor,
        },
    })
}

fn attack_csv(
    r: &CampaignResult,
    config: &Value,
    pmf: &std::collections::BTreeMap<String, f64>,
    ela: Option<f64>,
    floor: Option<f64>,
) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::new();
    let _ = writeln!(out, "# zoolab attack schema_version={CSV_SCHEMA_VERSION}");
    let _ = writeln!(out, "# {config}");
    out.push_str("section,key,value\n");
    let rows = [
        (
            "breakdown",
            "fingerprinting",
            r.queries_fingerprinting.to_string(),
        ),
        ("breakdown", "labeling", r.queries_labeling.to_string()),
        ("breakdown", "successful", r.queries_successful.to_string()),
        ("breakdown", "failed", r.queries_failed.to_string()),
        (
            "breakdown",
            "total",
            (r.queries_fingerprinting + r.queries_labeling).to_string(),
        ),
        ("victim", "acc_spec", opt(r.victim.map(|v| v.acc_spec))),
        ("victim", "lat_spec", opt(r.victim.map(|v| v.lat_spec))),
        ("surrogate", "labeling_goodput", opt(r.labeling_goodput())),
        ("surrogate", "expected_label_accuracy", opt(ela)),
        ("surrogate", "fidelity_floor_at_victim_accuracy", opt(floor)),
    ];
    for (section, key, value) in rows {
        let _ = writeln!(out, "{section},{key},{value}");
    }
    for (id, p) in pmf {
        let _ = writeln!(out, "pmf,{id},{p}");
    }
    out
}

fn out_dir(arg: Option<PathBuf>, cfg: &FileConfig) -> anyhow::Result<PathBuf> {
    let dir = arg
        .or(cfg.str("out_dir")?.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn complexity(a: ComplexityArgs, cfg: &FileConfig, g: &Globals) -> anyhow::Result<()> {
    let sizes = match a.sizes {
        Some(s) => s,
        None => cfg
            .f64s("sizes")?
            .map(|v| v.into_iter().map(|x| x as usize).collect())
            .unwrap_or_else(|| vec![10, 50, 100, 250, 500, 1000]),
    };
    let trials = match a.trials {
        Some(t) => t,
        None => cfg.u64("trials")?.map(|t| t as u32).unwrap_or(10),
    };
    let config = ComplexityConfig {
        sizes,
        trials,
        granularity: grid(&a.grid, cfg, ComplexityConfig::default_granularity())?,
        seed: g.seed,
    };
    let dir = out_dir(a.out_dir, cfg)?;
    let report = complexity_experiment(&config).map_err(|e| match e {
        Error::InfeasibleSpec(m) => config_err(format!("infeasible zoo spec: {m}")),
        other => other.into(),
    })?;
    let path = dir.join("complexity.csv");
    fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    let fit = report.fit.as_ref();
    let summary = json!({
        "csv": path.display().to_string(),
        "config": report.config,
        "rows": report.rows.len(),
        "means": report.means,
        "slope": fit.map(|f| f.slope),
        "intercept": fit.map(|f| f.intercept),
        "r2": fit.map(|f| f.r2),
        "bound_violations": report.bound_violations,
    });
    experiment_summary(g.format, &summary)
}

fn tradeoff(a: TradeoffArgs, cfg: &FileConfig, g: &Globals) -> anyhow::Result<()> {
    let budgets = a
        .budgets
        .or(cfg.f64s("budgets")?)
        .unwrap_or_else(|| vec![13.0]);
    let epsilons = a
        .epsilons
        .or(cfg.f64s("epsilons")?)
        .unwrap_or_else(|| vec![1000.0, 100.0, 50.0, 10.0]);
    let trials = match a.trials {
        Some(t) => t,
        None => cfg.u64("trials")?.map(|t| t as u32).unwrap_or(30),
    };
    let query_budget = a
        .query_budget
        .or(cfg.u64("query_budget")?)
        .unwrap_or(DEFAULT_QUERY_BUDGET);
    let zoo_path = a.zoo.or(cfg.str("zoo")?.map(PathBuf::from));
    if epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(config_err("epsilons must be positive"));
    }
    let zoo = match &zoo_path {
        Some(p) => load_zoo(p)?,
        None => reference_zoo(),
    };
    let frontier = zoo.frontier()?;
    let mut config = TradeoffConfig::new(budgets, epsilons, trials, g.seed);
    config.query_budget = query_budget;
    let dir = out_dir(a.out_dir, cfg)?;
    let report = tradeoff_experiment(&frontier, &zoo.granularity, &config)?;
    let path = dir.join("tradeoff.csv");
    fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    let summary = json!({
        "csv": path.display().to_string(),
        "config": report.config,
        "zoo": zoo_path.map(|p| p.display().to_string()),
        "rows": report.rows.len(),
        "means": report.means(),
    });
    experiment_summary(g.format, &summary)
}

fn experiment_summary(format: Format, summary: &Value) -> anyhow::Result<()> {
    let text = match format {
        Format::Json => to_json(summary),
        Format::Csv => {
            let csv = summary["csv"]
                .as_str()
                .ok_or_else(|| anyhow!("summary without csv path"))?;
            format!("{csv}\n")
        }
    };
    emit(None, &text)
}
