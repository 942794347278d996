use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use visitlift::matching::MatchMode;
use visitlift_cli::commands;
use visitlift_cli::config::{KChoice, MatchMethod, RunConfig, CONFIG_ENV};
use visitlift_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "visitlift", version, about = "Store-visit lift measurement pipeline")]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// cap on worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<MatchMode>,
    #[arg(long, global = true)]
    kernel_m: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic campaign
    Synth {
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        lift: Option<f64>,
        #[arg(long)]
        bias: Option<f64>,
    },
    /// Build the location graph
    BuildGraph,
    /// Smooth keyword state over the graph
    Propagate {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Detect hits, lump visits, build daily series
    Visits,
    /// Join device features with visit series
    Features,
    /// Propensity or k-means cluster matching
    Match {
        #[arg(long, value_parser = parse_method)]
        method: Option<MatchMethod>,
        #[arg(long)]
        balanced: bool,
        /// enable the caliper, optionally with a width
        #[arg(long, num_args = 0..=1, default_missing_value = "0")]
        caliper: Option<f64>,
        #[arg(long)]
        adaptive: bool,
        /// clusters of exactly equal scores only
        #[arg(long, conflicts_with_all = ["caliper", "adaptive"])]
        exact: bool,
        #[arg(long)]
        k: Option<KChoice>,
    },
    /// General, balanced and matched lift
    Lift,
    /// Aggregate the lift output into the final report
    Report,
}

fn parse_mode(s: &str) -> Result<MatchMode, String> {
    match s {
        "balanced" => Ok(MatchMode::Balanced),
        "unbalanced" => Ok(MatchMode::Unbalanced),
        _ => Err(format!("mode must be balanced or unbalanced, got `{s}`")),
    }
}

fn parse_method(s: &str) -> Result<MatchMethod, String> {
    match s {
        "sort" => Ok(MatchMethod::Sort),
        "kmeans" => Ok(MatchMethod::Kmeans),
        _ => Err(format!("method must be sort or kmeans, got `{s}`")),
    }
}

fn configure(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(b) = cli.bootstrap {
        cfg.bootstrap = b;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(m) = cli.kernel_m {
        cfg.kernel_m = m;
    }
    match &cli.command {
        Command::Synth { devices, lift, bias } => {
            let spec = cfg.synth.get_or_insert_with(|| {
                let mut s = visitlift::synthgen::ScenarioSpec::null(10_000, 0);
                s.flight_days = cfg.flight.days;
                s.flight_start = cfg.flight.start;
                s
            });
            if let Some(n) = devices {
                spec.n_devices = *n;
            }
            if let Some(l) = lift {
                spec.injected_lift = *l;
            }
            if let Some(b) = bias {
                spec.targeting_bias = *b;
            }
            if cli.seed.is_some() {
                spec.seed = cfg.seed;
            }
        }
        Command::Propagate { steps: Some(s) } => cfg.propagation.steps = *s,
        Command::Match {
            method,
            balanced,
            caliper,
            adaptive,
            exact,
            k,
        } => {
            let mp = &mut cfg.matching;
            if let Some(m) = method {
                mp.method = *m;
            }
            mp.balanced |= *balanced;
            if let Some(w) = caliper {
                mp.caliper = true;
                if *w > 0.0 {
                    mp.caliper_width = *w;
                }
            }
            if *adaptive {
                mp.caliper = true;
                mp.adaptive = true;
            }
            if *exact {
                mp.caliper = false;
                mp.adaptive = false;
            }
            if let Some(k) = k {
                mp.k = *k;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = configure(cli)?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::BuildGraph => commands::build_graph_stage(&cfg),
        Command::Propagate { .. } => commands::propagate(&cfg),
        Command::Visits => commands::visits(&cfg),
        Command::Features => commands::features(&cfg),
        Command::Match { .. } => commands::match_stage(&cfg),
        Command::Lift => commands::lift(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
