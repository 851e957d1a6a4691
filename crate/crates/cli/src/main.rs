use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use greenlab_cli::{presets, run, sweep, CliError, Experiment, ExperimentConfig, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "greenlab", version, about = "Green's function experiments for divergence-form parabolic operators")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Use a shipped preset instead of a config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Abort with exit code 3 when a hypothesis fails.
    #[arg(long, global = true)]
    strict: bool,
    /// Leave wall times out of the manifest.
    #[arg(long, global = true)]
    no_timestamps: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hypothesis checks (H1)-(H3).
    Check,
    /// Forward or backward solve with the energy inequality.
    Solve,
    /// Approximate Green's functions at the configured poles.
    Green,
    /// Gaussian envelope fit of the kernels.
    Fit,
    /// Exponentially weighted energies against the rate envelopes.
    Davies,
    /// Local boundedness constants and the De Giorgi trace.
    Degiorgi,
    /// Elliptic kernel by time integration (n = 3, autonomous coefficients).
    Elliptic,
    /// Run the config once per value of a numeric field.
    Sweep {
        /// Dotted config path; defaults to `sweep.axis`.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; defaults to `sweep.values`.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Every experiment listed in the config.
    All,
    /// Print a shipped preset, or list them.
    Presets { name: Option<String> },
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::from_toml(presets::get(name).ok_or_else(|| CliError::Schema(format!("unknown preset {name:?}")))?)?,
        (None, None) => return Err(CliError::Schema("either --config or --preset is required".into())),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.strict |= cli.strict;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<bool, CliError> {
    if let Command::Presets { name } = &cli.command {
        match name {
            Some(n) => print!("{}", presets::get(n).ok_or_else(|| CliError::Schema(format!("unknown preset {n:?}")))?),
            None => presets::PRESETS.iter().for_each(|p| println!("{}", p.0)),
        }
        return Ok(true);
    }
    let cfg = load(cli)?;
    if cfg.workers > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let opts = RunOptions { timestamps: !cli.no_timestamps };
    let single = |e: Experiment| vec![e];
    let selected = match &cli.command {
        Command::Check => single(Experiment::Check),
        Command::Solve => single(Experiment::Solve),
        Command::Green => single(Experiment::Green),
        Command::Fit => single(Experiment::Fit),
        Command::Davies => single(Experiment::Davies),
        Command::Degiorgi => single(Experiment::Degiorgi),
        Command::Elliptic => single(Experiment::Elliptic),
        Command::All => cfg.experiments.clone(),
        Command::Sweep { axis, values } => {
            let axis = axis.clone().unwrap_or_else(|| cfg.sweep.axis.clone());
            let values = values.clone().unwrap_or_else(|| cfg.sweep.values.clone());
            let rows = sweep(&cfg, &axis, &values, &cli.out, opts)?;
            for r in &rows {
                println!("{axis} = {}: {}", r.value, if r.report.pass { "pass" } else { "FAIL" });
            }
            return Ok(rows.iter().all(|r| r.report.pass));
        }
        Command::Presets { .. } => unreachable!(),
    };
    let prepared = cfg.prepare()?;
    let report = run(&prepared, &selected, &cli.out, opts)?;
    for o in &report.outcomes {
        println!("{:<9} {}  {}", o.experiment, if o.pass { "pass" } else { "FAIL" }, o.summary);
    }
    Ok(report.pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("greenlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
