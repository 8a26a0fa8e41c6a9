use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use failattr::campaign::run::{RESULTS_FILE, SUITE_FILE, SWEEP_RESULTS_FILE};
use failattr::campaign::{cmd_gen, cmd_report, cmd_run, cmd_sweep, CampaignConfig, CampaignError};

#[derive(Parser)]
#[command(
    name = "failattr",
    version,
    about = "Failure-attribution campaigns over synthetic UI graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML campaign config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `campaign_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `parallelism`.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the case suite.
    Gen(Common),
    /// Run all configured methods over the suite.
    Run {
        #[command(flatten)]
        common: Common,
        /// Suite to run; generated into the output directory when omitted.
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Run the threshold and likelihood sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Summarize results into `summary.csv` and `report.txt`.
    Report {
        /// Results file; defaults to `<out>/results.jsonl`.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Sweep results; `<out>/sweep_results.jsonl` is used when present.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long, default_value = "campaign-out")]
        out: PathBuf,
    },
    /// Print the default config as TOML.
    Config,
}

fn load(c: &Common) -> Result<CampaignConfig, CampaignError> {
    let mut cfg = match &c.config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.campaign_seed = s;
    }
    if let Some(p) = c.parallelism {
        cfg.parallelism = p;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn suite_path(cfg: &CampaignConfig, suite: Option<PathBuf>) -> Result<PathBuf, CampaignError> {
    match suite {
        Some(p) => Ok(p),
        None => {
            let p = cfg.output_dir.join(SUITE_FILE);
            if p.exists() {
                Ok(p)
            } else {
                cmd_gen(cfg)
            }
        }
    }
}

fn existing(p: PathBuf) -> Option<PathBuf> {
    Path::exists(&p).then_some(p)
}

fn run(cli: Cli) -> Result<(), CampaignError> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = load(&c)?;
            let p = cmd_gen(&cfg)?;
            println!("wrote {} cases to {}", cfg.n_cases, p.display());
        }
        Command::Run { common, suite } => {
            let cfg = load(&common)?;
            let suite = suite_path(&cfg, suite)?;
            let out = cmd_run(&cfg, &suite)?;
            println!("wrote {} ({} case errors)", out.results_path.display(), out.n_errors);
        }
        Command::Sweep { common, suite } => {
            let cfg = load(&common)?;
            let suite = suite_path(&cfg, suite)?;
            let out = cmd_sweep(&cfg, &suite)?;
            println!("wrote {} ({} case errors)", out.results_path.display(), out.n_errors);
        }
        Command::Report { results, sweep, out } => {
            let results = results.unwrap_or_else(|| out.join(RESULTS_FILE));
            let sweep = sweep.or_else(|| existing(out.join(SWEEP_RESULTS_FILE)));
            let (report, path) = cmd_report(&results, sweep.as_deref(), &out)?;
            print!("{}", report.to_text());
            eprintln!("wrote {}", path.display());
        }
        Command::Config => print!("{}", CampaignConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
