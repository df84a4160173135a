use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use torus_forge::commands::{self, CertKind, DiophArgs};
use torus_forge::{ExperimentConfig, ForgeError, Outcome};

/// Numerical experiments on invariant tori of nearly integrable Hamiltonians.
#[derive(Debug, Parser)]
#[command(name = "torus-forge", version)]
struct Cli {
    /// TOML experiment file; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "TORUS_FORGE_JOBS", default_value_t = 0)]
    jobs: usize,
    /// Directory for the JSON report and CSV tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the full JSON report to stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tag a frequency grid with small-divisor scans.
    Dioph(DiophCli),
    /// Print the parameter schedule and its validity flags.
    Schedule,
    /// One KAM step under repeated halving of the perturbation.
    Step,
    /// Full KAM iteration at each configured frequency.
    Run {
        /// Also compute frequency jets of the torus.
        #[arg(long)]
        jets: bool,
    },
    /// Approximation rates on the one-dimensional Gevrey-2 model.
    ApproxDemo,
    /// Round trip of torus jets through the Whitney extension.
    Whitney,
    /// Normal form: flatness, symplecticity and action drift.
    Normalform,
    /// Stability-time bound versus distance to the torus set.
    Stability {
        #[arg(long)]
        d_max: Option<f64>,
        /// Run drift experiments up to this time as well.
        #[arg(long)]
        tmax: Option<f64>,
    },
    /// Certificate calculus audits.
    Cert {
        #[arg(value_enum)]
        kind: CertArg,
    },
}

#[derive(Debug, Args)]
struct DiophCli {
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    lo: Option<Vec<f64>>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    hi: Option<Vec<f64>>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k_scan: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CertArg {
    Compose,
    Invert,
}

fn execute(cli: &Cli, cfg: &ExperimentConfig) -> Result<Outcome, ForgeError> {
    match &cli.command {
        Command::Dioph(d) => commands::dioph(
            cfg,
            &DiophArgs { lo: d.lo.clone(), hi: d.hi.clone(), kappa: d.kappa, tau: d.tau, k_scan: d.k_scan, res: d.res },
        ),
        Command::Schedule => commands::schedule(cfg),
        Command::Step => commands::step(cfg),
        Command::Run { jets } => commands::run(cfg, *jets),
        Command::ApproxDemo => commands::approx_demo(cfg),
        Command::Whitney => commands::whitney_cmd(cfg),
        Command::Normalform => commands::normalform(cfg),
        Command::Stability { d_max, tmax } => commands::stability(cfg, *d_max, *tmax),
        Command::Cert { kind } => commands::cert_cmd(
            cfg,
            match kind {
                CertArg::Compose => CertKind::Compose,
                CertArg::Invert => CertKind::Invert,
            },
        ),
    }
}

fn main_inner(cli: &Cli) -> Result<i32, ForgeError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build().map_err(|e| ForgeError::Config(format!("--jobs: {e}")))?;
    let outcome = pool.install(|| execute(cli, &cfg))?;
    if let Some(dir) = &cli.out {
        for p in outcome.write(&cfg, dir)? {
            eprintln!("wrote {}", p.display());
        }
    }
    if cli.json {
        print!("{}", outcome.report_json(&cfg)?);
    } else {
        for (name, ok) in &outcome.flags {
            println!("{:<32} {}", name, if *ok { "ok" } else { "FAILED" });
        }
        println!("{}", if outcome.ok() { "all flags pass" } else { "validity flags failed" });
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match main_inner(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("torus-forge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
