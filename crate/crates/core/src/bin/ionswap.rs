use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ionswap::app::{execute, Command, Output};
use ionswap::config::RunConfig;
use ionswap::Error;

#[derive(Parser)]
#[command(name = "ionswap", version, about = "Ion swapping and shuttling simulations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 picks one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Also write tables as CSV when `csv`.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Calibrate the surrogate trap to the secular frequency targets.
    Calibrate,
    /// Two-ion normal modes against their closed forms.
    Modes,
    /// Simulate the swap and report per-mode excitation.
    Swap,
    /// Tune the swap ramp for minimal excitation.
    OptimizeSwap,
    /// Process tomography of the swap (or identity).
    Tomography,
    /// Three-ion reordering truth table.
    Reorder,
    /// Spin-echo field map along the trap.
    FieldMap,
    /// Fit mean phonon numbers to sideband data.
    RabiFit,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Calibrate => Command::Calibrate,
            Cmd::Modes => Command::Modes,
            Cmd::Swap => Command::Swap,
            Cmd::OptimizeSwap => Command::OptimizeSwap,
            Cmd::Tomography => Command::Tomography,
            Cmd::Reorder => Command::Reorder,
            Cmd::FieldMap => Command::FieldMap,
            Cmd::RabiFit => Command::RabiFit,
        }
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<(), Error> {
    std::fs::write(dir.join(name), body)?;
    Ok(())
}

fn save(dir: &Path, command: Command, out: &Output, format: Format) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(&out.json)?;
    json.push('\n');
    write(dir, &format!("{}.json", command.name()), &json)?;
    if format == Format::Csv {
        for (name, body) in &out.tables {
            write(dir, name, body)?;
        }
    }
    for (name, body) in &out.extra {
        write(dir, name, body)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let command = Command::from(cli.command);
    let out = execute(command, &cfg, cli.seed)?;
    print!("{}", out.summary);
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    save(&dir, command, &out, cli.format)?;
    eprintln!("wrote {}", dir.join(format!("{}.json", command.name())).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
