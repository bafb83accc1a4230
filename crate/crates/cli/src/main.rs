use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynkin::coefficients::validate_assumptions;
use dynkin::scenarios::ScenarioRegistry;
use dynkin_cli::run::{exit, load_config, run, RunRequest};

#[derive(Parser)]
#[command(name = "dynkin", version, about = "Mean-field Dynkin game experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments selected in a config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides DYNKIN_OUT and the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single experiment.
        #[arg(long)]
        only: Option<String>,
    },
    /// List the registered scenarios.
    ListScenarios,
    /// Check a config and audit the scenario's assumptions on its lattice.
    Validate { config: PathBuf },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let registry = ScenarioRegistry::with_builtins();
    match cli.command {
        Command::ListScenarios => {
            for (name, description) in registry.list() {
                println!("{name:<16} {description}");
            }
            code(exit::OK)
        }
        Command::Validate { config } => {
            let (cfg, _) = match load_config(&config, &registry) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: {e}");
                    return code(exit::CONFIG);
                }
            };
            let built = registry
                .build(&cfg.scenario, &cfg.params)
                .map_err(Into::into)
                .and_then(|c| cfg.lattice.build().map(|l| (c, l)));
            let (c, lattice) = match built {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: {e}");
                    return code(exit::CONFIG);
                }
            };
            let report = validate_assumptions(&c, &lattice, 512, cfg.lattice.seed.unwrap_or(0));
            for ch in &report.checks {
                let mark = if ch.passed { "ok  " } else { "FAIL" };
                println!("{mark} {:<28} measured {:.6e}", ch.name, ch.measured);
                if let Some(w) = &ch.witness {
                    println!("     witness: {w}");
                }
            }
            if report.passed() {
                println!("config valid");
                code(exit::OK)
            } else {
                code(exit::INVARIANT)
            }
        }
        Command::Run { config, out, only } => {
            let req = RunRequest {
                config_path: &config,
                out,
                only,
            };
            match run(req, &registry) {
                Ok(outcome) => {
                    for r in &outcome.manifest.experiments {
                        println!("{:<10} {:?} {}", r.name, r.status, r.files.join(" "));
                        if let Some(e) = &r.error {
                            eprintln!("{}: {e}", r.name);
                        }
                        for c in r.checks.iter().filter(|c| !c.passed) {
                            let kind = if c.hard { "hard" } else { "soft" };
                            eprintln!("{}: {kind} check {} failed ({:e} > {:e})", r.name, c.name, c.value, c.tolerance);
                        }
                    }
                    println!("manifest {}", outcome.manifest_path.display());
                    code(outcome.exit_code)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(exit::CONFIG)
                }
            }
        }
    }
}
