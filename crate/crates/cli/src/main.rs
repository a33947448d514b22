use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcl_core::bundled;
use rcl_core::config::ConfigDocument;
use rcl_core::csv::{cell, fmt_g17};
use rcl_core::experiment::{run_oracle, run_solve, run_sweep, sweep_csv, Overrides, SweepOptions};
use rcl_core::risk::{axiom_report, RiskSpec};

/// Risk-constrained learning on finite scenario models.
#[derive(Parser)]
#[command(name = "rcl", version)]
struct Cli {
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dual ascent with Slater check; writes dual.csv.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        step0: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        anchor_cap: Option<u64>,
    },
    /// Brute-force primal, dual optimum and randomized optimum; writes oracle.csv.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Skip policy enumeration.
        #[arg(long)]
        dual_only: bool,
    },
    /// Gap over refinement levels; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated levels (default: the config's `levels`).
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
        #[arg(long)]
        dual_only: bool,
    },
    /// Randomized axiom checks for risk specs.
    Axioms {
        /// Specs such as `cvar:0.3` or `musd:1:2` (default: a standard set).
        specs: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file, or `bundled:<name>` for a shipped instance.
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Refinement level for density-based configs.
    #[arg(long)]
    level: Option<usize>,
    /// Output directory for CSV files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            level: self.level,
            ..Overrides::default()
        }
    }
}

const DEFAULT_AXIOM_SPECS: [&str; 11] = [
    "expectation",
    "cvar:0.05",
    "cvar:0.3",
    "cvar:0.7",
    "cvar:1",
    "mad:0",
    "mad:0.5",
    "musd:0:1",
    "musd:1:1",
    "musd:1:2",
    "gmsd:square-relu:1:1",
];

struct Failure {
    code: u8,
    message: String,
}

fn config_error(message: String) -> Failure {
    Failure { code: 1, message }
}

fn load(path: &str) -> Result<ConfigDocument, Failure> {
    let text = match path.strip_prefix("bundled:") {
        Some(name) => bundled::config(name)
            .ok_or_else(|| {
                let names: Vec<&str> = bundled::CONFIGS.iter().map(|(n, _)| *n).collect();
                config_error(format!("unknown bundled config `{name}` (available: {})", names.join(", ")))
            })?
            .to_string(),
        None => fs::read_to_string(path).map_err(|e| config_error(format!("{path}: {e}")))?,
    };
    ConfigDocument::parse(&text).map_err(|e| config_error(format!("{path}:{}:{}: {}", e.line, e.col, e.message)))
}

fn write_csv(dir: &Path, name: &str, body: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| config_error(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn core(e: rcl_core::Error) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| config_error(format!("cannot start {j} workers: {e}")))?;
    }
    match cli.command {
        Command::Solve {
            common,
            step0,
            iters,
            anchor_cap,
        } => {
            let doc = load(&common.config)?;
            let ov = Overrides {
                step0,
                iters,
                anchor_cap,
                ..common.overrides()
            };
            let out = run_solve(&doc, &ov).map_err(core)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            write_csv(&common.out, "dual.csv", &out.dual_csv())?;
            println!("{}", out.summary());
            Ok(out.exit_code() as u8)
        }
        Command::Oracle { common, dual_only } => {
            let doc = load(&common.config)?;
            let opts = SweepOptions {
                dual_only,
                jobs: None,
                overrides: common.overrides(),
            };
            let row = run_oracle(&doc, &opts).map_err(core)?;
            for n in &row.notes {
                eprintln!("note: {n}");
            }
            write_csv(&common.out, "oracle.csv", &sweep_csv(std::slice::from_ref(&row)))?;
            println!(
                "n={} Pstar={} Dstar={} mixed={} rel_gap={}",
                row.n,
                or_none(row.pstar),
                or_none(row.dstar),
                or_none(row.mixed),
                or_none(row.rel_gap)
            );
            Ok(0)
        }
        Command::Sweep {
            common,
            levels,
            dual_only,
        } => {
            let doc = load(&common.config)?;
            let levels = if levels.is_empty() {
                doc.levels()
                    .map(<[usize]>::to_vec)
                    .ok_or_else(|| config_error("sweeps need a density base".into()))?
            } else {
                levels
            };
            if levels.contains(&0) {
                return Err(config_error("levels must be positive".into()));
            }
            let opts = SweepOptions {
                dual_only,
                jobs: None,
                overrides: common.overrides(),
            };
            let rows = run_sweep(&doc, &levels, &opts).map_err(core)?;
            for r in &rows {
                for n in &r.notes {
                    eprintln!("note: n={}: {n}", r.n);
                }
            }
            let csv = sweep_csv(&rows);
            write_csv(&common.out, "sweep.csv", &csv)?;
            print!("{csv}");
            Ok(0)
        }
        Command::Axioms {
            specs,
            trials,
            seed,
            out,
        } => {
            let specs: Vec<String> = if specs.is_empty() {
                DEFAULT_AXIOM_SPECS.iter().map(|s| s.to_string()).collect()
            } else {
                specs
            };
            let mut csv = String::from("spec,coherent,trials,convexity,homogeneity,monotonicity,translation\n");
            for text in &specs {
                let spec: RiskSpec = text.parse().map_err(|e: rcl_core::Error| config_error(e.to_string()))?;
                let r = axiom_report(&spec, trials, seed).map_err(core)?;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    quote(&r.spec),
                    r.coherent,
                    r.trials,
                    fmt_g17(r.convexity),
                    fmt_g17(r.homogeneity),
                    cell(r.monotonicity),
                    cell(r.translation)
                ));
            }
            if let Some(dir) = out {
                write_csv(&dir, "axioms.csv", &csv)?;
            }
            print!("{csv}");
            Ok(0)
        }
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn or_none(x: Option<f64>) -> String {
    x.map(fmt_g17).unwrap_or_else(|| "none".into())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
