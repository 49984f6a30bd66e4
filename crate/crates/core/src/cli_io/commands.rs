//! The `ctg` command line.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 when the
//! numerical pipeline fails. Diagnostics go to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::config::{parse_config, PipelineConfig};
use super::formats::{
    read_demo_csv, read_report_json, read_trajectory_csv, write_demo_csv, write_report_json, write_trajectory_csv,
    Comparison, ImputationReport,
};
use crate::closed_loop::{demo_generate, simulate, Controller, SimConfig};
use crate::dynamics::DiscreteModel;
use crate::error::Error;
use crate::ioc::{admm_solve_sdp, assemble_residual_system, verify_consistency};
use crate::myopic::CostToGo;

#[derive(Parser, Debug)]
#[command(name = "ctg", version, about = "Mixed-integer MPC with an imputed quadratic cost-to-go")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert demonstrations
    Demo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Impute the cost-to-go matrix from demonstrations
    Impute {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one controller in closed loop
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        controller: ControllerKind,
        /// Imputation report; required for the myopic controller
        #[arg(long)]
        value: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Expert horizon, overriding the config
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the cost and timing of two trajectories (ratios are b / a)
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in consistency checks
    Selftest,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ControllerKind {
    Expert,
    Myopic,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn read(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> std::result::Result<PipelineConfig, Failure> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => parse_config(&read(p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
    }
}

/// `<out>.config` next to a CSV output, holding the effective configuration.
fn write_sidecar(out: &Path, cfg: &PipelineConfig, extra: &[(&str, String)]) -> CmdResult {
    let mut text = cfg.to_text();
    for (k, v) in extra {
        text.push_str(&format!("# {k}: {v}\n"));
    }
    let mut name = out.as_os_str().to_owned();
    name.push(".config");
    write(Path::new(&name), &text)
}

fn echo(cfg: &PipelineConfig) -> BTreeMap<String, String> {
    cfg.entries().into_iter().collect()
}

fn cmd_demo(config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let data = demo_generate(&cfg.params, &cfg.expert, &cfg.demo_initial_states, cfg.demo_steps)?;
    let flagged = data.records.iter().filter(|r| r.flagged).count();
    if flagged > 0 {
        eprintln!("warning: {flagged} records hit the node limit and were left out");
    }
    let usable = data.usable();
    write(out, &write_demo_csv(&usable)?)?;
    write_sidecar(out, &cfg, &[("flagged_records", flagged.to_string())])?;
    println!("wrote {} records to {}", usable.len(), out.display());
    Ok(())
}

fn cmd_impute(config: Option<&Path>, demos: &Path, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let data = read_demo_csv(&read(demos)?, &demos.display().to_string())?;
    if data.is_empty() {
        return Err(Failure::Usage(format!("{}: no records", demos.display())));
    }
    let model = DiscreteModel::fishing(cfg.params.clone())?;
    let options = cfg.residual_options();
    let system = assemble_residual_system(&data, &model, &options)?;
    let value = admm_solve_sdp(&system, &cfg.admm)?;
    if !value.converged {
        eprintln!("warning: ADMM stopped after {} iterations without converging", value.admm_iterations);
    }
    let check = verify_consistency(&data, &model, &options, &value, &cfg.thresholds())?;
    if !check.passed {
        eprintln!("warning: consistency check failed: {}", check.reasons.join("; "));
    }
    let mut echo = echo(&cfg);
    echo.insert("demos".into(), demos.display().to_string());
    let report = ImputationReport::from_value(&value, &options.center, echo);
    write(out, &write_report_json(&report))?;
    println!(
        "P = [[{:e}, {:e}], [{:e}, {:e}]], r_stat_inf = {:e}, r_comp_inf = {:e}, min eigenvalue = {:e}",
        value.p[(0, 0)],
        value.p[(0, 1)],
        value.p[(1, 0)],
        value.p[(1, 1)],
        value.r_stat_inf,
        value.r_comp_inf,
        value.min_eigenvalue
    );
    Ok(())
}

fn cmd_run(
    config: Option<&Path>,
    kind: ControllerKind,
    value: Option<&Path>,
    seed: Option<u64>,
    horizon: Option<usize>,
    out: &Path,
) -> CmdResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = horizon {
        if n == 0 {
            return Err(Failure::Usage("--horizon must be at least 1".into()));
        }
        cfg.expert.horizon = n;
    }
    let mut extra = vec![("controller", format!("{kind:?}").to_lowercase())];
    let controller = match kind {
        ControllerKind::Expert => Controller::Expert(cfg.expert.clone()),
        ControllerKind::Myopic => {
            let Some(path) = value else {
                return Err(Failure::Usage("the myopic controller needs --value".into()));
            };
            let report = read_report_json(&read(path)?, &path.display().to_string())?;
            if !report.converged {
                eprintln!("warning: {} comes from an unconverged imputation", path.display());
                extra.push(("value_converged", "false".into()));
            }
            let center = report.center.clone().unwrap_or_else(|| cfg.center());
            extra.push(("value", path.display().to_string()));
            Controller::Myopic {
                value: CostToGo::new(report.p, center)?,
                settings: cfg.myopic_settings(),
            }
        }
    };
    let sim = SimConfig {
        steps: cfg.steps,
        x0: cfg.x0.clone(),
        controller,
        mismatch: cfg.mismatch,
        noise_std: cfg.noise_std,
        seed: cfg.seed,
        params: cfg.params.clone(),
    };
    let log = match simulate(&sim) {
        Ok(log) => log,
        Err(e) => {
            write(out, &write_trajectory_csv(&e.partial, cfg.record_wall_time)?)?;
            extra.push(("stopped_at_step", e.row.to_string()));
            write_sidecar(out, &cfg, &extra)?;
            return Err(e.source.into());
        }
    };
    let flagged = log.rows.iter().filter(|r| r.flagged).count();
    if flagged > 0 {
        eprintln!("warning: the expert hit its node limit on {flagged} steps");
    }
    write(out, &write_trajectory_csv(&log, cfg.record_wall_time)?)?;
    write_sidecar(out, &cfg, &extra)?;
    println!(
        "cost = {:e}, max wall time = {:e} s over {} steps",
        log.cumulative_cost(),
        log.max_wall_time(),
        log.rows.len()
    );
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, out: &Path) -> CmdResult {
    let ta = read_trajectory_csv(&read(a)?, &a.display().to_string())?;
    let tb = read_trajectory_csv(&read(b)?, &b.display().to_string())?;
    let cmp = Comparison::new(&ta, &tb);
    let echo: BTreeMap<String, String> =
        [("a".to_string(), a.display().to_string()), ("b".to_string(), b.display().to_string())].into();
    write(out, &cmp.to_json(&echo))?;
    println!("cost a = {:e}, cost b = {:e}, ratio = {:e}", cmp.cost.0, cmp.cost.1, cmp.cost_ratio());
    Ok(())
}

fn cmd_selftest() -> CmdResult {
    let results = crate::selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} self-test checks failed")));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Demo { config, out } => cmd_demo(config.as_deref(), out),
        Command::Impute { config, demos, out } => cmd_impute(config.as_deref(), demos, out),
        Command::Run {
            config,
            controller,
            value,
            seed,
            horizon,
            out,
        } => cmd_run(config.as_deref(), *controller, value.as_deref(), *seed, *horizon, out),
        Command::Compare { a, b, out } => cmd_compare(a, b, out),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
