use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use recover_core::geometry::{diagnose, McSettings};
use recover_core::harness::{certify, mc_check, run_experiment, ExperimentConfig, HarnessError};
use recover_core::network::{sample_teacher, Student, Teacher, TeacherSpec};

#[derive(Parser)]
#[command(name = "recover", version, about = "Teacher recovery experiments for two-layer ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a teacher and write teacher.json.
    GenTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 24)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 0.4)]
        delta_min: f64,
        /// Signed second-layer weights, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,-1,2")]
        a: Vec<f64>,
    },
    /// Run the three-stage pipeline from a config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Geometry suite on a student checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        lambda: f64,
        /// Monte Carlo samples for the residual decomposition; off when 0.
        #[arg(long, default_value_t = 0)]
        mc_n: usize,
    },
    /// Assemble and verify the dual certificate of a teacher.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Teacher JSON; sampled from the config when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        ell: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, default_value_t = 720)]
        grid_n: usize,
        #[arg(long, default_value_t = 1000)]
        ambient: usize,
    },
    /// Closed forms against Monte Carlo.
    McCheck {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<Option<ExperimentConfig>, HarnessError> {
    let Some(path) = &common.config else { return Ok(None) };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(Some(cfg))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Prints `value` and, when `out` is set, writes it to `out/name`.
fn emit<T: Serialize>(value: &T, out: Option<&Path>, name: &str) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    text.push('\n');
    print!("{text}");
    if let Some(dir) = out {
        let io = |source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join(name), &text).map_err(|source| HarnessError::Io {
            path: dir.join(name),
            source,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenTeacher { common, d, r, delta_min, a } => {
            let (spec, seed, out) = match load_config(&common)? {
                Some(cfg) => (cfg.teacher.spec(), cfg.teacher.seed, Some(cfg.output_dir)),
                None => (
                    TeacherSpec {
                        d,
                        r,
                        m_star: a.len(),
                        delta_min,
                        a_magnitudes: a,
                        kappa_floor: None,
                    },
                    common.seed.unwrap_or(0),
                    common.out.clone(),
                ),
            };
            let teacher = sample_teacher(&spec, seed)?;
            emit(&teacher, out.as_deref(), "teacher.json")
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?.ok_or_else(|| HarnessError::Config("train needs --config".into()))?;
            let outcome = run_experiment(&cfg)?;
            emit(&outcome.summary, None, "summary.json")
        }
        Command::Diagnose {
            common,
            teacher,
            student,
            lambda,
            mc_n,
        } => {
            let teacher: Teacher = read_json(&teacher)?;
            let student: Student = read_json(&student)?;
            student.check_against(&teacher)?;
            if !(lambda >= 0.0) {
                return Err(HarnessError::Config(format!("--lambda must be nonnegative, got {lambda}")));
            }
            let mc = (mc_n > 0).then(|| McSettings {
                n: mc_n,
                seed: common.seed.unwrap_or(0),
            });
            let report = diagnose(&student, &teacher, lambda, None, mc, 1.0);
            emit(&report, common.out.as_deref(), "diagnostics.json")
        }
        Command::Certify {
            common,
            teacher,
            ell,
            k_max,
            grid_n,
            ambient,
        } => {
            let cfg = load_config(&common)?;
            let teacher = match (&teacher, &cfg) {
                (Some(path), _) => read_json(path)?,
                (None, Some(cfg)) => sample_teacher(&cfg.teacher.spec(), cfg.teacher.seed)?,
                (None, None) => return Err(HarnessError::Config("certify needs --teacher or --config".into())),
            };
            let seed = common.seed.unwrap_or(0);
            let out = common.out.clone().or_else(|| cfg.map(|c| c.output_dir));
            let report = certify(&teacher, ell, k_max, grid_n, ambient, seed)?;
            emit(&report, out.as_deref(), "certificate.json")
        }
        Command::McCheck {
            n,
            seed,
            instances,
            d,
            out,
        } => {
            let report = mc_check(n, seed, instances, d);
            emit(&report, out.as_deref(), "mc_check.json")?;
            if report.failures > 0 {
                return Err(HarnessError::OracleMismatch(report.failures, report.checks.len()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
