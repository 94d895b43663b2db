//! Experiment orchestration: JSON configuration, the end-to-end run with its
//! artifacts, and the Monte Carlo oracle battery behind `mc-check`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::certificate::{
    assemble_certificate, default_ell, default_k_max, interpolation_errors, verify_nondegeneracy,
    CertificateError, CertifyReport,
};
use crate::gauss::{mc_expectation_many, relu_low_order_moments, relu_pair_kernel, sigma_ge2_kernel};
use crate::geometry::{diagnose, gap_surrogate, partition, GeometryDiagnostics, McSettings};
use crate::hermite::relu_table;
use crate::network::{sample_teacher, NetworkError, Student, Teacher, TeacherSpec};
use crate::numeric::{dot, normalize};
use crate::objective::population_square_loss;
use crate::train::{run_pipeline_with, PipelineEvent, RunOptions, Schedule, TrainError, TrainTrace};

pub const SCHEMA_VERSION: u32 = 1;

/// Mass above which a neuron counts as massive in the summary.
pub const MASSIVE_NEURON: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error("Monte Carlo checks failed: {0} of {1} outside 5 standard errors")]
    OracleMismatch(usize, usize),
}

impl HarnessError {
    /// 2 for invalid input, 3 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } | HarnessError::Network(_) => 2,
            HarnessError::Train(TrainError::InvalidSchedule(_)) | HarnessError::Train(TrainError::Network(_)) => 2,
            HarnessError::Train(_) => 3,
            HarnessError::Certificate(
                CertificateError::InvalidOrder { .. }
                | CertificateError::TableTooShort { .. }
                | CertificateError::GridTooSmall(_)
                | CertificateError::BadIndex(_),
            ) => 2,
            HarnessError::Certificate(_) | HarnessError::OracleMismatch(..) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub d: usize,
    pub r: usize,
    pub m_star: usize,
    pub delta_min: f64,
    pub a_magnitudes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_floor: Option<f64>,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn spec(&self) -> TeacherSpec {
        TeacherSpec {
            d: self.d,
            r: self.r,
            m_star: self.m_star,
            delta_min: self.delta_min,
            a_magnitudes: self.a_magnitudes.clone(),
            kappa_floor: self.kappa_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub m: usize,
    pub seed: u64,
}

/// Schedule fields; anything left out takes the default for `(d, eps0)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eps0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_stage2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda30: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halvings: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_epoch_cap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_stop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
}

impl ScheduleConfig {
    pub fn resolve(&self, d: usize) -> Schedule {
        let mut s = Schedule::with_defaults(d, self.eps0);
        if let Some(v) = self.lambda_stage2 {
            s.lambda_stage2 = v;
            s.lambda30 = v;
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        take!(eta0, lambda0, eta2, t2_max, tol2, lambda30, halvings, eta3, per_epoch_cap, c_stop, log_every);
        s
    }
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Run the geometry suite after balancing and at every epoch end.
    #[serde(default = "yes")]
    pub per_epoch: bool,
    /// Residual decomposition settings; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_mc: Option<McSettings>,
    /// Constant in front of the default `delta_sign`.
    #[serde(default = "unit")]
    pub sign_scale: f64,
    /// Write the student after balancing and after every epoch.
    #[serde(default = "yes")]
    pub checkpoints: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            per_epoch: true,
            residual_mc: None,
            sign_scale: 1.0,
            checkpoints: true,
        }
    }
}

fn default_grid() -> usize {
    720
}

fn default_ambient() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    #[serde(default = "default_grid")]
    pub grid_n: usize,
    #[serde(default = "default_ambient")]
    pub ambient_samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Certificate verification; skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifyConfig>,
    pub output_dir: PathBuf,
    /// Adds a `wall_time` column to `trace.csv`.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        self.teacher.seed = seed;
        self.student.seed = seed;
        if let Some(mc) = self.diagnostics.residual_mc.as_mut() {
            mc.seed = seed;
        }
        if let Some(c) = self.certify.as_mut() {
            c.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        let t = &self.teacher;
        if t.a_magnitudes.len() != t.m_star {
            return bad(format!(
                "teacher.a_magnitudes: {} entries for m_star = {}",
                t.a_magnitudes.len(),
                t.m_star
            ));
        }
        if t.r == 0 || t.r > t.d {
            return bad(format!("teacher.r: need 1 <= r <= d = {}, got {}", t.d, t.r));
        }
        if self.student.m == 0 || self.student.m % 2 == 1 {
            return bad(format!("student.m: need a positive even width, got {}", self.student.m));
        }
        if !(self.schedule.eps0 > 0.0 && self.schedule.eps0.is_finite()) {
            return bad(format!("schedule.eps0: must be positive, got {}", self.schedule.eps0));
        }
        self.schedule
            .resolve(t.d)
            .validate()
            .map_err(|e| HarnessError::Config(format!("schedule: {e}")))?;
        if let Some(mc) = &self.diagnostics.residual_mc {
            if mc.n == 0 {
                return bad("diagnostics.residual_mc.n: must be positive".into());
            }
        }
        if let Some(c) = &self.certify {
            if c.grid_n < 90 {
                return bad(format!("certify.grid_n: must be at least 90, got {}", c.grid_n));
            }
        }
        Ok(())
    }
}

/// Fixed-schema run summary written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub schema_version: u32,
    /// `"ok"` or `"error"`.
    pub status: String,
    pub error: Option<String>,
    pub final_square_loss: Option<f64>,
    pub final_lambda: Option<f64>,
    pub final_gap: Option<f64>,
    pub per_teacher_min_angle: Vec<Option<f64>>,
    pub per_teacher_min_angle_aligned: Vec<Option<f64>>,
    pub max_massive_angle: Option<f64>,
    pub dead_neurons: Option<usize>,
    pub weighted_far: Option<f64>,
    pub param_norm_sq: Option<f64>,
    pub epochs_run: usize,
    pub epochs_converged: usize,
    pub rho_fit: Option<f64>,
    pub p_norm_est: Option<f64>,
}

/// One line of `diagnostics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneRecord {
    /// 0 for the balanced Stage-2 output, `k` for the end of epoch `k`.
    pub epoch: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_balance_violation: f64,
    pub param_norm_sq: f64,
    pub max_massive_angle: f64,
    pub diagnostics: Option<GeometryDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub teacher: Teacher,
    pub student: Student,
    pub trace: TrainTrace,
    pub milestones: Vec<MilestoneRecord>,
    pub summary: Summary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, HarnessError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn summarize(
    student: Option<&Student>,
    teacher: &Teacher,
    lambda: Option<f64>,
    epochs_run: usize,
    epochs_converged: usize,
) -> Summary {
    let report = student.map(|s| partition(s, teacher));
    Summary {
        schema_version: SCHEMA_VERSION,
        status: "ok".into(),
        error: None,
        final_square_loss: student.map(|s| population_square_loss(s, teacher)),
        final_lambda: lambda,
        final_gap: student.zip(lambda).map(|(s, l)| gap_surrogate(s, teacher, l)),
        per_teacher_min_angle: report.as_ref().map_or_else(Vec::new, |r| r.min_close.clone()),
        per_teacher_min_angle_aligned: report.as_ref().map_or_else(Vec::new, |r| r.min_close_aligned.clone()),
        max_massive_angle: report.as_ref().map(|r| r.max_angle_above_mass(MASSIVE_NEURON)),
        dead_neurons: report.as_ref().map(|r| r.dead),
        weighted_far: report.as_ref().map(|r| r.weighted_far),
        param_norm_sq: student.map(Student::param_norm_sq),
        epochs_run,
        epochs_converged,
        rho_fit: None,
        p_norm_est: None,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.17e}"))
}

/// Runs the full pipeline and writes every artifact under `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    for dir in [out.clone(), out.join("plotdata"), out.join("checkpoints")] {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let teacher = sample_teacher(&cfg.teacher.spec(), cfg.teacher.seed)?;
    write_json(&out.join("teacher.json"), &teacher)?;
    let schedule = cfg.schedule.resolve(teacher.dim());
    let table = relu_table();

    let ell = cfg
        .certify
        .as_ref()
        .and_then(|c| c.ell)
        .unwrap_or_else(|| default_ell(teacher.width(), teacher.delta_sep));
    let k_max = cfg.certify.as_ref().and_then(|c| c.k_max).unwrap_or(default_k_max(ell));
    let mut cert = assemble_certificate(&teacher, &table, ell, k_max);
    let p_norm = cert.as_ref().ok().map(|c| c.p_norm_est);

    let mut milestones = Vec::new();
    let mut last: Option<(Student, f64)> = None;
    let mut epochs_run = 0;
    let mut epochs_converged = 0;
    let mut io_failure: Option<HarnessError> = None;
    let diag = &cfg.diagnostics;
    let result = run_pipeline_with(
        &teacher,
        &schedule,
        cfg.student.m,
        cfg.student.seed,
        RunOptions {
            record_wall_time: cfg.record_wall_time,
        },
        |event| {
            let (epoch, lambda, student, iterations, converged, viol) = match event {
                PipelineEvent::Stage1(s) => {
                    last = Some(((*s).clone(), schedule.lambda0));
                    return;
                }
                PipelineEvent::Stage2 { student, .. } => {
                    last = Some(((*student).clone(), schedule.lambda_stage2));
                    return;
                }
                PipelineEvent::Balanced(s) => (0, schedule.lambda30, *s, 0, true, crate::train::balance_violation(s)),
                PipelineEvent::EpochEnd { epoch, lambda, outcome } => {
                    epochs_run += 1;
                    epochs_converged += usize::from(outcome.converged);
                    (
                        *epoch,
                        *lambda,
                        &outcome.student,
                        outcome.iterations,
                        outcome.converged,
                        outcome.max_balance_violation,
                    )
                }
                PipelineEvent::Initialized(_) => return,
            };
            last = Some((student.clone(), lambda));
            let diagnostics = diag
                .per_epoch
                .then(|| diagnose(student, &teacher, lambda, p_norm, diag.residual_mc, diag.sign_scale));
            milestones.push(MilestoneRecord {
                epoch,
                lambda,
                iterations,
                converged,
                max_balance_violation: viol,
                param_norm_sq: student.param_norm_sq(),
                max_massive_angle: partition(student, &teacher).max_angle_above_mass(MASSIVE_NEURON),
                diagnostics,
            });
            if diag.checkpoints && io_failure.is_none() {
                let path = out.join("checkpoints").join(format!("epoch_{epoch:02}.json"));
                if let Err(e) = write_json(&path, student) {
                    io_failure = Some(e);
                }
            }
        },
    );
    if let Some(e) = io_failure {
        return Err(e);
    }
    write_milestones(&out.join("diagnostics.jsonl"), &milestones)?;

    let mut summary;
    let (student, trace) = match result {
        Ok(v) => v,
        Err(e) => {
            summary = summarize(
                last.as_ref().map(|(s, _)| s),
                &teacher,
                last.as_ref().map(|(_, l)| *l),
                epochs_run,
                epochs_converged,
            );
            summary.status = "error".into();
            summary.error = Some(e.to_string());
            summary.p_norm_est = p_norm;
            write_json(&out.join("summary.json"), &summary)?;
            return Err(e.into());
        }
    };
    let final_lambda = if schedule.halvings == 0 {
        schedule.lambda30
    } else {
        schedule.lambda3(schedule.halvings - 1)
    };
    summary = summarize(Some(&student), &teacher, Some(final_lambda), epochs_run, epochs_converged);
    summary.p_norm_est = p_norm;

    write_json(&out.join("student_final.json"), &student)?;
    let trace_path = out.join("trace.csv");
    let mut f = create_file(&trace_path)?;
    trace.write_csv(&mut f, cfg.record_wall_time).map_err(io_err(&trace_path))?;
    f.flush().map_err(io_err(&trace_path))?;
    write_plotdata(out, &trace, &milestones)?;

    let mut cert_failure = None;
    if let Some(c) = &cfg.certify {
        match cert.as_mut() {
            Ok(cert) => match verify_nondegeneracy(cert, &teacher, c.grid_n, c.ambient_samples, c.seed) {
                Ok(v) => summary.rho_fit = Some(v.rho_fit),
                Err(e) => {
                    summary.rho_fit = cert.rho_fit;
                    cert_failure = Some(e);
                }
            },
            Err(_) => cert_failure = cert.err(),
        }
    }
    if let Some(e) = &cert_failure {
        summary.status = "error".into();
        summary.error = Some(e.to_string());
    }
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(e) = cert_failure {
        return Err(e.into());
    }
    Ok(ExperimentOutcome {
        teacher,
        student,
        trace,
        milestones,
        summary,
    })
}

fn write_milestones(path: &Path, milestones: &[MilestoneRecord]) -> Result<(), HarnessError> {
    let mut f = create_file(path)?;
    for m in milestones {
        let line = serde_json::to_string(m).map_err(|e| HarnessError::Config(e.to_string()))?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

fn write_plotdata(out: &Path, trace: &TrainTrace, milestones: &[MilestoneRecord]) -> Result<(), HarnessError> {
    let path = out.join("plotdata").join("gap.csv");
    let mut f = create_file(&path)?;
    let mut body = String::from("stage,epoch,iter,lambda,gap\n");
    for r in &trace.records {
        body.push_str(&format!(
            "{},{},{},{:.17e},{:.17e}\n",
            r.stage, r.epoch, r.iter, r.lambda, r.gap
        ));
    }
    f.write_all(body.as_bytes()).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;

    let path = out.join("plotdata").join("angles.csv");
    let mut f = create_file(&path)?;
    let mut body = String::from("epoch,lambda,teacher,min_angle,min_angle_aligned,mass,weighted_far\n");
    for m in milestones {
        let Some(d) = &m.diagnostics else { continue };
        let p = &d.partition;
        for i in 0..p.mass.len() {
            body.push_str(&format!(
                "{},{:.17e},{},{},{},{:.17e},{:.17e}\n",
                m.epoch,
                m.lambda,
                i,
                fmt_opt(p.min_close[i]),
                fmt_opt(p.min_close_aligned[i]),
                p.mass[i],
                p.weighted_far
            ));
        }
    }
    f.write_all(body.as_bytes()).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))
}

/// Certificate suite on one teacher.
pub fn certify(
    teacher: &Teacher,
    ell: Option<usize>,
    k_max: Option<usize>,
    grid_n: usize,
    ambient_samples: usize,
    seed: u64,
) -> Result<CertifyReport, HarnessError> {
    let table = relu_table();
    let ell = ell.unwrap_or_else(|| default_ell(teacher.width(), teacher.delta_sep));
    let k_max = k_max.unwrap_or(default_k_max(ell));
    let mut cert = assemble_certificate(teacher, &table, ell, k_max)?;
    let (interp_error, grad_error) = interpolation_errors(&cert, teacher);
    let v = verify_nondegeneracy(&mut cert, teacher, grid_n, ambient_samples, seed)?;
    Ok(CertifyReport {
        ell,
        k_max,
        rho_fit: v.rho_fit,
        interp_error,
        grad_error,
        max_abs_eta: v.max_abs_eta_grid.max(v.max_abs_eta_ambient),
        worst_point: v.worst,
        p_norm_est: cert.p_norm_est,
        alpha1: cert.alpha1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub instance: usize,
    pub closed_form: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n: usize,
    pub seed: u64,
    pub d: usize,
    pub instances: usize,
    pub checks: Vec<OracleCheck>,
    pub failures: usize,
}

fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let (u, _) = normalize(&v, 1e-12).expect("nonzero Gaussian draw");
    u.into_iter().map(|x| x * scale).collect()
}

/// Compares the kernel closed forms with Monte Carlo on random instances:
/// `E[relu(w.x) relu(u.x)]`, `E[relu(w.x)]`, `E[relu(w.x) x]` and the
/// `sigma_{>=2}` kernel. A check passes within 5 standard errors.
pub fn mc_check(n: usize, seed: u64, instances: usize, d: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut checks = Vec::new();
    for inst in 0..instances {
        let (sw, su) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        let w = random_vector(&mut rng, d, sw);
        let u = random_vector(&mut rng, d, su);
        let wb = random_vector(&mut rng, d, 1.0);
        let ub = random_vector(&mut rng, d, 1.0);
        let (mean, first) = relu_low_order_moments(&w);
        let mut closed = vec![relu_pair_kernel(&w, &u), sigma_ge2_kernel(&wb, &ub).expect("unit inputs"), mean];
        closed.extend(first);
        let sigma2 = |z: f64| z.max(0.0) - inv - 0.5 * z;
        let est = mc_expectation_many(
            |x, out| {
                let zw = dot(&w, x);
                out[0] = zw.max(0.0) * dot(&u, x).max(0.0);
                out[1] = sigma2(dot(&wb, x)) * sigma2(dot(&ub, x));
                out[2] = zw.max(0.0);
                for (o, xi) in out[3..].iter_mut().zip(x) {
                    *o = zw.max(0.0) * xi;
                }
            },
            closed.len(),
            d,
            n,
            seed.wrapping_mul(1_000_003).wrapping_add(inst as u64),
        );
        for (k, (c, e)) in closed.iter().zip(&est).enumerate() {
            let name = match k {
                0 => "relu_pair_kernel".to_string(),
                1 => "sigma_ge2_kernel".to_string(),
                2 => "relu_mean".to_string(),
                _ => format!("relu_first_moment[{}]", k - 3),
            };
            checks.push(OracleCheck {
                name,
                instance: inst,
                closed_form: *c,
                mc_mean: e.mean,
                mc_stderr: e.stderr,
                pass: e.agrees_with(*c, 5.0),
            });
        }
    }
    let failures = checks.iter().filter(|c| !c.pass).count();
    OracleReport {
        n,
        seed,
        d,
        instances,
        checks,
        failures,
    }
}
