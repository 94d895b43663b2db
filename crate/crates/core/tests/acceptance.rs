//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use recover_core::certificate::{default_ell_t, test_scale, test_statistic};
use recover_core::gauss::mc_expectation;
use recover_core::geometry::{lower_bound_ratio, partition, ResidualModel};
use recover_core::harness::{certify, mc_check, MilestoneRecord, Summary};
use recover_core::hermite::{hermite_normalized, quadrature_inner, relu_table};
use recover_core::network::{init_student, sample_teacher, Student, Teacher, TeacherSpec};
use recover_core::numeric::{dot, norm};
use recover_core::objective::{loss_decomposition, population_gradient, population_square_loss, regularized_loss};
use recover_core::train::stage1_one_step;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Teacher with `m_star` directions in `r` dims and random signed weights
/// of magnitude in `[lo, hi]`.
fn random_teacher(rng: &mut ChaCha8Rng, d: usize, r: usize, m_star: usize, delta: f64, lo: f64, hi: f64) -> Teacher {
    let a = (0..m_star)
        .map(|_| {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * rng.random_range(lo..hi)
        })
        .collect();
    let spec = TeacherSpec {
        d,
        r,
        m_star,
        delta_min: delta,
        a_magnitudes: a,
        kappa_floor: None,
    };
    sample_teacher(&spec, rng.random()).expect("feasible teacher")
}

fn random_student(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Student {
    Student {
        a: gaussian(rng, m),
        w: (0..m).map(|_| gaussian(rng, d)).collect(),
        alpha: StandardNormal.sample(rng),
        beta: gaussian(rng, d),
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut orth: f64 = 0.0;
    for m in 0..=20 {
        for n in 0..=20 {
            let v = quadrature_inner(|x| hermite_normalized(m, x), |x| hermite_normalized(n, x), 200);
            orth = orth.max((v - if m == n { 1.0 } else { 0.0 }).abs());
        }
    }
    let table = relu_table();
    let mut coeff: f64 = 0.0;
    for k in 0..=30 {
        let q = quadrature_inner(|x| x.max(0.0), |x| hermite_normalized(k, x), 200);
        coeff = coeff.max((q - table.get(k)).abs());
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in (2..=300).step_by(2) {
        let v = table.get(k).powi(2) * (k as f64).powf(2.5);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        orth <= 1e-8 && coeff <= 1e-8 && lo >= 0.01 && hi <= 100.0 && secs < 5.0,
        format!("orthonormality err {orth:.1e}, relu coeff err {coeff:.1e}, k^2.5 sigma_k^2 in [{lo:.4}, {hi:.4}], {secs:.2}s"),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let report = mc_check(1_000_000, 2, 20, 8);
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .checks
        .iter()
        .map(|c| (c.mc_mean - c.closed_form).abs() / c.mc_stderr.max(1e-300))
        .fold(0.0, f64::max);
    verdict(
        report.failures == 0 && secs < 60.0,
        format!(
            "{} checks, {} outside 5 stderr, worst {worst:.2} stderr, {secs:.1}s",
            report.checks.len(),
            report.failures
        ),
    )
}

fn flat(s: &Student) -> Vec<f64> {
    let mut v = s.a.clone();
    v.extend(s.w.iter().flatten());
    v.push(s.alpha);
    v.extend(&s.beta);
    v
}

fn unflat(v: &[f64], m: usize, d: usize) -> Student {
    Student {
        a: v[..m].to_vec(),
        w: (0..m).map(|j| v[m + j * d..m + (j + 1) * d].to_vec()).collect(),
        alpha: v[m + m * d],
        beta: v[m + m * d + 1..].to_vec(),
    }
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, m) = (8, 6);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let teacher = random_teacher(&mut rng, d, 2, 2, 0.3, 0.5, 2.0);
        let student = random_student(&mut rng, d, m);
        for lambda in [0.0, 0.1] {
            let g = population_gradient(&student, &teacher, lambda);
            let mut exact = g.g_a.clone();
            exact.extend(g.g_w.iter().flatten());
            exact.push(g.g_alpha);
            exact.extend(&g.g_beta);
            let x = flat(&student);
            for (k, gk) in exact.iter().enumerate() {
                let h = 1e-4 * x[k].abs().max(1.0);
                let at = |s: f64| {
                    let mut y = x.clone();
                    y[k] += s * h;
                    regularized_loss(&unflat(&y, m, d), &teacher, lambda)
                };
                let fd = (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h);
                worst = worst.max((fd - gk).abs() / gk.abs().max(1e-6));
            }
        }
    }
    verdict(worst <= 1e-5, format!("worst coordinate relative error {worst:.2e}"))
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(2..10);
        let r = rng.random_range(1..d.min(3) + 1);
        let m_star = if r == 1 { 1 } else { r + 1 };
        let teacher = random_teacher(&mut rng, d, r, m_star, 0.2, 0.3, 2.0);
        let m = rng.random_range(1..8);
        let student = random_student(&mut rng, d, m);
        let loss = population_square_loss(&student, &teacher);
        let parts = loss_decomposition(&student, &teacher).total();
        worst = worst.max((parts - loss).abs() / (1.0 + loss));
    }
    let mut identity_ok = 0;
    let mut largest: f64 = 0.0;
    for inst in 0..20 {
        let teacher = random_teacher(&mut rng, 6, 2, 3, 0.3, 0.5, 2.0);
        let student = random_student(&mut rng, 6, 5);
        let model = ResidualModel::new(&student, &teacher);
        let est = mc_expectation(
            |x| {
                let (r, r1, r2, r3) = model.parts(&student, &teacher, x);
                (r - r1 - r2 - r3).powi(2)
            },
            6,
            200_000,
            inst,
        );
        largest = largest.max(est.mean);
        identity_ok += usize::from(est.agrees_with(0.0, 5.0));
    }
    verdict(
        worst <= 1e-9 && identity_ok == 20,
        format!("decomposition rel err {worst:.1e} on 200 instances; residual identity {identity_ok}/20, largest MC mean {largest:.1e}"),
    )
}

/// Artifacts of the end-to-end run produced through the CLI.
struct Run {
    dir: PathBuf,
    secs: f64,
    teacher: Teacher,
    summary: Summary,
    milestones: Vec<MilestoneRecord>,
    trace: Vec<[f64; 10]>,
}

fn run_cli(config: &Path, out: &Path) -> (bool, f64) {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_recover"))
        .arg("train")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn recover");
    (status.status.success(), start.elapsed().as_secs_f64())
}

fn load_run(dir: &Path, secs: f64) -> Run {
    let read = |name: &str| fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    let trace = read("trace.csv")
        .lines()
        .skip(1)
        .map(|line| {
            let mut row = [0.0; 10];
            for (slot, field) in row.iter_mut().zip(line.split(',')) {
                *slot = field.parse().expect("numeric field");
            }
            row
        })
        .collect();
    Run {
        dir: dir.to_path_buf(),
        secs,
        teacher: serde_json::from_str(&read("teacher.json")).expect("teacher"),
        summary: serde_json::from_str(&read("summary.json")).expect("summary"),
        milestones: read("diagnostics.jsonl")
            .lines()
            .map(|l| serde_json::from_str(l).expect("milestone"))
            .collect(),
        trace,
    }
}

const STAGE: usize = 0;
const LAMBDA: usize = 3;
const GAP: usize = 6;
const GRAD: usize = 7;
const BALANCE: usize = 8;
const NORM_SQ: usize = 9;

fn criterion_5(run: &Run) -> Verdict {
    let s = &run.summary;
    let loss = s.final_square_loss.unwrap_or(f64::INFINITY);
    let angles: Vec<f64> = s
        .per_teacher_min_angle
        .iter()
        .map(|a| a.unwrap_or(f64::INFINITY))
        .collect();
    let massive = s.max_massive_angle.unwrap_or(f64::INFINITY);
    verdict(
        s.status == "ok" && loss <= 1e-4 && angles.iter().all(|a| *a <= 0.05) && massive <= 0.08 && run.secs <= 600.0,
        format!(
            "final loss {loss:.2e}, per-teacher min angle {angles:?}, worst massive-neuron angle {massive:.4}, {:.1}s",
            run.secs
        ),
    )
}

fn criterion_6(run: &Run) -> Verdict {
    let stage3: Vec<_> = run.trace.iter().filter(|r| r[STAGE] == 3.0).collect();
    let worst = stage3.iter().map(|r| r[BALANCE]).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        !stage3.is_empty() && worst <= 1e-6,
        format!("{} logged stage-3 steps, max (|a|-||w||)/max(1,||w||) = {worst:.2e}", stage3.len()),
    )
}

fn criterion_7(run: &Run) -> Verdict {
    let epochs: Vec<&MilestoneRecord> = run.milestones.iter().filter(|m| m.epoch >= 1).collect();
    let far: Vec<f64> = epochs
        .iter()
        .map(|m| m.diagnostics.as_ref().expect("diagnostics").partition.weighted_far)
        .collect();
    let far_monotone = far.windows(2).all(|w| w[1] <= w[0]);
    let lambda_final = epochs.last().map_or(f64::NAN, |m| m.lambda);
    let far_final = far.last().copied().unwrap_or(f64::INFINITY);

    let k = run.teacher.width();
    let mut angle_breaks = Vec::new();
    for pair in epochs.windows(2) {
        let (p, q) = (
            &pair[0].diagnostics.as_ref().expect("diagnostics").partition,
            &pair[1].diagnostics.as_ref().expect("diagnostics").partition,
        );
        for i in 0..k {
            let before = p.min_close[i].unwrap_or(f64::INFINITY);
            let after = q.min_close[i].unwrap_or(f64::INFINITY);
            if after > before {
                angle_breaks.push(format!("teacher {i} epoch {}->{}: {before:.5}->{after:.5}", pair[0].epoch, pair[1].epoch));
            }
        }
    }

    let bound = 3.3 * run.teacher.a_l1();
    let balanced_norm = run
        .milestones
        .iter()
        .find(|m| m.epoch == 0)
        .map_or(f64::INFINITY, |m| m.param_norm_sq);
    let max_norm = |stages: &[f64]| {
        run.trace
            .iter()
            .filter(|r| stages.contains(&r[STAGE]))
            .map(|r| r[NORM_SQ])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let whole_norm = max_norm(&[1.0, 2.0, 3.0]).max(balanced_norm);
    let stage3_norm = max_norm(&[3.0]).max(balanced_norm);
    let pass = far_monotone && far_final <= 10.0 * lambda_final && angle_breaks.is_empty() && whole_norm <= bound;
    let mut detail = format!(
        "weighted_far non-increasing: {far_monotone}, final {far_final:.2e} vs 10*lambda {:.2e}; norm max {whole_norm:.3} over the run, {stage3_norm:.3} from balancing on, vs {bound:.1}; min-angle increases: {}",
        10.0 * lambda_final,
        angle_breaks.len()
    );
    if !angle_breaks.is_empty() {
        detail.push_str(&format!(" [{}]", angle_breaks.join("; ")));
    }
    verdict(pass, detail)
}

fn criterion_8(run: &Run) -> Verdict {
    let ratios: Vec<f64> = run
        .trace
        .iter()
        .filter(|r| r[STAGE] == 3.0)
        .filter(|r| {
            let l = r[LAMBDA];
            r[GAP] >= l * l && r[GAP] <= l.powf(1.8)
        })
        .map(|r| lower_bound_ratio(r[GRAD] * r[GRAD], r[GAP], r[LAMBDA]))
        .collect();
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        ratios.len() >= 50 && min > 0.0,
        format!("{} in-regime points, min grad_lower_bound_ratio {min:.3e}", ratios.len()),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_9() -> Verdict {
    let start = Instant::now();
    // One in-subspace teacher embedded in every dimension.
    let spec = TeacherSpec {
        d: 2,
        r: 2,
        m_star: 3,
        delta_min: 0.4,
        a_magnitudes: vec![1.0, -1.0, 2.0],
        kappa_floor: None,
    };
    let base = sample_teacher(&spec, 0).expect("teacher");
    let mut medians = Vec::new();
    let mut head: f64 = 0.0;
    for d in [16, 32, 64] {
        let w = base
            .w
            .iter()
            .map(|v| {
                let mut x = vec![0.0; d];
                x[..2].copy_from_slice(v);
                x
            })
            .collect();
        let teacher = Teacher::from_parts(base.a.clone(), w).expect("embedded teacher");
        let h = teacher.h_matrix();
        let s0 = init_student(128, d, 9).expect("init");
        let s1 = stage1_one_step(&s0, &teacher, 1.0, 1.0);
        head = head.max(s1.alpha.abs()).max(norm(&s1.beta));
        let cosines = s0
            .w
            .iter()
            .zip(&s1.w)
            .zip(&s0.a)
            .map(|((w0, w1), a)| {
                let hw: Vec<f64> = (0..d).map(|i| (0..d).map(|k| h[(i, k)] * w0[k]).sum()).collect();
                a.signum() * dot(w1, &hw) / (norm(w1) * norm(&hw))
            })
            .collect();
        medians.push(median(cosines));
    }
    let secs = start.elapsed().as_secs_f64();
    let increasing = medians.windows(2).all(|w| w[1] > w[0]);
    verdict(
        increasing && medians[2] >= 0.9 && head <= 1e-12 && secs < 120.0,
        format!("median cos at d=16,32,64: {medians:.5?}; max |alpha1|,||beta1|| {head:.1e}; {secs:.1}s"),
    )
}

fn criterion_10() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ok = true;
    let mut lines = Vec::new();
    for t in 0..5 {
        let teacher = random_teacher(&mut rng, 24, 2, 3, 0.5, 1.0, 2.0);
        match certify(&teacher, None, None, 720, 1000, t) {
            Ok(rep) => {
                let good = rep.interp_error <= 1e-6
                    && rep.grad_error <= 1e-5
                    && rep.rho_fit > 0.0
                    && rep.max_abs_eta <= 1.0 + 1e-9;
                ok &= good;
                lines.push(format!(
                    "ell {} interp {:.1e} grad {:.1e} rho {:.3} max|eta| {:.6}",
                    rep.ell, rep.interp_error, rep.grad_error, rep.rho_fit, rep.max_abs_eta
                ));
            }
            Err(e) => {
                ok = false;
                lines.push(format!("error: {e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(ok && secs < 300.0, format!("{}; {secs:.1}s", lines.join(" | ")))
}

fn criterion_11(run: &Run) -> Verdict {
    let last = run.milestones.iter().map(|m| m.epoch).max().unwrap_or(0);
    let path = run.dir.join("checkpoints").join(format!("epoch_{last:02}.json"));
    let student: Student = serde_json::from_str(&fs::read_to_string(&path).expect("checkpoint")).expect("student");
    let teacher = &run.teacher;
    let table = relu_table();
    let report = partition(&student, teacher);
    let mut ok = true;
    let mut lines = Vec::new();
    for i in 0..teacher.width() {
        let ell_t = default_ell_t(teacher, i);
        let scale = teacher.a[i].abs() * test_scale(&table, ell_t);
        let intact = test_statistic(&student, teacher, i, ell_t, &table).expect("statistic");
        let mut removed = student.clone();
        for j in 0..removed.width() {
            if report.assign[j] == i {
                removed.a[j] = 0.0;
            }
        }
        let deleted = test_statistic(&removed, teacher, i, ell_t, &table).expect("statistic");
        ok &= deleted > 0.25 * scale && intact.abs() < 0.05 * scale;
        lines.push(format!(
            "teacher {i}: ell_t {ell_t}, intact {:.3}, deleted {:.3} (in units of |a_i|*sum|sigma_k|)",
            intact / scale,
            deleted / scale
        ));
    }
    verdict(ok, lines.join("; "))
}

fn criterion_12(run: &Run, config: &Path, scratch: &Path) -> Verdict {
    let again = scratch.join("rerun");
    let (ok, _) = run_cli(config, &again);
    let mut mismatched = Vec::new();
    let mut compared = 0;
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in fs::read_dir(run.dir.join(&rel)).expect("artifact dir") {
            let entry = entry.expect("entry");
            let rel_path = rel.join(entry.file_name());
            if entry.file_type().expect("type").is_dir() {
                stack.push(rel_path);
                continue;
            }
            compared += 1;
            if fs::read(run.dir.join(&rel_path)).ok() != fs::read(again.join(&rel_path)).ok() {
                mismatched.push(rel_path.display().to_string());
            }
        }
    }
    let mc = serde_json::to_string(&mc_check(200_000, 12, 5, 8)).expect("json")
        == serde_json::to_string(&mc_check(200_000, 12, 5, 8)).expect("json");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let teacher = random_teacher(&mut rng, 12, 2, 3, 0.5, 1.0, 2.0);
    let cert = |_: ()| serde_json::to_string(&certify(&teacher, None, None, 360, 200, 1).expect("certify")).expect("json");
    let cert_same = cert(()) == cert(());
    verdict(
        ok && mismatched.is_empty() && compared > 0 && mc && cert_same,
        format!(
            "train rerun: {compared} files compared, {} differ {mismatched:?}; mc-check identical: {mc}; certify identical: {cert_same}",
            mismatched.len()
        ),
    )
}

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.json");
    let scratch = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(u8, Verdict)> = Vec::new();
    let mut emit = |id: u8, v: Verdict| {
        println!("criterion {id:>2}: {} | {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, v));
    };
    emit(1, criterion_1());
    emit(2, criterion_2());
    emit(3, criterion_3());
    emit(4, criterion_4());

    let first = scratch.path().join("run");
    let (ok, secs) = run_cli(&config, &first);
    if ok {
        let run = load_run(&first, secs);
        emit(5, criterion_5(&run));
        emit(6, criterion_6(&run));
        emit(7, criterion_7(&run));
        emit(8, criterion_8(&run));
        emit(9, criterion_9());
        emit(10, criterion_10());
        emit(11, criterion_11(&run));
        emit(12, criterion_12(&run, &config, scratch.path()));
    } else {
        for id in [5, 6, 7, 8, 11, 12] {
            emit(id, verdict(false, "training run failed".into()));
        }
        emit(9, criterion_9());
        emit(10, criterion_10());
    }
    let failed: Vec<u8> = results.iter().filter(|(_, v)| !v.pass).map(|(id, _)| *id).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
