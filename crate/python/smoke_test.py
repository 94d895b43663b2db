"""Smoke test for the Python bindings.

Build and install first:  pip install -e crates/py --no-build-isolation
"""

import json
import math
import pathlib
import tempfile

import recover

ROOT = pathlib.Path(__file__).resolve().parent.parent


def fd_check(student, teacher, lam):
    grad = recover.population_gradient(student, teacher, lam)
    a = student.a
    h = 1e-5
    for j in range(len(a)):
        up = list(a)
        dn = list(a)
        up[j] += h
        dn[j] -= h
        f = lambda v: recover.regularized_loss(
            recover.Student(v, student.w, student.alpha, student.beta), teacher, lam
        )
        fd = (f(up) - f(dn)) / (2 * h)
        assert abs(fd - grad["g_a"][j]) <= 1e-6 * max(1.0, abs(fd)), (j, fd, grad["g_a"][j])


def main():
    c = recover.hermite_coefficients("relu", 8)
    assert abs(c[0] - 1 / math.sqrt(2 * math.pi)) < 1e-15 and c[1] == 0.5 and c[3] == 0.0

    assert abs(recover.relu_pair_kernel([1.0, 0.0], [1.0, 0.0]) - 0.5) < 1e-15

    teacher = recover.sample_teacher(8, [1.0, -1.0, 2.0], r=2, delta_min=0.4, seed=0)
    assert teacher.dim == 8 and teacher.delta_sep >= 0.4
    assert recover.Teacher.from_json(teacher.to_json()).a == teacher.a

    student = recover.init_student(16, 8, seed=1)
    loss = recover.population_square_loss(student, teacher)
    parts = recover.loss_decomposition(student, teacher)
    assert loss > 0 and isinstance(parts, dict)
    fd_check(student, teacher, 0.1)

    s1 = recover.stage1_one_step(student, teacher)
    assert abs(s1.alpha) < 1e-12 and max(abs(b) for b in s1.beta) < 1e-12
    balanced = recover.balance_norms(s1)
    assert all(abs(abs(a) - math.sqrt(sum(x * x for x in w))) < 1e-12 for a, w in zip(balanced.a, balanced.w))

    report = recover.diagnose(balanced, teacher, 0.01)
    assert len(report["partition"]["assign"]) == 16

    cert = recover.certify(teacher, grid_n=180, ambient=100)
    assert cert["rho_fit"] > 0 and cert["interp_error"] < 1e-6

    oracle = recover.mc_check(n=20000, instances=2)
    assert oracle["failures"] == 0

    try:
        recover.population_square_loss(recover.init_student(4, 3), teacher)
    except ValueError:
        pass
    else:
        raise AssertionError("dimension mismatch accepted")

    cfg = json.loads((ROOT / "configs" / "quick.json").read_text())
    with tempfile.TemporaryDirectory() as out:
        cfg["output_dir"] = out
        summary = recover.run_experiment(json.dumps(cfg))
        assert summary["status"] == "ok", summary
        assert (pathlib.Path(out) / "summary.json").exists()
    print("final square loss", summary["final_square_loss"])
    print("smoke test passed")


if __name__ == "__main__":
    main()
