"""Smoke test for the must_lab extension.

Build and install first, e.g.
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install target/wheels/must_lab-*.whl
then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import must_lab as ml


def main():
    problem = ml.generate("clusters2d", n_per_class=100, seed=1)
    assert len(problem.sources) == 3 and problem.num_classes == 2

    cfg = ml.TrainerConfig(steps=800, seed=1, record_every=50)
    assert cfg.lambda_ == 0.5 and cfg.variant == "must"
    pair = ml.train(cfg, problem, snapshot_every=20)
    for row in pair.log:
        total = row["loss_teacher_clf"] + cfg.lambda_ * row["loss_student"]
        assert abs(row["loss_teacher_total"] - total) <= 1e-9
    student_acc = ml.accuracy(pair.student.predict(problem.target, 0), problem.eval_labels)
    assert student_acc > 0.8, student_acc

    again = ml.train(cfg, problem, snapshot_every=20)
    assert again.teacher.param_vector() == pair.teacher.param_vector()

    ok, err, _ = ml.check_sigmoid_derivative_identity([x / 100 for x in range(-1000, 1001)])
    assert ok and err < 1e-12
    assert ml.sigmoid_derivative(0.0) == 0.25

    bound = ml.lemma_bound_report(pair.teacher, pair.student, problem.target, pair.teacher_target_domain, 0.5)
    assert bound["passed"], bound["min_slack"]

    eps, counts, _ = ml.margin_probe(pair.teacher, problem.target, pair.teacher_target_domain)
    assert len(eps) == 41 and counts[0] == 0
    assert all(a <= b for a, b in zip(counts, counts[1:]))

    mean_std, avg = ml.consistency_track(pair.snapshots, 10)
    assert len(mean_std) == len(pair.snapshots) - 9 and avg >= 0

    assert ml.confidence_mask([[0.5, 0.5], [0.3, 0.7], [0.05, 0.95]], 0.6) == [False, True, True]

    rv = ml.reverse_validate(ml.TrainerConfig(steps=300), problem, 0)
    assert math.isfinite(rv) and rv >= 0

    try:
        ml.TrainerConfig(lambda_=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative lambda accepted")

    with tempfile.TemporaryDirectory() as out:
        overrides = [f"out_dir={out}", "n_per_class=40", "steps=200"]
        assert len(ml.run_command("gen-data", overrides=overrides)) == 6
        written = [Path(p).name for p in ml.run_command("train", overrides=overrides)]
        assert "student.json" in written
        margin = ml.run_command("analyze-margin", overrides=overrides)
        assert Path(margin[0]).read_text().count("\n") == 42
        teacher = ml.Network.load(str(Path(out) / "train" / "teacher.json"))
        assert teacher.num_domains == 4

    print("must_lab smoke test passed")


if __name__ == "__main__":
    main()
