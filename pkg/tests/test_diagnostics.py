import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amekd.diagnostics import (
    EvalReport,
    alignment_metrics,
    evaluate,
    fit_loglog_slope,
    gap_point,
    gap_sweep,
    gradient_angle,
    harmonic_mean,
    margin_check,
)
from amekd.distill import StudentModel, TrainConfig
from amekd.errors import InvalidArgumentError, UndefinedAngleError
from amekd.synthgen import ClassGeometry, TeacherModel, generate


class TestGradientAngle:
    def test_identical(self):
        assert gradient_angle([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_matches_arccos(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = rng.normal(size=5), rng.normal(size=5)
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            assert gradient_angle(a, b) == pytest.approx(math.degrees(math.acos(cos)), abs=1e-9)

    def test_orthogonal(self):
        assert gradient_angle([1.0, 0.0], [0.0, 3.0]) == pytest.approx(90.0)

    def test_45(self):
        assert gradient_angle([1.0, 0.0], [1.0, 1.0]) == pytest.approx(45.0, abs=1e-12)

    def test_opposite(self):
        assert gradient_angle([1.0, 0.0], [-2.0, 0.0]) == pytest.approx(180.0)

    def test_zero_gradient(self):
        with pytest.raises(UndefinedAngleError):
            gradient_angle([0.0, 0.0], [1.0, 0.0])

    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)),
           arrays(np.float64, 6, elements=st.floats(-10, 10)),
           st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, g1, g2, a, b):
        if np.linalg.norm(g1) < 1e-3 or np.linalg.norm(g2) < 1e-3:
            return
        assert abs(gradient_angle(a * g1, b * g2) - gradient_angle(g1, g2)) <= 1e-9


class TestHarmonicMean:
    def test_reference_row(self):
        # Base 83.31 / New 77.30 reported with HM 80.19
        assert harmonic_mean(83.31, 77.30) == pytest.approx(80.19, abs=0.005)

    @pytest.mark.parametrize("x", [0.5, 50.0, 100.0])
    def test_equal_inputs(self, x):
        assert harmonic_mean(x, x) == pytest.approx(x)

    def test_annihilator(self):
        assert harmonic_mean(90.0, 0.0) == 0.0
        assert harmonic_mean(0.0, 0.0) == 0.0


class TestEvaluate:
    @pytest.fixture
    def ds(self):
        return generate(ClassGeometry(noise_scale=0.0, boundary_fraction=0.0), 5, 1)

    def test_perfect_student(self, ds):
        rep = evaluate(StudentModel(ds.texts.copy()), ds)
        assert rep.base_acc == rep.new_acc == rep.hm == 100.0
        assert rep.per_class_acc == [100.0] * 4

    def test_new_classes_restricted(self, ds):
        # swap the two new-class rows: new accuracy drops, base is untouched
        texts = ds.texts.copy()
        texts[[2, 3]] = texts[[3, 2]]
        rep = evaluate(StudentModel(texts), ds)
        assert rep.base_acc == 100.0 and rep.new_acc == 0.0 and rep.hm == 0.0

    def test_ties_lowest_index(self):
        ds = generate(ClassGeometry(num_classes=2, noise_scale=0.0, boundary_fraction=0.0), 2, 1)
        student = StudentModel(np.vstack([ds.texts[0], ds.texts[0]]))
        rep = evaluate(student, ds, "base")
        assert rep.base_acc == 100.0 and rep.new_acc is None and rep.hm is None

    def test_logit_scale_invariant(self):
        ds = generate(ClassGeometry(), 10, 2)
        texts = np.random.default_rng(0).normal(size=(4, 16))
        a = evaluate(StudentModel(texts, 0.07), ds)
        b = evaluate(StudentModel(texts, 1.3), ds)
        assert a == b

    def test_empty_split(self):
        ds = generate(ClassGeometry(num_classes=2), 3, 1)
        with pytest.raises(InvalidArgumentError):
            evaluate(StudentModel(ds.texts.copy()), ds.subset([0]), "new")

    def test_bad_split_name(self, ds):
        with pytest.raises(InvalidArgumentError):
            evaluate(StudentModel(ds.texts.copy()), ds, "all")

    def test_report_dict(self):
        rep = EvalReport(80.0, 60.0, harmonic_mean(80.0, 60.0), [80.0, 60.0])
        assert rep.to_dict()["hm"] == pytest.approx(2 * 80 * 60 / 140)


def brute_alignment(groups):
    centres = [[sum(r[k] for r in g) / len(g) for k in range(len(g[0]))] for g in groups]
    dists = [math.dist(r, c) for g, c in zip(groups, centres) for r in g]
    zeta = min(math.dist(a, b) for i, a in enumerate(centres) for b in centres[i + 1:])
    return sum(dists) / len(dists), zeta


class TestAlignment:
    def test_two_class_example(self):
        groups = [[(0, 0), (0, 2)], [(4, 0), (4, 2)]]
        spread, zeta = alignment_metrics({0: np.array(groups[0]), 1: np.array(groups[1])})
        assert brute_alignment(groups) == (1.0, 4.0)
        assert (spread, zeta) == pytest.approx((1.0, 4.0))
        assert margin_check(spread, zeta)

    def test_concentrated_classes(self):
        pts = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 5.0]])
        spread, zeta = alignment_metrics({c: np.repeat(pts[[c]], 4, axis=0) for c in range(3)})
        assert spread == 0.0 and zeta == pytest.approx(3.0)

    def test_full_collapse(self):
        spread, zeta = alignment_metrics({c: np.ones((3, 4)) for c in range(3)})
        assert zeta == 0.0
        assert not margin_check(spread, zeta)

    def test_single_class(self):
        with pytest.raises(InvalidArgumentError):
            alignment_metrics({0: np.ones((3, 2))})

    def test_matches_brute_force_and_permutation(self):
        rng = np.random.default_rng(4)
        groups = {c: rng.normal(size=(int(rng.integers(1, 6)), 3)) + 2 * c for c in range(4)}
        got = alignment_metrics(groups)
        assert got == pytest.approx(brute_alignment([g.tolist() for g in groups.values()]), abs=1e-12)
        perm = {k: groups[v] for k, v in zip(range(4), [2, 0, 3, 1])}
        assert alignment_metrics(perm) == pytest.approx(got, abs=1e-12)


class TestGap:
    def test_identical_train_and_test(self):
        ds = generate(ClassGeometry(), 4, 1)
        point = gap_point(ds, ds, TeacherModel.from_dataset(ds), TrainConfig(epochs=2))
        assert point.gap == 0.0
        assert point.n == 8

    def test_grid_and_seed_minimums(self):
        with pytest.raises(InvalidArgumentError):
            gap_sweep(ClassGeometry(), [4, 8], TrainConfig(), [1, 2, 3])
        with pytest.raises(InvalidArgumentError):
            gap_sweep(ClassGeometry(), [4, 8, 16], TrainConfig(), [1, 2])

    def test_slope_fit(self):
        ns = [8, 16, 32, 64]
        assert fit_loglog_slope(ns, [1 / math.sqrt(n) for n in ns]) == pytest.approx(-0.5)

    def test_small_sweep_nonnegative_mean_gap(self):
        res = gap_sweep(ClassGeometry(), [2, 4, 8], TrainConfig(epochs=5), [1, 2, 3], holdout=400)
        assert len(res.points) == 9
        assert all(g >= -0.01 for g in res.mean_gap.values())

    def test_divergent_points_excluded(self):
        cfg = TrainConfig(learning_rate=1e306, activation="identity", epochs=2)
        with np.errstate(all="ignore"):
            res = gap_sweep(ClassGeometry(), [2, 4, 8], cfg, [1, 2, 3], holdout=100)
        assert all(p.diverged for p in res.points)
        assert res.mean_gap == {}
        assert math.isnan(res.slope)

    def test_parallel_matches_serial(self):
        args = (ClassGeometry(), [2, 4, 8], TrainConfig(epochs=2), [1, 2, 3])
        a = gap_sweep(*args, holdout=100)
        b = gap_sweep(*args, holdout=100, workers=3)
        assert a.points == b.points
