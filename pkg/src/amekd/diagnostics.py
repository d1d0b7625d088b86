"""Measurements on trained models: gradient angles, accuracy, class alignment
and the sample-size sweep of the generalization gap."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .distill import StudentModel, TrainConfig, dataset_loss, student_logits, train
from .errors import DivergenceError, InvalidArgumentError, UndefinedAngleError
from .rsm import ProjectionPair, apply_projections
from .synthgen import ClassGeometry, SyntheticDataset, TeacherModel, generate, held_out

log = logging.getLogger(__name__)

HOLDOUT_SIZE = 1000


def gradient_angle(g1, g2) -> float:
    """Angle between two gradients in degrees."""
    g1 = np.ravel(np.asarray(g1, dtype=np.float64))
    g2 = np.ravel(np.asarray(g2, dtype=np.float64))
    if g1.shape != g2.shape:
        raise InvalidArgumentError(f"length mismatch: {g1.size} vs {g2.size}")
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0 or n2 == 0:
        raise UndefinedAngleError("angle with a zero gradient is undefined")
    u, v = g1 / n1, g2 / n2
    # equals arccos(cos(u, v)) but stays accurate near 0 and 180 degrees
    return math.degrees(2.0 * math.atan2(np.linalg.norm(u - v), np.linalg.norm(u + v)))


def harmonic_mean(base: float, new: float) -> float:
    return 2.0 * base * new / (base + new) if base + new > 0 else 0.0


@dataclass
class EvalReport:
    base_acc: float | None
    new_acc: float | None
    hm: float | None
    per_class_acc: list[float | None] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"base_acc": self.base_acc, "new_acc": self.new_acc, "hm": self.hm,
                "per_class_acc": self.per_class_acc}


def _split_accuracy(logits: np.ndarray, labels: np.ndarray, classes: tuple[int, ...]):
    cls = np.asarray(classes)
    mask = np.isin(labels, cls)
    if not mask.any():
        raise InvalidArgumentError(f"no samples for classes {list(classes)}")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    pred = cls[np.argmax(logits[mask][:, cls], axis=1)]
    correct = pred == labels[mask]
    per_class = {int(c): 100.0 * float(correct[labels[mask] == c].mean())
                 for c in cls if np.any(labels[mask] == c)}
    return 100.0 * float(correct.mean()), per_class


def evaluate(student: StudentModel, dataset: SyntheticDataset, split: str = "both") -> EvalReport:
    """Top-1 accuracy (percent) with predictions restricted to each split's classes."""
    if split not in ("base", "new", "both"):
        raise InvalidArgumentError(f"unknown split {split!r}")
    logits = student_logits(student, dataset.images)
    per_class: dict[int, float] = {}
    base = new = None
    if split in ("base", "both"):
        if not dataset.base_classes:
            raise InvalidArgumentError("base split is empty")
        base, pc = _split_accuracy(logits, dataset.labels, dataset.base_classes)
        per_class.update(pc)
    if split in ("new", "both"):
        if not dataset.new_classes:
            raise InvalidArgumentError("new split is empty")
        new, pc = _split_accuracy(logits, dataset.labels, dataset.new_classes)
        per_class.update(pc)
    hm = harmonic_mean(base, new) if split == "both" else None
    return EvalReport(base, new, hm, [per_class.get(c) for c in range(dataset.num_classes)])


def alignment_metrics(rows_by_class) -> tuple[float, float]:
    """Mean row-to-own-centre distance and minimum centre-to-centre distance.

    ``rows_by_class`` maps a class key to an array of that class's manifold
    rows (text row and image rows together).
    """
    groups = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in
              (rows_by_class.values() if isinstance(rows_by_class, dict) else rows_by_class)]
    if len(groups) < 2:
        raise InvalidArgumentError("alignment metrics need at least two classes")
    if any(g.shape[0] == 0 for g in groups):
        raise InvalidArgumentError("every class needs at least one row")
    centres = [g.mean(axis=0) for g in groups]
    dists = np.concatenate([np.linalg.norm(g - c, axis=1) for g, c in zip(groups, centres)])
    zeta = min(float(np.linalg.norm(a - b)) for a, b in combinations(centres, 2))
    return float(dists.mean()), zeta


def manifold_rows_by_class(
    student: StudentModel, projections: ProjectionPair, dataset: SyntheticDataset, classes=None
) -> dict[int, np.ndarray]:
    """Each class's projected text row stacked above its projected image rows."""
    classes = range(dataset.num_classes) if classes is None else classes
    w_out, v_out = apply_projections(projections, student.normalized(), dataset.images)
    out = {}
    for c in classes:
        imgs = v_out[dataset.labels == c]
        if imgs.shape[0]:
            out[int(c)] = np.vstack([w_out[c], imgs])
    return out


def margin_check(intra_spread: float, zeta_hat: float) -> bool:
    """Class centres separated by more than the within-class spread."""
    return zeta_hat > 0 and zeta_hat > intra_spread


def embedding_rows(student, projections, dataset: SyntheticDataset):
    """``(row_id, class, modality, coords)`` for every text and image row."""
    w_out, v_out = apply_projections(projections, student.normalized(), dataset.images)
    rows = []
    for c in range(w_out.shape[0]):
        rows.append((len(rows), c, "text", w_out[c]))
    for j in range(v_out.shape[0]):
        rows.append((len(rows), int(dataset.labels[j]), "image", v_out[j]))
    return rows


@dataclass
class GapPoint:
    n: int
    seed: int
    train_loss: float
    test_loss: float
    gap: float
    delta_hat: float
    diverged: bool = False


def gap_point(
    train_set: SyntheticDataset,
    test_set: SyntheticDataset,
    teacher: TeacherModel,
    cfg: TrainConfig,
) -> GapPoint:
    """Train on ``train_set`` and compare total loss on train vs ``test_set``."""
    student, proj, trace = train(train_set, teacher, cfg)
    tr = train_set.subset(train_set.base_classes)
    te = test_set.subset(test_set.base_classes)
    train_loss = dataset_loss(student, proj, tr.images, teacher, cfg)[0]
    test_loss = dataset_loss(student, proj, te.images, teacher, cfg)[0]
    steps_per_epoch = math.ceil(tr.images.shape[0] / cfg.batch_size)
    last_epoch = trace.rows[-steps_per_epoch:]
    delta_hat = float(np.mean([r.entropy for r in last_epoch]))
    return GapPoint(tr.images.shape[0], cfg.seed, train_loss, test_loss,
                    test_loss - train_loss, delta_hat)


def _sweep_job(args) -> GapPoint:
    geometry, shots, seed, cfg, holdout = args
    data = generate(geometry, shots, seed)
    teacher = TeacherModel.from_dataset(data)
    per_class = math.ceil(holdout / len(data.base_classes))
    test = held_out(data, per_class)
    n_base = data.subset(data.base_classes).images.shape[0]
    try:
        return gap_point(data, test, teacher, cfg.replace(seed=seed))
    except DivergenceError as exc:
        log.warning("gap sweep point shots=%d seed=%d diverged: %s", shots, seed, exc)
        nan = float("nan")
        return GapPoint(n_base, seed, nan, nan, nan, nan, diverged=True)


@dataclass
class GapSweepResult:
    points: list[GapPoint]
    mean_gap: dict[int, float]
    slope: float


def fit_loglog_slope(ns, gaps) -> float:
    """Least-squares slope of ``ln gap`` against ``ln n`` (positive gaps only)."""
    ns = np.asarray(ns, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    keep = gaps > 0
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(ns[keep]), np.log(gaps[keep]), 1)
    return float(slope)


def gap_sweep(
    geometry: ClassGeometry,
    shot_grid,
    cfg: TrainConfig,
    seeds,
    holdout: int = HOLDOUT_SIZE,
    workers: int = 1,
) -> GapSweepResult:
    """Generalization gap in total loss across training-set sizes.

    Each (shots, seed) point trains independently; divergent points are
    flagged and left out of the means and the slope fit.
    """
    shot_grid, seeds = list(shot_grid), list(seeds)
    if len(shot_grid) < 3:
        raise InvalidArgumentError("gap sweep needs at least 3 grid points")
    if len(seeds) < 3:
        raise InvalidArgumentError("gap sweep needs at least 3 seeds")
    jobs = [(geometry, s, seed, cfg, holdout) for s in shot_grid for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_sweep_job, jobs))
    else:
        points = [_sweep_job(j) for j in jobs]
    points.sort(key=lambda p: (p.n, p.seed))
    mean_gap: dict[int, float] = {}
    for n in sorted({p.n for p in points}):
        ok = [p.gap for p in points if p.n == n and not p.diverged]
        if ok:
            mean_gap[n] = float(np.mean(ok))
    slope = fit_loglog_slope(list(mean_gap), list(mean_gap.values()))
    return GapSweepResult(points, mean_gap, slope)
