"""Student scorer, KD loss, entropy-regularized objective and the SGD loop."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DivergenceError, InvalidArgumentError, UndefinedAngleError
from .numerics import as_matrix, log_softmax, normalize_rows
from .rsm import Manifold, ProjectionPair, entropy_and_grad
from .synthgen import SyntheticDataset, TeacherModel, teacher_logits

STUDENT_TEMPERATURE = 0.07
# spawn key separating training randomness from dataset generation under one seed
TRAIN_STREAM = 7


@dataclass
class StudentModel:
    """Trainable class embeddings scored against images by cosine similarity."""

    student_texts: np.ndarray
    logit_temperature: float = STUDENT_TEMPERATURE

    def __post_init__(self):
        self.student_texts = as_matrix(self.student_texts, "student_texts")
        if self.logit_temperature <= 0:
            raise InvalidArgumentError("logit_temperature must be positive")

    @property
    def num_classes(self) -> int:
        return self.student_texts.shape[0]

    def normalized(self) -> np.ndarray:
        return normalize_rows(self.student_texts)

    def copy(self) -> "StudentModel":
        return StudentModel(self.student_texts.copy(), self.logit_temperature)

    @classmethod
    def from_teacher(cls, teacher: TeacherModel, noise: float = 0.0, rng=None,
                     logit_temperature: float | None = None) -> "StudentModel":
        """Copy the teacher's class embeddings, optionally perturbed.

        ``noise`` is the expected norm of the isotropic Gaussian perturbation
        added to each unit row before renormalizing.
        """
        texts = np.array(teacher.teacher_texts, dtype=np.float64)
        if noise > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            texts = texts + rng.standard_normal(texts.shape) * (noise / math.sqrt(texts.shape[1]))
        temp = teacher.teacher_temperature if logit_temperature is None else logit_temperature
        return cls(normalize_rows(texts), temp)

    def to_dict(self) -> dict:
        return {"student_texts": self.student_texts.tolist(),
                "logit_temperature": self.logit_temperature}

    @classmethod
    def from_dict(cls, doc: dict) -> "StudentModel":
        return cls(np.asarray(doc["student_texts"], dtype=np.float64), doc["logit_temperature"])


def student_logits(student: StudentModel, images) -> np.ndarray:
    images = as_matrix(images, "images")
    if images.shape[1] != student.student_texts.shape[1]:
        raise InvalidArgumentError(
            f"image dim {images.shape[1]} does not match student dim {student.student_texts.shape[1]}"
        )
    return np.clip(normalize_rows(images) @ student.normalized().T, -1.0, 1.0) / student.logit_temperature


def kd_loss_and_grad(z_t, z_s, tau: float = 1.0) -> tuple[float, np.ndarray]:
    """Batch-mean ``tau^2 * KL(softmax(z_t/tau) || softmax(z_s/tau))`` and its
    gradient with respect to ``z_s``."""
    z_t = as_matrix(z_t, "z_t")
    z_s = as_matrix(z_s, "z_s")
    if z_t.shape != z_s.shape:
        raise InvalidArgumentError(f"shape mismatch: {z_t.shape} vs {z_s.shape}")
    if z_t.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    n = z_t.shape[0]
    log_pt = log_softmax(z_t, tau)
    log_ps = log_softmax(z_s, tau)
    pt = np.exp(log_pt)
    per_row = np.sum(pt * (log_pt - log_ps), axis=1)
    loss = tau * tau * float(np.mean(np.maximum(per_row, 0.0)))
    if np.array_equal(z_t, z_s):
        loss = 0.0
    grad = (tau / n) * (np.exp(log_ps) - pt)
    return loss, grad


def kd_loss(z_t, z_s, tau: float = 1.0) -> float:
    return kd_loss_and_grad(z_t, z_s, tau)[0]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 0.005
    omega: float = 50.0
    kd_temperature: float = 1.0
    seed: int = 1
    kd_weight: float = 1.0
    manifold_dim: int = 8
    kernel_size: int = 3
    logit_temperature: float = STUDENT_TEMPERATURE
    student_init_noise: float = 1.0
    init_scale: float = 0.1
    activation: str = "tanh"
    freeze_projections: bool = False
    identity_projections: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "manifold_dim", "kernel_size"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        for name in ("learning_rate", "omega", "kd_weight", "student_init_noise", "init_scale"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")
        for name in ("kd_temperature", "logit_temperature"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.kernel_size % 2 != 1:
            raise InvalidArgumentError("kernel_size must be odd")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class LossBreakdown:
    kd: float
    manifold_entropy: float
    total: float
    grad_kd: np.ndarray = field(repr=False)
    grad_entropy: np.ndarray = field(repr=False)
    manifold: Manifold | None = field(default=None, repr=False)

    def grad_total(self, kd_weight: float, omega: float) -> np.ndarray:
        return kd_weight * self.grad_kd + omega * self.grad_entropy


def pack_params(student: StudentModel, projections: ProjectionPair) -> np.ndarray:
    """Flat trainable vector: student rows first, then the projection pair."""
    return np.concatenate([student.student_texts.ravel(), projections.flat()])


def unpack_params(vec, student: StudentModel, projections: ProjectionPair):
    vec = np.asarray(vec, dtype=np.float64)
    n = student.student_texts.size
    texts = vec[:n].reshape(student.student_texts.shape).copy()
    return StudentModel(texts, student.logit_temperature), projections.with_flat(vec[n:])


def _normalize_backward(x: np.ndarray, xn: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through row normalization ``xn = x / |x|``."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return (g - xn * np.sum(xn * g, axis=1, keepdims=True)) / norms


def total_loss(
    student: StudentModel,
    projections: ProjectionPair,
    batch_images,
    teacher: TeacherModel,
    cfg: TrainConfig,
    texts_for_manifold=None,
    z_t=None,
) -> LossBreakdown:
    """``kd_weight * KD + omega * H(M)`` with analytic gradients of both terms.

    The manifold text rows default to the student's normalized class
    embeddings; gradients are returned over :func:`pack_params` order.
    """
    images = as_matrix(batch_images, "batch_images")
    if images.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    images = normalize_rows(images)
    s_raw = student.student_texts
    s_norm = student.normalized()

    if z_t is None:
        z_t = teacher_logits(teacher, images)
    z_s = np.clip(images @ s_norm.T, -1.0, 1.0) / student.logit_temperature
    kd, g_zs = kd_loss_and_grad(z_t, z_s, cfg.kd_temperature)
    g_snorm_kd = g_zs.T @ images / student.logit_temperature
    g_s_kd = _normalize_backward(s_raw, s_norm, g_snorm_kd)

    manifold_texts = s_norm if texts_for_manifold is None else as_matrix(texts_for_manifold)
    manifold, g_proj, g_texts = entropy_and_grad(projections, manifold_texts, images)
    if texts_for_manifold is None:
        g_s_ent = _normalize_backward(s_raw, s_norm, g_texts)
    else:
        g_s_ent = np.zeros_like(s_raw)

    h = manifold.entropy_value
    grad_kd = np.concatenate([g_s_kd.ravel(), np.zeros(projections.size)])
    grad_ent = np.concatenate([g_s_ent.ravel(), g_proj])
    return LossBreakdown(
        kd=kd,
        manifold_entropy=h,
        total=cfg.kd_weight * kd + cfg.omega * h,
        grad_kd=grad_kd,
        grad_entropy=grad_ent,
        manifold=manifold,
    )


def trainable_mask(student: StudentModel, projections: ProjectionPair, cfg: TrainConfig) -> np.ndarray:
    mask = np.ones(student.student_texts.size + projections.size, dtype=bool)
    if cfg.freeze_projections:
        mask[student.student_texts.size :] = False
    return mask


@dataclass
class TraceRow:
    step: int
    epoch: int
    kd: float
    entropy: float
    total: float
    grad_angle_deg: float | None
    zeta_hat: float | None
    intra_spread: float | None = None


TRACE_COLUMNS = ("step", "epoch", "kd", "entropy", "total", "grad_angle_deg", "zeta_hat")


@dataclass
class TrainTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def write_csv(self, stream, extra: dict | None = None, header: bool = True) -> None:
        """Append rows to an open text stream; ``extra`` prepends fixed columns."""
        extra = extra or {}
        writer = csv.writer(stream, lineterminator="\n")
        if header:
            writer.writerow([*extra.keys(), *TRACE_COLUMNS])
        for r in self.rows:
            writer.writerow([*extra.values(), *(_fmt(getattr(r, c)) for c in TRACE_COLUMNS)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class TrainResult(NamedTuple):
    student: StudentModel
    projections: ProjectionPair
    trace: TrainTrace


def init_models(teacher: TeacherModel, cfg: TrainConfig, rng: np.random.Generator):
    d = teacher.teacher_texts.shape[1]
    student = StudentModel.from_teacher(
        teacher, noise=cfg.student_init_noise, rng=rng, logit_temperature=cfg.logit_temperature
    )
    if cfg.identity_projections:
        projections = ProjectionPair.identity(d, cfg.manifold_dim, cfg.kernel_size)
    else:
        projections = ProjectionPair.init_random(
            d, cfg.manifold_dim, cfg.kernel_size, seed=rng, scale=cfg.init_scale,
            activation=cfg.activation,
        )
    return student, projections


def train(
    dataset: SyntheticDataset,
    teacher: TeacherModel,
    cfg: TrainConfig,
    student: StudentModel | None = None,
    projections: ProjectionPair | None = None,
) -> TrainResult:
    """Plain SGD on the total objective over the base-class images.

    Teacher logits are the only supervision; labels are used solely to tag
    per-step alignment diagnostics.
    """
    # local import keeps diagnostics -> distill one-directional at import time
    from .diagnostics import alignment_metrics, gradient_angle

    train_set = dataset.subset(dataset.base_classes)
    if train_set.images.shape[0] == 0:
        raise InvalidArgumentError("no base-class images to train on")
    rng = np.random.default_rng([cfg.seed, TRAIN_STREAM])
    init_student, init_proj = init_models(teacher, cfg, rng)
    student = (student or init_student).copy()
    projections = (projections or init_proj).copy()
    mask = trainable_mask(student, projections, cfg)
    z_t_all = teacher_logits(teacher, train_set.images)

    trace = TrainTrace()
    n = train_set.images.shape[0]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images = train_set.images[idx]
            bd = total_loss(student, projections, images, teacher, cfg, z_t=z_t_all[idx])
            grad = bd.grad_total(cfg.kd_weight, cfg.omega)
            if not (np.isfinite(bd.total) and np.all(np.isfinite(grad))):
                raise DivergenceError(step, bd)

            try:
                angle = gradient_angle(bd.grad_kd[mask], bd.grad_entropy[mask])
            except UndefinedAngleError:
                angle = None
            labels = train_set.labels[idx]
            present = sorted(set(labels.tolist()))
            zeta = spread = None
            if len(present) >= 2:
                rows = {
                    c: np.vstack([bd.manifold.text_rows[c], bd.manifold.image_rows[labels == c]])
                    for c in present
                }
                spread, zeta = alignment_metrics(rows)
            trace.append(TraceRow(step, epoch, bd.kd, bd.manifold_entropy, bd.total, angle, zeta, spread))

            if cfg.learning_rate > 0:
                params = pack_params(student, projections)
                params[mask] -= cfg.learning_rate * grad[mask]
                norms = np.linalg.norm(params[: student.student_texts.size].reshape(student.student_texts.shape), axis=1)
                if not (np.all(np.isfinite(params)) and np.all(np.isfinite(norms)) and np.all(norms > 0)):
                    raise DivergenceError(step, bd, f"non-finite parameters after the update at step {step}")
                student, projections = unpack_params(params, student, projections)
                student.student_texts = normalize_rows(student.student_texts)
            step += 1
    return TrainResult(student, projections, trace)


def dataset_loss(
    student: StudentModel,
    projections: ProjectionPair,
    images,
    teacher: TeacherModel,
    cfg: TrainConfig,
) -> tuple[float, float, float]:
    """Mean ``(total, kd, entropy)`` over consecutive ``batch_size`` chunks.

    Evaluating per batch keeps the manifold size equal to the training-time
    ``batch_size + C``, so entropies are comparable across set sizes.
    """
    images = as_matrix(images, "images")
    if images.shape[0] == 0:
        raise InvalidArgumentError("empty image set")
    totals, kds, ents, weights = [], [], [], []
    for start in range(0, images.shape[0], cfg.batch_size):
        batch = images[start : start + cfg.batch_size]
        bd = total_loss(student, projections, batch, teacher, cfg)
        totals.append(bd.total)
        kds.append(bd.kd)
        ents.append(bd.manifold_entropy)
        weights.append(batch.shape[0])
    w = np.asarray(weights, dtype=np.float64)
    return (float(np.average(totals, weights=w)), float(np.average(kds, weights=w)),
            float(np.average(ents, weights=w)))


def save_checkpoint(path, student: StudentModel, projections: ProjectionPair, cfg: TrainConfig) -> None:
    doc = {"config": asdict(cfg), "student": student.to_dict(), "projections": projections.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    known = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in doc["config"].items() if k in known})
    return StudentModel.from_dict(doc["student"]), ProjectionPair.from_dict(doc["projections"]), cfg
