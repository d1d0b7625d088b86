"""Seeded two-modality synthetic datasets and a frozen prototype teacher."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryInfeasibleError, InvalidArgumentError
from .numerics import as_matrix, cosine_matrix, normalize_rows

MAX_REJECTION_ROUNDS = 10_000
TEACHER_TEMPERATURE = 0.07


@dataclass(frozen=True)
class ClassGeometry:
    num_classes: int = 4
    embed_dim: int = 16
    prototype_separation: float = 1.0
    """Minimum pairwise angle between class prototypes, in radians."""
    noise_scale: float = 0.3
    """Expected norm of the isotropic Gaussian perturbation added to each row."""
    boundary_fraction: float = 0.25

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes must be >= 2")
        if self.embed_dim < 2:
            raise InvalidArgumentError("embed_dim must be >= 2")
        if not 0 <= self.prototype_separation <= math.pi:
            raise InvalidArgumentError("prototype_separation must lie in [0, pi]")
        if self.noise_scale < 0:
            raise InvalidArgumentError("noise_scale must be nonnegative")
        if not 0 <= self.boundary_fraction <= 1:
            raise InvalidArgumentError("boundary_fraction must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    geometry: ClassGeometry
    seed: int
    shots_per_class: int
    images: np.ndarray
    labels: np.ndarray
    texts: np.ndarray
    base_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    boundary_mask: np.ndarray = field(repr=False)

    @property
    def num_classes(self) -> int:
        return self.texts.shape[0]

    def subset(self, classes) -> "SyntheticDataset":
        """Keep only image rows whose label is in ``classes``."""
        keep = np.isin(self.labels, list(classes))
        return SyntheticDataset(
            geometry=self.geometry,
            seed=self.seed,
            shots_per_class=self.shots_per_class,
            images=self.images[keep],
            labels=self.labels[keep],
            texts=self.texts,
            base_classes=self.base_classes,
            new_classes=self.new_classes,
            boundary_mask=self.boundary_mask[keep],
        )

    def to_dict(self) -> dict:
        g = self.geometry
        return {
            "geometry": {
                "num_classes": g.num_classes,
                "embed_dim": g.embed_dim,
                "prototype_separation": g.prototype_separation,
                "noise_scale": g.noise_scale,
                "boundary_fraction": g.boundary_fraction,
            },
            "seed": self.seed,
            "shots_per_class": self.shots_per_class,
            "images": self.images.tolist(),
            "labels": self.labels.tolist(),
            "texts": self.texts.tolist(),
            "base_classes": list(self.base_classes),
            "new_classes": list(self.new_classes),
            "boundary_mask": self.boundary_mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticDataset":
        return cls(
            geometry=ClassGeometry(**doc["geometry"]),
            seed=int(doc["seed"]),
            shots_per_class=int(doc["shots_per_class"]),
            images=np.asarray(doc["images"], dtype=np.float64),
            labels=np.asarray(doc["labels"], dtype=np.int64),
            texts=np.asarray(doc["texts"], dtype=np.float64),
            base_classes=tuple(doc["base_classes"]),
            new_classes=tuple(doc["new_classes"]),
            boundary_mask=np.asarray(doc["boundary_mask"], dtype=bool),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_prototypes(geometry: ClassGeometry, rng: np.random.Generator) -> np.ndarray:
    """Place unit prototypes one at a time by rejection on the sphere."""
    max_cos = math.cos(geometry.prototype_separation)
    protos: list[np.ndarray] = []
    rounds = 0
    while len(protos) < geometry.num_classes:
        if rounds >= MAX_REJECTION_ROUNDS:
            raise GeometryInfeasibleError(
                f"could not place {geometry.num_classes} prototypes in dimension "
                f"{geometry.embed_dim} with separation {geometry.prototype_separation} rad "
                f"after {MAX_REJECTION_ROUNDS} rounds"
            )
        rounds += 1
        cand = rng.standard_normal(geometry.embed_dim)
        cand /= np.linalg.norm(cand)
        if all(float(cand @ p) <= max_cos for p in protos):
            protos.append(cand)
    return np.stack(protos)


def nearest_other(prototypes: np.ndarray) -> np.ndarray:
    """Index of the angularly nearest other prototype (lowest index on ties)."""
    sims = prototypes @ prototypes.T
    np.fill_diagonal(sims, -np.inf)
    return np.argmax(sims, axis=1)


def boundary_count(boundary_fraction: float, shots: int) -> int:
    return int(math.floor(boundary_fraction * shots + 0.5))


def sample_images(
    geometry: ClassGeometry,
    prototypes: np.ndarray,
    shots_per_class: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``shots_per_class`` unit image rows per class around ``prototypes``.

    The first ``round(boundary_fraction * shots)`` rows of each class start at
    the normalized midpoint toward the nearest other prototype. Noise is drawn
    for every row regardless of ``boundary_fraction`` so that changing the
    fraction on a fixed seed only moves the anchors.
    """
    C, d = prototypes.shape
    noise = rng.standard_normal((C, shots_per_class, d)) * (geometry.noise_scale / math.sqrt(d))
    n_boundary = boundary_count(geometry.boundary_fraction, shots_per_class)
    neighbours = nearest_other(prototypes)
    rows, labels, boundary = [], [], []
    for c in range(C):
        mid = prototypes[c] + prototypes[neighbours[c]]
        norm = np.linalg.norm(mid)
        # antipodal neighbour: no meaningful midpoint, stay on the prototype
        mid = mid / norm if norm > 1e-12 else prototypes[c]
        for k in range(shots_per_class):
            anchor = mid if k < n_boundary else prototypes[c]
            x = anchor + noise[c, k]
            nx = np.linalg.norm(x)
            rows.append(x / nx if nx > 0 else anchor)
            labels.append(c)
            boundary.append(k < n_boundary)
    return np.array(rows), np.array(labels, dtype=np.int64), np.array(boundary, dtype=bool)


def split_classes(num_classes: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    n_base = math.ceil(num_classes / 2)
    return tuple(range(n_base)), tuple(range(n_base, num_classes))


def generate(geometry: ClassGeometry, shots_per_class: int, seed: int) -> SyntheticDataset:
    """Build a dataset whose prototypes and samples are fixed by ``seed``."""
    if shots_per_class < 1:
        raise InvalidArgumentError("shots_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    prototypes = make_prototypes(geometry, rng)
    images, labels, boundary = sample_images(geometry, prototypes, shots_per_class, rng)
    base, new = split_classes(geometry.num_classes)
    return SyntheticDataset(
        geometry=geometry,
        seed=seed,
        shots_per_class=shots_per_class,
        images=images,
        labels=labels,
        texts=prototypes,
        base_classes=base,
        new_classes=new,
        boundary_mask=boundary,
    )


def held_out(dataset: SyntheticDataset, shots_per_class: int, stream: int = 1) -> SyntheticDataset:
    """Fresh samples from the same prototypes, independent of the training draw."""
    rng = np.random.default_rng([dataset.seed, stream])
    images, labels, boundary = sample_images(dataset.geometry, dataset.texts, shots_per_class, rng)
    return SyntheticDataset(
        geometry=dataset.geometry,
        seed=dataset.seed,
        shots_per_class=shots_per_class,
        images=images,
        labels=labels,
        texts=dataset.texts,
        base_classes=dataset.base_classes,
        new_classes=dataset.new_classes,
        boundary_mask=boundary,
    )


class TeacherModel:
    """Frozen cosine scorer over fixed class embeddings."""

    def __init__(self, teacher_texts, teacher_temperature: float = TEACHER_TEMPERATURE):
        texts = as_matrix(teacher_texts, "teacher_texts")
        if teacher_temperature <= 0:
            raise InvalidArgumentError("teacher_temperature must be positive")
        texts = normalize_rows(texts)
        texts.setflags(write=False)
        self._texts = texts
        self._temperature = float(teacher_temperature)

    @property
    def teacher_texts(self) -> np.ndarray:
        return self._texts

    @property
    def teacher_temperature(self) -> float:
        return self._temperature

    @classmethod
    def from_dataset(cls, dataset: SyntheticDataset, teacher_temperature: float = TEACHER_TEMPERATURE):
        return cls(dataset.texts, teacher_temperature)


def teacher_logits(teacher: TeacherModel, images) -> np.ndarray:
    images = as_matrix(images, "images")
    if images.shape[1] != teacher.teacher_texts.shape[1]:
        raise InvalidArgumentError(
            f"image dim {images.shape[1]} does not match teacher dim {teacher.teacher_texts.shape[1]}"
        )
    return cosine_matrix(images, teacher.teacher_texts) / teacher.teacher_temperature
