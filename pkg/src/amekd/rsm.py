"""Learnable projection pair, shared manifold assembly and manifold entropy.

Text rows go through a one-layer MLP, image rows through a circular 1-D
convolution along the feature axis (plus a fixed averaging resample when the
embedding and manifold widths differ). The manifold stacks all projected text
rows above all projected image rows; each row is reduced to its mean, the
means are softmaxed and the entropy of that distribution is the regularizer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .numerics import as_matrix, log_softmax

ACTIVATIONS = ("tanh", "identity")


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(x) if kind == "tanh" else x


def _act_grad(y: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation expressed through its output ``y``."""
    return 1.0 - y * y if kind == "tanh" else np.ones_like(y)


def resample_matrix(d: int, r: int) -> np.ndarray:
    """Fixed ``d x r`` area-averaging map from ``d`` features to ``r``.

    Output ``j`` averages the input cells overlapping ``[j*d/r, (j+1)*d/r)``,
    weighted by overlap; each column sums to one.
    """
    a = np.zeros((d, r))
    width = d / r
    for j in range(r):
        lo, hi = j * width, (j + 1) * width
        for i in range(int(np.floor(lo)), min(d, int(np.ceil(hi)))):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                a[i, j] = overlap / width
    return a


def circular_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Row-wise circular cross-correlation with a centred odd-width kernel."""
    half = kernel.size // 2
    out = np.zeros_like(x)
    for i, w in enumerate(kernel):
        # out[:, m] += w * x[:, (m + i - half) mod d]
        out += w * np.roll(x, half - i, axis=1)
    return out


@dataclass
class ProjectionPair:
    conv_kernel: np.ndarray
    conv_bias: float
    mlp_weights: np.ndarray
    mlp_bias: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.conv_kernel = np.asarray(self.conv_kernel, dtype=np.float64).ravel()
        self.conv_bias = float(self.conv_bias)
        self.mlp_weights = as_matrix(self.mlp_weights, "mlp_weights")
        self.mlp_bias = np.asarray(self.mlp_bias, dtype=np.float64).ravel()
        if self.conv_kernel.size % 2 != 1:
            raise InvalidArgumentError("conv kernel width must be odd")
        if self.mlp_bias.size != self.mlp_weights.shape[1]:
            raise InvalidArgumentError("mlp_bias length must equal the manifold width")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"activation must be one of {ACTIVATIONS}")
        if not (
            np.all(np.isfinite(self.conv_kernel))
            and np.isfinite(self.conv_bias)
            and np.all(np.isfinite(self.mlp_bias))
        ):
            raise InvalidArgumentError("projection parameters must be finite")

    @property
    def embed_dim(self) -> int:
        return self.mlp_weights.shape[0]

    @property
    def manifold_dim(self) -> int:
        return self.mlp_weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.conv_kernel.size

    @classmethod
    def init_random(
        cls,
        embed_dim: int,
        manifold_dim: int,
        kernel_size: int = 3,
        seed: int | np.random.Generator = 0,
        scale: float = 0.1,
        activation: str = "tanh",
    ) -> "ProjectionPair":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(
            conv_kernel=rng.uniform(-scale, scale, kernel_size),
            conv_bias=rng.uniform(-scale, scale),
            mlp_weights=rng.uniform(-scale, scale, (embed_dim, manifold_dim)),
            mlp_bias=rng.uniform(-scale, scale, manifold_dim),
            activation=activation,
        )

    @classmethod
    def identity(cls, embed_dim: int, manifold_dim: int, kernel_size: int = 3) -> "ProjectionPair":
        """Delta kernel, resample-as-MLP, zero biases and no nonlinearity."""
        kernel = np.zeros(kernel_size)
        kernel[kernel_size // 2] = 1.0
        return cls(
            conv_kernel=kernel,
            conv_bias=0.0,
            mlp_weights=resample_matrix(embed_dim, manifold_dim),
            mlp_bias=np.zeros(manifold_dim),
            activation="identity",
        )

    def copy(self) -> "ProjectionPair":
        return ProjectionPair(
            self.conv_kernel.copy(), self.conv_bias, self.mlp_weights.copy(),
            self.mlp_bias.copy(), self.activation,
        )

    # flat parameter layout: kernel, conv bias, mlp weights (row-major), mlp bias
    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.conv_kernel, [self.conv_bias], self.mlp_weights.ravel(), self.mlp_bias]
        )

    @property
    def size(self) -> int:
        return self.kernel_size + 1 + self.mlp_weights.size + self.manifold_dim

    def with_flat(self, vec) -> "ProjectionPair":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise InvalidArgumentError(f"expected {self.size} parameters, got {vec.size}")
        k, d, r = self.kernel_size, self.embed_dim, self.manifold_dim
        return ProjectionPair(
            conv_kernel=vec[:k].copy(),
            conv_bias=float(vec[k]),
            mlp_weights=vec[k + 1 : k + 1 + d * r].reshape(d, r).copy(),
            mlp_bias=vec[k + 1 + d * r :].copy(),
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        return {
            "kernel_size": self.kernel_size,
            "manifold_dim": self.manifold_dim,
            "activation": self.activation,
            "conv_kernel": self.conv_kernel.tolist(),
            "conv_bias": self.conv_bias,
            "mlp_weights": self.mlp_weights.tolist(),
            "mlp_bias": self.mlp_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProjectionPair":
        pair = cls(
            conv_kernel=doc["conv_kernel"],
            conv_bias=doc["conv_bias"],
            mlp_weights=doc["mlp_weights"],
            mlp_bias=doc["mlp_bias"],
            activation=doc.get("activation", "tanh"),
        )
        if pair.kernel_size != doc.get("kernel_size", pair.kernel_size):
            raise InvalidArgumentError("kernel_size does not match conv_kernel")
        if pair.manifold_dim != doc.get("manifold_dim", pair.manifold_dim):
            raise InvalidArgumentError("manifold_dim does not match mlp_weights")
        return pair

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ProjectionPair":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ProjectionCache:
    """Intermediates kept by :func:`apply_projections` for the backward pass."""

    texts: np.ndarray
    images: np.ndarray
    text_out: np.ndarray  # after activation, C x R
    image_act: np.ndarray  # after activation, before resample, N x d
    resample: np.ndarray | None


def apply_projections(params: ProjectionPair, texts, images, return_cache: bool = False):
    """Project text rows with the MLP path and image rows with the conv path.

    Returns ``(W', V')`` of shapes ``C x R`` and ``N x R``.
    """
    texts = as_matrix(texts, "texts")
    images = as_matrix(images, "images")
    d, r = params.embed_dim, params.manifold_dim
    if texts.shape[1] != d:
        raise InvalidArgumentError(f"texts have {texts.shape[1]} columns, projection expects {d}")
    if images.shape[1] != d:
        raise InvalidArgumentError(f"images have {images.shape[1]} columns, projection expects {d}")
    w_out = _act(texts @ params.mlp_weights + params.mlp_bias, params.activation)
    v_act = _act(circular_conv(images, params.conv_kernel) + params.conv_bias, params.activation)
    resample = None if d == r else resample_matrix(d, r)
    v_out = v_act if resample is None else v_act @ resample
    if return_cache:
        return w_out, v_out, ProjectionCache(texts, images, w_out, v_act, resample)
    return w_out, v_out


@dataclass
class Manifold:
    M: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray
    entropy_value: float
    num_text_rows: int

    @property
    def text_rows(self) -> np.ndarray:
        return self.M[: self.num_text_rows]

    @property
    def image_rows(self) -> np.ndarray:
        return self.M[self.num_text_rows :]


def assemble_manifold(w_proj, v_proj) -> Manifold:
    """Stack text rows over image rows and compute scores, probs and entropy."""
    w_proj = as_matrix(w_proj, "W'")
    v_proj = np.asarray(v_proj, dtype=np.float64)
    if v_proj.ndim == 2 and v_proj.shape[0] == 0:
        v_proj = v_proj.reshape(0, w_proj.shape[1])
    v_proj = v_proj if v_proj.size == 0 else as_matrix(v_proj, "V'")
    if w_proj.shape[1] != v_proj.shape[1]:
        raise InvalidArgumentError(f"column mismatch: {w_proj.shape[1]} vs {v_proj.shape[1]}")
    M = np.vstack([w_proj, v_proj])
    scores = M.mean(axis=1)
    log_p = log_softmax(scores)
    p = np.exp(log_p)
    h = float(-np.sum(p * log_p))
    h = min(max(h, 0.0), float(np.log(M.shape[0])))
    return Manifold(M=M, scores=scores, probs=p, log_probs=log_p, entropy_value=h,
                    num_text_rows=w_proj.shape[0])


def manifold_entropy_grad(manifold: Manifold) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of the entropy w.r.t. the scores and the manifold rows.

    ``dH/ds_j = -p_j (ln p_j + H)``, which sums to zero; each row entry then
    receives ``1/R`` of its row's score gradient.
    """
    p, log_p = manifold.probs, manifold.log_probs
    h = float(-np.sum(p * log_p))
    g_s = -p * (log_p + h)
    r = manifold.M.shape[1]
    g_m = np.repeat(g_s[:, None] / r, r, axis=1)
    return g_s, g_m


def projection_backward(
    params: ProjectionPair, cache: ProjectionCache, g_text: np.ndarray, g_image: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull manifold-row gradients back to projection parameters and text inputs.

    Returns the parameter gradient in :meth:`ProjectionPair.flat` order and the
    gradient w.r.t. the text rows fed to the MLP path.
    """
    kind = params.activation
    g_pre_w = g_text * _act_grad(cache.text_out, kind)
    g_mlp_w = cache.texts.T @ g_pre_w
    g_mlp_b = g_pre_w.sum(axis=0)
    g_texts = g_pre_w @ params.mlp_weights.T

    g_act_v = g_image if cache.resample is None else g_image @ cache.resample.T
    g_pre_v = g_act_v * _act_grad(cache.image_act, kind)
    g_conv_b = float(g_pre_v.sum())
    half = params.kernel_size // 2
    g_kernel = np.array(
        [np.sum(g_pre_v * np.roll(cache.images, half - i, axis=1)) for i in range(params.kernel_size)]
    )
    grad = np.concatenate([g_kernel, [g_conv_b], g_mlp_w.ravel(), g_mlp_b])
    return grad, g_texts


def entropy_and_grad(params: ProjectionPair, texts, images):
    """Entropy of the manifold built from ``texts``/``images`` plus its gradients.

    Returns ``(manifold, grad_params, grad_texts)``.
    """
    w_out, v_out, cache = apply_projections(params, texts, images, return_cache=True)
    manifold = assemble_manifold(w_out, v_out)
    _, g_m = manifold_entropy_grad(manifold)
    c = manifold.num_text_rows
    grad, g_texts = projection_backward(params, cache, g_m[:c], g_m[c:])
    return manifold, grad, g_texts
