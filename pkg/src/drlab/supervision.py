"""Cosine logits, decoupled anchor supervision, distillation and baseline losses.

All per-sample losses accept either a single logit vector ``(C,)`` or a batch
``(B, C)``; batch inputs return one value per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import tensor as T
from .errors import ConfigurationError, DegenerateInputError, DimensionError
from .tensor import Param, Tensor

# Stands in for -inf inside log-sum-exp: exp(-1e300 - m) is exactly 0 in float64.
_MASKED = -1e300


class LossKind(str, Enum):
    DAS = "das"
    CE = "ce"
    BCE = "bce"
    COSFACE = "cosface"


class DasConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    k: float = 1.0
    k_plus: float | None = None
    k_minus: float | None = None
    lambda_p: float = Field(3.0, ge=0)
    lambda_n: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if (self.k_plus is None) != (self.k_minus is None):
            raise ValueError("k_plus and k_minus must be set together")
        if self.k_plus is not None and self.k_plus < self.k_minus:
            raise ValueError("separate anchors need k_plus >= k_minus (margin >= 0)")
        return self

    @property
    def anchors(self) -> tuple[float, float]:
        if self.k_plus is None:
            return self.k, self.k
        return self.k_plus, self.k_minus

    @property
    def margin(self) -> float:
        k_plus, k_minus = self.anchors
        return k_plus - k_minus


@dataclass
class LogitHead:
    """Cosine classifier over the current stage's classes with scale ``s = exp(rho)``."""

    w: Param  # (d, C)
    rho: Param  # scalar

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator, init_scale: float = 10.0) -> "LogitHead":
        w = Param(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, num_classes)), name="head.w")
        rho = Param(np.array(math.log(init_scale)), name="head.rho", decay=False)
        return cls(w, rho)

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]

    @property
    def scale(self) -> float:
        return float(np.exp(self.rho.data))

    def named_params(self) -> dict[str, Param]:
        return {"w": self.w, "rho": self.rho}


@dataclass
class LossBreakdown:
    """Batch means of each term; ``total = lambda_p*l_pos + lambda_n*l_neg + alpha*l_kd``.

    For the baseline losses the classification term is carried in ``l_pos``
    with ``lambda_p = 1`` and ``lambda_n = 0``.
    """

    kind: str
    l_pos: float
    l_neg: float
    l_kd: float
    total: float
    alpha: float
    lambda_p: float
    lambda_n: float


def _check_nonzero_rows(x: np.ndarray, what: str, axis: int = -1) -> None:
    if (np.linalg.norm(x, axis=axis) == 0).any():
        raise DegenerateInputError(f"zero-norm {what}")


def head_cosines(feature: Tensor, head: LogitHead) -> Tensor:
    feature = T.as_tensor(feature)
    squeeze = feature.ndim == 1
    if squeeze:
        feature = feature.reshape(1, -1)
    _check_nonzero_rows(feature.data, "feature")
    _check_nonzero_rows(head.w.data, "classifier column", axis=0)
    cos = T.l2_normalize(feature, axis=-1) @ T.l2_normalize(head.w, axis=0)
    return cos.reshape(-1) if squeeze else cos


def compute_logits(feature: Tensor, head: LogitHead) -> Tensor:
    """z_i = s * cos(w_i, feature)."""
    return head_cosines(feature, head) * T.exp(head.rho)


def _as_batch(z: Tensor, targets):
    z = T.as_tensor(z)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if len(targets) != z.shape[0]:
        raise DimensionError(f"{len(targets)} targets for logits of shape {z.shape}")
    if (targets < 0).any() or (targets >= z.shape[1]).any():
        raise ConfigurationError(f"target out of range for {z.shape[1]} classes")
    return z, targets, single


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return x.reshape(()) if single else x


def das_loss(z, targets, config: DasConfig) -> tuple[Tensor, Tensor]:
    """Single-label anchored positive and negative losses.

    l_pos = -log(e^{z_t} / (e^{z_t} + e^{k+})) = softplus(k+ - z_t)
    l_neg = -log(e^{k-} / (sum_{j != t} e^{z_j} + e^{k-}))
    """
    z, targets, single = _as_batch(z, targets)
    k_plus, k_minus = config.anchors
    rows = np.arange(z.shape[0])
    l_pos = T.softplus(k_plus - z[rows, targets])
    mask = np.zeros(z.shape)
    mask[rows, targets] = _MASKED
    anchor = Tensor(np.full((z.shape[0], 1), k_minus))
    l_neg = T.logsumexp(T.concat([z + mask, anchor], axis=1), axis=1) - k_minus
    return _unbatch(l_pos, single), _unbatch(l_neg, single)


def das_loss_multilabel(z, y, config: DasConfig) -> tuple[Tensor, Tensor]:
    """General form: positives weighted by labels ``y`` (0/1), one negative term over y == 0."""
    z = T.as_tensor(z)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    y = np.asarray(y, dtype=np.float64).reshape(z.shape)
    k_plus, k_minus = config.anchors
    l_pos = (T.softplus(k_plus - z) * y).sum(axis=1)
    anchor = Tensor(np.full((z.shape[0], 1), k_minus))
    masked = z + np.where(y > 0, _MASKED, 0.0)
    l_neg = T.logsumexp(T.concat([masked, anchor], axis=1), axis=1) - k_minus
    return _unbatch(l_pos, single), _unbatch(l_neg, single)


def kd_loss(f_new, f_ptm) -> Tensor:
    """Cosine distance 1 - cos(f_new, f_ptm); the reference side is detached."""
    f_new = T.as_tensor(f_new)
    ref = np.asarray(f_ptm.data if isinstance(f_ptm, Tensor) else f_ptm, dtype=np.float64)
    single = f_new.ndim == 1
    if single:
        f_new = f_new.reshape(1, -1)
        ref = ref.reshape(1, -1)
    _check_nonzero_rows(f_new.data, "feature")
    _check_nonzero_rows(ref, "reference feature")
    ref_unit = ref / np.linalg.norm(ref, axis=-1, keepdims=True)
    out = 1.0 - (T.l2_normalize(f_new, axis=-1) * ref_unit).sum(axis=-1)
    return _unbatch(out, single)


def baseline_loss(kind, z, targets, scale=None, margin: float = 0.35) -> Tensor:
    """Per-sample ce, bce or cosface loss.

    ``ce`` and ``bce`` take logits; ``cosface`` takes cosines plus ``scale``
    (a float or a scalar Tensor).
    """
    try:
        kind = LossKind(kind)
    except ValueError:
        raise ConfigurationError(f"unknown baseline loss {kind!r}") from None
    z, targets, single = _as_batch(z, targets)
    rows = np.arange(z.shape[0])
    onehot = np.zeros(z.shape)
    onehot[rows, targets] = 1.0
    if kind is LossKind.CE:
        out = T.logsumexp(z, axis=1) - z[rows, targets]
    elif kind is LossKind.BCE:
        out = (T.softplus(z) - z * onehot).mean(axis=1)
    elif kind is LossKind.COSFACE:
        if scale is None:
            raise ConfigurationError("cosface needs a scale")
        logits = (z - margin * onehot) * scale
        out = T.logsumexp(logits, axis=1) - logits[rows, targets]
    else:
        raise ConfigurationError("das is not a baseline loss; use das_loss")
    return _unbatch(out, single)


def total_loss(
    stream_cls: Tensor,
    ptm_cls,
    targets,
    head: LogitHead,
    kind: LossKind | str = LossKind.DAS,
    das: DasConfig | None = None,
    alpha: float = 0.5,
    cosface_margin: float = 0.35,
) -> tuple[Tensor, LossBreakdown]:
    """Batch-mean training loss on the current stream's class token."""
    kind = LossKind(kind)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if len(targets) == 0:
        raise ConfigurationError("empty batch")
    das = das or DasConfig()
    if kind is LossKind.DAS:
        l_pos, l_neg = das_loss(compute_logits(stream_cls, head), targets, das)
        lp, ln = das.lambda_p, das.lambda_n
        pos, neg = l_pos.mean(), l_neg.mean()
    else:
        if kind is LossKind.COSFACE:
            cls_loss = baseline_loss(kind, head_cosines(stream_cls, head), targets, T.exp(head.rho), cosface_margin)
        else:
            cls_loss = baseline_loss(kind, compute_logits(stream_cls, head), targets)
        lp, ln = 1.0, 0.0
        pos, neg = cls_loss.mean(), Tensor(0.0)
    total = pos * lp + neg * ln
    kd = Tensor(0.0)
    if alpha:
        kd = kd_loss(stream_cls, ptm_cls).mean()
        total = total + kd * alpha
    breakdown = LossBreakdown(
        kind=kind.value,
        l_pos=pos.item(),
        l_neg=neg.item(),
        l_kd=kd.item(),
        total=total.item(),
        alpha=alpha,
        lambda_p=lp,
        lambda_n=ln,
    )
    return total, breakdown
