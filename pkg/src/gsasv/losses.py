"""Training objectives.

Batch reduction is always the arithmetic mean over rows. Each loss has a
``*_with_grad`` form returning ``(value, d value / d first argument)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import DTYPE, as_matrix

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float = 0.0
    K: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"smoothing epsilon must lie in [0, 1], got {self.epsilon}")


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def cross_entropy_with_grad(logp, targets):
    """Mean over rows of ``-(1/C) * sum_i y_i * logp_i``.

    The ``1/C`` factor is kept on purpose; it rescales the loss uniformly.
    """
    logp = as_matrix(logp)
    y = as_matrix(targets)
    _same_shape(logp, y, "cross_entropy")
    n, c = logp.shape
    loss = float(-(y * logp).sum() / (c * n))
    return loss, -y / (c * n)


def cross_entropy(logp, targets) -> float:
    return cross_entropy_with_grad(logp, targets)[0]


def mse_loss_with_grad(out, target):
    """Squared Euclidean norm of the residual divided by the number of rows."""
    out = as_matrix(out)
    target = as_matrix(target)
    _same_shape(out, target, "mse_loss")
    n = out.shape[0]
    r = out - target
    return float((r * r).sum() / n), 2.0 * r / n


def mse_loss(out, target) -> float:
    return mse_loss_with_grad(out, target)[0]


def cosine_loss_with_grad(out, target, literal: bool = False, eps: float = COSINE_EPS):
    """Negated mean cosine similarity.

    Per row the denominator is ``max(|out| * |tar|, eps)``. With
    ``literal=True`` it is ``max(|out|, |tar|, eps)`` instead, which is not
    bounded to [-1, 1].
    """
    out = as_matrix(out)
    target = as_matrix(target)
    _same_shape(out, target, "cosine_loss")
    n = out.shape[0]
    dot = (out * target).sum(axis=1)
    no = np.sqrt((out * out).sum(axis=1))
    nt = np.sqrt((target * target).sum(axis=1))
    if literal:
        denom = np.maximum(np.maximum(no, nt), eps)
        # d denom / d out is nonzero only where |out| is the strict winner
        out_wins = (no >= nt) & (no > eps)
    else:
        denom = np.maximum(no * nt, eps)
        out_wins = no * nt > eps
    sim = dot / denom
    dsim = target / denom[:, None]
    safe_no = np.where(no > 0, no, 1.0)
    if literal:
        dden = out / safe_no[:, None]
    else:
        dden = out * (nt / safe_no)[:, None]
    dsim = dsim - np.where(out_wins, sim / denom, 0.0)[:, None] * dden
    return float(-sim.mean()), -dsim / n


def cosine_loss(out, target, literal: bool = False) -> float:
    return cosine_loss_with_grad(out, target, literal=literal)[0]


def smooth_labels(onehot, cfg: SmoothingConfig) -> np.ndarray:
    """``(1 - eps) * q + eps / K`` row-wise."""
    q = np.asarray(onehot, dtype=DTYPE)
    k = q.shape[-1]
    if cfg.K is not None and cfg.K != k:
        raise ShapeError(f"smooth_labels: K={cfg.K} but targets have {k} classes")
    if not 0.0 <= cfg.epsilon <= 1.0:
        raise ConfigError(f"smoothing epsilon must lie in [0, 1], got {cfg.epsilon}")
    return (1.0 - cfg.epsilon) * q + cfg.epsilon / k


def total_mt(ce: float, reg: float, w: LossWeights) -> float:
    return w.lam * ce + (1.0 - w.lam) * reg


def total_mt_attr(ce: float, reg: float, attr: float, w: LossWeights) -> float:
    return w.lam * ce + (1.0 - w.lam) * ((1.0 - w.gamma) * reg + w.gamma * attr)


def component_weights(w: LossWeights, with_attr: bool) -> tuple[float, float, float]:
    """Coefficients of (ce, reg, attr) in the composite objective."""
    if with_attr:
        return w.lam, (1.0 - w.lam) * (1.0 - w.gamma), (1.0 - w.lam) * w.gamma
    return w.lam, 1.0 - w.lam, 0.0
