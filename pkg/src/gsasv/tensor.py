"""Dense layer primitives with explicit forward/backward rules.

Every array is a 2-D float64 numpy array of shape ``(batch, features)``
unless noted. Backward functions take the upstream gradient ``dout`` and
return gradients for the inputs and parameters; nothing is cached on
module state, so forward results needed by backward are passed back in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import NumericalError, ShapeError

DTYPE = np.float64


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def _check_cols(x: np.ndarray, dim: int, what: str) -> None:
    if x.shape[1] != dim:
        raise ShapeError(f"{what}: input shape {x.shape} does not match parameter dim {dim}")


@dataclass
class AffineParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"affine: W shape {self.W.shape} inconsistent with b shape {self.b.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def affine(p: AffineParams, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != p.in_dim:
        raise ShapeError(f"affine: input shape {x.shape} incompatible with weight shape {p.W.shape}")
    return x @ p.W.T + p.b


def affine_backward(p: AffineParams, x: np.ndarray, dout: np.ndarray):
    """Returns ``(dx, dW, db)``."""
    return dout @ p.W, dout.T @ x, dout.sum(axis=0)


def relu(x) -> np.ndarray:
    return np.maximum(as_matrix(x), 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return dout * (x > 0)


@dataclass
class SReluParams:
    """Diagonal positive-side scaling; the full matrix is never formed."""

    wa: np.ndarray  # (dim,)

    @classmethod
    def identity(cls, dim: int) -> "SReluParams":
        return cls(np.ones(dim, dtype=DTYPE))

    @property
    def dim(self) -> int:
        return self.wa.shape[0]


def srelu(p: SReluParams, z) -> np.ndarray:
    """``max(diag(wa) @ z, 0)`` row-wise: the scale is applied before the max."""
    z = as_matrix(z)
    _check_cols(z, p.dim, "srelu")
    return np.maximum(z * p.wa, 0.0)


def srelu_backward(p: SReluParams, z: np.ndarray, dout: np.ndarray):
    """Returns ``(dz, dwa)``."""
    active = (z * p.wa) > 0
    g = dout * active
    return g * p.wa, (g * z).sum(axis=0)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, dim: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormParams":
        return cls(
            gamma=np.ones(dim, dtype=DTYPE),
            beta=np.zeros(dim, dtype=DTYPE),
            running_mean=np.zeros(dim, dtype=DTYPE),
            running_var=np.ones(dim, dtype=DTYPE),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    train: bool


def batchnorm(p: BatchNormParams, x, mode: str = "train", update_stats: bool = True):
    """Normalize per column. Returns ``(out, cache)``.

    Train mode uses the biased batch variance for normalization and folds
    the unbiased variance into ``running_var``. Eval mode reads the running
    statistics and never mutates them.
    """
    x = as_matrix(x)
    _check_cols(x, p.dim, "batchnorm")
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2 rows")
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = centered * inv_std
        if update_stats:
            m = p.momentum
            p.running_mean[...] = (1.0 - m) * p.running_mean + m * mean
            p.running_var[...] = (1.0 - m) * p.running_var + m * var * (n / (n - 1))
        train = True
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (x - p.running_mean) * inv_std
        train = False
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return p.gamma * xhat + p.beta, BNCache(xhat, inv_std, train)


def batchnorm_backward(p: BatchNormParams, cache: BNCache, dout: np.ndarray):
    """Returns ``(dx, dgamma, dbeta)``; train mode differentiates through the batch statistics."""
    dbeta = dout.sum(axis=0)
    dgamma = (dout * cache.xhat).sum(axis=0)
    dxhat = dout * p.gamma
    if not cache.train:
        return dxhat * cache.inv_std, dgamma, dbeta
    n = dout.shape[0]
    dx = (cache.inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
    return dx, dgamma, dbeta


def log_softmax(x) -> np.ndarray:
    x = as_matrix(x)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_backward(out: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """``out`` is the forward result (log-probabilities)."""
    return dout - np.exp(out) * dout.sum(axis=1, keepdims=True)


def grad_check(
    f: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-6,
    floor: float = 1e-12,
    names=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f()`` returns ``(value, grads)`` evaluated at the current contents of
    ``params``; entries are perturbed in place and restored afterwards.
    A missing gradient entry is treated as zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    value, analytic = f()
    if not np.isfinite(value):
        raise NumericalError(f"grad_check: f is not finite ({value})")
    analytic = {k: None if v is None else np.array(v, dtype=DTYPE) for k, v in analytic.items()}
    worst = 0.0
    for name in names or params:
        arr = params[name]
        ana = analytic.get(name)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()[0]
            flat[i] = orig - h
            fm = f()[0]
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"grad_check: non-finite value perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * h)
            a = 0.0 if ana is None else float(ana.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
