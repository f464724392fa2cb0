"""Adam optimisation, step learning-rate decay, training and adaptation loops."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import TrialData
from .errors import ConfigError, NumericalError
from .losses import (
    LossWeights,
    SmoothingConfig,
    component_weights,
    cosine_loss_with_grad,
    cross_entropy_with_grad,
    mse_loss_with_grad,
    smooth_labels,
)
from .model import Model

log = logging.getLogger(__name__)

ADAPT_GROUPS = ("NETWORK", "FC", "BN", "SRELU")


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_step_epochs: int = 10
    weight_decay: float = 1e-7
    batch_size: int = 128
    epochs: int = 20
    lam: float = 0.5
    gamma: float = 0.5
    smoothing: float = 0.0  # applied to attribute labels only
    reg_loss: str = "cosine"  # "cosine" | "mse"
    cosine_literal: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.reg_loss not in ("cosine", "mse"):
            raise ConfigError(f"reg_loss must be 'cosine' or 'mse', got {self.reg_loss!r}")
        if self.lr_step_epochs < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr_step_epochs and batch_size must be positive, epochs non-negative")
        LossWeights(self.lam, self.gamma)
        SmoothingConfig(self.smoothing)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam, self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdaptConfig(TrainConfig):
    groups: tuple[str, ...] = ("BN",)
    add_srelu: bool = False
    epochs: int = 2

    def __post_init__(self):
        super().__post_init__()
        self.groups = tuple(str(g).upper() for g in self.groups)
        if not self.groups:
            raise ConfigError("adaptation needs at least one parameter group")
        bad = [g for g in self.groups if g not in ADAPT_GROUPS]
        if bad:
            raise ConfigError(f"unknown adaptation groups {bad}; expected a subset of {ADAPT_GROUPS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = list(self.groups)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_init * cfg.lr_decay_factor ** (epoch // cfg.lr_step_epochs)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0, groups=None) -> None:
    """One in-place Adam update with bias correction and coupled L2 decay.

    Parameters without a gradient entry (or with ``None``) are skipped and
    keep their moment estimates. ``groups`` maps names to group labels for
    error messages.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            where = f" (group {groups[name]})" if groups and name in groups else ""
            raise NumericalError(f"non-finite gradient for {name}{where}")
        if weight_decay:
            g = g + weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_reg: float | None = None
    loss_attr: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_tsv(self) -> str:
        def fmt(x):
            return "-" if x is None else repr(float(x))

        lines = ["epoch\tlr\tloss_total\tloss_ce\tloss_reg\tloss_attr"]
        for r in self.epochs:
            lines.append("\t".join([str(r.epoch), fmt(r.lr), fmt(r.loss_total), fmt(r.loss_ce),
                                    fmt(r.loss_reg), fmt(r.loss_attr)]))
        return "\n".join(lines) + "\n"


def batch_loss(model: Model, batch, cfg: TrainConfig, bn_train=lambda name: True, update_stats=True):
    """Forward + composite loss + backward on one batch.

    Returns ``(total, parts, grads)`` where ``parts`` is
    ``(ce, reg | None, attr | None)``. Objective terms whose weight is
    exactly zero are left out of the backward pass entirely.
    """
    mc = model.cfg
    out, tape = model.forward_train(batch.x, bn_train=bn_train, update_stats=update_stats)
    ce, d_logp = cross_entropy_with_grad(out.log_posteriors, batch.y)
    if mc.sharing is None:
        return ce, (ce, None, None), model.backward(tape, d_logp=d_logp)

    if batch.reg is None or (mc.has_attr and batch.attr is None):
        raise ConfigError(f"{mc.variant} training needs regression{' and attribute' if mc.has_attr else ''} targets")
    w_ce, w_reg, w_attr = component_weights(cfg.loss_weights, mc.has_attr)
    if cfg.reg_loss == "mse":
        reg, d_reg = mse_loss_with_grad(out.reg_prediction, batch.reg)
    else:
        reg, d_reg = cosine_loss_with_grad(out.reg_prediction, batch.reg, literal=cfg.cosine_literal)
    attr = d_attr = None
    if mc.has_attr:
        labels = smooth_labels(batch.attr, SmoothingConfig(cfg.smoothing)) if cfg.smoothing else batch.attr
        attr, d_attr = cross_entropy_with_grad(out.attr_log_probs, labels)
    total = w_ce * ce + w_reg * reg + (w_attr * attr if attr is not None else 0.0)
    grads = model.backward(
        tape,
        d_logp=w_ce * d_logp if w_ce else None,
        d_reg=w_reg * d_reg if w_reg else None,
        d_attr=w_attr * d_attr if (attr is not None and w_attr) else None,
    )
    return total, (ce, reg, attr), grads


def _run_epochs(model: Model, data: TrialData, cfg: TrainConfig, trainable: dict, bn_train) -> TrainLog:
    groups = {n: model.group_of(n) for n in trainable}
    state = AdamState()
    tlog = TrainLog()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = np.zeros(4)
        seen = 0
        for bi, batch in enumerate(data.batches(cfg.batch_size, cfg.seed, epoch)):
            if len(batch) < 2:
                # batch statistics are undefined for a single row
                log.debug("epoch %d: skipping single-row batch %d", epoch, bi)
                continue
            total, (ce, reg, attr), grads = batch_loss(model, batch, cfg, bn_train)
            if not np.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            adam_step(trainable, grads, state, lr, cfg.weight_decay, groups)
            n = len(batch)
            sums += n * np.array([total, ce, reg or 0.0, attr or 0.0])
            seen += n
        if seen == 0:
            raise ConfigError("no trainable batches (need at least 2 trials)")
        mean = sums / seen
        mc = model.cfg
        tlog.epochs.append(EpochRecord(
            epoch, lr, float(mean[0]), float(mean[1]),
            float(mean[2]) if mc.sharing else None,
            float(mean[3]) if mc.has_attr else None,
        ))
        log.info("epoch %d lr %.3g loss %.6f", epoch, lr, mean[0])
    return tlog


def train(model: Model, data: TrialData, cfg: TrainConfig) -> tuple[Model, TrainLog]:
    """Train every parameter of ``model`` in place."""
    mc = model.cfg
    if mc.sharing and (data.targets is None or (mc.has_attr and data.targets.attr_kind is None)):
        raise ConfigError(f"{mc.variant} model needs auxiliary targets in the training data")
    return model, _run_epochs(model, data, cfg, model.parameters(), lambda name: True)


def adapt(model: Model, data: TrialData, cfg: AdaptConfig) -> tuple[Model, TrainLog]:
    """Fine-tune only the selected parameter groups of a trained model.

    Everything outside the selection stays bit-identical. Batch
    normalization layers whose parameters are frozen run on their running
    statistics, which are then left untouched as well.
    """
    if cfg.add_srelu:
        model.insert_srelu()
    if "SRELU" in cfg.groups and not model.cfg.use_srelu:
        raise ConfigError("SRELU adaptation needs add_srelu or a model with sReLU activations")
    trainable = model.select_params(cfg.groups)
    if not trainable or sum(a.size for a in trainable.values()) == 0:
        raise ConfigError("adaptation selects no parameters")
    bn_live = {n.rsplit(".bn.", 1)[0] for n in trainable if ".bn." in n}
    return model, _run_epochs(model, data, cfg, trainable, lambda name: name in bn_live)
