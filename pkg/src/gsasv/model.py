"""Backend network variants and checkpoint I/O.

A hidden layer is ``affine -> relu|srelu -> batchnorm``; the class head is
``affine -> log_softmax`` over (target, nontarget, spoof). Variants:

* ``BASE``: main branch only.
* ``SPS``: the hidden stack is shared by the class head and a regression head.
* ``HPS``: a separate regression branch runs on the input; its learned
  features are appended to the input of the main branch.
* ``SPS-ATTR`` / ``HPS-ATTR``: as above, with an attribute classifier
  (log-softmax) next to the regression head.

Parameters live in plain numpy arrays that are updated in place, so the
dicts returned by :meth:`Model.parameters` stay valid across training.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._util import canonical_json
from .errors import ConfigError, FormatError, ShapeError
from .tensor import (
    DTYPE,
    AffineParams,
    BatchNormParams,
    SReluParams,
    affine,
    affine_backward,
    as_matrix,
    batchnorm,
    batchnorm_backward,
    log_softmax,
    log_softmax_backward,
    relu,
    relu_backward,
    srelu,
    srelu_backward,
)

VARIANTS = ("BASE", "SPS", "HPS", "SPS-ATTR", "HPS-ATTR")
GROUPS = ("FC", "BN", "SRELU", "REG_BRANCH", "ATTR_HEAD")
NUM_CLASSES = 3
CLASS_NAMES = ("target", "nontarget", "spoof")


@dataclass
class ModelConfig:
    input_dim: int = 512
    hidden_dims: tuple[int, ...] = (256, 256)
    num_classes: int = NUM_CLASSES
    variant: str = "BASE"
    use_srelu: bool = False
    reg_target_dim: int | None = None
    attr_classes: int | None = None
    seed: int = 0
    # what HPS appends to the main-branch input: "hidden" (last reg-branch
    # activation) or "projection" (the predicted regression target)
    hps_feature: str = "hidden"
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at 3, got {self.num_classes}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.hidden_dims or min(self.hidden_dims) < 1 or self.input_dim < 1:
            raise ConfigError("input_dim and hidden_dims must be positive")
        if self.hps_feature not in ("hidden", "projection"):
            raise ConfigError(f"hps_feature must be 'hidden' or 'projection', got {self.hps_feature!r}")

    def check_buildable(self) -> None:
        """Head dims may be filled from data later; they must be set before building."""
        if self.variant != "BASE" and not self.reg_target_dim:
            raise ConfigError(f"variant {self.variant} requires reg_target_dim")
        if self.has_attr and not self.attr_classes:
            raise ConfigError(f"variant {self.variant} requires attr_classes")

    @property
    def sharing(self) -> str | None:
        if self.variant == "BASE":
            return None
        return self.variant.split("-")[0]

    @property
    def has_attr(self) -> bool:
        return self.variant.endswith("ATTR")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    log_posteriors: np.ndarray
    reg_prediction: np.ndarray | None = None
    attr_log_probs: np.ndarray | None = None


def _init_affine(rng: np.random.Generator, in_dim: int, out_dim: int) -> AffineParams:
    bound = 1.0 / np.sqrt(in_dim)
    W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    return AffineParams(W, b)


class HiddenLayer:
    def __init__(self, name: str, fc: AffineParams, bn: BatchNormParams, act: SReluParams | None = None):
        self.name = name
        self.fc = fc
        self.bn = bn
        self.act = act

    def arrays(self):
        yield f"{self.name}.fc.W", self.fc.W, "FC"
        yield f"{self.name}.fc.b", self.fc.b, "FC"
        if self.act is not None:
            yield f"{self.name}.act.wa", self.act.wa, "SRELU"
        yield f"{self.name}.bn.gamma", self.bn.gamma, "BN"
        yield f"{self.name}.bn.beta", self.bn.beta, "BN"

    def buffers(self):
        yield f"{self.name}.bn.running_mean", self.bn.running_mean
        yield f"{self.name}.bn.running_var", self.bn.running_var

    def forward(self, x, bn_mode: str, update_stats: bool):
        z = affine(self.fc, x)
        a = relu(z) if self.act is None else srelu(self.act, z)
        h, bn_cache = batchnorm(self.bn, a, bn_mode, update_stats=update_stats)
        return h, (x, z, bn_cache)

    def backward(self, cache, dh, grads: dict) -> np.ndarray:
        x, z, bn_cache = cache
        da, grads[f"{self.name}.bn.gamma"], grads[f"{self.name}.bn.beta"] = batchnorm_backward(self.bn, bn_cache, dh)
        if self.act is None:
            dz = relu_backward(z, da)
        else:
            dz, grads[f"{self.name}.act.wa"] = srelu_backward(self.act, z, da)
        dx, grads[f"{self.name}.fc.W"], grads[f"{self.name}.fc.b"] = affine_backward(self.fc, x, dz)
        return dx


class Model:
    """One backend network; build with :func:`build_model`."""

    def __init__(self, cfg: ModelConfig):
        cfg.check_buildable()
        cfg = self.cfg = ModelConfig.from_dict(cfg.to_dict())
        rng = np.random.default_rng(cfg.seed)
        bn = lambda d: BatchNormParams.fresh(d, cfg.bn_momentum, cfg.bn_epsilon)
        act = (lambda d: SReluParams.identity(d)) if cfg.use_srelu else (lambda d: None)

        self.reg_layers: list[HiddenLayer] = []
        main_in = cfg.input_dim
        if cfg.sharing == "HPS":
            d = cfg.input_dim
            for i, width in enumerate(cfg.hidden_dims):
                # the regression branch keeps plain ReLU; sReLU is a main-branch adaptation
                self.reg_layers.append(HiddenLayer(f"reg.{i}", _init_affine(rng, d, width), bn(width)))
                d = width
            main_in += cfg.hidden_dims[-1] if cfg.hps_feature == "hidden" else cfg.reg_target_dim

        self.main_layers: list[HiddenLayer] = []
        d = main_in
        for i, width in enumerate(cfg.hidden_dims):
            self.main_layers.append(HiddenLayer(f"main.{i}", _init_affine(rng, d, width), bn(width), act(width)))
            d = width
        self.head = _init_affine(rng, d, NUM_CLASSES)

        trunk = cfg.hidden_dims[-1]
        self.reg_head = _init_affine(rng, trunk, cfg.reg_target_dim) if cfg.sharing else None
        self.attr_head = _init_affine(rng, trunk, cfg.attr_classes) if cfg.has_attr else None

    @property
    def variant(self) -> str:
        return self.cfg.variant

    # -- parameter bookkeeping -------------------------------------------------

    def _arrays(self):
        """Yields ``(name, array, group)`` in construction order."""
        for layer in self.reg_layers:
            for name, arr, _ in layer.arrays():
                yield name, arr, "REG_BRANCH"
        for layer in self.main_layers:
            yield from layer.arrays()
        yield "main.head.W", self.head.W, "FC"
        yield "main.head.b", self.head.b, "FC"
        if self.reg_head is not None:
            yield "reg.head.W", self.reg_head.W, "REG_BRANCH"
            yield "reg.head.b", self.reg_head.b, "REG_BRANCH"
        if self.attr_head is not None:
            yield "attr.head.W", self.attr_head.W, "ATTR_HEAD"
            yield "attr.head.b", self.attr_head.b, "ATTR_HEAD"

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable arrays, ordered by group then construction order."""
        items = list(self._arrays())
        return {n: a for g in GROUPS for n, a, grp in items if grp == g}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.reg_layers + self.main_layers:
            out.update(layer.buffers())
        return out

    def groups(self) -> dict[str, list[str]]:
        out = {g: [] for g in GROUPS}
        for name, _, grp in self._arrays():
            out[grp].append(name)
        return {g: names for g, names in out.items() if names}

    def group_of(self, name: str) -> str:
        for n, _, grp in self._arrays():
            if n == name:
                return grp
        raise KeyError(name)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def select_params(self, selector) -> dict[str, np.ndarray]:
        """Union of the named groups; ``NETWORK`` stands for ``FC`` plus ``BN``."""
        wanted = set()
        for g in selector:
            g = str(g).upper()
            wanted |= {"FC", "BN"} if g == "NETWORK" else {g}
        defined = self.groups()
        for g in sorted(wanted):
            if g not in defined:
                if g in GROUPS:
                    raise ConfigError(f"parameter group {g} does not exist in this {self.variant} model")
                raise ConfigError(f"unknown parameter group {g!r}")
        names = {n for g in wanted for n in defined[g]}
        return {n: a for n, a in self.parameters().items() if n in names}

    def insert_srelu(self) -> None:
        """Put identity-initialized sReLU scales on the main-branch hidden layers."""
        for layer in self.main_layers:
            if layer.act is None:
                layer.act = SReluParams.identity(layer.fc.out_dim)
        self.cfg.use_srelu = True

    # -- computation -------------------------------------------------------------

    def forward(self, x, mode: str = "eval") -> ForwardOutput:
        """Eval mode never mutates the model; train mode updates BN running stats."""
        out, _ = self.forward_train(x, bn_train=(lambda name: mode == "train"))
        return out

    def forward_train(self, x, bn_train=lambda name: True, update_stats: bool = True):
        """Forward pass keeping the tape needed by :meth:`backward`.

        ``bn_train(layer_name)`` decides per hidden layer whether batch
        normalization uses batch statistics (and updates running stats) or
        the frozen running statistics.
        """
        cfg = self.cfg
        x = as_matrix(x)
        if x.shape[1] != cfg.input_dim:
            raise ShapeError(f"model input has shape {x.shape}, expected (*, {cfg.input_dim})")
        tape = {"x": x}

        def run(layers, h):
            caches = []
            for layer in layers:
                mode = "train" if bn_train(layer.name) else "eval"
                h, c = layer.forward(h, mode, update_stats)
                caches.append(c)
            return h, caches

        reg_pred = attr_lp = None
        main_in = x
        if cfg.sharing == "HPS":
            rh, tape["reg"] = run(self.reg_layers, x)
            tape["trunk"] = rh
            reg_pred = affine(self.reg_head, rh)
            feat = rh if cfg.hps_feature == "hidden" else reg_pred
            main_in = np.concatenate([x, feat], axis=1)
        h, tape["main"] = run(self.main_layers, main_in)
        tape["h"] = h
        logp = log_softmax(affine(self.head, h))
        tape["logp"] = logp
        if cfg.sharing == "SPS":
            tape["trunk"] = h
            reg_pred = affine(self.reg_head, h)
        if cfg.has_attr:
            attr_lp = log_softmax(affine(self.attr_head, tape["trunk"]))
            tape["attr_lp"] = attr_lp
        return ForwardOutput(logp, reg_pred, attr_lp), tape

    def backward(self, tape, d_logp=None, d_reg=None, d_attr=None) -> dict[str, np.ndarray]:
        """Reverse pass for the given output gradients.

        An output gradient of ``None`` means that output is not part of the
        objective; parameters reached only through it get no entry.
        """
        cfg = self.cfg
        grads: dict[str, np.ndarray] = {}
        d_trunk = None

        def add(acc, g):
            if g is None:
                return acc
            return g if acc is None else acc + g

        if d_attr is not None:
            dz = log_softmax_backward(tape["attr_lp"], d_attr)
            d_trunk, grads["attr.head.W"], grads["attr.head.b"] = affine_backward(self.attr_head, tape["trunk"], dz)

        d_main_in = None
        dh = None
        if d_logp is not None:
            dz = log_softmax_backward(tape["logp"], d_logp)
            dh, grads["main.head.W"], grads["main.head.b"] = affine_backward(self.head, tape["h"], dz)

        if cfg.sharing == "SPS":
            if d_reg is not None:
                g, grads["reg.head.W"], grads["reg.head.b"] = affine_backward(self.reg_head, tape["h"], d_reg)
                dh = add(dh, g)
            dh = add(dh, d_trunk)
            d_trunk = None

        if dh is not None:
            for layer, cache in zip(reversed(self.main_layers), reversed(tape["main"])):
                dh = layer.backward(cache, dh, grads)
            d_main_in = dh

        if cfg.sharing == "HPS":
            d_feat = None if d_main_in is None else d_main_in[:, cfg.input_dim:]
            d_pred = d_reg
            if cfg.hps_feature == "hidden":
                d_trunk = add(d_trunk, d_feat)
            elif d_feat is not None:
                d_pred = add(d_pred, d_feat)
            if d_pred is not None:
                g, grads["reg.head.W"], grads["reg.head.b"] = affine_backward(self.reg_head, tape["trunk"], d_pred)
                d_trunk = add(d_trunk, g)
            if d_trunk is not None:
                for layer, cache in zip(reversed(self.reg_layers), reversed(tape["reg"])):
                    d_trunk = layer.backward(cache, d_trunk, grads)
        return grads


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


# -- checkpoints -------------------------------------------------------------------

CKPT_MAGIC = b"GSVM"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Write ``magic | u16 version | u32 len | config JSON | f64 blob | crc32``.

    The blob holds the trainable arrays in :meth:`Model.parameters` order
    followed by the BN running statistics, little-endian float64. The
    config JSON lists every array name and shape in blob order.
    """
    params = model.parameters()
    buffers = model.buffers()
    layout = [[n, list(a.shape)] for n, a in params.items()] + [[n, list(a.shape)] for n, a in buffers.items()]
    header = canonical_json({"model": model.cfg.to_dict(), "layout": layout}).encode("utf-8")
    body = bytearray(CKPT_MAGIC)
    body += struct.pack("<HI", CKPT_VERSION, len(header))
    body += header
    for arr in list(params.values()) + list(buffers.values()):
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path, expect_variant: str | None = None) -> Model:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic or too short)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted file)")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable config block: {exc}") from exc
    if expect_variant is not None and cfg.variant != expect_variant:
        raise ConfigError(f"{path}: checkpoint holds a {cfg.variant} model, expected {expect_variant}")
    model = build_model(cfg)
    targets = {**model.parameters(), **model.buffers()}
    layout = header.get("layout", [])
    if [[n, list(a.shape)] for n, a in targets.items()] != layout:
        raise FormatError(f"{path}: parameter layout does not match the declared config")
    blob = np.frombuffer(data[10 + hlen : -4], dtype="<f8")
    if blob.size != sum(a.size for a in targets.values()):
        raise FormatError(f"{path}: parameter blob has {blob.size} values, expected "
                          f"{sum(a.size for a in targets.values())}")
    offset = 0
    for arr in targets.values():
        arr[...] = blob[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    return model
