"""Self-checks behind ``gsasv check``: finite-difference gradient checks of
every primitive, loss and model variant, plus oracle cross-checks of the
EER estimator and trial generator."""
from __future__ import annotations

import numpy as np

from .data import Batch, UtteranceRecord, generate_trials
from .losses import cosine_loss_with_grad, cross_entropy_with_grad, mse_loss_with_grad
from .model import VARIANTS, ModelConfig, build_model
from .oracles import eer_bruteforce, trials_bruteforce
from .scoring import compute_eer
from .tensor import (
    AffineParams,
    BatchNormParams,
    SReluParams,
    affine,
    affine_backward,
    batchnorm,
    batchnorm_backward,
    grad_check,
    log_softmax,
    log_softmax_backward,
    relu,
    relu_backward,
    srelu,
    srelu_backward,
)
from .trainer import TrainConfig, batch_loss

SMALL = dict(input_dim=6, hidden_dims=(5, 4), reg_target_dim=3, attr_classes=4)


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def primitive_errors(rng) -> dict[str, float]:
    """Max relative gradient error for each primitive at one random point."""
    errs = {}
    x = rng.standard_normal((4, 3))
    p = AffineParams(rng.standard_normal((2, 3)), rng.standard_normal(2))
    w = rng.standard_normal((4, 2))
    params = {"W": p.W, "b": p.b, "x": x}

    def f_aff():
        out = affine(p, x)
        dx, dW, db = affine_backward(p, x, w)
        return float((w * out).sum()), {"W": dW, "b": db, "x": dx}

    errs["affine"] = grad_check(f_aff, params, h=1e-6)

    z = _away_from_zero(rng, (4, 3))
    wr = rng.standard_normal((4, 3))
    errs["relu"] = grad_check(lambda: (float((wr * relu(z)).sum()), {"z": relu_backward(z, wr)}), {"z": z}, h=1e-6)

    sp = SReluParams(rng.uniform(0.5, 2.0, 3))
    def f_srelu():
        dz, dwa = srelu_backward(sp, z, wr)
        return float((wr * srelu(sp, z)).sum()), {"wa": dwa, "z": dz}

    errs["srelu"] = grad_check(f_srelu, {"wa": sp.wa, "z": z}, h=1e-6)

    xb = rng.standard_normal((8, 4))
    bn = BatchNormParams.fresh(4)
    bn.gamma[:] = rng.uniform(0.5, 1.5, 4)
    bn.beta[:] = rng.standard_normal(4)
    wb = rng.standard_normal((8, 4))

    def f_bn():
        out, cache = batchnorm(bn, xb, "train", update_stats=False)
        dx, dg, db = batchnorm_backward(bn, cache, wb)
        return float((wb * out).sum()), {"gamma": dg, "beta": db, "x": dx}

    errs["batchnorm"] = grad_check(f_bn, {"gamma": bn.gamma, "beta": bn.beta, "x": xb}, h=1e-6)

    logits = rng.standard_normal((4, 3))
    wl = rng.standard_normal((4, 3))
    def f_ls():
        out = log_softmax(logits)
        return float((wl * out).sum()), {"x": log_softmax_backward(out, wl)}

    errs["log_softmax"] = grad_check(f_ls, {"x": logits}, h=1e-6)
    return errs


def loss_errors(rng) -> dict[str, float]:
    errs = {}
    logp = log_softmax(rng.standard_normal((5, 3)))
    y = np.eye(3)[rng.integers(0, 3, 5)]
    errs["cross_entropy"] = grad_check(lambda: cross_entropy_with_grad(logp, y)[:1] + ({"logp": cross_entropy_with_grad(logp, y)[1]},), {"logp": logp})
    out = rng.standard_normal((5, 4))
    tar = rng.standard_normal((5, 4))
    errs["mse"] = grad_check(lambda: (mse_loss_with_grad(out, tar)[0], {"out": mse_loss_with_grad(out, tar)[1]}), {"out": out})
    for literal in (False, True):
        f = lambda: (cosine_loss_with_grad(out, tar, literal)[0], {"out": cosine_loss_with_grad(out, tar, literal)[1]})
        errs["cosine_literal" if literal else "cosine"] = grad_check(f, {"out": out})
    return errs


def small_batch(rng, cfg: ModelConfig, n: int = 6) -> Batch:
    y = np.eye(3)[np.arange(n) % 3]
    reg = rng.standard_normal((n, cfg.reg_target_dim)) if cfg.reg_target_dim else None
    attr = np.eye(cfg.attr_classes)[rng.integers(0, cfg.attr_classes, n)] if cfg.attr_classes else None
    return Batch(rng.standard_normal((n, cfg.input_dim)), y, reg, attr)


def _non_degenerate(model, x, live_bn: bool) -> bool:
    """Every hidden unit is active on 15-85% of the rows and no pre-activation sits near the kink."""
    _, tape = model.forward_train(x, bn_train=lambda name: live_bn, update_stats=False)
    caches = tape["main"] + tape.get("reg", [])
    layers = model.main_layers + model.reg_layers
    for layer, (_, z, _) in zip(layers, caches):
        pre = z if layer.act is None else z * layer.act.wa
        frac = (pre > 0).mean(axis=0)
        if frac.min() < 0.15 or frac.max() > 0.85 or np.abs(pre).min() < 1e-4:
            return False
    return True


def model_point(variant: str, use_srelu: bool, seed: int, n: int = 32, tries: int = 500, bn_epsilon: float = 1e-5,
                live_bn: bool = True):
    """A random small model and batch at a non-degenerate point."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant=variant, use_srelu=use_srelu, seed=seed, bn_epsilon=bn_epsilon, **SMALL)
    for _ in range(tries):
        model = build_model(ModelConfig.from_dict({**cfg.to_dict(), "seed": int(rng.integers(2**31))}))
        for layer in model.main_layers + model.reg_layers:
            layer.fc.b[:] = rng.uniform(-0.05, 0.05, layer.fc.b.shape)
            layer.bn.running_mean[:] = rng.uniform(0.0, 0.5, layer.bn.dim)
            layer.bn.running_var[:] = rng.uniform(0.2, 1.0, layer.bn.dim)
            if layer.act is not None:
                layer.act.wa[:] = rng.uniform(0.5, 1.5, layer.act.wa.shape)
        batch = small_batch(rng, cfg, n)
        if _non_degenerate(model, batch.x, live_bn):
            return model, batch
    raise RuntimeError(f"no non-degenerate point found for {variant} after {tries} draws")


def model_error(variant: str, use_srelu: bool, seed: int, bn: str = "train", reg_loss: str = "cosine",
                h: float = 1e-5) -> float:
    """Gradient check of the full training objective of one small model.

    ``bn="train"`` differentiates through batch statistics, ``bn="frozen"``
    uses running statistics (the adaptation regime). In train mode a
    per-unit sReLU scale is cancelled by the following normalization up to
    the BN epsilon, so sReLU models are checked there with a large epsilon
    to keep that gradient well above finite-difference noise.
    """
    eps = 0.5 if (use_srelu and bn == "train") else 1e-5
    live = bn == "train"
    model, batch = model_point(variant, use_srelu, seed, bn_epsilon=eps, live_bn=live)
    tcfg = TrainConfig(reg_loss=reg_loss, lam=0.5, gamma=0.5)

    def f():
        total, _, grads = batch_loss(model, batch, tcfg, bn_train=lambda name: live, update_stats=False)
        return total, grads

    return grad_check(f, model.parameters(), h=h)


def eer_oracle_error(rng, max_n: int = 1000) -> float:
    n_pos, n_neg = rng.integers(1, max_n + 1, 2)
    decimals = int(rng.integers(0, 4))
    pos = np.round(rng.normal(1.0, 1.0, n_pos), decimals)
    neg = np.round(rng.normal(0.0, 1.0, n_neg), decimals)
    return abs(compute_eer(pos, neg)[0] - eer_bruteforce(pos, neg))


def random_metadata(rng, max_speakers: int = 10) -> list[UtteranceRecord]:
    recs = []
    for s in range(int(rng.integers(2, max_speakers + 1))):
        for u in range(int(rng.integers(1, 5))):
            recs.append(UtteranceRecord(f"s{s}_b{u}", f"s{s}", "bonafide"))
        for k in range(int(rng.integers(0, 4))):
            recs.append(UtteranceRecord(f"s{s}_x{k}", f"s{s}", "spoof", "A01"))
    order = rng.permutation(len(recs))
    return [recs[i] for i in order]


def run_checks(quick: bool = True, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    ok = True

    def report(name, value, tol):
        nonlocal ok
        passed = value < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {value:.3e} (< {tol:g})")

    for name, err in primitive_errors(rng).items():
        report(f"grad {name}", err, 1e-6)
    for name, err in loss_errors(rng).items():
        report(f"grad loss {name}", err, 1e-6)
    for variant in VARIANTS:
        for use_srelu in (False, True):
            for bn in ("train", "frozen"):
                name = f"grad model {variant}{' +srelu' if use_srelu else ''} (bn {bn})"
                report(name, model_error(variant, use_srelu, seed, bn), 1e-4)
    n = 10 if quick else 100
    report(f"EER vs brute force ({n} instances)", max(eer_oracle_error(rng, 200 if quick else 1000) for _ in range(n)), 1e-9)
    mismatches = 0
    for _ in range(n):
        recs = random_metadata(rng)
        fast = sorted(tuple(t) for t in generate_trials(recs))
        mismatches += fast != sorted(trials_bruteforce(recs))
    report(f"trials vs brute force ({n} instances)", float(mismatches), 0.5)
    return ok
