"""LLR scoring, cosine baseline, equal error rates, evaluation and sweeps."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from ._util import canonical_json
from .data import TrialData, TrialPair, write_scores
from .errors import ConfigError, EvaluationError, NumericalError
from .model import Model

LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class ScoringConfig:
    alpha: float = 0.95
    floor: float = LOG_FLOOR

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.floor > 0:
            raise ConfigError("floor must be positive")


def llr_scores(posteriors, cfg: ScoringConfig = ScoringConfig()) -> np.ndarray:
    """Vectorised LLR over rows of ``(theta_tar, theta_non, theta_spf)``."""
    p = np.asarray(posteriors, dtype=np.float64).reshape(-1, 3)
    num = np.maximum(p[:, 0], cfg.floor)
    den = np.maximum(cfg.alpha * p[:, 1] + (1.0 - cfg.alpha) * p[:, 2], cfg.floor)
    return np.log(num) - np.log(den)


def llr_score(p, cfg: ScoringConfig = ScoringConfig()) -> float:
    """``log(theta_tar / (alpha * theta_non + (1 - alpha) * theta_spf))`` with both sides floored."""
    return float(llr_scores(p, cfg)[0])


def cosine_score(e, t) -> float:
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return float(e @ t / max(np.linalg.norm(e) * np.linalg.norm(t), 1e-8))


def compute_eer(pos_scores, neg_scores) -> tuple[float, float]:
    """Equal error rate in percent and the threshold where it is reached.

    Trials are accepted when ``score >= threshold``. Operating points are
    taken at every distinct score plus one point above the maximum; the
    FAR/FRR crossing is linearly interpolated between the two adjacent
    points that bracket it.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("compute_eer needs non-empty positive and negative score lists")
    thr = np.unique(np.concatenate([pos, neg]))
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    frr = np.append(np.searchsorted(pos_sorted, thr, side="left") / pos.size, 1.0)
    far = np.append((neg.size - np.searchsorted(neg_sorted, thr, side="left")) / neg.size, 0.0)
    thr = np.append(thr, thr[-1] + 1.0)
    diff = frr - far
    k = int(np.argmax(diff >= 0))  # diff[0] < 0 always, diff[-1] = 1
    d0, d1 = diff[k - 1], diff[k]
    w = -d0 / (d1 - d0)
    eer = frr[k - 1] + w * (frr[k] - frr[k - 1])
    threshold = thr[k - 1] + w * (thr[k] - thr[k - 1])
    return 100.0 * float(eer), float(threshold)


@dataclass
class EvalReport:
    eer_joint: float | None
    eer_bonafide: float | None
    eer_spoof: float | None
    thresholds: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    alpha: float = 0.95

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "counts": self.counts,
            "eer_bonafide": self.eer_bonafide,
            "eer_joint": self.eer_joint,
            "eer_spoof": self.eer_spoof,
            "thresholds": self.thresholds,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict()) + "\n"


def report_from_scores(scores, labels, alpha: float = 0.95) -> EvalReport:
    """Three EERs with target trials as positives; an absent class yields ``None``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    tar = scores[labels == "target"]
    non = scores[labels == "nontarget"]
    spf = scores[labels == "spoof"]
    counts = {"target": int(tar.size), "nontarget": int(non.size), "spoof": int(spf.size)}
    eers, thresholds = {}, {}
    for name, neg in (("joint", np.concatenate([non, spf])), ("bonafide", non), ("spoof", spf)):
        if tar.size and neg.size:
            eers[name], thresholds[name] = compute_eer(tar, neg)
        else:
            eers[name] = thresholds[name] = None
    return EvalReport(eers["joint"], eers["bonafide"], eers["spoof"], thresholds, counts, alpha)


def posteriors(model: Model, data: TrialData, batch_size: int = 4096) -> np.ndarray:
    """Eval-mode class posteriors for every trial, in trial order."""
    out = np.empty((len(data), 3))
    for batch in data.batches(batch_size, seed=0, epoch=0, shuffle=False):
        out[batch.index] = np.exp(model.forward(batch.x, mode="eval").log_posteriors)
    return out


def evaluate(model: Model, data: TrialData, cfg: ScoringConfig = ScoringConfig(), score_path=None):
    """Score every trial and compute the joint / bonafide / spoof EERs.

    Returns ``(report, scores)``; the score file is written when
    ``score_path`` is given.
    """
    scores = llr_scores(posteriors(model, data), cfg)
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        t = data.trials[bad[0]]
        raise NumericalError(f"non-finite score for {bad.size} trial(s), first {t.enroll_id} {t.test_id}")
    if score_path is not None:
        write_scores(data.trials, scores, score_path)
    return report_from_scores(scores, [t.label for t in data.trials], cfg.alpha), scores


# -- sweeps ------------------------------------------------------------------------

SWEEP_PARAMS = ("alpha", "lam", "gamma", "epsilon", "variant", "attr_kind")
_ALIASES = {"lambda": "lam", "smoothing": "epsilon"}


def parse_grid_value(spec: str) -> list:
    """``"0:0.05:1"`` (inclusive range), ``"0,0.5,1"`` or a single value."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range must be start:step:stop, got {spec!r}")
        start, step, stop = map(float, parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"bad range {spec!r}")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    vals = []
    for tok in spec.split(","):
        try:
            vals.append(float(tok))
        except ValueError:
            vals.append(tok)
    return vals


def parse_grid(specs) -> dict[str, list]:
    grid = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid entries look like name=values, got {spec!r}")
        name, values = spec.split("=", 1)
        grid[_ALIASES.get(name, name)] = parse_grid_value(values)
    return validate_grid(grid)


def validate_grid(grid: dict) -> dict:
    grid = {_ALIASES.get(k, k): list(v) for k, v in grid.items()}
    for name, values in grid.items():
        if name not in SWEEP_PARAMS:
            raise ConfigError(f"cannot sweep {name!r}; choose from {SWEEP_PARAMS}")
        if not values:
            raise ConfigError(f"empty grid for {name}")
        if name in ("alpha", "lam", "gamma", "epsilon"):
            for v in values:
                if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                    raise ConfigError(f"{name} value {v!r} outside [0, 1]")
    return grid


def sweep_alpha(post: np.ndarray, labels, alphas) -> list[dict]:
    """Rescore fixed posteriors for each alpha; no model is involved."""
    rows = []
    for a in alphas:
        rep = report_from_scores(llr_scores(post, ScoringConfig(alpha=float(a))), labels, float(a))
        rows.append({"alpha": float(a), **_eer_cols(rep)})
    return rows


def _eer_cols(rep: EvalReport) -> dict:
    return {"eer_joint": rep.eer_joint, "eer_bonafide": rep.eer_bonafide, "eer_spoof": rep.eer_spoof}


def sweep(grid: dict, run_point, alpha: float = 0.95) -> list[dict]:
    """One table row per point of the cartesian product of ``grid``.

    ``run_point(overrides)`` trains (or loads) a model for the non-alpha
    coordinates and returns ``(posteriors, labels, extra_columns)``.
    Alpha values only rescore those posteriors.
    """
    grid = validate_grid(grid)
    alphas = grid.pop("alpha", None)
    names = list(grid)
    rows = []
    for combo in itertools.product(*(grid[n] for n in names)):
        overrides = dict(zip(names, combo))
        post, labels, extra = run_point(overrides)
        for r in sweep_alpha(post, labels, alphas or [alpha]):
            if alphas is None:
                del r["alpha"]
            rows.append({**overrides, **(extra or {}), **r})
    return rows


def rows_to_tsv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        if v is None:
            return "undefined"
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    lines = ["\t".join(cols)] + ["\t".join(fmt(r.get(c)) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"
