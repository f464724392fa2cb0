"""Glue for end-to-end runs: derive model dims from data, train, score, sweep."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import EmbeddingStore, Metadata, TargetSpec, TrialData, TrialPair
from .model import Model, ModelConfig, build_model
from .scoring import ScoringConfig, evaluate, posteriors, report_from_scores, sweep
from .trainer import TrainConfig, train


@dataclass
class Corpus:
    asv: EmbeddingStore
    cm: EmbeddingStore | None
    meta: Metadata | None
    train_trials: list[TrialPair]
    eval_trials: list[TrialPair]


def target_spec(cfg: ModelConfig, corpus: Corpus, attr_kind: str = "attack", reg_with_attr: bool = False):
    """Auxiliary targets needed by ``cfg.variant`` (``None`` for BASE)."""
    if cfg.variant == "BASE":
        return None
    if corpus.cm is None or corpus.meta is None:
        from .errors import DataError

        raise DataError(f"{cfg.variant} needs CM embeddings and metadata")
    if cfg.has_attr:
        # the attribute head carries the labels; regression is on the spoof embedding alone
        return TargetSpec(corpus.cm, corpus.meta, attr_kind=attr_kind, reg_with_attr=False)
    return TargetSpec(corpus.cm, corpus.meta, attr_kind=None, reg_with_attr=reg_with_attr)


def resolve_model_config(cfg: ModelConfig, corpus: Corpus, targets: TargetSpec | None) -> ModelConfig:
    """Fill dims that follow from the data."""
    d = cfg.to_dict()
    d["input_dim"] = 2 * corpus.asv.dim
    if targets is not None:
        d["reg_target_dim"] = targets.reg_dim()
        d["attr_classes"] = targets.attr_dim()
    return ModelConfig.from_dict(d)


def fit(cfg: ModelConfig, tcfg: TrainConfig, corpus: Corpus, attr_kind: str = "attack", reg_with_attr: bool = False):
    targets = target_spec(cfg, corpus, attr_kind, reg_with_attr)
    model = build_model(resolve_model_config(cfg, corpus, targets))
    data = TrialData(corpus.train_trials, corpus.asv, targets)
    return train(model, data, tcfg)


def sweep_runner(base_model: ModelConfig, base_train: TrainConfig, corpus: Corpus,
                 attr_kind: str = "attack", reg_with_attr: bool = False, model: Model | None = None):
    """``run_point`` for :func:`gsasv.scoring.sweep`.

    With ``model`` given, every point reuses it (alpha-only sweeps);
    otherwise each point retrains from the shared base seed.
    """
    eval_data = TrialData(corpus.eval_trials, corpus.asv)
    labels = [t.label for t in corpus.eval_trials]
    cache = {}

    def run_point(overrides: dict):
        if model is not None and not overrides:
            if "post" not in cache:
                cache["post"] = posteriors(model, eval_data)
            return cache["post"], labels, {}
        mcfg = base_model
        tcfg = base_train
        kind = overrides.get("attr_kind", attr_kind)
        if "variant" in overrides:
            mcfg = replace(mcfg, variant=str(overrides["variant"]))
        for key, field_name in (("lam", "lam"), ("gamma", "gamma"), ("epsilon", "smoothing")):
            if key in overrides:
                tcfg = replace(tcfg, **{field_name: float(overrides[key])})
        trained, _ = fit(mcfg, tcfg, corpus, kind, reg_with_attr)
        extra = {}
        if "attr_kind" in overrides:
            extra["attr_dim"] = trained.cfg.attr_classes
        return posteriors(trained, eval_data), labels, extra

    return run_point
