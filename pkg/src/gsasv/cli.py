"""Command-line entry point: ``gsasv <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical abort. Configuration precedence is flags > config file >
defaults; every run writes ``config.resolved.json`` and ``manifest.json``
next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._util import canonical_json, derive_seed, sha256_file
from .data import (
    PRESETS,
    SynthConfig,
    TrialData,
    generate_trials,
    read_embeddings,
    read_metadata,
    read_trials,
    split_trials,
    synth_generate,
    write_embeddings,
    write_metadata,
    write_scores,
    write_trials,
)
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import Corpus, fit, sweep_runner, target_spec
from .scoring import ScoringConfig, evaluate, parse_grid, rows_to_tsv, sweep, validate_grid
from .trainer import AdaptConfig, TrainConfig, adapt

log = logging.getLogger("gsasv")

SECTIONS = ("seed", "data", "model", "train", "adapt", "scoring", "eval", "sweep")
DATA_KEYS = ("asv", "cm", "meta", "train_trials", "eval_trials", "attr_kind", "reg_with_attr", "synth")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ---------------------------------------------------------------


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    base = Path(path).resolve().parent
    data = dict(cfg.get("data", {}))
    bad = set(data) - set(DATA_KEYS)
    if bad:
        raise ConfigError(f"{path}: unknown data keys {sorted(bad)}")
    for key in ("asv", "cm", "meta", "train_trials", "eval_trials"):
        if data.get(key):
            data[key] = str((base / data[key]).resolve()) if not os.path.isabs(data[key]) else data[key]
    cfg["data"] = data
    if "eval" in cfg:
        ev = dict(cfg["eval"])
        bad = set(ev) - {"trials"}
        if bad:
            raise ConfigError(f"{path}: unknown eval keys {sorted(bad)}")
        if ev.get("trials") and not os.path.isabs(ev["trials"]):
            ev["trials"] = str((base / ev["trials"]).resolve())
        cfg["eval"] = ev
    return cfg


def resolve(cfg: dict, args) -> dict:
    """Apply flag overrides and defaults; section seeds derive from the top-level seed."""
    seed = args.seed if getattr(args, "seed", None) is not None else int(cfg.get("seed", 0))
    model = ModelConfig.from_dict({**cfg.get("model", {}), "seed": derive_seed(seed, "model")})
    tdict = {**cfg.get("train", {}), "seed": derive_seed(seed, "train")}
    for flag, key in (("epochs", "epochs"), ("lam", "lam"), ("gamma", "gamma")):
        if getattr(args, flag, None) is not None:
            tdict[key] = getattr(args, flag)
    train = TrainConfig.from_dict(tdict)
    adict = {**cfg.get("adapt", {}), "seed": derive_seed(seed, "adapt")}
    if getattr(args, "groups", None):
        adict["groups"] = [g.strip() for g in args.groups.split(",") if g.strip()]
    if getattr(args, "add_srelu", False):
        adict["add_srelu"] = True
    adapt_cfg = AdaptConfig.from_dict(adict)
    sdict = dict(cfg.get("scoring", {}))
    if getattr(args, "alpha", None) is not None:
        sdict["alpha"] = args.alpha
    unknown = set(sdict) - {"alpha", "floor"}
    if unknown:
        raise ConfigError(f"unknown scoring keys {sorted(unknown)}")
    scoring = ScoringConfig(**sdict)
    data = {"attr_kind": "attack", "reg_with_attr": False, **cfg.get("data", {})}
    sweep_cfg = dict(cfg.get("sweep", {}))
    if set(sweep_cfg) - {"grid"}:
        raise ConfigError(f"unknown sweep keys {sorted(set(sweep_cfg) - {'grid'})}")
    return {
        "seed": seed,
        "data": data,
        "model": model.to_dict(),
        "train": train.to_dict(),
        "adapt": adapt_cfg.to_dict(),
        "scoring": {"alpha": scoring.alpha, "floor": scoring.floor},
        "eval": dict(cfg.get("eval", {})),
        "sweep": sweep_cfg,
    }


def write_echo(out_dir: Path, command: str, argv: list[str], resolved: dict, inputs: list, outputs: list) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(canonical_json(resolved) + "\n", encoding="utf-8")
    manifest = {
        "command": command,
        "argv": argv,
        "cwd": os.getcwd(),
        "seed": resolved.get("seed"),
        "resolved_config": resolved,
        "inputs": {str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {str(p): sha256_file(p) for p in outputs if Path(p).is_file()},
        "versions": {"gsasv": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(data: dict, key: str) -> str:
    if not data.get(key):
        raise ConfigError(f"data.{key} is required for this command")
    return data[key]


def load_corpus(data: dict, need_eval: bool = True, need_train: bool = True) -> Corpus:
    asv = read_embeddings(_need(data, "asv"))
    cm = read_embeddings(data["cm"]) if data.get("cm") else None
    meta = read_metadata(data["meta"]) if data.get("meta") else None
    train_trials = read_trials(_need(data, "train_trials")) if need_train else []
    eval_trials = read_trials(_need(data, "eval_trials")) if need_eval else []
    return Corpus(asv, cm, meta, train_trials, eval_trials)


# -- subcommands ------------------------------------------------------------------


def cmd_gen_synth(args, resolved):
    out = Path(args.out)
    base = PRESETS[args.preset].to_dict()
    base.update(resolved["data"].get("synth", {}))
    base["seed"] = derive_seed(resolved["seed"], "synth")
    cfg = SynthConfig.from_dict(base)
    resolved["data"]["synth"] = cfg.to_dict()
    asv, cm, meta = synth_generate(cfg)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "asv.gseb", out / "cm.gseb", out / "meta.tsv"]
    write_embeddings(asv, paths[0])
    write_embeddings(cm, paths[1])
    write_metadata(meta, paths[2])
    write_echo(out, "gen-synth", args.argv, resolved, [], paths)
    print(f"wrote {len(asv)} utterances to {out}")


def cmd_gen_trials(args, resolved):
    meta_path = args.meta or _need(resolved["data"], "meta")
    meta = read_metadata(meta_path)
    caps = {}
    if args.cap:
        caps = {k: args.cap for k in ("target", "nontarget", "spoof")}
    trials = generate_trials(meta, mode=args.mode, seed=derive_seed(resolved["seed"], "trials"),
                             caps=caps, ordered=args.ordered)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "trials.tsv"]
    write_trials(trials, outputs[0])
    if args.eval_fraction:
        tr, ev = split_trials(trials, args.eval_fraction, derive_seed(resolved["seed"], "split"))
        write_trials(tr, out / "train.tsv")
        write_trials(ev, out / "eval.tsv")
        outputs += [out / "train.tsv", out / "eval.tsv"]
    write_echo(out, "gen-trials", args.argv, resolved, [meta_path], outputs)
    counts = {k: sum(t.label == k for t in trials) for k in ("target", "nontarget", "spoof")}
    print(canonical_json(counts))


def cmd_train(args, resolved):
    data = resolved["data"]
    corpus = load_corpus(data, need_eval=False)
    mcfg = ModelConfig.from_dict(resolved["model"])
    tcfg = TrainConfig.from_dict(resolved["train"])
    model, tlog = fit(mcfg, tcfg, corpus, data["attr_kind"], data["reg_with_attr"])
    resolved["model"] = model.cfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    (out / "trainlog.tsv").write_text(tlog.to_tsv(), encoding="utf-8")
    inputs = [data.get(k) for k in ("asv", "cm", "meta", "train_trials")]
    write_echo(out, "train", args.argv, resolved, inputs, [out / "model.ckpt", out / "trainlog.tsv"])
    print(f"model written to {out / 'model.ckpt'}")


def cmd_adapt(args, resolved):
    data = resolved["data"]
    corpus = load_corpus(data, need_eval=False)
    model = load_checkpoint(args.model)
    acfg = AdaptConfig.from_dict(resolved["adapt"])
    targets = target_spec(model.cfg, corpus, data["attr_kind"], data["reg_with_attr"])
    trials = corpus.train_trials
    if corpus.meta is not None:
        # adaptation uses the spoof-domain (countermeasure) speakers only
        cm_speakers = {r.speaker_id for r in corpus.meta.records if not r.is_bonafide}
        trials = [t for t in trials if corpus.meta[t.enroll_id].speaker_id in cm_speakers
                  and corpus.meta[t.test_id].speaker_id in cm_speakers]
    model, tlog = adapt(model, TrialData(trials, corpus.asv, targets), acfg)
    resolved["model"] = model.cfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    (out / "adaptlog.tsv").write_text(tlog.to_tsv(), encoding="utf-8")
    inputs = [args.model] + [data.get(k) for k in ("asv", "cm", "meta", "train_trials")]
    write_echo(out, "adapt", args.argv, resolved, inputs, [out / "model.ckpt", out / "adaptlog.tsv"])
    print(f"adapted model written to {out / 'model.ckpt'}")


def _asv_path(args, resolved) -> str:
    if args.asv:
        return args.asv
    if resolved["data"].get("asv"):
        return resolved["data"]["asv"]
    # fall back to the data the model was trained on
    echo = Path(args.model).resolve().parent / "config.resolved.json"
    if echo.is_file():
        asv = json.loads(echo.read_text(encoding="utf-8"))["data"].get("asv")
        if asv:
            return asv
    raise ConfigError("no ASV embedding file: pass --asv or set data.asv")


def _trials_path(args, resolved) -> str:
    path = args.trials or resolved["eval"].get("trials") or resolved["data"].get("eval_trials")
    if not path:
        raise ConfigError("no trial list: pass --trials or set eval.trials")
    return path


def cmd_score(args, resolved):
    model = load_checkpoint(args.model)
    asv_path, trials_path = _asv_path(args, resolved), _trials_path(args, resolved)
    data = TrialData(read_trials(trials_path), read_embeddings(asv_path))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate(model, data, ScoringConfig(**resolved["scoring"]), score_path=out / "scores.tsv")
    write_echo(out, "score", args.argv, resolved, [args.model, asv_path, trials_path], [out / "scores.tsv"])
    print(f"scores written to {out / 'scores.tsv'}")


def cmd_eval(args, resolved):
    model = load_checkpoint(args.model)
    asv_path, trials_path = _asv_path(args, resolved), _trials_path(args, resolved)
    data = TrialData(read_trials(trials_path), read_embeddings(asv_path))
    out = Path(args.out) if args.out else Path(args.model).resolve().parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report, _ = evaluate(model, data, ScoringConfig(**resolved["scoring"]), score_path=out / "scores.tsv")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_echo(out, "eval", args.argv, resolved, [args.model, asv_path, trials_path],
               [out / "scores.tsv", out / "report.json"])
    print(report.to_json(), end="")


def cmd_sweep(args, resolved):
    grid = parse_grid(args.grid) if args.grid else validate_grid(resolved["sweep"].get("grid", {}))
    if not grid:
        raise ConfigError("sweep needs --grid or sweep.grid in the config")
    resolved["sweep"]["grid"] = grid
    data = resolved["data"]
    only_alpha = set(grid) == {"alpha"}
    model = load_checkpoint(args.model) if args.model else None
    corpus = load_corpus(data, need_train=not (only_alpha and model is not None))
    mcfg = ModelConfig.from_dict(resolved["model"])
    tcfg = TrainConfig.from_dict(resolved["train"])
    if only_alpha and model is None:
        model, _ = fit(mcfg, tcfg, corpus, data["attr_kind"], data["reg_with_attr"])
    run_point = sweep_runner(mcfg, tcfg, corpus, data["attr_kind"], data["reg_with_attr"],
                             model=model if only_alpha else None)
    alpha = resolved["scoring"]["alpha"]
    threads = args.threads or int(os.environ.get("GSASV_THREADS", 0) or 0) or os.cpu_count() or 1
    train_grid = {k: v for k, v in grid.items() if k != "alpha"}
    if threads > 1 and train_grid:
        # one sub-sweep per training point, merged back in grid order
        import itertools

        names = list(train_grid)
        points = [dict(zip(names, c)) for c in itertools.product(*train_grid.values())]
        sub = lambda p: sweep({**{k: [v] for k, v in p.items()}, **({"alpha": grid["alpha"]} if "alpha" in grid else {})},
                              run_point, alpha)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = [r for part in pool.map(sub, points) for r in part]
    else:
        rows = sweep(grid, run_point, alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.tsv").write_text(rows_to_tsv(rows), encoding="utf-8")
    inputs = [args.model] + [data.get(k) for k in ("asv", "cm", "meta", "train_trials", "eval_trials")]
    write_echo(out, "sweep", args.argv, resolved, inputs, [out / "sweep.tsv"])
    print(rows_to_tsv(rows), end="")


def cmd_check(args, resolved):
    from .checks import run_checks

    ok = run_checks(quick=not args.full)
    if not ok:
        raise NumericalError("one or more checks failed")


def cmd_replay(args, resolved):
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    os.chdir(manifest["cwd"])
    return run(manifest["argv"])


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "gen-trials": cmd_gen_trials,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "score": cmd_score,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "check": cmd_check,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsasv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        if out_required is not None:
            sp.add_argument("--out", required=out_required)
        return sp

    sp = common(sub.add_parser("gen-synth", help="generate synthetic embeddings and metadata"))
    sp.add_argument("--preset", choices=sorted(PRESETS), default="separable")

    sp = common(sub.add_parser("gen-trials", help="build trial lists from metadata"))
    sp.add_argument("--meta")
    sp.add_argument("--mode", choices=("full", "sampled"), default="full")
    sp.add_argument("--cap", type=int, help="per-class cap in sampled mode")
    sp.add_argument("--ordered", action="store_true", help="emit both directions of bonafide pairs")
    sp.add_argument("--eval-fraction", type=float, help="also write a held-out train/eval split")

    sp = common(sub.add_parser("train", help="train a backend model"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--gamma", type=float)

    sp = common(sub.add_parser("adapt", help="adapt selected parameter groups of a trained model"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--groups", help="comma-separated subset of NETWORK,FC,BN,SRELU")
    sp.add_argument("--add-srelu", action="store_true")
    sp.add_argument("--epochs", type=int)

    for name in ("score", "eval"):
        sp = common(sub.add_parser(name, help=f"{name} a trial list"), out_required=(name == "score"))
        sp.add_argument("--model", required=True)
        sp.add_argument("--trials")
        sp.add_argument("--asv")
        sp.add_argument("--alpha", type=float)

    sp = common(sub.add_parser("sweep", help="EER tables over alpha/lambda/gamma/epsilon grids"))
    sp.add_argument("--grid", action="append", help="name=start:step:stop or name=v1,v2,...")
    sp.add_argument("--model", help="reuse this model for alpha-only sweeps")
    sp.add_argument("--alpha", type=float)

    sp = common(sub.add_parser("check", help="run gradient checks and oracle comparisons"), out_required=None)
    sp.add_argument("--full", action="store_true")

    sp = sub.add_parser("replay", help="re-run a command from its manifest")
    sp.add_argument("manifest")
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.command == "replay":
            return cmd_replay(args, None)
        resolved = resolve(load_config(args.config), args)
        from threadpoolctl import threadpool_limits

        # single-threaded BLAS keeps results bit-identical for any --threads value
        with threadpool_limits(limits=1):
            COMMANDS[args.command](args, resolved)
        return 0
    except NumericalError as exc:
        print(f"gsasv: numerical error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"gsasv: data error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError) as exc:
        print(f"gsasv: error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, ConfigError) else 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
