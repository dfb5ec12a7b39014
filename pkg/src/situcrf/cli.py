"""Command-line entry point: ``situcrf <command> [--config FILE] [flags]``.

Each command reads a JSON config, writes its artifacts and a
``manifest.json`` into ``--out``, and exits with 0 (ok), 2 (config error),
3 (data error) or 4 (numeric failure).  Failures print one JSON record to
stderr.  Input paths in the config can be overridden with environment
variables named ``SITUCRF_<KEY>`` (for example ``SITUCRF_TRAIN``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

from situcrf._io import file_sha256, write_jsonl
from situcrf.augmentation import (AugmentationError, QueryBands, ingest_web_set, load_manifest,
                                  load_retrieval, save_manifest, save_retrieval, select_queries,
                                  self_train_loop, simulate_retrieval)
from situcrf.crf import OffSupportError
from situcrf.dataset import (DataError, SynthConfig, count_frequencies, load_dataset,
                             load_partial_dataset, save_dataset, save_partial_dataset,
                             synth_generate)
from situcrf.evaluation import (EvaluationError, evaluate, load_predictions, predict,
                                report_by_frequency, save_predictions, save_report)
from situcrf.potentials import FAMILIES, init_model, load_model, save_model
from situcrf.schema import LexiconError, load_lexicon, save_lexicon
from situcrf.training import (DESK_PRETRAIN, DESK_SUPERVISED, PROFILES, NumericError,
                              OptimizerConfig, grad_check, pretrain_marginal, train_supervised)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PATH_KEYS = ("lexicon", "train", "dev", "gold", "web", "model", "init", "predictions",
             "queries", "retrieval")
DECODES = ("joint", "max-marginal")


class ConfigError(ValueError):
    pass


def tiny_lexicon_path() -> Path:
    """Path of the small lexicon shipped with the package."""
    return Path(str(resources.files("situcrf") / "data" / "tiny_lexicon.jsonl"))


# ---------------------------------------------------------------------------
# config handling

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return cfg


def resolve(args) -> dict:
    """Merge config file, flags and path overrides from the environment."""
    cfg = _read_config(args.config)
    for key in PATH_KEYS:
        env = os.environ.get(f"SITUCRF_{key.upper()}")
        if env:
            cfg[key] = env
    for key in ("seed", "workers", "family", "decode"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    cfg.setdefault("workers", 1)
    if not isinstance(cfg["seed"], int) or not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("seed must be an integer and workers a positive integer")
    if "family" in cfg and cfg["family"] not in FAMILIES:
        raise ConfigError(f"unknown family {cfg['family']!r}; choose from {', '.join(FAMILIES)}")
    if cfg.get("decode") is not None and cfg["decode"] not in DECODES:
        raise ConfigError(f"unknown decode mode {cfg['decode']!r}")
    return cfg


def _need(cfg, key):
    if key not in cfg:
        raise ConfigError(f"missing config key {key!r}")
    path = cfg[key]
    if key in PATH_KEYS and not Path(path).exists():
        raise ConfigError(f"{key}: no such file: {path}")
    return path


def _record(cfg, name, fields_cls, base=None):
    """Build a frozen dataclass from ``cfg[name]``, rejecting unknown keys."""
    raw = cfg.get(name, {})
    if fields_cls is OptimizerConfig and isinstance(raw, str):
        if raw not in PROFILES:
            raise ConfigError(f"{name}: unknown profile {raw!r}; choose from {', '.join(PROFILES)}")
        return PROFILES[raw]
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    raw = dict(raw)
    profile = raw.pop("profile", None) if fields_cls is OptimizerConfig else None
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"{name}: unknown profile {profile!r}")
        base = PROFILES[profile]
    known = {f.name for f in fields(fields_cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"{name}: unknown keys {', '.join(extra)}")
    try:
        return replace(base, **raw) if base is not None else fields_cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _optimizer(cfg, name, base):
    opt = _record(cfg, name, OptimizerConfig, base)
    if name not in cfg or "seed" not in (cfg[name] if isinstance(cfg[name], dict) else {}):
        opt = replace(opt, seed=cfg["seed"])
    return opt


def _dims(cfg):
    d = {"m": 32, "o": 32, "t": 1, **cfg.get("dims", {})}
    if set(d) - {"m", "o", "t"}:
        raise ConfigError(f"dims: unknown keys {sorted(set(d) - {'m', 'o', 't'})}")
    return d


# ---------------------------------------------------------------------------
# commands; each returns {artifact name: path}

def cmd_synth(cfg, out: Path, inputs: dict) -> dict:
    synth = _record(cfg, "synth", SynthConfig)
    try:
        synth.check()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train, dev, lex, world = synth_generate(synth, cfg["seed"], return_world=True)
    arts = {"lexicon": out / "lexicon.jsonl", "train": out / "train.jsonl", "dev": out / "dev.jsonl"}
    save_lexicon(lex, arts["lexicon"])
    save_dataset(train, arts["train"])
    save_dataset(dev, arts["dev"])
    if "web" in cfg:
        web = dict(cfg["web"])
        bands = QueryBands(**web.pop("bands", {}))
        per_query, noise = int(web.pop("per_query", 20)), float(web.pop("noise_rate", 0.2))
        if web:
            raise ConfigError(f"web: unknown keys {sorted(web)}")
        manifest = select_queries(count_frequencies(train), lex, bands)
        arts["queries"] = out / "queries.jsonl"
        arts["retrieval"] = out / "retrieval.jsonl"
        save_manifest(manifest, arts["queries"])
        save_retrieval(simulate_retrieval(world, manifest, per_query, noise, cfg["seed"]),
                       arts["retrieval"])
    print(f"synth: {len(train)} train, {len(dev)} dev, {len(lex.verbs)} verbs, "
          f"{lex.index.n_triples} candidate triples")
    return arts


def _lexicon(cfg, inputs):
    path = _need(cfg, "lexicon")
    inputs["lexicon"] = path
    return load_lexicon(path)


def _dataset(cfg, key, lex, inputs, partial=False):
    path = _need(cfg, key)
    inputs[key] = path
    return (load_partial_dataset if partial else load_dataset)(path, lex)


def _fresh_model(cfg, lex, p, freq):
    family = cfg.get("family", "tensor+reg")
    d = _dims(cfg)
    try:
        return init_model(lex.index, family, p, m=d["m"], o=d["o"], t=d["t"], seed=cfg["seed"],
                          freq=freq, prune_below=int(cfg.get("prune_below", 10)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _start_model(cfg, lex, p, freq, inputs):
    if "init" in cfg:
        inputs["init"] = _need(cfg, "init")
        model = load_model(cfg["init"], lex.index)
        if model.p != p:
            raise DataError(f"init checkpoint has p={model.p}, data has p={p}")
        return model
    return _fresh_model(cfg, lex, p, freq)


def _save_trace(trace, path):
    write_jsonl(path, "situcrf.trace", trace)


def cmd_train(cfg, out, inputs):
    lex = _lexicon(cfg, inputs)
    train = _dataset(cfg, "train", lex, inputs)
    dev = _dataset(cfg, "dev", lex, inputs) if "dev" in cfg else []
    if not train:
        raise DataError("training set is empty")
    freq = count_frequencies(train)
    opt = _optimizer(cfg, "optimizer", DESK_SUPERVISED)
    model = _start_model(cfg, lex, train[0].features.shape[0], freq, inputs)
    state, trace = train_supervised(train, dev, model, opt, freq=freq, decode=cfg.get("decode"),
                                    workers=cfg["workers"])
    arts = {"model": out / "model.ckpt", "trace": out / "trace.jsonl"}
    save_model(state.params, arts["model"], {"optimizer": opt.to_dict(),
                                             "update_count": state.update_count})
    _save_trace(trace, arts["trace"])
    last = trace[-1]
    print(f"train: {state.update_count} updates, final loss {last['train_loss']:.4f}, "
          f"best dev mean {state.best_dev_metric:.4f}")
    return arts


def cmd_pretrain(cfg, out, inputs):
    lex = _lexicon(cfg, inputs)
    web = _dataset(cfg, "web", lex, inputs, partial=True)
    if not web:
        raise DataError("web set is empty")
    train = _dataset(cfg, "train", lex, inputs) if "train" in cfg else []
    dev = _dataset(cfg, "dev", lex, inputs) if "dev" in cfg else None
    freq = count_frequencies(train) if train else None
    opt = _optimizer(cfg, "optimizer", DESK_PRETRAIN)
    model = _start_model(cfg, lex, web[0].features.shape[0], freq, inputs)
    state = pretrain_marginal(web, model, opt, dev=dev, freq=freq, decode=cfg.get("decode"),
                              workers=cfg["workers"])
    arts = {"model": out / "model.ckpt", "trace": out / "trace.jsonl"}
    save_model(state.params, arts["model"], {"optimizer": opt.to_dict(),
                                             "update_count": state.update_count})
    _save_trace(state.trace, arts["trace"])
    print(f"pretrain: {state.update_count} updates on {len(web)} web images")
    return arts


def cmd_selftrain(cfg, out, inputs):
    lex = _lexicon(cfg, inputs)
    train = _dataset(cfg, "train", lex, inputs)
    dev = _dataset(cfg, "dev", lex, inputs)
    web = _dataset(cfg, "web", lex, inputs, partial=True)
    inputs["model"] = _need(cfg, "model")
    model = load_model(cfg["model"], lex.index)
    freq = count_frequencies(train)
    schedule = tuple(int(k) for k in cfg.get("k_schedule", (10, 20)))
    if not schedule or min(schedule) < 1:
        raise ConfigError("k_schedule must list positive integers")
    state, best = self_train_loop(
        web, train, dev, model, freq,
        pretrain_cfg=_optimizer(cfg, "pretrain_optimizer", DESK_PRETRAIN),
        train_cfg=_optimizer(cfg, "optimizer", DESK_SUPERVISED),
        k_schedule=schedule, init=lambda: _fresh_model(cfg, lex, model.p, freq),
        decode=cfg.get("decode"), threshold=int(cfg.get("threshold", 10)))
    arts = {"model": out / "model.ckpt", "result": out / "selftrain.jsonl"}
    save_model(state.params, arts["model"], {"best_dev_mean": best})
    write_jsonl(arts["result"], "situcrf.selftrain", [{"best_dev_mean": best,
                                                       "k_schedule": list(schedule)}])
    print(f"selftrain: best dev mean {best:.4f}")
    return arts


def cmd_queries(cfg, out, inputs):
    lex = _lexicon(cfg, inputs)
    train = _dataset(cfg, "train", lex, inputs)
    bands = _record(cfg, "bands", QueryBands)
    manifest = select_queries(count_frequencies(train), lex, bands)
    arts = {"queries": out / "queries.jsonl"}
    save_manifest(manifest, arts["queries"])
    print(f"queries: {len(manifest)} phrases")
    return arts


def cmd_ingest(cfg, out, inputs):
    lex = _lexicon(cfg, inputs)
    train = _dataset(cfg, "train", lex, inputs)
    inputs["queries"] = _need(cfg, "queries")
    inputs["retrieval"] = _need(cfg, "retrieval")
    web = ingest_web_set(load_manifest(cfg["queries"]), load_retrieval(cfg["retrieval"]), train,
                         cap=int(cfg.get("cap", 200)))
    arts = {"web": out / "web.jsonl"}
    save_partial_dataset(web, arts["web"])
    print(f"ingest: {len(web)} web images")
    return arts


def _predictions(cfg, lex, gold, inputs, out, arts):
    if "predictions" in cfg:
        inputs["predictions"] = _need(cfg, "predictions")
        return load_predictions(cfg["predictions"])
    inputs["model"] = _need(cfg, "model")
    model = load_model(cfg["model"], lex.index)
    preds = predict(model, gold, k=int(cfg.get("k", 5)), mode=cfg.get("decode"),
                    workers=cfg["workers"])
    arts["predictions"] = out / "predictions.jsonl"
    save_predictions(preds, arts["predictions"])
    return preds


def cmd_eval(cfg, out, inputs):
    lex = _lexicon(cfg, inputs)
    gold = _dataset(cfg, "gold", lex, inputs)
    freq = count_frequencies(_dataset(cfg, "train", lex, inputs)) if "train" in cfg else None
    arts = {}
    preds = _predictions(cfg, lex, gold, inputs, out, arts)
    report = evaluate(preds, gold, freq, int(cfg.get("threshold", 10)))
    arts["report"] = out / "report.jsonl"
    arts["table"] = out / "report.txt"
    save_report(report, arts["report"])
    arts["table"].write_text(report.table() + "\n", encoding="utf-8")
    print(report.table())
    return arts


def cmd_bins(cfg, out, inputs):
    lex = _lexicon(cfg, inputs)
    gold = _dataset(cfg, "gold", lex, inputs)
    freq = count_frequencies(_dataset(cfg, "train", lex, inputs))
    arts = {}
    preds = _predictions(cfg, lex, gold, inputs, out, arts)
    rows = report_by_frequency(preds, gold, freq, tuple(cfg.get("edges", (0, 1, 5, 10, 35, 100, 1000))))
    arts["bins"] = out / "bins.jsonl"
    write_jsonl(arts["bins"], "situcrf.bins", rows)
    for r in rows:
        acc = "-" if r["accuracy"] is None else f"{r['accuracy']:.4f}"
        print(f"{r['bin']:>12} {r['measure']:<15} {acc:>7} n={r['n']}")
    return arts


def cmd_gradcheck(cfg, out, inputs):
    families = cfg.get("families", list(FAMILIES))
    if "family" in cfg:
        families = [cfg["family"]]
    tol = float(cfg.get("tolerance", 1e-4))
    rows, ok = [], True
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown family {fam!r}")
        rep = grad_check(fam, tol, seed=cfg["seed"])
        for line in rep.lines():
            print(line)
        for (obj, name), err in sorted(rep.errors.items()):
            rows.append({"family": fam, "objective": obj, "tensor": name, "max_rel_error": err})
        ok &= rep.passed
    arts = {"gradcheck": out / "gradcheck.jsonl"}
    write_jsonl(arts["gradcheck"], "situcrf.gradcheck", rows, tolerance=tol)
    if not ok:
        raise NumericError(f"gradient check above tolerance {tol:g}")
    return arts


def cmd_oracle(cfg, out, inputs):
    from situcrf.oracle import run_suite

    if "lexicon" not in cfg:
        cfg["lexicon"] = str(tiny_lexicon_path())
    lex = _lexicon(cfg, inputs)
    tol = float(cfg.get("tolerance", 1e-9))
    deltas = run_suite(lex, cfg["seed"], int(cfg.get("tables", 5)))
    rows = [{"check": k, "max_abs_delta": v if math.isfinite(v) else None, "passed": bool(v < tol)}
            for k, v in deltas.items()]
    for r in rows:
        print(f"{r['check']:<20} {deltas[r['check']]:.3e} {'ok' if r['passed'] else 'FAIL'}")
    arts = {"oracle": out / "oracle.jsonl"}
    write_jsonl(arts["oracle"], "situcrf.oracle", rows, tolerance=tol)
    if not all(r["passed"] for r in rows):
        raise NumericError(f"oracle deltas above {tol:g}")
    return arts


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic benchmark (and optionally a web set)"),
    "train": (cmd_train, "supervised training with the noisy-or objective"),
    "pretrain": (cmd_pretrain, "marginal-likelihood pretraining on a web set"),
    "selftrain": (cmd_selftrain, "filter a web set with a trained model and retrain"),
    "queries": (cmd_queries, "emit the query phrase manifest"),
    "ingest": (cmd_ingest, "build a web set from retrieval results"),
    "eval": (cmd_eval, "score predictions against gold annotations"),
    "bins": (cmd_bins, "top-5 accuracy by training frequency"),
    "gradcheck": (cmd_gradcheck, "analytic vs finite-difference gradients"),
    "oracle": (cmd_oracle, "factorized inference vs brute-force enumeration"),
}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="situcrf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--family", choices=FAMILIES)
        p.add_argument("--decode", choices=DECODES)
        p.add_argument("--out", default=os.environ.get("SITUCRF_OUT", "situcrf-out"),
                       help="output directory (default: %(default)s)")
    return parser


def _config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command, cfg, inputs, arts) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": _config_hash(cfg),
        "seed": cfg["seed"],
        "workers": cfg["workers"],
        "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in sorted(inputs.items())},
        "outputs": {k: {"path": Path(v).name, "sha256": file_sha256(v)} for k, v in sorted(arts.items())},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = {}
        arts = COMMANDS[args.command][0](cfg, out, inputs)
        write_manifest(out, args.command, cfg, inputs, arts)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (NumericError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (DataError, LexiconError, EvaluationError, AugmentationError, OffSupportError,
            OSError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
