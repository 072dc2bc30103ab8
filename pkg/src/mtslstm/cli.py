"""Command-line experiment driver.

Everything that affects numbers comes from a JSON config (``--config``);
flags only name inputs and outputs. Each command writes the resolved config
(defaults filled in) as ``config.json`` beside its outputs.

Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 config schema, 4 missing input.
Set ``MTSLSTM_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .analysis import (
    ALL,
    ablate_and_route,
    bootstrap_diff_ci,
    collect_gate_traces,
    dyck_accuracy_by_timescale,
    evaluate_lm,
    fit_timescale_distribution,
    spearman,
    word_ablation_decay,
)
from .corpus import BIN_NAMES, CorpusBundle, generate_markov_corpus, load_corpus_files
from .dyck import DyckGrammarParams, build_dyck_dataset, distance_histogram, load_jsonl, power_law_fit, save_jsonl
from .model import CheckpointError, LmConfig, build_dyck_model, build_lm, read_checkpoint
from .reports import report_bundle, write_csv
from .train import AdamConfig, SgdAsgdConfig, train_dyck, train_lm

log = logging.getLogger("mtslstm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_SCHEMA, EXIT_MISSING = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


class MissingInput(Exception):
    pass


# --------------------------------------------------------------------------
# config schemas
# --------------------------------------------------------------------------

def _num(default, minimum=None, exclusive=False, kind="number"):
    s = {"type": kind, "default": default}
    if minimum is not None:
        s["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return s


def _int(default, minimum=None):
    return _num(default, minimum, kind="integer")


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False,
            "default": {}}


SEED = _int(0, 0)

LM_MODEL = _obj({
    "kind": {"enum": ["baseline", "multi-timescale"], "default": "multi-timescale"},
    "emb_size": _int(400, 1),
    "hidden_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1,
                     "default": [1150, 1150, 400]},
    "alpha": _num(0.56, 0, exclusive=True),
    "short_timescales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1,
                         "default": [3.0, 4.0]},
    "mode": {"enum": ["quantile", "sample"], "default": "quantile"},
    "emb_init": _num(0.1, 0, exclusive=True),
})

SGD = _obj({
    "lr": _num(20.0, 0, exclusive=True),
    "weight_decay": _num(1.2e-6, 0),
    "clip_norm": {"type": ["number", "null"], "default": 0.25},
    "epochs": _int(1000, 1),
    "nonmono": _int(5, 1),
    "batch_size": _int(20, 1),
    "eval_batch_size": _int(10, 1),
    "train_len": _int(70, 1),
    "short_len": _int(35, 1),
    "p_long": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.95},
    "eval_len": _int(70, 1),
})

ADAM = _obj({
    "lr": _num(1e-4, 0, exclusive=True),
    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.9},
    "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.999},
    "eps": _num(1e-8, 0, exclusive=True),
    "epochs": _int(2000, 1),
    "batch_size": _int(1, 1),
    "clip_norm": {"type": ["number", "null"], "default": None},
})

SCHEMAS = {
    "prepare-corpus": _obj({}),
    "gen-markov": _obj({"seed": SEED, "length": {"type": ["integer", "null"], "minimum": 2, "default": None}}),
    "gen-dyck": _obj({
        "p1": _num(0.25, 0, exclusive=True), "p2": _num(0.25, 0, exclusive=True),
        "q": _num(0.25, 0, exclusive=True), "max_len": _int(200, 2),
        "n_train": _int(10_000, 1), "n_valid": _int(2_000, 1), "n_test": _int(5_000, 1), "seed": SEED,
    }),
    "train-lm": _obj({"seed": SEED, "model": LM_MODEL, "optim": SGD}),
    "train-dyck": _obj({
        "seed": SEED,
        "model": _obj({
            "hidden_size": _int(256, 2),
            "timescale": {"enum": ["baseline", "inverse-gamma"], "default": "baseline"},
            "alpha": _num(1.5, 0, exclusive=True),
            "init_range": {"type": ["number", "null"], "default": None},
        }),
        "optim": ADAM,
    }),
    "eval": _obj({
        "split": {"enum": ["valid", "test"], "default": "test"},
        "batch_size": _int(1, 1), "window": _int(70, 1),
        "bootstrap": _obj({"block_len": _int(100, 1), "n": _int(10_000, 1), "seed": SEED,
                           "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1,
                                     "default": 0.95}}),
    }),
    "fit-timescales": _obj({
        "split": {"enum": ["valid", "test"], "default": "test"},
        "layers": {"oneOf": [{"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                             {"const": "all"}], "default": [1]},
        "K": _int(70, 1),
        "max_sequences": {"type": ["integer", "null"], "minimum": 1, "default": None},
        "alpha_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1,
                       "default": [round(0.1 * k, 1) for k in range(1, 31)]},
        "mu_grid": {"type": "array", "items": {"type": "number"}, "minItems": 1,
                    "default": [round(0.1 * k, 1) for k in range(1, 31)]},
        "sigma": _num(0.1, 0, exclusive=True),
    }),
    "ablate": _obj({
        "split": {"enum": ["valid", "test"], "default": "test"},
        "layer": _int(1, 0), "group_size": _int(50, 1), "ablate_cell": {"type": "boolean", "default": False},
        "batch_size": _int(1, 1),
    }),
    "word-ablate": _obj({
        "split": {"enum": ["valid", "test"], "default": "test"},
        "ablate_pos": _int(0, 0), "min_len": _int(20, 2), "max_sentences": _int(500, 1),
        "policy": {"enum": ["unk", "zero"], "default": "unk"},
        "group_layer": {"type": ["integer", "null"], "minimum": 0, "default": None},
        "group_size": _int(100, 1),
    }),
    "dyck-eval": _obj({
        "split": {"enum": ["train", "valid", "test"], "default": "test"},
        "bucket_edges": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2,
                         "default": [0, 25, 50, 75, 100, 125, 150, 200]},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.5},
    }),
    "sweep-alpha": _obj({
        "seed": SEED,
        "alphas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1,
                   "default": [0.56, 1.0, 1.4, 2.0]},
        "model": LM_MODEL, "optim": SGD,
        "eval_batch_size": _int(1, 1),
    }),
}


def _fill_defaults(schema: dict, value):
    if schema.get("type") == "object" and isinstance(value, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in value and "default" in sub:
                value[key] = copy.deepcopy(sub["default"])
            if key in value:
                value[key] = _fill_defaults(sub, value[key])
    return value


def resolve_config(command: str, raw: dict | None) -> dict:
    """Validate a raw config against the command's schema and fill defaults."""
    schema = SCHEMAS[command]
    cfg = copy.deepcopy(raw) if raw is not None else {}
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    cfg = _fill_defaults(schema, cfg)
    if command == "gen-dyck":
        try:
            DyckGrammarParams(cfg["p1"], cfg["p2"], cfg["q"], cfg["max_len"])
        except ValueError as exc:
            raise ConfigError(f"config: {exc}") from None
    return cfg


def _load_config(path) -> dict | None:
    if path is None:
        return None
    p = _need(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"no such file or directory: {p}")
    return p


def _write_config(out: Path, command: str, cfg: dict, inputs: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg, "inputs": {k: str(v) for k, v in inputs.items() if v is not None}}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# loaders
# --------------------------------------------------------------------------

def _corpus(path) -> CorpusBundle:
    return CorpusBundle.load(_need(path))


def _checkpoint(path, kind: str):
    try:
        ck = read_checkpoint(_need(path))
    except CheckpointError as exc:
        raise RuntimeError(str(exc)) from None
    if ck.model.kind != kind:
        raise RuntimeError(f"{path}: expected a {kind} checkpoint, got {ck.model.kind}")
    return ck.model


def _dyck_split(data_dir, split: str):
    return load_jsonl(_need(Path(data_dir) / f"{split}.jsonl"))


def _lm_config(model_cfg: dict, vocab_size: int, seed: int, alpha=None) -> LmConfig:
    a = model_cfg["alpha"] if alpha is None else alpha
    common = dict(emb_size=model_cfg["emb_size"], hidden_sizes=tuple(model_cfg["hidden_sizes"]),
                  emb_init=model_cfg["emb_init"], timescale_seed=seed)
    if model_cfg["kind"] == "baseline" and alpha is None:
        return LmConfig.baseline(vocab_size, **common)
    return LmConfig.multi_timescale(vocab_size, alpha=a, short=tuple(model_cfg["short_timescales"]),
                                    mode=model_cfg["mode"], **common)


def _sgd(cfg: dict) -> SgdAsgdConfig:
    return SgdAsgdConfig(**cfg)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_prepare_corpus(args, cfg):
    bundle = load_corpus_files(_need(args.train), _need(args.valid), _need(args.test))
    out = Path(args.out)
    bundle.save(out)
    _write_config(out, "prepare-corpus", cfg, {"train": args.train, "valid": args.valid, "test": args.test})
    log.info("vocabulary %d, sizes %s", len(bundle.vocab), bundle.sizes)


def cmd_gen_markov(args, cfg):
    src = _corpus(args.corpus)
    bundle = generate_markov_corpus(src, cfg["length"], seed=cfg["seed"])
    out = Path(args.out)
    bundle.save(out)
    _write_config(out, "gen-markov", cfg, {"corpus": args.corpus})


def cmd_gen_dyck(args, cfg):
    params = DyckGrammarParams(cfg["p1"], cfg["p2"], cfg["q"], cfg["max_len"])
    data = build_dyck_dataset(params, cfg["n_train"], cfg["n_valid"], cfg["n_test"], seed=cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, seqs in data.items():
        save_jsonl(seqs, out / f"{split}.jsonl")
    hist = distance_histogram(data["train"])
    write_csv(out / "distances.csv", ("distance", "count"), sorted(hist.items()))
    try:
        slope, intercept, r2 = power_law_fit(hist)
        _write_json(out / "powerlaw.json", {"slope": slope, "intercept": intercept, "r2": r2, "lo": 2, "hi": 100})
    except ValueError as exc:
        log.warning("power-law fit skipped: %s", exc)
    _write_config(out, "gen-dyck", cfg, {})


def cmd_train_lm(args, cfg):
    corpus = _corpus(args.corpus)
    model = build_lm(_lm_config(cfg["model"], len(corpus.vocab), cfg["seed"]), seed=cfg["seed"])
    out = Path(args.out)
    _write_config(out, "train-lm", cfg, {"corpus": args.corpus})
    train_lm(model, corpus, _sgd(cfg["optim"]), seed=cfg["seed"], log_path=out / "log.csv",
             timing_path=out / "timing.csv", checkpoint_path=out / "model.ckpt")


def cmd_train_dyck(args, cfg):
    seqs = _dyck_split(args.data, "train")
    m = cfg["model"]
    model = build_dyck_model(m["hidden_size"], m["timescale"], m["alpha"], seed=cfg["seed"], init_range=m["init_range"])
    out = Path(args.out)
    _write_config(out, "train-dyck", cfg, {"data": args.data})
    train_dyck(model, seqs, AdamConfig(**cfg["optim"]), seed=cfg["seed"], log_path=out / "log.csv",
               checkpoint_path=out / "model.ckpt")


def _label(path) -> str:
    """Checkpoint display name: the file stem, or its run directory for the default ``model.ckpt``."""
    p = Path(path).resolve()
    return p.parent.name if p.stem == "model" else p.stem


def _table_rows(name, report):
    return [(name, b, p) for b, p in report.table_row().items()]


def cmd_eval(args, cfg):
    corpus = _corpus(args.corpus)
    tokens = getattr(corpus, cfg["split"])
    models = [("model", args.model)] + ([("compare", args.compare)] if args.compare else [])
    reports = []
    for name, path in models:
        model = _checkpoint(path, "lm")
        reports.append(evaluate_lm(model, tokens, corpus.vocab, cfg["batch_size"], cfg["window"]))
    out = Path(args.report)
    _write_config(out, "eval", cfg, {"model": args.model, "compare": args.compare, "corpus": args.corpus})
    labels = [_label(path) for _, path in models]
    if len(set(labels)) < len(labels):
        labels = [name for name, _ in models]
    rows = [row for label, rep in zip(labels, reports) for row in _table_rows(label, rep)]
    write_csv(out / "table1.csv", ("model", "bin", "perplexity"), rows)
    if len(reports) == 2:
        a, b = reports
        bs = cfg["bootstrap"]
        brows = []
        for k, name in [(None, ALL)] + list(enumerate(BIN_NAMES)):
            mask = None if k is None else (a.bins == k)
            if mask is not None and not mask.any():
                continue
            r = bootstrap_diff_ci(a.nll, b.nll, bs["block_len"], bs["n"], bs["seed"], mask=mask, level=bs["level"])
            brows.append((name, r.point, r.mean, r.lo, r.hi, r.n_blocks, int(r.significant)))
        write_csv(out / "bootstrap.csv", ("bin", "point", "mean", "lo", "hi", "n_blocks", "significant"), brows)


def cmd_fit_timescales(args, cfg):
    corpus = _corpus(args.corpus)
    model = _checkpoint(args.model, "lm")
    tokens = getattr(corpus, cfg["split"])
    layers = range(len(model.layers)) if cfg["layers"] == "all" else cfg["layers"]
    pooled, rows, corr = [], [], {}
    for layer in layers:
        if layer >= len(model.layers):
            raise RuntimeError(f"layer {layer} out of range (model has {len(model.layers)})")
        est = collect_gate_traces(model, tokens, layer, cfg["K"], cfg["max_sequences"]).estimated_timescales()
        spec = model.specs.get(layer)
        assigned = spec.timescales if spec is not None else np.full(est.size, math.nan)
        rows += [(layer, u, float(assigned[u]), float(est[u])) for u in range(est.size)]
        if spec is not None:
            corr[str(layer)] = spearman(assigned, est)
        pooled.append(est)
    samples = np.concatenate(pooled)
    fit = fit_timescale_distribution(samples, cfg["alpha_grid"], cfg["mu_grid"], cfg["sigma"])
    out = Path(args.report)
    _write_config(out, "fit-timescales", cfg, {"model": args.model, "corpus": args.corpus})
    write_csv(out / "timescales.csv", ("layer", "unit", "assigned_T", "estimated_T"), rows)
    best = fit.pop("best")
    write_csv(out / "ksfit.csv", ("family", "param", "D"),
              [(r.family, float(p), float(d)) for r in fit.values() for p, d in zip(r.grid, r.D)])
    _write_json(out / "fit.json", {"best_family": best,
                                   "best": {f: {"param": float(r.best_param), "D": float(r.best_D)}
                                            for f, r in fit.items()},
                                   "spearman": corr})


def cmd_ablate(args, cfg):
    corpus = _corpus(args.corpus)
    model = _checkpoint(args.model, "lm")
    groups = ablate_and_route(model, getattr(corpus, cfg["split"]), cfg["layer"], cfg["group_size"],
                              vocab=corpus.vocab, batch_size=cfg["batch_size"], ablate_cell=cfg["ablate_cell"])
    out = Path(args.report)
    _write_config(out, "ablate", cfg, {"model": args.model, "corpus": args.corpus})
    rows = [(g.group, g.mean_T, b, r) for g in groups for b, r in g.ratios.items()]
    write_csv(out / "routing.csv", ("group", "mean_T", "bin", "ratio"), rows)


def split_sentences(tokens, eos_id: int, min_len: int, limit: int):
    """Cut a stream at ``eos_id``; keep sentences with at least ``min_len`` tokens."""
    out, start = [], 0
    tokens = np.asarray(tokens)
    for end in np.flatnonzero(tokens == eos_id):
        if end - start >= min_len:
            out.append(tokens[start:end])
            if len(out) >= limit:
                break
        start = end + 1
    return out


def cmd_word_ablate(args, cfg):
    corpus = _corpus(args.corpus)
    model = _checkpoint(args.model, "lm")
    unk = corpus.vocab.unk_id
    sents = split_sentences(getattr(corpus, cfg["split"]), corpus.vocab.eos_id,
                            max(cfg["min_len"], cfg["ablate_pos"] + 1), cfg["max_sentences"])
    if cfg["policy"] == "unk":
        sents = [s for s in sents if s[cfg["ablate_pos"]] != unk]
    if not sents:
        raise RuntimeError("no usable sentences for word ablation")
    res = word_ablation_decay(model, sents, cfg["ablate_pos"], cfg["policy"], unk_id=unk,
                              group_layer=cfg["group_layer"], group_size=cfg["group_size"])
    rows = [(f"layer{k}", t, float(v)) for k, curve in enumerate(res["layers"]) for t, v in enumerate(curve)]
    rows += [(f"group{g}:T={mt:.4g}", t, float(v)) for g, (mt, curve) in enumerate(res["groups"])
             for t, v in enumerate(curve)]
    out = Path(args.report)
    _write_config(out, "word-ablate", cfg, {"model": args.model, "corpus": args.corpus})
    write_csv(out / "decay.csv", ("curve", "tau", "value"), rows)


def cmd_dyck_eval(args, cfg):
    model = _checkpoint(args.model, "dyck")
    seqs = _dyck_split(args.data, cfg["split"])
    buckets, overall = dyck_accuracy_by_timescale(model, seqs, cfg["bucket_edges"], cfg["threshold"])
    out = Path(args.report)
    _write_config(out, "dyck-eval", cfg, {"model": args.model, "data": args.data})
    write_csv(out / "dyck_acc.csv", ("bucket_lo", "bucket_hi", "n", "accuracy"),
              [(b.lo, b.hi, b.n, b.accuracy) for b in buckets])
    _write_json(out / "dyck_summary.json", {"overall": overall, "n": len(seqs)})


def cmd_sweep_alpha(args, cfg):
    corpus = _corpus(args.corpus)
    out = Path(args.out)
    _write_config(out, "sweep-alpha", cfg, {"corpus": args.corpus})
    rows = []
    for alpha in cfg["alphas"]:
        model = build_lm(_lm_config(cfg["model"], len(corpus.vocab), cfg["seed"], alpha=alpha), seed=cfg["seed"])
        run = out / f"alpha_{alpha:g}"
        res = train_lm(model, corpus, _sgd(cfg["optim"]), seed=cfg["seed"], log_path=run / "log.csv",
                       timing_path=run / "timing.csv", checkpoint_path=run / "model.ckpt")
        rep = evaluate_lm(res.model, corpus.test, corpus.vocab, batch_size=cfg["eval_batch_size"])
        rows.append((float(alpha), math.exp(res.best_valid), rep.perplexity()))
        log.info("alpha %g: valid %.3f test %.3f", *rows[-1])
    write_csv(out / "sweep.csv", ("alpha", "valid_perplexity", "test_perplexity"), rows)


def cmd_bundle(args, cfg):
    summary = report_bundle(*[_need(d) for d in args.runs])
    text = json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "prepare-corpus": cmd_prepare_corpus,
    "gen-markov": cmd_gen_markov,
    "gen-dyck": cmd_gen_dyck,
    "train-lm": cmd_train_lm,
    "train-dyck": cmd_train_dyck,
    "eval": cmd_eval,
    "fit-timescales": cmd_fit_timescales,
    "ablate": cmd_ablate,
    "word-ablate": cmd_word_ablate,
    "dyck-eval": cmd_dyck_eval,
    "sweep-alpha": cmd_sweep_alpha,
    "bundle": cmd_bundle,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtslstm", description="Multi-timescale LSTM experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help, *flags, config=True):
        sp = sub.add_parser(name, help=help)
        if config:
            sp.add_argument("--config", help="JSON config (defaults used when omitted)")
        for flag, kw in flags:
            sp.add_argument(flag, **kw)
        return sp

    req = {"required": True}
    add("prepare-corpus", "tokenize raw text splits into a corpus bundle",
        ("--train", req), ("--valid", req), ("--test", req), ("--out", req))
    add("gen-markov", "bigram surrogate of a corpus bundle", ("--corpus", req), ("--out", req))
    add("gen-dyck", "generate Dyck-2 train/valid/test JSON-lines files", ("--out", {"default": "."}))
    add("train-lm", "train a word-level model", ("--corpus", req), ("--out", req))
    add("train-dyck", "train a Dyck-2 model", ("--data", req), ("--out", req))
    add("eval", "per-frequency-bin perplexity (and bootstrap CI with --compare)",
        ("--model", req), ("--corpus", req), ("--report", req), ("--compare", {"default": None}))
    add("fit-timescales", "estimate unit timescales and KS-fit their distribution",
        ("--model", req), ("--corpus", req), ("--report", req))
    add("ablate", "timescale-group ablation and per-bin perplexity ratios",
        ("--model", req), ("--corpus", req), ("--report", req))
    add("word-ablate", "cell-state decay after replacing one word",
        ("--model", req), ("--corpus", req), ("--report", req))
    add("dyck-eval", "Dyck-2 accuracy by maximum pair distance", ("--model", req), ("--data", req), ("--report", req))
    add("sweep-alpha", "train and evaluate one model per Inverse Gamma shape", ("--corpus", req), ("--out", req))
    sp = add("bundle", "merge run-directory reports into one JSON summary", ("--out", {"default": None}), config=False)
    sp.add_argument("runs", nargs="+")
    return p


def _set_threads():
    n = os.environ.get("MTSLSTM_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    _set_threads()
    try:
        cfg = None
        if args.command != "bundle":
            cfg = resolve_config(args.command, _load_config(args.config))
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"mtslstm: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (MissingInput, FileNotFoundError) as exc:
        print(f"mtslstm: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"mtslstm: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
