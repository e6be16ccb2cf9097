"""Command-line entry point: ``asba <command> [options]``.

Each command takes an optional JSON ``--config`` file; flags given on the
command line override it. Exit codes: 0 ok, 1 usage, 2 data error, 3
numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from collections import Counter

import numpy as np

from . import bounds
from .fragment import FragmentError, SubgraphVocabulary, decompose, mine_vocabulary
from .gnn import ASBAModel, EncoderConfig
from .molgraph import MolGraphError, read_molecules, to_smiles, write_native_file
from .ssl import BatchTooSmall, PretrainConfig, SSLHeads, mstm_accuracy, pretrain
from .synth import generate
from .tensor import NonFiniteValue, ShapeMismatch, load_checkpoint, save_checkpoint
from .train import (
    AllLabelsMissing,
    Dataset,
    EmptyInput,
    FinetuneConfig,
    SingleClass,
    evaluate,
    finetune,
    scaffold_split,
)

log = logging.getLogger("asba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


ENCODER_DEFAULTS = {"d": 64, "K": 3, "K1": 2, "K2": 3, "eps": 0.0}

DEFAULTS = {
    "mine-vocab": {"corpus": None, "size": 100, "cap": 12, "out": None},
    "generate": {"kind": "motif", "n": 200, "seed": 0, "out": None},
    "decompose": {"input": None, "vocab": None, "out": None},
    "pretrain": {"corpus": None, "vocab": None, "out_dir": None, "mask_ratio": 0.25, "atom_mask_ratio": 0.15,
                 "lambda_cl": 1.0, "batch_size": 32, "epochs": 1, "steps": None, "lr": 1e-3, "seed": 0,
                 **ENCODER_DEFAULTS},
    "finetune": {"data": None, "vocab": None, "out_dir": None, "pretrained": None, "epochs": 30,
                 "batch_size": 32, "lr": 1e-3, "protocol": "full", "seed": 0, "replicates": 1, "split": "scaffold",
                 "fractions": [0.8, 0.1, 0.1], **ENCODER_DEFAULTS},
    "eval": {"data": None, "vocab": None, "checkpoint": None, "split": "test"},
    "bounds-sim": {"preset": "bayes", "tasks": 20, "n": 100000, "seed": 0, "tau": 0.3, "ratio": 1.0,
                   "points": 30, "out": None, "csv": None},
}

REQUIRED = {
    "mine-vocab": ("corpus", "out"),
    "generate": ("out",),
    "decompose": ("input", "vocab"),
    "pretrain": ("corpus", "vocab", "out_dir"),
    "finetune": ("data", "vocab", "out_dir"),
    "eval": ("data", "vocab", "checkpoint"),
    "bounds-sim": (),
}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def resolve_config(command: str, file_cfg: dict, flags: dict) -> dict:
    """Defaults < config file < flags. Unknown keys in the file are rejected."""
    defaults = DEFAULTS[command]
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {**defaults, **file_cfg, **{k: v for k, v in flags.items() if k in defaults}}
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _encoder(cfg, L=1) -> EncoderConfig:
    return EncoderConfig(d=cfg["d"], K=cfg["K"], K1=cfg["K1"], K2=cfg["K2"], eps=cfg["eps"], L=L)


def _seeds(seed: int, k: int) -> list[int]:
    # one generator per run, split per component
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def _load_vocab(path) -> SubgraphVocabulary:
    if not os.path.exists(path):
        raise FileNotFoundError(f"vocabulary file not found: {path}")
    return SubgraphVocabulary.load(path)


def _read(path) -> list[dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"molecule file not found: {path}")
    return read_molecules(path)


# ---------------------------------------------------------------- commands

def cmd_mine_vocab(cfg):
    mols = [r["mol"] for r in _read(cfg["corpus"])]
    vocab = mine_vocabulary(mols, cfg["size"], cfg["cap"])
    vocab.save(cfg["out"])
    hist = Counter(p.n_atoms for p in vocab.patterns)
    print(f"wrote {len(vocab)} patterns to {cfg['out']}")
    for k in sorted(hist):
        print(f"  {k:3d} atoms: {hist[k]}")
    return EXIT_OK


def cmd_generate(cfg):
    recs = generate(cfg["kind"], cfg["n"], cfg["seed"]) if cfg["n"] > 0 else []
    write_native_file(cfg["out"], recs)
    pos = sum(r["labels"][0] for r in recs)
    print(f"wrote {len(recs)} molecules ({pos} positive) to {cfg['out']}")
    return EXIT_OK


def cmd_decompose(cfg):
    vocab = _load_vocab(cfg["vocab"])
    lines = []
    for i, r in enumerate(_read(cfg["input"])):
        d = decompose(r["mol"], vocab)
        s = d.summary()
        s["index"] = i
        s["smiles"] = to_smiles(r["mol"])
        lines.append(json.dumps(s, sort_keys=True))
    text = "\n".join(lines) + ("\n" if lines else "")
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_pretrain(cfg, h):
    vocab = _load_vocab(cfg["vocab"])
    mols = [r["mol"] for r in _read(cfg["corpus"])]
    decomps = [decompose(g, vocab) for g in mols]
    s_model, s_heads, s_train, s_eval = _seeds(cfg["seed"], 4)
    enc = _encoder(cfg)
    model = ASBAModel(enc, seed=s_model)
    heads = SSLHeads(model.store, enc.d, len(vocab), enc.n_atom_types, np.random.default_rng(s_heads))
    pc = PretrainConfig(mask_ratio=cfg["mask_ratio"], atom_mask_ratio=cfg["atom_mask_ratio"],
                        lambda_cl=cfg["lambda_cl"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                        steps=cfg["steps"], lr=cfg["lr"], seed=s_train)
    history = pretrain(model, heads, mols, decomps, pc)
    acc = mstm_accuracy(model, heads, mols, decomps, cfg["mask_ratio"], seed=s_eval)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    meta = {"config": cfg, "config_hash": h, "encoder": enc.to_dict(), "kind": "pretrain"}
    save_checkpoint(os.path.join(cfg["out_dir"], "checkpoint.bin"), model.store.snapshot(), len(history), meta)
    report = {"config": cfg, "config_hash": h, "steps": len(history), "history": history,
              "mstm_accuracy": acc, "vocab_size": len(vocab)}
    _write_json(os.path.join(cfg["out_dir"], "metrics.json"), report)
    last = history[-1] if history else {}
    print(f"pretrained {len(history)} steps; final loss {last.get('total', float('nan')):.4f}; "
          f"masked-token accuracy {acc:.4f}")
    return EXIT_OK


def _split_tags(ds: Dataset, cfg) -> np.ndarray:
    mode = cfg["split"]
    fr = tuple(cfg["fractions"])
    if mode == "scaffold":
        return scaffold_split(ds.molecules, fr, "deterministic")
    if mode == "random_scaffold":
        return scaffold_split(ds.molecules, fr, "random", cfg["seed"])
    if mode == "random":
        n = len(ds)
        perm = np.random.default_rng(cfg["seed"]).permutation(n)
        n_tr = int(round(fr[0] * n))
        n_va = int(round(fr[1] * n))
        tags = np.empty(n, dtype=object)
        tags[perm[:n_tr]] = "train"
        tags[perm[n_tr:n_tr + n_va]] = "valid"
        tags[perm[n_tr + n_va:]] = "test"
        return tags
    raise UsageError(f"unknown split mode {mode!r} (scaffold, random_scaffold, random)")


def _finetune_once(cfg, ds, vocab, seed):
    s_model, s_train = _seeds(seed, 2)
    enc = _encoder(cfg, L=ds.n_tasks)
    model = ASBAModel(enc, seed=s_model)
    loaded = []
    if cfg["pretrained"]:
        arrays, _, _ = load_checkpoint(cfg["pretrained"])
        encoder_only = {k: v for k, v in arrays.items() if ".head." not in k}
        loaded = model.store.load_matching(encoder_only, ("atom.", "sub."))
        log.info("loaded %d pretrained tensors", len(loaded))
    fc = FinetuneConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                        protocol=cfg["protocol"], seed=s_train, encoder=enc)
    return finetune(ds, vocab, fc, model=model), enc, loaded


def _mean_std(runs, key):
    vals = [r.test.get(key) for r in runs]
    if any(v is None for v in vals):
        return None
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def cmd_finetune(cfg, h):
    """Fine-tune ``replicates`` times (seeds seed, seed+1, ...). The first run's checkpoint is kept."""
    vocab = _load_vocab(cfg["vocab"])
    ds = Dataset.from_records(_read(cfg["data"]))
    ds.split = _split_tags(ds, cfg)
    if cfg["replicates"] < 1:
        raise UsageError("replicates must be >= 1")
    runs = []
    for k in range(cfg["replicates"]):
        res, enc, loaded = _finetune_once(cfg, ds, vocab, cfg["seed"] + k)
        runs.append(res)
        if k == 0:
            first_enc, first_loaded = enc, loaded
    res = runs[0]
    os.makedirs(cfg["out_dir"], exist_ok=True)
    meta = {"config": cfg, "config_hash": h, "encoder": first_enc.to_dict(), "kind": "finetune"}
    save_checkpoint(os.path.join(cfg["out_dir"], "checkpoint.bin"), res.model.store.snapshot(), res.best_epoch, meta)
    report = {"config": cfg, "config_hash": h, "task": ds.task, "best_epoch": res.best_epoch,
              "history": res.history, "valid": res.valid, "test": res.test,
              "n_pretrained_tensors": len(first_loaded),
              "split_sizes": {s: int((ds.split == s).sum()) for s in ("train", "valid", "test")}}
    if len(runs) > 1:
        report["replicates"] = [{"seed": cfg["seed"] + k, "best_epoch": r.best_epoch, "test": r.test}
                                for k, r in enumerate(runs)]
        report["test_mean_std"] = {k: _mean_std(runs, k) for k in ("f", "g", "asba")}
    _write_json(os.path.join(cfg["out_dir"], "metrics.json"), report)
    _print_metrics(ds.task, res.test, "test")
    if len(runs) > 1:
        print(f"over {len(runs)} replicates (mean +- std)")
        for k, ms in report["test_mean_std"].items():
            print(f"  {k:<6} " + ("n/a" if ms is None else f"{ms['mean']:.4f} +- {ms['std']:.4f}"))
    return EXIT_OK


def _fmt(v):
    return "   n/a" if v is None else f"{v:.4f}"


def _print_metrics(task, m, split):
    name = "ROC-AUC" if task == "classification" else "RMSE"
    print(f"{split} {name}")
    for k, label in (("f", "atom-wise (f)"), ("g", "subgraph-wise (g)"), ("asba", "ASBA (f+g)/2")):
        print(f"  {label:<18} {_fmt(m.get(k))}")


def cmd_eval(cfg, h):
    vocab = _load_vocab(cfg["vocab"])
    arrays, _, meta = load_checkpoint(cfg["checkpoint"])
    if "encoder" not in meta:
        raise UsageError(f"{cfg['checkpoint']}: checkpoint carries no encoder config")
    model = ASBAModel(EncoderConfig(**meta["encoder"]), seed=0)
    model.store.load_matching(arrays)
    ds = Dataset.from_records(_read(cfg["data"]))
    if cfg["split"] == "all":
        idx = np.arange(len(ds))
    else:
        train_cfg = {**DEFAULTS["finetune"], **meta.get("config", {})}
        ds.split = _split_tags(ds, train_cfg)
        idx = ds.indices(cfg["split"])
    decomps = [decompose(g, vocab) for g in ds.molecules]
    m = evaluate(model, ds, idx, decomps)
    _print_metrics(ds.task, m, cfg["split"])
    return EXIT_OK


def cmd_bounds_sim(cfg, h):
    rng = np.random.default_rng(cfg["seed"])
    preset = cfg["preset"]
    report = {"config": cfg, "config_hash": h, "preset": preset}
    if preset == "bayes":
        rows = []
        for i in range(cfg["tasks"]):
            t = bounds.random_task_1d(rng)
            e = bounds.monte_carlo_bayes(t, cfg["n"], rng)
            b = bounds.bayes_bound(t)
            rows.append({"task": i, "mu2": float(t.mu2[0]), "var1": float(t.cov1[0, 0]), "var2": float(t.cov2[0, 0]),
                         "p1": t.p1, "bound": b, "empirical": e.rate, "ci": e.half_width,
                         "holds": bool(e.rate <= b + 3 * e.half_width)})
        report["tasks"] = rows
        report["holds_all"] = all(r["holds"] for r in rows)
        print(f"bayes: bound held in {sum(r['holds'] for r in rows)}/{len(rows)} tasks")
    elif preset == "ensemble":
        rows = []
        for i in range(cfg["tasks"]):
            t = bounds.random_task_1d(rng)
            tau1 = cfg["tau"]
            r = bounds.monte_carlo_noisy_classifiers(t, bounds.ErrorModel.uniform(tau1),
                                                     bounds.ErrorModel.uniform(cfg["ratio"] * tau1), cfg["n"], rng)
            rows.append({"task": i, "err_f": r.f.rate, "err_g": r.g.rate, "err_ensemble": r.ensemble.rate,
                         "ci": r.f.half_width, "ensemble_better": bool(r.ensemble.rate <= r.f.rate)})
        report["tasks"] = rows
        print(f"ensemble: ensemble <= single in {sum(r['ensemble_better'] for r in rows)}/{len(rows)} tasks")
    elif preset == "corollary-sweep":
        ratios = np.linspace(0.1, 3.0, cfg["points"])
        rows = bounds.sweep(ratios, tau1=cfg["tau"])
        report["sweep"] = rows
        report["crossing"] = bounds.crossing(tau1=cfg["tau"])
        print(f"corollary-sweep: bound crossing at tau2/tau1 = {report['crossing']:.12f} (sqrt(3) = {bounds.SQRT3:.12f})")
        if cfg["csv"]:
            with open(cfg["csv"], "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["ratio", "single", "ensemble", "improves", "corollary"])
                w.writeheader()
                for r in rows:
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    else:
        raise UsageError(f"unknown preset {preset!r} (bayes, ensemble, corollary-sweep)")
    if cfg["out"]:
        _write_json(cfg["out"], report)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _opt(p, name, type=None, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, type=type, default=argparse.SUPPRESS, **kw)


def _encoder_opts(p):
    for k in ("d", "K", "K1", "K2"):
        _opt(p, k, int, help=f"encoder {k}")
    _opt(p, "eps", float, help="GIN epsilon")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asba", description="Atom- and subgraph-aware bilateral molecular models")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", default=None, help="JSON config file (flags override)")
        return p

    p = command("mine-vocab", "mine a subgraph vocabulary from a corpus")
    _opt(p, "corpus")
    _opt(p, "size", int)
    _opt(p, "cap", int)
    _opt(p, "out")

    p = command("generate", "write a synthetic labeled dataset")
    _opt(p, "kind", choices=["atoms", "motif"])
    _opt(p, "n", int)
    _opt(p, "seed", int)
    _opt(p, "out")

    p = command("decompose", "decompose molecules with a vocabulary")
    _opt(p, "input")
    _opt(p, "vocab")
    _opt(p, "out")

    p = command("pretrain", "self-supervised pretraining")
    for k in ("corpus", "vocab", "out_dir"):
        _opt(p, k)
    for k in ("mask_ratio", "atom_mask_ratio", "lambda_cl", "lr"):
        _opt(p, k, float)
    for k in ("batch_size", "epochs", "steps", "seed"):
        _opt(p, k, int)
    _encoder_opts(p)

    p = command("finetune", "supervised training of both branches")
    for k in ("data", "vocab", "out_dir", "pretrained"):
        _opt(p, k)
    _opt(p, "protocol", choices=["full", "linear"])
    _opt(p, "split", choices=["scaffold", "random_scaffold", "random"])
    _opt(p, "fractions", float, nargs=3)
    _opt(p, "lr", float)
    for k in ("batch_size", "epochs", "seed", "replicates"):
        _opt(p, k, int)
    _encoder_opts(p)

    p = command("eval", "evaluate a fine-tuned checkpoint")
    for k in ("data", "vocab", "checkpoint"):
        _opt(p, k)
    _opt(p, "split", choices=["train", "valid", "test", "all"])

    p = command("bounds-sim", "evaluate and simulate the error bounds")
    _opt(p, "preset", choices=["bayes", "ensemble", "corollary-sweep"])
    for k in ("tasks", "n", "seed", "points"):
        _opt(p, k, int)
    for k in ("tau", "ratio"):
        _opt(p, k, float)
    _opt(p, "out")
    _opt(p, "csv")
    return ap


HANDLERS = {
    "mine-vocab": lambda c, h: cmd_mine_vocab(c),
    "generate": lambda c, h: cmd_generate(c),
    "decompose": lambda c, h: cmd_decompose(c),
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bounds-sim": cmd_bounds_sim,
}

DATA_ERRORS = (MolGraphError, FragmentError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError,
               EmptyInput, AllLabelsMissing, SingleClass, ShapeMismatch, BatchTooSmall)
NUMERIC_ERRORS = (NonFiniteValue, FloatingPointError, bounds.SingularCovariance, bounds.DegenerateBoundary,
                  np.linalg.LinAlgError)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_cfg = {}
        if args.config:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
            if not isinstance(file_cfg, dict):
                raise UsageError(f"{args.config}: config must be a JSON object")
        cfg = resolve_config(args.command, file_cfg, flags)
        h = config_hash({"command": args.command, **cfg})
        log.info("resolved config %s (hash %s)", json.dumps(cfg, sort_keys=True), h)
        return HANDLERS[args.command](cfg, h)
    except UsageError as e:
        print(f"asba: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as e:
        print(f"asba: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as e:
        print(f"asba: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as e:
        print(f"asba: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
