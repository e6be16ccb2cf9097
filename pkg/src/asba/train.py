"""Supervised fine-tuning, Adam, scaffold splitting and metrics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .fragment import Decomposition, SubgraphVocabulary, decompose
from .gnn import ASBAModel, EncoderConfig, GraphBatch, bilateral_predict
from .molgraph import MolGraph, scaffold_key
from .tensor import ShapeMismatch, Tensor, backward, bce_with_logits, squared_error

SPLITS = ("train", "valid", "test")


class AllLabelsMissing(ValueError):
    pass


class SingleClass(ValueError):
    pass


class EmptyInput(ValueError):
    pass


# ---------------------------------------------------------------- losses

def supervised_loss(logits: Tensor, y, task: str = "classification") -> Tensor:
    """Per-molecule mean over valid labels, then mean over molecules.

    ``y`` has the shape of ``logits``; NaN marks a missing label. Molecules
    with no valid label are left out of the batch mean.
    """
    y = np.asarray(y, dtype=np.float64).reshape(logits.shape)
    valid = ~np.isnan(y)
    per_mol = valid.sum(axis=1)
    n_mols = int(np.count_nonzero(per_mol))
    if n_mols == 0:
        raise AllLabelsMissing("no valid label in batch")
    w = np.where(valid, 1.0 / np.maximum(per_mol, 1)[:, None], 0.0) / n_mols
    if task == "classification":
        return bce_with_logits(logits, y, w)
    if task == "regression":
        return squared_error(logits, np.nan_to_num(y), w)
    raise ValueError(f"unknown task type {task!r}")


# ---------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam over a fixed list of tensors.

    A tensor whose ``grad`` is None is treated as having zero gradient.
    """

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeMismatch(f"adam: grad {g.shape} for parameter {p.name} {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    molecules: list
    labels: np.ndarray  # (N, L), NaN = missing
    task: str = "classification"
    split: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if self.labels.shape[0] != len(self.molecules):
            raise ShapeMismatch(f"{self.labels.shape[0]} label rows for {len(self.molecules)} molecules")

    def __len__(self):
        return len(self.molecules)

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    def indices(self, name: str) -> np.ndarray:
        if self.split is None:
            raise ValueError("dataset has no split tags")
        return np.flatnonzero(self.split == name)

    @classmethod
    def from_records(cls, records: Sequence[dict], task: str | None = None) -> "Dataset":
        """Build from ``read_native_file`` records (``labels`` lists or ``target`` values)."""
        if not records:
            raise EmptyInput("no molecules")
        if task is None:
            task = "regression" if records[0].get("target") is not None else "classification"
        rows = []
        for i, r in enumerate(records):
            if task == "regression":
                t = r.get("target")
                rows.append([np.nan if t is None else float(t)])
            else:
                lab = r.get("labels")
                if lab is None:
                    raise ValueError(f"record {i} has no labels")
                rows.append([np.nan if x is None else float(x) for x in lab])
        widths = {len(row) for row in rows}
        if len(widths) != 1:
            raise ShapeMismatch(f"label vectors of different lengths {sorted(widths)}")
        return cls([r["mol"] for r in records], np.array(rows), task)


def scaffold_split(mols: Sequence[MolGraph], fractions=(0.8, 0.1, 0.1), mode: str = "deterministic",
                   seed: int = 0) -> np.ndarray:
    """Assign whole scaffold groups to train, valid, test.

    Groups are visited in order (largest first, ties by key; or shuffled by
    ``seed`` in random mode). A group goes to the first split that is still
    under its quota, so a split can overshoot by at most one group.
    """
    if not mols:
        raise EmptyInput("empty dataset")
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    groups: dict = {}
    for i, g in enumerate(mols):
        groups.setdefault(scaffold_key(g), []).append(i)
    keys = sorted(groups, key=lambda k: (-len(groups[k]), k))
    if mode == "random":
        rng = np.random.default_rng(seed)
        keys = [keys[j] for j in rng.permutation(len(keys))]
    elif mode != "deterministic":
        raise ValueError(f"unknown split mode {mode!r}")
    n = len(mols)
    quota = [f * n for f in fractions]
    filled = [0, 0, 0]
    tags = np.empty(n, dtype=object)
    for k in keys:
        members = groups[k]
        s = next((j for j in range(3) if filled[j] < quota[j]), 2)
        filled[s] += len(members)
        tags[members] = SPLITS[s]
    for j, name in enumerate(SPLITS):
        if filled[j] == 0:
            warnings.warn(f"scaffold split: {name} split is empty", stacklevel=2)
    return tags


# ---------------------------------------------------------------- metrics

def _auc_1d(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC-AUC needs both classes")
    ranks = rankdata(scores)  # average ranks handle ties as 1/2
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_per_task(scores, labels) -> list:
    """AUC for each column, ``None`` for columns lacking a class."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise ShapeMismatch(f"roc_auc: scores {s.shape} vs labels {y.shape}")
    out = []
    for t in range(s.shape[1]):
        ok = ~np.isnan(y[:, t])
        try:
            out.append(_auc_1d(s[ok, t], y[ok, t]))
        except SingleClass:
            out.append(None)
    return out


def roc_auc(scores, labels) -> float:
    """Mean ROC-AUC over tasks that have both classes."""
    per = roc_auc_per_task(scores, labels)
    vals = [a for a in per if a is not None]
    if not vals:
        raise SingleClass("no task has both a positive and a negative label")
    return float(np.mean(vals))


def rmse(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ShapeMismatch(f"rmse: {p.size} predictions for {t.size} targets")
    ok = ~np.isnan(t)
    if not ok.any():
        raise EmptyInput("rmse of nothing")
    return float(math.sqrt(np.mean((p[ok] - t[ok]) ** 2)))


def metric(task: str, preds, labels) -> float:
    return roc_auc(preds, labels) if task == "classification" else rmse(preds, labels)


def better(task: str, a: float, b: float) -> bool:
    """Is metric value ``a`` strictly better than ``b``?"""
    return a > b if task == "classification" else a < b


# ---------------------------------------------------------------- fine-tuning

@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    protocol: str = "full"  # or "linear"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.protocol not in ("full", "linear"):
            raise ValueError(f"protocol must be 'full' or 'linear', got {self.protocol!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def predict_all(model: ASBAModel, mols, decomps, batch_size=64) -> dict:
    outs = {"f": [], "g": [], "asba": []}
    for s in range(0, len(mols), batch_size):
        p = model.predict(GraphBatch(mols[s:s + batch_size], decomps[s:s + batch_size]))
        for k in outs:
            outs[k].append(p[k])
    return {k: np.concatenate(v) for k, v in outs.items()}


def evaluate(model: ASBAModel, ds: Dataset, idx, decomps, batch_size=64) -> dict:
    """Metric of f, g and the bilateral output on the molecules ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return {}
    preds = predict_all(model, [ds.molecules[i] for i in idx], [decomps[i] for i in idx], batch_size)
    y = ds.labels[idx]
    out = {}
    for k, p in preds.items():
        try:
            out[k] = metric(ds.task, p, y)
        except (SingleClass, EmptyInput):
            out[k] = None
    return out


@dataclass
class FinetuneResult:
    model: ASBAModel
    best_epoch: int
    test: dict
    valid: dict
    history: list


def finetune(ds: Dataset, vocab: SubgraphVocabulary, cfg: FinetuneConfig, model: ASBAModel | None = None,
             decomps: Sequence[Decomposition] | None = None) -> FinetuneResult:
    """Train both branches independently and report f, g and ASBA test metrics.

    Each branch has its own loss and its own Adam state. The epoch with the
    best validation metric of the averaged output is kept (epoch 0 is the
    initial model).
    """
    if ds.split is None:
        raise ValueError("finetune needs split tags")
    enc = cfg.encoder
    if enc.L != ds.n_tasks:
        enc = EncoderConfig(**{**enc.to_dict(), "L": ds.n_tasks})
    if model is None:
        model = ASBAModel(enc, seed=cfg.seed)
    if decomps is None:
        decomps = [decompose(g, vocab) for g in ds.molecules]
    if cfg.protocol == "linear":
        f_names, g_names = model.atom.head_names, model.sub.head_names
    else:
        f_names, g_names = model.atom_names(), model.sub_names()
    opt_f = Adam(model.store.tensors(f_names), lr=cfg.lr)
    opt_g = Adam(model.store.tensors(g_names), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    train_idx = ds.indices("train")
    valid_idx = ds.indices("valid")
    if train_idx.size == 0:
        raise EmptyInput("no training molecules")
    trainable = set(f_names) | set(g_names)
    for name in model.store.names():
        model.store[name].requires_grad = name in trainable

    best = model.store.snapshot()
    best_epoch = 0
    valid0 = evaluate(model, ds, valid_idx, decomps)
    best_val = valid0.get("asba")
    history = [{"epoch": 0, "loss_f": None, "loss_g": None, "valid": valid0}]
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        lf = lg = 0.0
        n_batches = 0
        for s in range(0, order.size, cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            y = ds.labels[b]
            if np.isnan(y).all():
                continue
            batch = GraphBatch([ds.molecules[i] for i in b], [decomps[i] for i in b])
            loss_f = supervised_loss(model.atom.forward(batch).logits, y, ds.task)
            opt_f.zero_grad()
            backward(loss_f)
            opt_f.step()
            loss_g = supervised_loss(model.sub.forward(batch).logits, y, ds.task)
            opt_g.zero_grad()
            backward(loss_g)
            opt_g.step()
            lf += loss_f.item()
            lg += loss_g.item()
            n_batches += 1
        valid = evaluate(model, ds, valid_idx, decomps)
        history.append({"epoch": epoch, "loss_f": lf / max(n_batches, 1), "loss_g": lg / max(n_batches, 1),
                        "valid": valid})
        v = valid.get("asba")
        if v is not None and (best_val is None or better(ds.task, v, best_val)):
            best_val, best_epoch, best = v, epoch, model.store.snapshot()
    for name in model.store.names():
        model.store[name].requires_grad = True
    model.store.restore(best)
    test = evaluate(model, ds, ds.indices("test"), decomps)
    valid = evaluate(model, ds, valid_idx, decomps)
    return FinetuneResult(model, best_epoch, test, valid, history)


__all__ = [
    "AllLabelsMissing", "SingleClass", "EmptyInput", "supervised_loss", "Adam", "Dataset",
    "scaffold_split", "roc_auc", "roc_auc_per_task", "rmse", "metric", "FinetuneConfig",
    "FinetuneResult", "finetune", "evaluate", "predict_all", "bilateral_predict",
]
