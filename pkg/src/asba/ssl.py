"""Self-supervised pretraining: masked subgraph-token modeling, atom-type
masking and a graph-level contrastive term between the two branches."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fragment import Decomposition
from .gnn import ASBAModel, GraphBatch, _masked_rows
from .tensor import (
    ParamStore,
    Tensor,
    add,
    add_bias_row,
    backward,
    gather_rows,
    glorot,
    matmul,
    scale,
    softmax_cross_entropy,
    transpose,
)
from .train import Adam


class LocalTokenNotPredictable(ValueError):
    pass


class BatchTooSmall(ValueError):
    pass


def _mask_count(ratio: float, n: int) -> int:
    # round half up, never below one
    return max(1, int(math.floor(ratio * n + 0.5)))


@dataclass(frozen=True)
class MaskPlan:
    masked: tuple = ()

    def __len__(self):
        return len(self.masked)

    @property
    def empty(self) -> bool:
        return not self.masked


def mask_subgraphs(d: Decomposition, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Pick parts to hide. Only parts carrying a vocabulary token are eligible.

    The count is ``max(1, round(ratio * T))`` (capped by the eligible parts);
    the plan is empty when ``ratio`` is 0 or the molecule has a single part.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    if ratio == 0.0 or d.T < 2:
        return MaskPlan()
    eligible = [t for t, p in enumerate(d.parts) if p.token >= 0]
    if not eligible:
        return MaskPlan()
    k = min(_mask_count(ratio, d.T), len(eligible))
    pick = rng.choice(len(eligible), size=k, replace=False)
    return MaskPlan(tuple(sorted(eligible[i] for i in pick)))


def mask_atoms(n_atoms: int, ratio: float, rng: np.random.Generator) -> tuple:
    if n_atoms < 2 or ratio == 0.0:
        return ()
    k = min(_mask_count(ratio, n_atoms), n_atoms)
    return tuple(sorted(int(i) for i in rng.choice(n_atoms, size=k, replace=False)))


class SSLHeads:
    """Pretraining-only parameters: token classifier, atom-type classifier and the two mask vectors."""

    def __init__(self, store: ParamStore, d: int, vocab_size: int, n_atom_types: int, rng, prefix="ssl"):
        self.mstm_w = store.add(f"{prefix}.mstm.w", glorot(rng, d, vocab_size))
        self.mstm_b = store.add(f"{prefix}.mstm.b", np.zeros((1, vocab_size)))
        self.part_mask = store.add(f"{prefix}.part_mask", glorot(rng, 1, d))
        self.atom_mask = store.add(f"{prefix}.atom_mask", glorot(rng, 1, d))
        self.attr_w = store.add(f"{prefix}.attr.w", glorot(rng, d, n_atom_types))
        self.attr_b = store.add(f"{prefix}.attr.b", np.zeros((1, n_atom_types)))

    @property
    def vocab_size(self) -> int:
        return self.mstm_w.shape[1]


def _mean_of_means_weights(groups: Sequence[int]) -> np.ndarray:
    """Row weights giving a mean within each group, then a mean over groups."""
    groups = [g for g in groups if g > 0]
    return np.concatenate([np.full(g, 1.0 / (g * len(groups))) for g in groups])


def mstm_logits(model: ASBAModel, heads: SSLHeads, batch: GraphBatch, plans: Sequence[MaskPlan]):
    """Logits at every masked part and their true tokens (global part rows)."""
    rows, targets, sizes = [], [], []
    for i, plan in enumerate(plans):
        off = batch.part_offsets[i]
        for t in plan.masked:
            tok = int(batch.part_token[off + t])
            if tok < 0 or tok >= heads.vocab_size:
                raise LocalTokenNotPredictable(f"molecule {i} part {t} has token {tok}")
            rows.append(off + t)
            targets.append(tok)
        sizes.append(len(plan))
    mask = np.zeros(batch.n_parts, dtype=bool)
    mask[rows] = True
    out = model.sub.forward(batch, part_mask=mask, mask_vec=heads.part_mask)
    h = gather_rows(out.h, np.asarray(rows, dtype=np.int64))
    return add_bias_row(matmul(h, heads.mstm_w), heads.mstm_b), np.asarray(targets, dtype=np.int64), sizes


def mstm_loss(model: ASBAModel, heads: SSLHeads, batch: GraphBatch, plans: Sequence[MaskPlan]) -> Tensor | None:
    """NLL of the true tokens at masked parts, averaged per molecule then over
    molecules with a non-empty plan. Returns None when every plan is empty."""
    if all(p.empty for p in plans):
        return None
    logits, targets, sizes = mstm_logits(model, heads, batch, plans)
    return softmax_cross_entropy(logits, targets, _mean_of_means_weights(sizes))


def atom_mask_loss(model: ASBAModel, heads: SSLHeads, batch: GraphBatch, atom_plans: Sequence[tuple]) -> Tensor | None:
    """Cross-entropy on the types of masked atoms (input embedding replaced by a mask vector)."""
    offsets = np.concatenate([[0], np.cumsum(np.bincount(batch.atom_graph, minlength=batch.n_graphs))])
    rows, sizes = [], []
    for i, plan in enumerate(atom_plans):
        rows.extend(offsets[i] + a for a in plan)
        sizes.append(len(plan))
    if not rows:
        return None
    rows = np.asarray(rows, dtype=np.int64)
    mask = np.zeros(batch.n_atoms, dtype=bool)
    mask[rows] = True
    out = model.atom.forward(batch, atom_mask=mask, mask_vec=heads.atom_mask)
    logits = add_bias_row(matmul(gather_rows(out.h, rows), heads.attr_w), heads.attr_b)
    return softmax_cross_entropy(logits, batch.atom_type[rows], _mean_of_means_weights(sizes))


def contrastive_loss(z_s: Tensor, z_a: Tensor) -> Tensor:
    """In-batch InfoNCE: anchor ``z_s[i]`` against candidates ``z_a``, positive on the diagonal."""
    b = z_s.shape[0]
    if b < 2:
        raise BatchTooSmall(f"contrastive loss needs at least 2 molecules, got {b}")
    return softmax_cross_entropy(matmul(z_s, transpose(z_a)), np.arange(b))


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.25
    atom_mask_ratio: float = 0.15
    lambda_cl: float = 1.0
    batch_size: int = 32
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    lr: float = 1e-3
    seed: int = 0


@dataclass
class StepResult:
    total: Tensor
    parts: dict = field(default_factory=dict)
    mstm_skipped: bool = False


def pretrain_step(model: ASBAModel, heads: SSLHeads, mols, decomps, cfg: PretrainConfig,
                  rng: np.random.Generator) -> StepResult:
    """Total loss ``L_mstm + L_atom + lambda_cl * L_cl`` for one batch.

    The contrastive term uses clean (unmasked) encodings of the same molecules.
    """
    batch = GraphBatch(mols, decomps)
    plans = [mask_subgraphs(d, cfg.mask_ratio, rng) for d in decomps]
    atom_plans = [mask_atoms(g.n_atoms, cfg.atom_mask_ratio, rng) for g in mols]
    terms, parts = [], {}
    l_mstm = mstm_loss(model, heads, batch, plans)
    if l_mstm is not None:
        terms.append(l_mstm)
        parts["mstm"] = l_mstm.item()
    l_atom = atom_mask_loss(model, heads, batch, atom_plans)
    if l_atom is not None:
        terms.append(l_atom)
        parts["atom"] = l_atom.item()
    if cfg.lambda_cl != 0.0 and len(mols) >= 2:
        l_cl = contrastive_loss(model.sub.forward(batch).z, model.atom.forward(batch).z)
        terms.append(scale(l_cl, cfg.lambda_cl))
        parts["cl"] = l_cl.item()
    if not terms:
        raise BatchTooSmall("batch produced no pretraining signal")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return StepResult(total, parts, l_mstm is None)


def mstm_accuracy(model: ASBAModel, heads: SSLHeads, mols, decomps, ratio: float, seed: int = 0,
                  batch_size: int = 64) -> float:
    """Top-1 accuracy of token prediction over freshly masked parts."""
    rng = np.random.default_rng(seed)
    hit = tot = 0
    for s in range(0, len(mols), batch_size):
        m, d = mols[s:s + batch_size], decomps[s:s + batch_size]
        plans = [mask_subgraphs(x, ratio, rng) for x in d]
        if all(p.empty for p in plans):
            continue
        logits, targets, _ = mstm_logits(model, heads, GraphBatch(m, d), plans)
        hit += int(np.count_nonzero(logits.data.argmax(axis=1) == targets))
        tot += targets.size
    return hit / tot if tot else float("nan")


def pretrain(model: ASBAModel, heads: SSLHeads, mols, decomps, cfg: PretrainConfig) -> list[dict]:
    """Run pretraining steps over shuffled batches; returns per-step loss records."""
    if not mols:
        raise BatchTooSmall("empty pretraining corpus")
    ss = np.random.SeedSequence(cfg.seed)
    order_rng, mask_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    opt = Adam(model.store.tensors(), lr=cfg.lr)
    n = len(mols)
    per_epoch = math.ceil(n / cfg.batch_size)
    steps = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    history = []
    perm = order_rng.permutation(n)
    pos = 0
    for step in range(1, steps + 1):
        if pos >= n:
            perm, pos = order_rng.permutation(n), 0
        idx = perm[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        res = pretrain_step(model, heads, [mols[i] for i in idx], [decomps[i] for i in idx], cfg, mask_rng)
        opt.zero_grad()
        backward(res.total)
        opt.step()
        history.append({"step": step, "total": res.total.item(), **res.parts, "mstm_skipped": res.mstm_skipped})
    return history
