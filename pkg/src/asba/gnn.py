"""GIN encoders for the atom-wise and subgraph-wise branches.

Molecules are processed as a batch: one disjoint union of graphs with
index arrays mapping atoms to graphs and, for the subgraph branch, atoms
to decomposed parts and parts to graphs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fragment import Decomposition, quotient_graph
from .molgraph import ATOM_SYMBOLS, MAX_DEGREE, MolGraph
from .tensor import (
    ParamStore,
    ShapeMismatch,
    Tensor,
    add,
    add_bias_row,
    embedding_lookup,
    gather_rows,
    glorot,
    matmul,
    relu,
    scale,
    scale_rows,
    segment_mean,
    segment_sum,
)

N_BOND_SLOTS = 4  # bond orders 1..3; slot 0 unused


class EmptyGraph(ValueError):
    pass


@dataclass
class EncoderConfig:
    d: int = 64
    K: int = 3
    K1: int = 2
    K2: int = 3
    L: int = 1
    eps: float = 0.0
    n_atom_types: int = len(ATOM_SYMBOLS)

    def __post_init__(self):
        if min(self.K, self.K1, self.K2) < 1:
            raise ValueError("K, K1 and K2 must be >= 1")
        if self.d < 1 or self.L < 1:
            raise ValueError("d and L must be >= 1")

    def to_dict(self) -> dict:
        return dict(d=self.d, K=self.K, K1=self.K1, K2=self.K2, L=self.L, eps=self.eps,
                    n_atom_types=self.n_atom_types)


def _directed(bonds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not bonds:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy(), z.copy()
    b = np.asarray(bonds, dtype=np.int64)
    src = np.concatenate([b[:, 0], b[:, 1]])
    dst = np.concatenate([b[:, 1], b[:, 0]])
    order = np.concatenate([b[:, 2], b[:, 2]])
    return src, dst, order


class GraphBatch:
    """Index arrays for a batch of molecules (and optionally their decompositions)."""

    def __init__(self, mols: Sequence[MolGraph], decomps: Sequence[Decomposition] | None = None):
        if not mols:
            raise EmptyGraph("empty batch")
        self.n_graphs = len(mols)
        types, degs, graph = [], [], []
        src, dst, bond = [], [], []
        off = 0
        for i, g in enumerate(mols):
            if g.n_atoms == 0:
                raise EmptyGraph(f"molecule {i} has no atoms")
            types.append(np.asarray(g.atom_types, dtype=np.int64))
            degs.append(g.features[:, 1])
            graph.append(np.full(g.n_atoms, i, dtype=np.int64))
            s, t, o = _directed(g.bonds)
            src.append(s + off)
            dst.append(t + off)
            bond.append(o)
            off += g.n_atoms
        self.n_atoms = off
        self.atom_type = np.concatenate(types)
        self.atom_deg = np.concatenate(degs)
        self.atom_graph = np.concatenate(graph)
        self.src = np.concatenate(src)
        self.dst = np.concatenate(dst)
        self.bond = np.concatenate(bond)
        self.has_parts = decomps is not None
        if decomps is not None:
            self._add_parts(mols, decomps)

    def _add_parts(self, mols, decomps):
        # Subgraph-branch atoms are laid out part by part, each part in the
        # canonical order of its induced subgraph, and intra-part edges are
        # sorted by (dst, src). Identical patterns in different molecules
        # therefore run the exact same arithmetic.
        if len(decomps) != len(mols):
            raise ShapeMismatch("one decomposition per molecule required")
        stype, sdeg, isrc, idst, ibond = [], [], [], [], []
        atom_part, part_graph, tokens, sub_atoms = [], [], [], []
        qsrc, qdst, qbond = [], [], []
        part_offsets = []
        aoff = poff = 0
        for i, (g, d) in enumerate(zip(mols, decomps)):
            if d.molecule is not g and d.molecule != g:
                raise ShapeMismatch(f"decomposition {i} belongs to another molecule")
            layout = [a for part in d.canonical_parts for a in part]
            pos = np.empty(g.n_atoms, dtype=np.int64)
            pos[layout] = np.arange(g.n_atoms)
            part_of = d.part_of
            deg = np.zeros(g.n_atoms, dtype=np.int64)
            edges = []
            for u, v, o in d.intra_bonds():
                pu, pv = int(pos[u]), int(pos[v])
                deg[pu] += 1
                deg[pv] += 1
                edges.append((pv, pu, o))
                edges.append((pu, pv, o))
            edges.sort()
            e = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
            idst.append(e[:, 0] + aoff)
            isrc.append(e[:, 1] + aoff)
            ibond.append(e[:, 2])
            stype.append(np.asarray(g.atom_types, dtype=np.int64)[layout])
            sdeg.append(np.minimum(deg, MAX_DEGREE))
            atom_part.append(part_of[layout] + poff)
            sub_atoms.append(np.asarray(layout, dtype=np.int64) + aoff)
            part_graph.append(np.full(d.T, i, dtype=np.int64))
            tokens.append(np.asarray(d.tokens, dtype=np.int64))
            q = quotient_graph(d)
            s, t, o = _directed(q.edges)
            qsrc.append(s + poff)
            qdst.append(t + poff)
            qbond.append(o)
            part_offsets.append(poff)
            aoff += g.n_atoms
            poff += d.T
        self.sub_atom_type = np.concatenate(stype)
        self.sub_atom_deg = np.concatenate(sdeg)
        self.sub_atom_index = np.concatenate(sub_atoms)  # batch atom id at each layout slot
        self.intra_src = np.concatenate(isrc)
        self.intra_dst = np.concatenate(idst)
        self.intra_bond = np.concatenate(ibond)
        self.atom_part = np.concatenate(atom_part)
        self.n_parts = poff
        self.part_graph = np.concatenate(part_graph)
        self.part_token = np.concatenate(tokens)
        self.q_src = np.concatenate(qsrc)
        self.q_dst = np.concatenate(qdst)
        self.q_bond = np.concatenate(qbond)
        self.part_offsets = np.asarray(part_offsets, dtype=np.int64)


# ---------------------------------------------------------------- GIN

@dataclass
class GinLayerParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    edge: Tensor  # (N_BOND_SLOTS, d) table indexed by bond order
    eps: float = 0.0


def gin_layer(h: Tensor, src, dst, bond, p: GinLayerParams) -> Tensor:
    """One GIN update: ``mlp((1 + eps) h_v + sum_u (h_u + edge(e_uv)))``."""
    if h.shape[1] != p.w1.shape[0]:
        raise ShapeMismatch(f"gin_layer: embedding width {h.shape[1]} vs layer width {p.w1.shape[0]}")
    n = h.shape[0]
    msg = add(gather_rows(h, src), embedding_lookup(p.edge, bond))
    agg = segment_sum(msg, dst, n)
    pre = add(scale(h, 1.0 + p.eps), agg)
    hidden = relu(add_bias_row(matmul(pre, p.w1), p.b1))
    return add_bias_row(matmul(hidden, p.w2), p.b2)


class GinStack:
    def __init__(self, store: ParamStore, prefix: str, d: int, n_layers: int, eps: float,
                 rng: np.random.Generator):
        self.layers = []
        for k in range(n_layers):
            pre = f"{prefix}.{k}"
            self.layers.append(GinLayerParams(
                w1=store.add(f"{pre}.w1", glorot(rng, d, d)),
                b1=store.add(f"{pre}.b1", np.zeros((1, d))),
                w2=store.add(f"{pre}.w2", glorot(rng, d, d)),
                b2=store.add(f"{pre}.b2", np.zeros((1, d))),
                edge=store.add(f"{pre}.edge", glorot(rng, N_BOND_SLOTS, d)),
                eps=eps,
            ))

    def __call__(self, h: Tensor, src, dst, bond) -> Tensor:
        last = len(self.layers) - 1
        for k, p in enumerate(self.layers):
            h = gin_layer(h, src, dst, bond, p)
            if k < last:
                h = relu(h)
        return h


@dataclass
class BranchOutput:
    z: Tensor  # (n_graphs, d) graph embeddings
    logits: Tensor  # (n_graphs, L)
    h: Tensor  # final node (or part) embeddings


def _masked_rows(h: Tensor, mask, mask_vec: Tensor) -> Tensor:
    """Replace rows flagged in ``mask`` by the (1, d) vector ``mask_vec``."""
    mask = np.asarray(mask, dtype=bool)
    keep = (~mask).astype(np.float64)
    fill = scale_rows(gather_rows(mask_vec, np.zeros(h.shape[0], dtype=np.int64)), mask.astype(np.float64))
    return add(scale_rows(h, keep), fill)


class _Inputs:
    def __init__(self, store, prefix, cfg, rng):
        self.type_emb = store.add(f"{prefix}.type_emb", glorot(rng, cfg.n_atom_types, cfg.d))
        self.deg_emb = store.add(f"{prefix}.deg_emb", glorot(rng, MAX_DEGREE + 1, cfg.d))

    def __call__(self, types, degs) -> Tensor:
        return add(embedding_lookup(self.type_emb, types), embedding_lookup(self.deg_emb, degs))


class _Head:
    def __init__(self, store, prefix, d, L, rng):
        self.w = store.add(f"{prefix}.w", glorot(rng, d, L))
        self.b = store.add(f"{prefix}.b", np.zeros((1, L)))

    def __call__(self, z: Tensor) -> Tensor:
        return add_bias_row(matmul(z, self.w), self.b)


class AtomBranch:
    """Atom-wise encoder f: K GIN layers, mean readout, linear classifier."""

    def __init__(self, store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator, prefix="atom"):
        self.prefix = prefix
        self.inputs = _Inputs(store, prefix, cfg, rng)
        self.gnn = GinStack(store, f"{prefix}.gin", cfg.d, cfg.K, cfg.eps, rng)
        self.head = _Head(store, f"{prefix}.head", cfg.d, cfg.L, rng)

    def forward(self, batch: GraphBatch, atom_mask=None, mask_vec: Tensor | None = None) -> BranchOutput:
        h = self.inputs(batch.atom_type, batch.atom_deg)
        if atom_mask is not None:
            h = _masked_rows(h, atom_mask, mask_vec)
        h = self.gnn(h, batch.src, batch.dst, batch.bond)
        z = segment_mean(h, batch.atom_graph, batch.n_graphs)
        return BranchOutput(z, self.head(z), h)

    @property
    def head_names(self) -> list[str]:
        return [self.head.w.name, self.head.b.name]


class SubgraphBranch:
    """Decomposition-polymerization encoder g.

    K1 GIN layers run on the molecule with inter-part bonds removed (atom
    degrees are counted inside the part), atoms are mean-pooled per part,
    then K2 GIN layers run on the quotient graph of parts.
    """

    def __init__(self, store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator, prefix="sub"):
        self.prefix = prefix
        self.inputs = _Inputs(store, prefix, cfg, rng)
        self.embed_gnn = GinStack(store, f"{prefix}.embed", cfg.d, cfg.K1, cfg.eps, rng)
        self.poly_gnn = GinStack(store, f"{prefix}.poly", cfg.d, cfg.K2, cfg.eps, rng)
        self.head = _Head(store, f"{prefix}.head", cfg.d, cfg.L, rng)

    def embed(self, batch: GraphBatch) -> Tensor:
        if not batch.has_parts:
            raise ShapeMismatch("subgraph branch needs a batch built with decompositions")
        h = self.inputs(batch.sub_atom_type, batch.sub_atom_deg)
        h = self.embed_gnn(h, batch.intra_src, batch.intra_dst, batch.intra_bond)
        return segment_mean(h, batch.atom_part, batch.n_parts)

    def polymerize(self, parts: Tensor, batch: GraphBatch, part_mask=None,
                   mask_vec: Tensor | None = None) -> BranchOutput:
        if parts.shape[0] != batch.n_parts:
            raise ShapeMismatch(f"{parts.shape[0]} part embeddings for {batch.n_parts} quotient nodes")
        if part_mask is not None:
            parts = _masked_rows(parts, part_mask, mask_vec)
        h = self.poly_gnn(parts, batch.q_src, batch.q_dst, batch.q_bond)
        z = segment_mean(h, batch.part_graph, batch.n_graphs)
        return BranchOutput(z, self.head(z), h)

    def forward(self, batch: GraphBatch, part_mask=None, mask_vec: Tensor | None = None) -> BranchOutput:
        return self.polymerize(self.embed(batch), batch, part_mask, mask_vec)

    @property
    def head_names(self) -> list[str]:
        return [self.head.w.name, self.head.b.name]


def bilateral_predict(f_logits, g_logits) -> np.ndarray:
    """ASBA output: elementwise average of the two branch logits."""
    f = np.asarray(f_logits, dtype=np.float64)
    g = np.asarray(g_logits, dtype=np.float64)
    if f.shape != g.shape:
        raise ShapeMismatch(f"bilateral_predict: {f.shape} vs {g.shape}")
    return (f + g) / 2.0


class ASBAModel:
    """Both branches over one parameter store (they share no parameters)."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        self.atom = AtomBranch(self.store, cfg, rng)
        self.sub = SubgraphBranch(self.store, cfg, rng)

    def atom_names(self) -> list[str]:
        return self.store.names("atom.")

    def sub_names(self) -> list[str]:
        return self.store.names("sub.")

    def predict(self, batch: GraphBatch) -> dict:
        f = self.atom.forward(batch).logits.data
        g = self.sub.forward(batch).logits.data
        return {"f": f, "g": g, "asba": bilateral_predict(f, g)}
