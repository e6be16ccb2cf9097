"""Synthetic labeled molecules for desk-scale experiments.

``atoms``: label is 1 when the molecule has more than ``k`` nitrogens.
``motif``: label is 1 when a planted functional group is present. Negatives
carry a decoy with the same atoms but different bonding and are checked to
be free of the motif.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from .fragment import match_subgraph
from .molgraph import SYMBOL_INDEX, MolGraph, parse_smiles_subset

VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1, "Cl": 1}
BACKBONE = (("C", 0.72), ("O", 0.14), ("S", 0.06), ("F", 0.04), ("Cl", 0.04))
DEFAULT_MOTIF = "C(=O)N"
# same atoms as the motif, no double bond
DEFAULT_DECOY = "C(O)N"


class _Builder:
    def __init__(self):
        self.symbols: list[str] = []
        self.bonds: dict = {}

    def spare(self, v: int) -> int:
        used = sum(o for (a, b), o in self.bonds.items() if v in (a, b))
        return VALENCE[self.symbols[v]] - used

    def add_atom(self, sym: str) -> int:
        self.symbols.append(sym)
        return len(self.symbols) - 1

    def bond(self, u: int, v: int, order: int = 1):
        self.bonds[(min(u, v), max(u, v))] = order

    def neighbors(self, v):
        for (a, b) in self.bonds:
            if a == v:
                yield b
            elif b == v:
                yield a

    def distance(self, s: int, t: int) -> int:
        seen = {s: 0}
        q = deque([s])
        while q:
            v = q.popleft()
            if v == t:
                return seen[v]
            for u in self.neighbors(v):
                if u not in seen:
                    seen[u] = seen[v] + 1
                    q.append(u)
        return -1

    def attach(self, smiles: str, rng) -> bool:
        """Graft a fragment by its first atom onto a random atom with a free valence."""
        frag = parse_smiles_subset(smiles)
        hosts = [v for v in range(len(self.symbols)) if self.spare(v) >= 1]
        if not hosts:
            return False
        host = hosts[int(rng.integers(len(hosts)))]
        base = len(self.symbols)
        for s in frag.symbols:
            self.add_atom(s)
        for u, v, o in frag.bonds:
            self.bond(base + u, base + v, o)
        self.bond(host, base)
        return True

    def graph(self) -> MolGraph:
        return MolGraph.from_symbols(self.symbols, [(u, v, o) for (u, v), o in sorted(self.bonds.items())])


def _backbone(rng, n_atoms: int, n_nitrogen: int = 0, ring_prob: float = 0.6,
              double_prob: float = 0.12) -> _Builder:
    syms, probs = zip(*BACKBONE)
    probs = np.asarray(probs) / sum(probs)
    kinds = ["C"] + [syms[i] for i in rng.choice(len(syms), size=n_atoms - 1, p=probs)]
    for i in rng.choice(np.arange(1, n_atoms), size=min(n_nitrogen, n_atoms - 1), replace=False):
        kinds[i] = "N"
    b = _Builder()
    b.add_atom(kinds[0])
    for sym in kinds[1:]:
        hosts = [v for v in range(len(b.symbols)) if b.spare(v) >= 1]
        if not hosts:
            break
        host = hosts[int(rng.integers(len(hosts)))]
        v = b.add_atom(sym)
        b.bond(host, v)
    # ring closures of size 5 to 7
    for _ in range(2):
        if rng.random() > ring_prob:
            continue
        cands = [(u, v) for u in range(len(b.symbols)) for v in range(u + 1, len(b.symbols))
                 if b.spare(u) >= 1 and b.spare(v) >= 1 and (u, v) not in b.bonds and 4 <= b.distance(u, v) <= 6]
        if cands:
            u, v = cands[int(rng.integers(len(cands)))]
            b.bond(u, v)
    for (u, v), o in list(b.bonds.items()):
        if o == 1 and b.symbols[u] == "C" and b.symbols[v] == "C" and rng.random() < double_prob:
            if b.spare(u) >= 1 and b.spare(v) >= 1:
                b.bond(u, v, 2)
    return b


def generate_atoms(n: int, seed: int = 0, k: int = 1, size=(12, 16), max_nitrogen: int = 4) -> list[dict]:
    """Label = [number of N atoms > k]; nitrogen counts are drawn uniformly in 0..max_nitrogen."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        n_atoms = int(rng.integers(size[0], size[1] + 1))
        n_n = int(rng.integers(0, max_nitrogen + 1))
        g = _backbone(rng, n_atoms, n_n).graph()
        count = sum(1 for t in g.atom_types if t == SYMBOL_INDEX["N"])
        out.append({"mol": g, "labels": [int(count > k)]})
    return out


def generate_motif(n: int, seed: int = 0, motif: str = DEFAULT_MOTIF, decoy: str = DEFAULT_DECOY,
                   size=(10, 16), p_positive: float = 0.5) -> list[dict]:
    """Label = [planted motif present]. Every negative is verified motif-free."""
    rng = np.random.default_rng(seed)
    pattern = parse_smiles_subset(motif)
    out = []
    while len(out) < n:
        positive = bool(rng.random() < p_positive)
        n_atoms = int(rng.integers(size[0], size[1] + 1))
        b = _backbone(rng, n_atoms)
        if not b.attach(motif if positive else decoy, rng):
            continue
        g = b.graph()
        found = match_subgraph(pattern, g) is not None
        if found != positive:
            continue  # a backbone that formed the motif by chance, or a failed graft
        out.append({"mol": g, "labels": [int(positive)]})
    return out


def generate(kind: str, n: int, seed: int = 0, **kw) -> list[dict]:
    if kind == "atoms":
        return generate_atoms(n, seed, **kw)
    if kind == "motif":
        return generate_motif(n, seed, **kw)
    raise ValueError(f"unknown synthetic kind {kind!r} (expected 'atoms' or 'motif')")
