"""Subgraph vocabulary mining, molecule decomposition and quotient graphs."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .molgraph import (
    ATOM_SYMBOLS,
    DEFAULT_CAP,
    MolGraph,
    MolGraphError,
    canonical_code,
    code_from_text,
    code_to_text,
    graph_from_code,
    ring_atoms,
    ring_bonds,
)


class FragmentError(ValueError):
    pass


class TargetTooSmall(FragmentError):
    pass


class EmptyCorpus(FragmentError):
    pass


class UncoveredAtomType(FragmentError):
    pass


class VocabularyFileError(FragmentError):
    pass


# ---------------------------------------------------------------- matching

@lru_cache(maxsize=4096)
def _match_plan(pattern: MolGraph) -> tuple:
    """Pattern atom visiting order: start at the highest-degree atom, then BFS.

    Returns ``(order, parent, back)`` where ``parent[k]`` is the position of an
    already-placed neighbor of ``order[k]`` and ``back[k]`` lists
    ``(position, bond_order)`` constraints against every earlier atom.
    """
    n = pattern.n_atoms
    degs = pattern.degrees
    start = max(range(n), key=lambda v: (degs[v], -v))
    order = [start]
    placed = {start: 0}
    parent = [-1]
    head = 0
    while head < len(order):
        v = order[head]
        for u, _ in pattern.adjacency[v]:
            if u not in placed:
                placed[u] = len(order)
                order.append(u)
                parent.append(placed[v])
        head += 1
    if len(order) != n:
        raise FragmentError("pattern graph must be connected")
    back = []
    for k, v in enumerate(order):
        cons = tuple((j, pattern.bond_order.get((v, order[j]), 0)) for j in range(k))
        back.append(cons)
    types = tuple(pattern.atom_types[v] for v in order)
    return tuple(order), tuple(parent), tuple(back), types


def _iter_matches(pattern: MolGraph, host: MolGraph, allowed, rank):
    order, parent, back, ptypes = _match_plan(pattern)
    n = len(order)
    htypes = host.atom_types
    hadj = host.adjacency
    hbond = host.bond_order
    image = [-1] * n
    used = set()
    key = (lambda v: rank[v]) if rank is not None else None
    starts = sorted((v for v in allowed if htypes[v] == ptypes[0]), key=key)

    def candidates(k):
        anchor = image[parent[k]]
        want = back[k][parent[k]][1]
        cands = [u for u, o in hadj[anchor]
                 if o == want and u in allowed and u not in used and htypes[u] == ptypes[k]]
        if key is not None:
            cands.sort(key=key)
        return cands

    def extend(k):
        if k == n:
            yield [image[order.index(i)] for i in range(n)]
            return
        for u in candidates(k):
            ok = True
            for j, o in back[k]:
                if hbond.get((u, image[j]), 0) != o:
                    ok = False
                    break
            if not ok:
                continue
            image[k] = u
            used.add(u)
            yield from extend(k + 1)
            used.discard(u)
            image[k] = -1

    for s in starts:
        image[0] = s
        used.add(s)
        yield from extend(1)
        used.discard(s)
        image[0] = -1


def match_subgraph(pattern: MolGraph, host: MolGraph, allowed=None, order=None):
    """Find an induced, type- and bond-order-preserving embedding of ``pattern``.

    Returns a list mapping pattern atom i -> host atom, or ``None``. Host
    atoms are tried smallest first by index (or by ``order`` rank when
    given), restricted to ``allowed``.
    """
    allowed = set(range(host.n_atoms)) if allowed is None else set(allowed)
    if pattern.n_atoms == 0 or pattern.n_atoms > len(allowed):
        return None
    return next(_iter_matches(pattern, host, allowed, order), None)


def occurrences(pattern: MolGraph, host: MolGraph) -> set[frozenset]:
    """All distinct atom sets of ``host`` whose induced subgraph is isomorphic to ``pattern``."""
    if pattern.n_atoms > host.n_atoms:
        return set()
    pc = Counter(pattern.atom_types)
    hc = Counter(host.atom_types)
    if any(hc[t] < c for t, c in pc.items()):
        return set()
    allowed = set(range(host.n_atoms))
    return {frozenset(m) for m in _iter_matches(pattern, host, allowed, None)}


# ---------------------------------------------------------------- vocabulary

@dataclass
class SubgraphPattern:
    graph: MolGraph
    code: bytes
    index: int
    frequency: int

    @property
    def n_atoms(self) -> int:
        return self.graph.n_atoms


@dataclass
class SubgraphVocabulary:
    patterns: list
    cap: int = DEFAULT_CAP
    corpus_hash: str = ""

    def __post_init__(self):
        self._by_code = {}
        for i, p in enumerate(self.patterns):
            if p.index != i:
                raise FragmentError(f"pattern at position {i} has index {p.index}")
            if p.code in self._by_code:
                raise FragmentError(f"duplicate pattern code {code_to_text(p.code)}")
            self._by_code[p.code] = i

    def __len__(self) -> int:
        return len(self.patterns)

    @property
    def size(self) -> int:
        return len(self.patterns)

    @property
    def alphabet(self) -> list[int]:
        return [p.graph.atom_types[0] for p in self.patterns if p.n_atoms == 1]

    def index_of(self, code: bytes):
        return self._by_code.get(code)

    @cached_property
    def match_order(self) -> list:
        return sorted(self.patterns, key=lambda p: (-p.n_atoms, p.index))

    def to_lines(self) -> list[str]:
        header = {
            "format": "asba-vocab",
            "version": 1,
            "cap": self.cap,
            "alphabet": [ATOM_SYMBOLS[t] for t in self.alphabet],
            "corpus_hash": self.corpus_hash,
            "size": len(self.patterns),
        }
        lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
        for p in self.patterns:
            g = p.graph
            lines.append(json.dumps({
                "index": p.index,
                "code": code_to_text(p.code),
                "atoms": g.symbols,
                "bonds": [list(b) for b in g.bonds],
                "frequency": p.frequency,
            }, sort_keys=True, separators=(",", ":")))
        return lines

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path) -> "SubgraphVocabulary":
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise VocabularyFileError(f"{path}: empty vocabulary file")
        header = json.loads(lines[0])
        if header.get("format") != "asba-vocab":
            raise VocabularyFileError(f"{path}: missing vocabulary header")
        patterns = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            g = MolGraph.from_symbols(rec["atoms"], rec["bonds"])
            code = code_from_text(rec["code"])
            if canonical_code(g, cap=None) != code:
                raise VocabularyFileError(f"{path}: pattern {rec['index']} code does not match its graph")
            patterns.append(SubgraphPattern(g, code, rec["index"], rec["frequency"]))
        return cls(patterns, cap=header["cap"], corpus_hash=header["corpus_hash"])


def corpus_hash(corpus: Sequence[MolGraph]) -> str:
    h = hashlib.sha256()
    for g in corpus:
        h.update(json.dumps(g.to_native(), sort_keys=True, separators=(",", ":")).encode())
        h.update(b"\n")
    return h.hexdigest()


@lru_cache(maxsize=200_000)
def _local_labeling(types: tuple, bonds: tuple) -> tuple:
    return MolGraph(types, bonds).canonical_labeling


def _code_of_local(types: tuple, bonds: tuple) -> bytes:
    return _local_labeling(types, bonds)[0]


def _union_code(g: MolGraph, atoms: tuple) -> bytes:
    local = {a: i for i, a in enumerate(atoms)}
    bonds = tuple(sorted((local[u], local[v], o) for u, v, o in g.bonds if u in local and v in local))
    return _code_of_local(tuple(g.atom_types[a] for a in atoms), bonds)


class _FragState:
    """Fragment bookkeeping for one molecule during mining."""

    def __init__(self, g: MolGraph):
        self.g = g
        self.frag_of = list(range(g.n_atoms))
        self.frags = {i: (i,) for i in range(g.n_atoms)}
        self.pair_code: dict[tuple[int, int], bytes | None] = {}

    def pairs(self):
        out = set()
        for u, v, _ in self.g.bonds:
            a, b = self.frag_of[u], self.frag_of[v]
            if a != b:
                out.add((min(a, b), max(a, b)))
        return out

    def code(self, pair, cap):
        if pair not in self.pair_code:
            atoms = tuple(sorted(self.frags[pair[0]] + self.frags[pair[1]]))
            self.pair_code[pair] = _union_code(self.g, atoms) if len(atoms) <= cap else None
        return self.pair_code[pair]

    def merge(self, a, b):
        new = tuple(sorted(self.frags[a] + self.frags[b]))
        keep = min(a, b)
        drop = max(a, b)
        del self.frags[drop]
        self.frags[keep] = new
        for v in new:
            self.frag_of[v] = keep
        self.pair_code = {p: c for p, c in self.pair_code.items() if keep not in p and drop not in p}


def _single_atom_code(t: int) -> bytes:
    return canonical_code(MolGraph((t,), ()), cap=None)


def mine_vocabulary(corpus: Sequence[MolGraph], size: int, cap: int = DEFAULT_CAP) -> SubgraphVocabulary:
    """Frequency-greedy pair merging of adjacent fragments (BPE on graphs).

    Every molecule starts as single-atom fragments. Each round counts the
    canonical code of every pair of adjacent fragments over the corpus,
    picks the most frequent (ties: smallest code), and merges its
    non-overlapping occurrences in molecule order, then lowest atom index.
    New codes are appended to the vocabulary; mining stops at ``size``
    patterns or when no candidate occurs at least twice. Pattern
    frequencies are the number of induced occurrences of the pattern in
    the corpus.
    """
    if not corpus:
        raise EmptyCorpus("cannot mine a vocabulary from an empty corpus")
    alphabet = sorted({t for g in corpus for t in g.atom_types})
    if size < len(alphabet):
        raise TargetTooSmall(f"target size {size} below alphabet size {len(alphabet)}")
    codes = [_single_atom_code(t) for t in alphabet]
    graphs = [MolGraph((t,), ()) for t in alphabet]
    known = set(codes)
    states = [_FragState(g) for g in corpus]
    while len(codes) < size:
        counts: Counter = Counter()
        for st in states:
            for pair in st.pairs():
                c = st.code(pair, cap)
                if c is not None:
                    counts[c] += 1
        cands = [(c, n) for c, n in counts.items() if n >= 2]
        if not cands:
            break
        best = min(cands, key=lambda cn: (-cn[1], cn[0]))[0]
        for st in states:
            hits = []
            for pair in st.pairs():
                if st.code(pair, cap) == best:
                    atoms = tuple(sorted(st.frags[pair[0]] + st.frags[pair[1]]))
                    hits.append((atoms, pair))
            hits.sort()
            touched = set()
            for _, (a, b) in hits:
                if a in touched or b in touched:
                    continue
                touched.update((a, b))
                st.merge(a, b)
        if best not in known:
            known.add(best)
            codes.append(best)
            graphs.append(graph_from_code(best))
    patterns = []
    for i, (c, g) in enumerate(zip(codes, graphs)):
        freq = sum(len(occurrences(g, host)) for host in corpus)
        patterns.append(SubgraphPattern(g, c, i, freq))
    return SubgraphVocabulary(patterns, cap=cap, corpus_hash=corpus_hash(corpus))


# ---------------------------------------------------------------- decomposition

class Part(NamedTuple):
    token: int  # vocabulary index, or negative for a molecule-local token
    atoms: tuple


@dataclass
class Decomposition:
    molecule: MolGraph
    parts: tuple
    inter_edges: tuple  # indices into molecule.bonds

    @property
    def T(self) -> int:
        return len(self.parts)

    @property
    def tokens(self) -> list[int]:
        return [p.token for p in self.parts]

    @cached_property
    def part_of(self) -> np.ndarray:
        out = np.full(self.molecule.n_atoms, -1, dtype=np.int64)
        for t, p in enumerate(self.parts):
            out[list(p.atoms)] = t
        return out

    @cached_property
    def canonical_parts(self) -> tuple:
        """Each part's atoms listed in the canonical order of its induced subgraph."""
        out = []
        for p in self.parts:
            sub = self.molecule.induced(p.atoms)
            order = _local_labeling(sub.atom_types, sub.bonds)[1]
            out.append(tuple(p.atoms[k] for k in order))
        return tuple(out)

    def intra_bonds(self) -> list[tuple[int, int, int]]:
        inter = set(self.inter_edges)
        return [b for k, b in enumerate(self.molecule.bonds) if k not in inter]

    def summary(self) -> dict:
        return {
            "tokens": self.tokens,
            "parts": [list(p.atoms) for p in self.parts],
            "n_inter_edges": len(self.inter_edges),
        }


def _classify_edges(g: MolGraph, parts) -> tuple:
    part_of = {}
    for t, p in enumerate(parts):
        for a in p.atoms:
            part_of[a] = t
    return tuple(k for k, (u, v, _) in enumerate(g.bonds) if part_of[u] != part_of[v])


def decompose(g: MolGraph, vocab: SubgraphVocabulary) -> Decomposition:
    """Greedy cover of ``g`` by vocabulary patterns, largest patterns first.

    Patterns are tried by decreasing atom count (ties: lower index), each
    matched repeatedly against the not-yet-covered atoms. Candidate host
    atoms are visited in canonical-rank order, so relabeling the molecule
    relabels the decomposition accordingly.
    """
    alpha = set(vocab.alphabet)
    missing = sorted({t for t in g.atom_types if t not in alpha})
    if missing:
        raise UncoveredAtomType(
            f"atom types {[ATOM_SYMBOLS[t] for t in missing]} absent from vocabulary alphabet")
    rank = g.canonical_rank
    free = set(range(g.n_atoms))
    free_types = Counter(g.atom_types)
    parts = []
    for pat in vocab.match_order:
        if not free:
            break
        if pat.n_atoms > len(free):
            continue
        need = Counter(pat.graph.atom_types)
        while all(free_types[t] >= c for t, c in need.items()):
            m = match_subgraph(pat.graph, g, free, rank)
            if m is None:
                break
            parts.append(Part(pat.index, tuple(sorted(m))))
            free.difference_update(m)
            for a in m:
                free_types[g.atom_types[a]] -= 1
    return Decomposition(g, tuple(parts), _classify_edges(g, parts))


# ---------------------------------------------------------------- rule-based fragmentation

@dataclass(frozen=True)
class BondContext:
    type_u: int
    type_v: int
    ring_u: bool
    ring_v: bool
    order: int
    in_ring: bool


def _ring_to_chain(c: BondContext) -> bool:
    return c.order == 1 and not c.in_ring and c.ring_u != c.ring_v


def _carbon_hetero(c: BondContext) -> bool:
    C, N, O = 0, 1, 2
    pair = {c.type_u, c.type_v}
    return c.order == 1 and not c.in_ring and (pair == {C, N} or pair == {C, O})


@dataclass
class CleavageRuleSet:
    rules: list = field(default_factory=lambda: [_ring_to_chain, _carbon_hetero])

    def cleaves(self, ctx: BondContext) -> bool:
        return any(rule(ctx) for rule in self.rules)


DEFAULT_RULES = CleavageRuleSet()


def fragment_rules(g: MolGraph, rules: CleavageRuleSet = DEFAULT_RULES,
                   vocab: SubgraphVocabulary | None = None, cap: int = DEFAULT_CAP) -> Decomposition:
    """Cut every bond matched by a cleavage rule; connected components become parts.

    Parts whose canonical code is in ``vocab`` get that token; every other
    part gets a fresh negative, molecule-local token.
    """
    rings = ring_atoms(g)
    rbonds = ring_bonds(g)
    cut = []
    for k, (u, v, o) in enumerate(g.bonds):
        ctx = BondContext(g.atom_types[u], g.atom_types[v], u in rings, v in rings, o, (u, v) in rbonds)
        if rules.cleaves(ctx):
            cut.append(k)
    cutset = set(cut)
    parent = list(range(g.n_atoms))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k, (u, v, _) in enumerate(g.bonds):
        if k not in cutset:
            a, b = find(u), find(v)
            if a != b:
                parent[max(a, b)] = min(a, b)
    comps: dict[int, list[int]] = {}
    for v in range(g.n_atoms):
        comps.setdefault(find(v), []).append(v)
    parts = []
    local = 0
    for root in sorted(comps):
        atoms = tuple(comps[root])
        token = None
        if vocab is not None and len(atoms) <= cap:
            token = vocab.index_of(canonical_code(g.induced(atoms), cap=None))
        if token is None:
            local -= 1
            token = local
        parts.append(Part(token, atoms))
    return Decomposition(g, tuple(parts), tuple(cut))


# ---------------------------------------------------------------- quotient graph

@dataclass(frozen=True)
class CoarseGraph:
    tokens: tuple
    edges: tuple  # (t, l, max bond order) with t < l

    @property
    def n_nodes(self) -> int:
        return len(self.tokens)


def quotient_graph(d: Decomposition) -> CoarseGraph:
    """One node per part; parts joined by any inter-edge become adjacent.

    Parallel inter-edges collapse into one edge carrying the max bond order.
    """
    part_of = d.part_of
    best: dict[tuple[int, int], int] = {}
    for k in d.inter_edges:
        u, v, o = d.molecule.bonds[k]
        a, b = int(part_of[u]), int(part_of[v])
        key = (min(a, b), max(a, b))
        best[key] = max(best.get(key, 0), o)
    return CoarseGraph(tuple(d.tokens), tuple(sorted((a, b, o) for (a, b), o in best.items())))
