"""Molecular graph model, parsers, canonical codes, rings and scaffolds.

Atoms are stored as small integer type codes indexing ``ATOM_SYMBOLS``;
bonds as ``(u, v, order)`` triples with ``u < v``. A ``MolGraph`` is
immutable; derived views (adjacency, features, canonical labeling) are
computed lazily and cached on the instance.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

ATOM_SYMBOLS = ("C", "N", "O", "S", "F", "Cl", "Br", "I", "P", "B")
SYMBOL_INDEX = {s: i for i, s in enumerate(ATOM_SYMBOLS)}
BOND_ORDERS = (1, 2, 3)
MAX_DEGREE = 6  # degree feature slot is clipped here
DEFAULT_CAP = 12


class MolGraphError(ValueError):
    """Base class for molecule construction and parsing errors."""


class UnknownAtomSymbol(MolGraphError):
    pass


class IndexOutOfRange(MolGraphError):
    pass


class DuplicateBond(MolGraphError):
    pass


class SelfLoop(MolGraphError):
    pass


class MalformedDocument(MolGraphError):
    pass


class UnsupportedToken(MolGraphError):
    pass


class UnmatchedRingBond(MolGraphError):
    pass


class UnbalancedParenthesis(MolGraphError):
    pass


class PatternTooLarge(MolGraphError):
    pass


class NotAPermutation(MolGraphError):
    pass


@dataclass(frozen=True)
class MolGraph:
    atom_types: tuple
    bonds: tuple

    @classmethod
    def from_parts(cls, atom_types: Iterable[int], bonds: Iterable[Sequence[int]]) -> "MolGraph":
        """Validate and normalize atoms/bonds into a ``MolGraph``."""
        types = tuple(int(t) for t in atom_types)
        n = len(types)
        for i, t in enumerate(types):
            if not 0 <= t < len(ATOM_SYMBOLS):
                raise UnknownAtomSymbol(f"atom {i}: type code {t} outside alphabet")
        seen = set()
        norm = []
        for k, b in enumerate(bonds):
            if len(b) != 3:
                raise MalformedDocument(f"bond {k}: expected [u, v, order], got {list(b)!r}")
            u, v, order = (int(x) for x in b)
            if not (0 <= u < n and 0 <= v < n):
                raise IndexOutOfRange(f"bond {k}: ({u}, {v}) references atom outside [0, {n})")
            if u == v:
                raise SelfLoop(f"bond {k}: atom {u} bonded to itself")
            if order not in BOND_ORDERS:
                raise MalformedDocument(f"bond {k}: unsupported bond order {order}")
            if u > v:
                u, v = v, u
            if (u, v) in seen:
                raise DuplicateBond(f"bond {k}: ({u}, {v}) appears twice")
            seen.add((u, v))
            norm.append((u, v, order))
        norm.sort()
        return cls(types, tuple(norm))

    @classmethod
    def from_symbols(cls, symbols: Sequence[str], bonds: Iterable[Sequence[int]]) -> "MolGraph":
        types = []
        for i, s in enumerate(symbols):
            if s not in SYMBOL_INDEX:
                raise UnknownAtomSymbol(f"atom {i}: unknown symbol {s!r}")
            types.append(SYMBOL_INDEX[s])
        return cls.from_parts(types, bonds)

    @property
    def n_atoms(self) -> int:
        return len(self.atom_types)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    @property
    def symbols(self) -> list[str]:
        return [ATOM_SYMBOLS[t] for t in self.atom_types]

    @cached_property
    def adjacency(self) -> tuple:
        """Per-atom tuple of ``(neighbor, bond_order)`` sorted by neighbor."""
        adj = [[] for _ in range(self.n_atoms)]
        for u, v, o in self.bonds:
            adj[u].append((v, o))
            adj[v].append((u, o))
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def bond_order(self) -> dict:
        d = {}
        for u, v, o in self.bonds:
            d[(u, v)] = o
            d[(v, u)] = o
        return d

    @property
    def degrees(self) -> list[int]:
        return [len(a) for a in self.adjacency]

    @cached_property
    def features(self) -> np.ndarray:
        """Atom feature matrix: column 0 atom type, column 1 clipped degree."""
        x = np.zeros((self.n_atoms, 2), dtype=np.int64)
        x[:, 0] = self.atom_types
        x[:, 1] = np.minimum(self.degrees, MAX_DEGREE)
        return x

    @cached_property
    def canonical_labeling(self) -> tuple:
        """``(code, order)`` where ``order[k]`` is the atom at canonical position k."""
        return _canonical_labeling(self.atom_types, self.adjacency)

    @cached_property
    def canonical_rank(self) -> np.ndarray:
        rank = np.empty(self.n_atoms, dtype=np.int64)
        for pos, v in enumerate(self.canonical_labeling[1]):
            rank[v] = pos
        return rank

    def induced(self, atoms: Iterable[int]) -> "MolGraph":
        """Induced subgraph on ``atoms``, relabeled in increasing index order."""
        atoms = sorted(atoms)
        local = {a: i for i, a in enumerate(atoms)}
        bonds = [(local[u], local[v], o) for u, v, o in self.bonds if u in local and v in local]
        return MolGraph(tuple(self.atom_types[a] for a in atoms), tuple(sorted(bonds)))

    def to_native(self) -> dict:
        return {"atoms": self.symbols, "bonds": [list(b) for b in self.bonds]}

    def __repr__(self) -> str:
        return f"MolGraph(atoms={self.symbols}, bonds={list(self.bonds)})"


# ---------------------------------------------------------------- parsing

def parse_native(doc) -> MolGraph:
    """Parse a native molecule document (JSON text or an already-decoded mapping)."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise MalformedDocument(f"not valid JSON: {e}") from e
    if not isinstance(doc, Mapping):
        raise MalformedDocument("document must be an object with 'atoms' and 'bonds'")
    for key in ("atoms", "bonds"):
        if key not in doc:
            raise MalformedDocument(f"missing key {key!r}")
    atoms, bonds = doc["atoms"], doc["bonds"]
    if not isinstance(atoms, list) or not all(isinstance(a, str) for a in atoms):
        raise MalformedDocument("'atoms' must be a list of symbols")
    if not isinstance(bonds, list) or not all(isinstance(b, list) for b in bonds):
        raise MalformedDocument("'bonds' must be a list of [u, v, order]")
    for k, b in enumerate(bonds):
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in b):
            raise MalformedDocument(f"bond {k}: entries must be integers, got {b!r}")
    return MolGraph.from_symbols(atoms, bonds)


_SMILES_TOKEN = re.compile(r"Cl|Br|[BCNOPSFI]|[-=#]|[()]|[1-9]|.", re.S)
_BOND_SYMBOL = {"-": 1, "=": 2, "#": 3}


def parse_smiles_subset(s: str) -> MolGraph:
    """Parse a restricted SMILES string.

    Supported: organic-subset atoms ``B C N O P S F I Cl Br`` (no brackets),
    bonds ``- = #``, branches and single-digit ring closures. Aromatic
    atoms, charges, stereo and bracket atoms raise ``UnsupportedToken``.
    """
    types: list[int] = []
    bonds: list[tuple[int, int, int]] = []
    stack: list[int] = []
    open_rings: dict[str, tuple[int, int | None]] = {}
    prev: int | None = None
    pending: int | None = None
    for m in _SMILES_TOKEN.finditer(s.strip()):
        tok, pos = m.group(), m.start()
        if tok in SYMBOL_INDEX:
            idx = len(types)
            types.append(SYMBOL_INDEX[tok])
            if prev is not None:
                bonds.append((prev, idx, pending or 1))
            elif pending is not None:
                raise MalformedDocument(f"bond symbol at {pos - 1} has no left atom")
            prev, pending = idx, None
        elif tok in _BOND_SYMBOL:
            if pending is not None:
                raise MalformedDocument(f"two consecutive bond symbols at {pos}")
            pending = _BOND_SYMBOL[tok]
        elif tok == "(":
            if prev is None:
                raise UnbalancedParenthesis(f"branch opened before any atom at {pos}")
            stack.append(prev)
        elif tok == ")":
            if not stack:
                raise UnbalancedParenthesis(f"unmatched ')' at {pos}")
            if pending is not None:
                raise MalformedDocument(f"dangling bond before ')' at {pos}")
            prev = stack.pop()
        elif tok.isdigit():
            if prev is None:
                raise UnmatchedRingBond(f"ring digit {tok} at {pos} has no atom")
            if tok in open_rings:
                other, order0 = open_rings.pop(tok)
                if order0 is not None and pending is not None and order0 != pending:
                    raise UnmatchedRingBond(f"ring {tok}: conflicting bond orders")
                bonds.append((other, prev, pending or order0 or 1))
            else:
                open_rings[tok] = (prev, pending)
            pending = None
        else:
            raise UnsupportedToken(f"unsupported token {tok!r} at position {pos}")
    if stack:
        raise UnbalancedParenthesis(f"{len(stack)} unclosed '('")
    if open_rings:
        raise UnmatchedRingBond(f"unclosed ring bond(s): {sorted(open_rings)}")
    if pending is not None:
        raise MalformedDocument("trailing bond symbol")
    if not types:
        raise MalformedDocument("empty SMILES")
    return MolGraph.from_parts(types, bonds)


def to_smiles(g: MolGraph) -> str:
    """Serialize into the supported SMILES subset (one string per connected component)."""
    adj = g.adjacency
    visited = [False] * g.n_atoms
    bond_sym = {1: "", 2: "=", 3: "#"}
    out = []
    for root in range(g.n_atoms):
        if visited[root]:
            continue
        # spanning tree first, so ring-closure bonds are known before emitting
        parent = {root: None}
        order = []
        stack = [root]
        seen = {root}
        tree_children = {}
        while stack:
            v = stack.pop()
            order.append(v)
            kids = []
            for u, _ in adj[v]:
                if u not in seen:
                    seen.add(u)
                    parent[u] = v
                    kids.append(u)
            tree_children[v] = kids
            stack.extend(reversed(kids))
        tree = {(min(u, p), max(u, p)) for u, p in parent.items() if p is not None}
        closures = [(u, v, o) for u, v, o in g.bonds if u in seen and (u, v) not in tree]
        ring_at: dict[int, list] = {}
        for u, v, o in closures:
            ring_at.setdefault(u, []).append((v, o))
            ring_at.setdefault(v, []).append((u, o))
        free = list(range(9, 0, -1))
        digit_of: dict[tuple[int, int], int] = {}
        parts = []

        def emit(v):
            visited[v] = True
            parts.append(ATOM_SYMBOLS[g.atom_types[v]])
            for u, o in ring_at.get(v, []):
                key = (min(u, v), max(u, v))
                if key in digit_of:
                    d = digit_of.pop(key)
                    free.append(d)
                    free.sort(reverse=True)
                    parts.append(bond_sym[o] + str(d))
                else:
                    if not free:
                        raise PatternTooLarge("more than 9 simultaneously open ring closures")
                    d = free.pop()
                    digit_of[key] = d
                    parts.append(bond_sym[o] + str(d))
            kids = tree_children[v]
            for i, u in enumerate(kids):
                sym = bond_sym[g.bond_order[(u, v)]]
                if i < len(kids) - 1:
                    parts.append("(" + sym)
                    emit(u)
                    parts.append(")")
                else:
                    parts.append(sym)
                    emit(u)

        emit(root)
        out.append("".join(parts))
    return ".".join(out)


# ---------------------------------------------------------------- canonical form

def _refine(cells: list[list[int]], adj) -> list[list[int]]:
    """Refine an ordered partition to the coarsest equitable one.

    Cells split by the multiset of (neighbor cell position, bond order);
    sub-cells are ordered by that signature, so the result depends only on
    the isomorphism class of (graph, input partition).
    """
    while True:
        cell_of = {}
        for pos, cell in enumerate(cells):
            for v in cell:
                cell_of[v] = pos
        new = []
        changed = False
        for cell in cells:
            if len(cell) == 1:
                new.append(cell)
                continue
            groups: dict[tuple, list[int]] = {}
            for v in cell:
                sig = tuple(sorted((cell_of[u], o) for u, o in adj[v]))
                groups.setdefault(sig, []).append(v)
            if len(groups) > 1:
                changed = True
                for sig in sorted(groups):
                    new.append(groups[sig])
            else:
                new.append(cell)
        cells = new
        if not changed:
            return cells


def _encode(order: Sequence[int], types, adj) -> bytes:
    pos = {v: i for i, v in enumerate(order)}
    n = len(order)
    out = bytearray(n.to_bytes(2, "big"))
    out.extend(types[v] for v in order)
    edges = sorted(
        (pos[v], pos[u], o) for v in order for u, o in adj[v] if pos[v] < pos[u]
    )
    out.extend(len(edges).to_bytes(2, "big"))
    for i, j, o in edges:
        out.extend(i.to_bytes(2, "big"))
        out.extend(j.to_bytes(2, "big"))
        out.append(o)
    return bytes(out)


def _orbit_roots(autos: list[list[int]], fixed: Sequence[int], n: int) -> list[int]:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for g in autos:
        if all(g[v] == v for v in fixed):
            for v in range(n):
                a, b = find(v), find(g[v])
                if a != b:
                    parent[max(a, b)] = min(a, b)
    return [find(v) for v in range(n)]


def _canonical_labeling(types, adj) -> tuple[bytes, tuple]:
    """Individualization-refinement canonical labeling with automorphism pruning."""
    n = len(types)
    if n == 0:
        return _encode((), types, adj), ()
    keys: dict[tuple, list[int]] = {}
    for v in range(n):
        keys.setdefault((types[v], len(adj[v])), []).append(v)
    start = [keys[k] for k in sorted(keys)]
    best: list = [None, None]  # code, order
    autos: list[list[int]] = []

    def search(cells, prefix):
        cells = _refine(cells, adj)
        target = next((i for i, c in enumerate(cells) if len(c) > 1), None)
        if target is None:
            order = tuple(c[0] for c in cells)
            code = _encode(order, types, adj)
            if best[0] is None or code < best[0]:
                best[0], best[1] = code, order
            elif code == best[0]:
                g = [0] * n
                for a, b in zip(order, best[1]):
                    g[a] = b
                autos.append(g)
            return
        explored: list[int] = []
        for v in sorted(cells[target]):
            if explored and autos:
                roots = _orbit_roots(autos, prefix, n)
                if any(roots[w] == roots[v] for w in explored):
                    continue
            rest = [u for u in cells[target] if u != v]
            search(cells[:target] + [[v], rest] + cells[target + 1:], prefix + [v])
            explored.append(v)

    search(start, [])
    return best[0], best[1]


def canonical_code(g: MolGraph, cap: int | None = DEFAULT_CAP) -> bytes:
    """Isomorphism-invariant byte code of ``g`` (atom types and bond orders respected)."""
    if cap is not None and g.n_atoms > cap:
        raise PatternTooLarge(f"{g.n_atoms} atoms exceeds pattern cap {cap}")
    return g.canonical_labeling[0]


def code_to_text(code: bytes) -> str:
    return code.hex()


def code_from_text(text: str) -> bytes:
    return bytes.fromhex(text)


def graph_from_code(code: bytes) -> MolGraph:
    n = int.from_bytes(code[0:2], "big")
    types = list(code[2:2 + n])
    p = 2 + n
    m = int.from_bytes(code[p:p + 2], "big")
    p += 2
    bonds = []
    for _ in range(m):
        i = int.from_bytes(code[p:p + 2], "big")
        j = int.from_bytes(code[p + 2:p + 4], "big")
        bonds.append((i, j, code[p + 4]))
        p += 5
    return MolGraph.from_parts(types, bonds)


# ---------------------------------------------------------------- rings & scaffolds

def ring_bonds(g: MolGraph) -> set[tuple[int, int]]:
    """Bonds ``(u, v)``, ``u < v``, lying on at least one cycle (non-bridges)."""
    n = g.n_atoms
    adj = g.adjacency
    disc = [-1] * n
    low = [0] * n
    bridges = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, parent, it = stack[-1]
            advanced = False
            for u, _ in it:
                if u == parent:
                    continue
                if disc[u] == -1:
                    disc[u] = low[u] = timer
                    timer += 1
                    stack.append((u, v, iter(adj[u])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[u])
            if not advanced:
                stack.pop()
                if parent != -1:
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.add((min(v, parent), max(v, parent)))
    return {(u, v) for u, v, _ in g.bonds if (u, v) not in bridges}


def ring_atoms(g: MolGraph) -> set[int]:
    """Atoms lying on at least one cycle."""
    out = set()
    for u, v in ring_bonds(g):
        out.add(u)
        out.add(v)
    return out


def scaffold_atoms(g: MolGraph) -> set[int]:
    """Atoms left after iteratively stripping degree <= 1 non-ring atoms."""
    rings = ring_atoms(g)
    alive = set(range(g.n_atoms))
    deg = {v: len(g.adjacency[v]) for v in alive}
    frontier = [v for v in alive if v not in rings and deg[v] <= 1]
    while frontier:
        v = frontier.pop()
        if v not in alive:
            continue
        alive.discard(v)
        for u, _ in g.adjacency[v]:
            if u in alive:
                deg[u] -= 1
                if u not in rings and deg[u] <= 1:
                    frontier.append(u)
    return alive


def _lossy_key(g: MolGraph) -> bytes:
    counts = np.bincount(np.asarray(g.atom_types, dtype=np.int64), minlength=len(ATOM_SYMBOLS))
    out = bytearray(b"\xff")
    for c in counts:
        out.extend(int(c).to_bytes(2, "big"))
    out.extend(g.n_bonds.to_bytes(2, "big"))
    return bytes(out)


def scaffold_key(g: MolGraph, cap: int | None = DEFAULT_CAP) -> bytes:
    """Scaffold grouping key.

    Canonical code of the ring framework (rings plus linkers); acyclic
    molecules key on the whole molecule. Frameworks larger than ``cap``
    fall back to a lossy (atom-type counts, bond count) key prefixed with
    ``0xff``.
    """
    keep = scaffold_atoms(g)
    sub = g.induced(keep) if keep else g
    if cap is not None and sub.n_atoms > cap:
        return _lossy_key(sub)
    return canonical_code(sub, cap=None)


def relabel(g: MolGraph, perm: Sequence[int]) -> MolGraph:
    """Move atom ``i`` to position ``perm[i]``."""
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(g.n_atoms)):
        raise NotAPermutation(f"{perm!r} is not a permutation of 0..{g.n_atoms - 1}")
    types = [0] * g.n_atoms
    for i, t in enumerate(g.atom_types):
        types[perm[i]] = t
    return MolGraph.from_parts(types, [(perm[u], perm[v], o) for u, v, o in g.bonds])


# ---------------------------------------------------------------- files

def read_native_file(path) -> list[dict]:
    """Read a native molecule file (one JSON object per line).

    Returns records ``{"mol": MolGraph, "labels": list | None, "target": float | None}``.
    """
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedDocument(f"{path}:{lineno}: {e}") from e
            try:
                mol = parse_native(doc)
            except MolGraphError as e:
                raise type(e)(f"{path}:{lineno}: {e}") from e
            records.append({"mol": mol, "labels": doc.get("labels"), "target": doc.get("target")})
    return records


def write_native_file(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            doc = rec["mol"].to_native()
            if rec.get("labels") is not None:
                doc["labels"] = rec["labels"]
            if rec.get("target") is not None:
                doc["target"] = rec["target"]
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_smiles_file(path) -> list[MolGraph]:
    mols = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                mols.append(parse_smiles_subset(line.split()[0]))
            except MolGraphError as e:
                raise type(e)(f"{path}:{lineno}: {e}") from e
    return mols


def read_molecules(path) -> list[dict]:
    """Read either format, dispatching on extension (``.smi``/``.smiles`` vs native)."""
    p = str(path)
    if p.endswith((".smi", ".smiles", ".txt")):
        return [{"mol": m, "labels": None, "target": None} for m in read_smiles_file(path)]
    return read_native_file(path)
