import itertools
import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asba.molgraph import (
    DuplicateBond,
    IndexOutOfRange,
    MalformedDocument,
    MolGraph,
    NotAPermutation,
    PatternTooLarge,
    SelfLoop,
    UnbalancedParenthesis,
    UnknownAtomSymbol,
    UnmatchedRingBond,
    UnsupportedToken,
    canonical_code,
    code_from_text,
    code_to_text,
    graph_from_code,
    parse_native,
    parse_smiles_subset,
    read_native_file,
    read_smiles_file,
    relabel,
    ring_atoms,
    scaffold_key,
    to_smiles,
    write_native_file,
)

from conftest import molecules, random_molecule


def to_nx(g: MolGraph) -> nx.Graph:
    G = nx.Graph()
    for i, t in enumerate(g.atom_types):
        G.add_node(i, t=t)
    for u, v, o in g.bonds:
        G.add_edge(u, v, o=o)
    return G


def nx_iso(a: MolGraph, b: MolGraph) -> bool:
    return nx.is_isomorphic(to_nx(a), to_nx(b), node_match=lambda x, y: x["t"] == y["t"],
                            edge_match=lambda x, y: x["o"] == y["o"])


# ---------------------------------------------------------------- native format

def test_parse_native_path():
    g = parse_native('{"atoms":["C","C","O"],"bonds":[[0,1,1],[1,2,1]]}')
    assert g.symbols == ["C", "C", "O"]
    assert g.bonds == ((0, 1, 1), (1, 2, 1))
    assert g.features.tolist() == [[0, 1], [0, 2], [2, 1]]


def test_parse_native_single_atom():
    g = parse_native({"atoms": ["C"], "bonds": []})
    assert g.n_atoms == 1 and g.n_bonds == 0


@pytest.mark.parametrize("doc, err", [
    ({"atoms": ["C", "C"], "bonds": [[0, 0, 1]]}, SelfLoop),
    ({"atoms": ["C", "Xx"], "bonds": []}, UnknownAtomSymbol),
    ({"atoms": ["C", "C"], "bonds": [[0, 2, 1]]}, IndexOutOfRange),
    ({"atoms": ["C", "C"], "bonds": [[0, 1, 1], [1, 0, 2]]}, DuplicateBond),
    ({"atoms": ["C"]}, MalformedDocument),
    ({"atoms": ["C", "C"], "bonds": [[0, 1, 4]]}, MalformedDocument),
    ("not json", MalformedDocument),
])
def test_parse_native_errors(doc, err):
    with pytest.raises(err):
        parse_native(doc)


def test_error_names_offending_element():
    with pytest.raises(SelfLoop, match="atom 0"):
        parse_native({"atoms": ["C", "C"], "bonds": [[0, 1, 1], [0, 0, 1]]})


def test_native_file_roundtrip(tmp_path):
    recs = [{"mol": parse_smiles_subset("CCO"), "labels": [1, None]},
            {"mol": parse_smiles_subset("C1CC1"), "target": 2.5}]
    p = tmp_path / "m.jsonl"
    write_native_file(p, recs)
    back = read_native_file(p)
    assert back[0]["mol"] == recs[0]["mol"] and back[0]["labels"] == [1, None]
    assert back[1]["target"] == 2.5


def test_native_file_error_has_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"atoms":["C"],"bonds":[]}\n{"atoms":["C","C"],"bonds":[[0,0,1]]}\n')
    with pytest.raises(SelfLoop, match=":2:"):
        read_native_file(p)


# ---------------------------------------------------------------- SMILES subset

def test_smiles_path():
    g = parse_smiles_subset("CCO")
    assert g.symbols == ["C", "C", "O"] and g.bonds == ((0, 1, 1), (1, 2, 1))


def test_smiles_ring_matches_networkx_cycle():
    g = parse_smiles_subset("C1CC1")
    assert g.n_bonds == 3
    assert nx.is_isomorphic(to_nx(g), nx.cycle_graph(3))


def test_smiles_bonds_and_branches():
    g = parse_smiles_subset("CC(=O)N#C")
    assert set(g.bonds) == {(0, 1, 1), (1, 2, 2), (1, 3, 1), (3, 4, 3)}
    assert parse_smiles_subset("ClCBr").symbols == ["Cl", "C", "Br"]


@pytest.mark.parametrize("s, err", [
    ("c1ccccc1", UnsupportedToken),
    ("[NH4+]", UnsupportedToken),
    ("C1CC", UnmatchedRingBond),
    ("CC(C", UnbalancedParenthesis),
    ("CC)C", UnbalancedParenthesis),
])
def test_smiles_errors(s, err):
    with pytest.raises(err):
        parse_smiles_subset(s)


def test_smiles_file_comments(tmp_path):
    p = tmp_path / "m.smi"
    p.write_text("# header\nCCO name\n\nC#N\n")
    mols = read_smiles_file(p)
    assert [m.n_atoms for m in mols] == [3, 2]
    assert mols[1].bonds == ((0, 1, 3),)


@settings(max_examples=200, deadline=None)
@given(molecules(max_atoms=10, n_types=4))
def test_smiles_serializer_roundtrip(g):
    back = parse_smiles_subset(to_smiles(g))
    assert canonical_code(back, cap=None) == canonical_code(g, cap=None)


# ---------------------------------------------------------------- canonical codes

def test_canonical_examples():
    c = parse_smiles_subset("C")
    assert canonical_code(c) == canonical_code(MolGraph.from_symbols(["C"], []))
    occ = MolGraph.from_symbols(["O", "C", "C"], [(0, 1, 1), (1, 2, 1)])
    cco = MolGraph.from_symbols(["C", "C", "O"], [(0, 1, 1), (1, 2, 1)])
    assert canonical_code(occ) == canonical_code(cco)
    assert canonical_code(parse_smiles_subset("C1CC1")) != canonical_code(parse_smiles_subset("CCC"))


def test_canonical_cap():
    g = parse_smiles_subset("C" * 13)
    with pytest.raises(PatternTooLarge):
        canonical_code(g)
    assert canonical_code(g, cap=None)


def test_code_text_roundtrip():
    g = parse_smiles_subset("CC(=O)N")
    code = canonical_code(g)
    assert code_from_text(code_to_text(code)) == code
    assert canonical_code(graph_from_code(code)) == code


@settings(max_examples=300, deadline=None)
@given(molecules(max_atoms=10), st.randoms(use_true_random=False))
def test_canonical_relabel_invariant(g, r):
    perm = list(range(g.n_atoms))
    r.shuffle(perm)
    assert canonical_code(relabel(g, perm)) == canonical_code(g)


def test_canonical_matches_isomorphism_oracle():
    # codes equal iff networkx finds a type- and order-preserving isomorphism
    rng = np.random.default_rng(7)
    for _ in range(600):
        a = random_molecule(rng, 1, 8, n_types=2)
        b = random_molecule(rng, a.n_atoms, a.n_atoms, n_types=2)
        if rng.random() < 0.3:
            b = relabel(a, list(rng.permutation(a.n_atoms)))
        assert (canonical_code(a) == canonical_code(b)) == nx_iso(a, b)


def test_canonical_highly_symmetric():
    # two non-isomorphic 3-regular graphs on 8 vertices with one coloring
    cube = nx.hypercube_graph(3)
    cube = nx.convert_node_labels_to_integers(cube)
    other = nx.circulant_graph(8, [1, 4])
    ga = MolGraph.from_parts([0] * 8, [(u, v, 1) for u, v in cube.edges])
    gb = MolGraph.from_parts([0] * 8, [(u, v, 1) for u, v in other.edges])
    assert nx.is_isomorphic(cube, other) == (canonical_code(ga) == canonical_code(gb))


# ---------------------------------------------------------------- rings and scaffolds

def brute_ring_atoms(g: MolGraph) -> set:
    # an atom lies on a cycle iff some incident edge is on a simple cycle through it
    G = to_nx(g)
    out = set()
    for cyc in nx.simple_cycles(G.to_directed()):
        if len(cyc) >= 3:
            out.update(cyc)
    return out


def test_ring_atoms_examples():
    assert ring_atoms(parse_smiles_subset("C1CC1")) == {0, 1, 2}
    assert ring_atoms(parse_smiles_subset("CCO")) == set()
    assert ring_atoms(parse_smiles_subset("C1CC1C")) == {0, 1, 2}


def test_ring_atoms_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(300):
        g = random_molecule(rng, 1, 8, p_extra=0.3)
        assert ring_atoms(g) == brute_ring_atoms(g)


def test_scaffold_examples():
    ring = parse_smiles_subset("C1CC1")
    assert scaffold_key(parse_smiles_subset("C1CC1C")) == canonical_code(ring)
    assert scaffold_key(parse_smiles_subset("CCO")) == canonical_code(parse_smiles_subset("CCO"))
    g = parse_smiles_subset("OC1CCC(CC)C1N")
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert scaffold_key(relabel(g, list(rng.permutation(g.n_atoms)))) == scaffold_key(g)


def test_scaffold_over_cap_is_lossy_but_stable():
    big = parse_smiles_subset("C1CCCCCCCCCCCCC1")
    key = scaffold_key(big)
    assert key[:1] == b"\xff"
    assert scaffold_key(relabel(big, list(range(13, -1, -1)))) == key


# ---------------------------------------------------------------- relabel

def test_relabel_examples():
    g = parse_smiles_subset("CCO")
    assert relabel(g, [0, 1, 2]) == g
    s = relabel(g, [1, 0, 2])
    assert s.bonds == ((0, 1, 1), (0, 2, 1))
    assert canonical_code(s) == canonical_code(g)
    with pytest.raises(NotAPermutation):
        relabel(g, [0, 0, 1])


def test_immutable():
    g = parse_smiles_subset("CC")
    with pytest.raises(Exception):
        g.atom_types = (1, 1)
    assert json.loads(json.dumps(g.to_native())) == {"atoms": ["C", "C"], "bonds": [[0, 1, 1]]}
