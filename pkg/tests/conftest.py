import pytest
from hypothesis import strategies as st

from asba.molgraph import MolGraph, parse_smiles_subset

SMILES = [
    "CCO", "CC(=O)O", "C1CCCCC1", "C1=CC=CC=C1O", "CCN(CC)CC", "OC(=O)CCN",
    "C1CCNCC1", "CC(C)(C)Cl", "C#N", "NC1CCOC1", "CS(C)O", "FC(F)(F)C1CC1",
    "CC(=O)OCC1=CC=CC=C1", "C1CC2CCC1C2", "O=C1NC(=O)CC1", "BrCCP",
]


@pytest.fixture(scope="session")
def small_corpus():
    return [parse_smiles_subset(s) for s in SMILES]


def random_molecule(rng, n_min=1, n_max=10, n_types=4, p_extra=0.15):
    """Random connected graph: a random tree plus a few extra bonds."""
    n = int(rng.integers(n_min, n_max + 1))
    types = [int(t) for t in rng.integers(0, n_types, size=n)]
    bonds = {}
    for v in range(1, n):
        u = int(rng.integers(0, v))
        bonds[(u, v)] = int(rng.choice([1, 1, 1, 2, 3]))
    for u in range(n):
        for v in range(u + 2, n):
            if (u, v) not in bonds and rng.random() < p_extra / max(n, 1) * 3:
                bonds[(u, v)] = 1
    return MolGraph.from_parts(types, [(u, v, o) for (u, v), o in bonds.items()])


@st.composite
def molecules(draw, max_atoms=9, n_types=3):
    n = draw(st.integers(1, max_atoms))
    types = draw(st.lists(st.integers(0, n_types - 1), min_size=n, max_size=n))
    bonds = {}
    for v in range(1, n):
        u = draw(st.integers(0, v - 1))
        bonds[(u, v)] = draw(st.sampled_from([1, 1, 2, 3]))
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3))
    for u, v in extra:
        if u != v and (min(u, v), max(u, v)) not in bonds:
            bonds[(min(u, v), max(u, v))] = 1
    return MolGraph.from_parts(types, [(u, v, o) for (u, v), o in bonds.items()])
