import math

import numpy as np
import pytest

from asba.fragment import Decomposition, Part, decompose, mine_vocabulary
from asba.gnn import ASBAModel, EncoderConfig, GraphBatch
from asba.molgraph import parse_smiles_subset as P
from asba.ssl import (
    BatchTooSmall,
    LocalTokenNotPredictable,
    MaskPlan,
    PretrainConfig,
    SSLHeads,
    atom_mask_loss,
    contrastive_loss,
    mask_atoms,
    mask_subgraphs,
    mstm_loss,
    pretrain,
    pretrain_step,
)
from asba.tensor import Tensor, finite_diff_check

# C, N, O only so an 8-way atom head covers every type
CNO = ["CCOCCN", "NCC(=O)OC", "OCCNC(C)C", "CC1CC(N)C1", "OCC=CCN", "CNCCOC(=O)C"]


def model_and_heads(vocab_size=100, n_types=8, d=6, seed=0):
    m = ASBAModel(EncoderConfig(d=d, L=1), seed=seed)
    heads = SSLHeads(m.store, d, vocab_size, n_types, np.random.default_rng(seed))
    return m, heads


def zero_all(m):
    for _, t in m.store:
        t.data[...] = 0.0


@pytest.fixture(scope="module")
def cno():
    mols = [P(s) for s in CNO]
    v = mine_vocabulary(mols * 2, 12, cap=3)
    return mols, [decompose(g, v) for g in mols], v


def four_part_decomp():
    g = P("CCCC")
    return Decomposition(g, tuple(Part(0, (i,)) for i in range(4)), (0, 1, 2))


# ---------------------------------------------------------------- masking

def test_mask_size_rules():
    d = four_part_decomp()
    rng = np.random.default_rng(0)
    assert len(mask_subgraphs(d, 0.25, rng)) == 1
    assert mask_subgraphs(d, 0.0, rng).empty
    assert len(mask_subgraphs(d, 0.5, rng)) == 2
    one = Decomposition(P("CC"), (Part(0, (0, 1)),), ())
    assert mask_subgraphs(one, 0.5, rng).empty
    with pytest.raises(ValueError):
        mask_subgraphs(d, 1.5, rng)


def test_mask_skips_local_tokens():
    g = P("CCN")
    d = Decomposition(g, (Part(0, (0, 1)), Part(-1, (2,))), (1,))
    for s in range(20):
        assert mask_subgraphs(d, 1.0, np.random.default_rng(s)).masked == (0,)


def test_mask_deterministic():
    d = Decomposition(P("C" * 8), tuple(Part(0, (i,)) for i in range(8)), tuple(range(7)))
    a = mask_subgraphs(d, 0.25, np.random.default_rng(9))
    b = mask_subgraphs(d, 0.25, np.random.default_rng(9))
    assert a == b and len(a) == 2


def test_mask_atoms_rules():
    assert len(mask_atoms(10, 0.01, np.random.default_rng(0))) == 1
    assert mask_atoms(1, 0.5, np.random.default_rng(0)) == ()
    assert mask_atoms(10, 0.15, np.random.default_rng(3)) == mask_atoms(10, 0.15, np.random.default_rng(3))


# ---------------------------------------------------------------- closed forms

def test_uniform_mstm_is_log_m(cno):
    mols, decs, _ = cno
    m, heads = model_and_heads()
    zero_all(m)
    batch = GraphBatch(mols, decs)
    plans = [mask_subgraphs(d, 0.5, np.random.default_rng(1)) for d in decs]
    assert sum(len(p) for p in plans) >= 2
    assert mstm_loss(m, heads, batch, plans).item() == pytest.approx(math.log(100), abs=1e-12)


def test_confident_mstm_is_near_zero():
    d = four_part_decomp()
    m, heads = model_and_heads(vocab_size=100)
    zero_all(m)
    heads.mstm_b.data[0, 0] = 20.0  # every part carries token 0
    loss = mstm_loss(m, heads, GraphBatch([d.molecule], [d]), [MaskPlan((1, 2))]).item()
    assert loss <= 100 * math.exp(-20)


def test_mstm_token_out_of_range():
    d = four_part_decomp()
    d = Decomposition(d.molecule, tuple(Part(7, p.atoms) for p in d.parts), d.inter_edges)
    m, heads = model_and_heads(vocab_size=5)
    with pytest.raises(LocalTokenNotPredictable):
        mstm_loss(m, heads, GraphBatch([d.molecule], [d]), [MaskPlan((0,))])


def test_uniform_atom_head_is_log_8(cno):
    mols, decs, _ = cno
    m, heads = model_and_heads(n_types=8)
    zero_all(m)
    plans = [mask_atoms(g.n_atoms, 0.3, np.random.default_rng(i)) for i, g in enumerate(mols)]
    loss = atom_mask_loss(m, heads, GraphBatch(mols, decs), plans)
    assert loss.item() == pytest.approx(math.log(8), abs=1e-12)


def test_contrastive_closed_forms():
    same = Tensor(np.ones((2, 3)))
    assert contrastive_loss(same, same).item() == pytest.approx(math.log(2), abs=1e-12)
    three = Tensor(np.ones((3, 3)))
    assert contrastive_loss(three, three).item() == pytest.approx(math.log(3), abs=1e-12)
    zs = Tensor([[1.0, 0.0], [0.0, 1.0]])
    za = Tensor([[20.0, 0.0], [0.0, 20.0]])
    assert contrastive_loss(zs, za).item() <= 1e-8
    with pytest.raises(BatchTooSmall):
        contrastive_loss(Tensor([[1.0]]), Tensor([[1.0]]))


def test_total_uniform_heads(cno):
    mols, decs, _ = cno
    m, heads = model_and_heads(vocab_size=100, n_types=8)
    zero_all(m)
    pair = [i for i, d in enumerate(decs) if d.T >= 2][:2]
    cfg = PretrainConfig(lambda_cl=1.0)
    res = pretrain_step(m, heads, [mols[i] for i in pair], [decs[i] for i in pair], cfg, np.random.default_rng(0))
    assert res.total.item() == pytest.approx(math.log(100) + math.log(8) + math.log(2), abs=1e-9)
    assert res.total.item() == pytest.approx(7.37776, abs=1e-5)


def test_lambda_zero_drops_contrastive(cno):
    mols, decs, _ = cno
    m, heads = model_and_heads()
    res = pretrain_step(m, heads, mols, decs, PretrainConfig(lambda_cl=0.0), np.random.default_rng(0))
    assert "cl" not in res.parts
    assert res.total.item() == pytest.approx(res.parts["mstm"] + res.parts["atom"], rel=1e-12)


def test_all_single_part_skips_mstm():
    mols = [P("CC"), P("CO")]
    decs = [Decomposition(g, (Part(0, (0, 1)),), ()) for g in mols]
    m, heads = model_and_heads()
    res = pretrain_step(m, heads, mols, decs, PretrainConfig(), np.random.default_rng(0))
    assert res.mstm_skipped and "mstm" not in res.parts
    assert res.total.item() == pytest.approx(res.parts["atom"] + res.parts["cl"], rel=1e-12)


# ---------------------------------------------------------------- invariants

def test_masked_parts_do_not_leak(cno):
    mols, decs, _ = cno
    m, heads = model_and_heads(seed=3)
    batch = GraphBatch(mols, decs)
    plans = [mask_subgraphs(d, 0.5, np.random.default_rng(5)) for d in decs]
    before = mstm_loss(m, heads, batch, plans).item()
    rows = {batch.part_offsets[i] + t for i, p in enumerate(plans) for t in p.masked}
    hit = np.isin(batch.atom_part, list(rows))
    assert hit.any()
    rng = np.random.default_rng(0)
    batch.sub_atom_type[hit] = rng.integers(0, 8, size=int(hit.sum()))
    batch.sub_atom_deg[hit] = rng.integers(0, 4, size=int(hit.sum()))
    assert mstm_loss(m, heads, batch, plans).item() == before


def test_contrastive_nonnegative_and_permutation_invariant():
    rng = np.random.default_rng(2)
    for _ in range(20):
        b = int(rng.integers(2, 9))
        zs, za = rng.normal(size=(b, 4)), rng.normal(size=(b, 4))
        loss = contrastive_loss(Tensor(zs), Tensor(za)).item()
        assert loss >= 0
        perm = rng.permutation(b)
        assert contrastive_loss(Tensor(zs[perm]), Tensor(za[perm])).item() == pytest.approx(loss, rel=1e-12)


def _gradcheck(f, m):
    params = [t for _, t in m.store]
    return finite_diff_check(f, params, h=1e-6, tol=1e-4, max_entries=8, rng=np.random.default_rng(0))


def test_ssl_gradients(cno):
    mols, decs, _ = cno
    mols, decs = mols[:3], decs[:3]
    m, heads = model_and_heads(vocab_size=12, d=5, seed=1)
    batch = GraphBatch(mols, decs)
    plans = [mask_subgraphs(d, 0.5, np.random.default_rng(i)) for i, d in enumerate(decs)]
    aplans = [mask_atoms(g.n_atoms, 0.3, np.random.default_rng(i)) for i, g in enumerate(mols)]
    for f in (lambda: mstm_loss(m, heads, batch, plans),
              lambda: atom_mask_loss(m, heads, batch, aplans),
              lambda: contrastive_loss(m.sub.forward(batch).z, m.atom.forward(batch).z)):
        rep = _gradcheck(f, m)
        assert rep.passed, rep.failures
        assert rep.n_checked > 50


def test_pretrain_deterministic(cno):
    mols, decs, _ = cno
    runs = []
    for _ in range(2):
        m, heads = model_and_heads(vocab_size=12, seed=4)
        hist = pretrain(m, heads, mols, decs, PretrainConfig(batch_size=3, steps=4, seed=7))
        runs.append((hist, b"".join(t.data.tobytes() for _, t in m.store)))
    assert runs[0] == runs[1]
    assert len(runs[0][0]) == 4
