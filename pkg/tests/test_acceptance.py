"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import itertools
import math
import time

import numpy as np
import pytest

from asba import cli
from asba.bounds import (
    SQRT3,
    ErrorModel,
    bayes_bound,
    crossing,
    monte_carlo_bayes,
    monte_carlo_noisy_classifiers,
    random_task_1d,
    sweep,
)
from asba.fragment import decompose, mine_vocabulary
from asba.gnn import ASBAModel, EncoderConfig, GraphBatch
from asba.molgraph import relabel
from asba.ssl import (
    PretrainConfig,
    SSLHeads,
    atom_mask_loss,
    contrastive_loss,
    mask_atoms,
    mask_subgraphs,
    mstm_accuracy,
    mstm_loss,
    pretrain,
)
from asba.synth import generate, generate_atoms, generate_motif
from asba.tensor import add, finite_diff_check, load_checkpoint, save_checkpoint
from asba.train import Dataset, FinetuneConfig, finetune, supervised_loss

from conftest import random_molecule
from test_fragment import brute_occurrences, check_partition


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


# 1 ----------------------------------------------------------------------

def test_c01_full_loss_gradients(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    mols = [random_molecule(rng, 4, 7, n_types=4, p_extra=0.3) for _ in range(3)]
    vocab = mine_vocabulary(mols * 2, 10, cap=4)
    decs = [decompose(g, vocab) for g in mols]
    cfg = EncoderConfig(d=5, K=2, K1=2, K2=2)
    model = ASBAModel(cfg, seed=3)
    heads = SSLHeads(model.store, cfg.d, len(vocab), cfg.n_atom_types, np.random.default_rng(4))
    batch = GraphBatch(mols, decs)
    y = np.array([[1.0], [0.0], [1.0]])
    plans = [mask_subgraphs(d, 0.5, np.random.default_rng(i)) for i, d in enumerate(decs)]
    aplans = [mask_atoms(g.n_atoms, 0.3, np.random.default_rng(10 + i)) for i, g in enumerate(mols)]
    assert any(not p.empty for p in plans)

    def total():
        terms = [supervised_loss(model.atom.forward(batch).logits, y),
                 supervised_loss(model.sub.forward(batch).logits, y),
                 mstm_loss(model, heads, batch, plans),
                 atom_mask_loss(model, heads, batch, aplans),
                 contrastive_loss(model.sub.forward(batch).z, model.atom.forward(batch).z)]
        out = terms[0]
        for t in terms[1:]:
            out = add(out, t)
        return out

    params = [t for _, t in model.store]
    rep = finite_diff_check(total, params, h=1e-6, tol=1e-4)
    dt = time.perf_counter() - t0
    ok = rep.passed and rep.n_checked > 0 and dt < 60
    report(1, ok, f"{rep.n_checked} entries checked ({rep.n_excluded} at kinks), "
                  f"max rel error {rep.max_rel_error:.2e} <= 1e-4, {dt:.1f}s < 60s")


# 2 ----------------------------------------------------------------------

def test_c02_context_independence(report):
    corpus = [r["mol"] for r in generate("motif", 80, seed=21)]
    vocab = mine_vocabulary(corpus, 60)
    model = ASBAModel(EncoderConfig(d=32), seed=5)
    hosts = {}
    decs = [decompose(g, vocab) for g in corpus]
    for i, d in enumerate(decs):
        for t, p in enumerate(d.parts):
            hosts.setdefault(p.token, []).append((i, t))
    cases = []
    for tok in sorted(hosts):
        occ = hosts[tok]
        for (a, ta), (b, tb) in itertools.combinations(occ, 2):
            if a != b:
                cases.append((tok, a, ta, b, tb))
    rng = np.random.default_rng(0)
    pick = [cases[i] for i in rng.choice(len(cases), size=50, replace=False)]
    distinct_tokens = len({c[0] for c in pick})
    mismatches = 0
    for tok, a, ta, b, tb in pick:
        # each host embedded alone, then inside a batch with other molecules
        ea = model.sub.embed(GraphBatch([corpus[a]], [decs[a]])).data[ta]
        others = [k for k in range(5) if k != b]
        mols = [corpus[k] for k in others] + [corpus[b]]
        eb = model.sub.embed(GraphBatch(mols, [decs[k] for k in others] + [decs[b]])).data
        eb = eb[sum(decs[k].T for k in others) + tb]
        mismatches += ea.tobytes() != eb.tobytes()
    report(2, mismatches == 0, f"{mismatches} bitwise mismatches over 50 (pattern, host-pair) cases "
                               f"covering {distinct_tokens} patterns")


# 3 ----------------------------------------------------------------------

def test_c03_permutation_invariance(report):
    mols = [r["mol"] for r in generate("atoms", 10, seed=31)] + [r["mol"] for r in generate("motif", 10, seed=32)]
    vocab = mine_vocabulary(mols * 2, 60)
    model = ASBAModel(EncoderConfig(d=32), seed=6)
    rng = np.random.default_rng(33)
    worst = 0.0
    for g in mols:
        base = GraphBatch([g], [decompose(g, vocab)])
        ref = (model.atom.forward(base), model.sub.forward(base))
        for _ in range(20):
            h = relabel(g, [int(x) for x in rng.permutation(g.n_atoms)])
            b = GraphBatch([h], [decompose(h, vocab)])
            for r, o in zip(ref, (model.atom.forward(b), model.sub.forward(b))):
                worst = max(worst, float(np.max(np.abs(r.z.data - o.z.data))),
                            float(np.max(np.abs(r.logits.data - o.logits.data))))
    report(3, worst <= 1e-9, f"max abs deviation of z_A, z_S, f, g over 20x20 relabelings = {worst:.2e} <= 1e-9")


# 4 ----------------------------------------------------------------------

def test_c04_partition_property(report):
    corpus = [r["mol"] for r in generate("motif", 250, seed=41) + generate("atoms", 250, seed=42)]
    vocab = mine_vocabulary(corpus, 100)
    test_mols = [r["mol"] for r in generate("motif", 500, seed=43) + generate("atoms", 500, seed=44)]
    violations = 0
    for g in test_mols:
        try:
            check_partition(decompose(g, vocab))
        except AssertionError:
            violations += 1
    report(4, violations == 0 and len(vocab) == 100,
           f"{violations} violations over {len(test_mols)} molecules, |V| = {len(vocab)}")


# 5 ----------------------------------------------------------------------

def test_c05_mining_oracle(report):
    rng = np.random.default_rng(51)
    checked = wrong = 0
    for _ in range(6):
        corpus = [random_molecule(rng, 2, 8, n_types=3, p_extra=0.2) for _ in range(int(rng.integers(5, 21)))]
        vocab = mine_vocabulary(corpus, 30, cap=6)
        for p in vocab.patterns:
            checked += 1
            wrong += p.frequency != sum(brute_occurrences(p.graph, h) for h in corpus)
    report(5, wrong == 0, f"{wrong} frequency mismatches over {checked} mined patterns (6 corpora, <= 20 x <= 8 atoms)")


# 6 ----------------------------------------------------------------------

def test_c06_bayes_bound_monte_carlo(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(61)
    held = 0
    for _ in range(200):
        t = random_task_1d(rng)
        e = monte_carlo_bayes(t, 100_000, rng)
        held += e.rate <= bayes_bound(t) + 3 * e.half_width
    dt = time.perf_counter() - t0
    report(6, held == 200 and dt < 120, f"bound held in {held}/200 tasks at n=100k, {dt:.1f}s < 120s")


# 7 ----------------------------------------------------------------------

def test_c07_ensemble_condition(report):
    rows = sweep(np.linspace(0.1, 3.0, 59))
    below = [r for r in rows if r["ratio"] < SQRT3]
    formula_ok = all(r["ensemble"] < r["single"] for r in below)
    cross_err = abs(crossing() - SQRT3)
    rng = np.random.default_rng(71)
    tau = 0.3
    wins = 0
    for _ in range(20):
        t = random_task_1d(rng)
        r = monte_carlo_noisy_classifiers(t, ErrorModel.uniform(tau), ErrorModel.uniform(tau), 100_000, rng)
        wins += r.ensemble.rate <= r.f.rate and r.ensemble.rate <= r.g.rate
    ok = formula_ok and cross_err <= 1e-9 and wins >= 19
    report(7, ok, f"ensemble bound below single at all {len(below)} sweep points under sqrt(3): {formula_ok}; "
                  f"crossing error {cross_err:.1e} <= 1e-9; simulated ensemble <= both branches in {wins}/20 tasks")


# 8 ----------------------------------------------------------------------

def _learn(kind, seed):
    t0 = time.perf_counter()
    ds = Dataset.from_records(generate(kind, 300, seed=seed))
    ds.split = np.array(["train"] * 200 + ["valid"] * 50 + ["test"] * 50, dtype=object)
    vocab = mine_vocabulary(ds.molecules[:200], 100)
    res = finetune(ds, vocab, FinetuneConfig(epochs=30, seed=seed))
    return res.test, time.perf_counter() - t0


def test_c08_learnability(report):
    motif, t_m = _learn("motif", 1)
    atoms, t_a = _learn("atoms", 1)
    ok_m = motif["g"] >= 0.90 and motif["asba"] >= max(motif["f"], motif["g"]) - 0.02 and t_m < 600
    ok_a = atoms["f"] >= 0.90 and atoms["asba"] >= max(atoms["f"], atoms["g"]) - 0.02 and t_a < 600
    fmt = lambda m: ", ".join(f"{k}={m[k]:.3f}" for k in ("f", "g", "asba"))
    report(8, ok_m and ok_a, f"motif task [{fmt(motif)}] in {t_m:.0f}s; atom-count task [{fmt(atoms)}] in {t_a:.0f}s")


# 9 ----------------------------------------------------------------------

def test_c09_pretraining(report):
    mols = [r["mol"] for r in generate_motif(500, seed=3)]
    vocab = mine_vocabulary(mols, 100)
    decs = [decompose(g, vocab) for g in mols]
    cfg = EncoderConfig()
    model = ASBAModel(cfg, seed=0)
    heads = SSLHeads(model.store, cfg.d, len(vocab), cfg.n_atom_types, np.random.default_rng(5))
    hist = pretrain(model, heads, mols, decs, PretrainConfig(mask_ratio=0.25, lambda_cl=1.0, batch_size=32, steps=300))
    acc = mstm_accuracy(model, heads, mols, decs, 0.25, seed=9)
    chance = 1.0 / len(vocab)
    cl_first = float(np.mean([h["cl"] for h in hist[:10]]))
    cl_last = float(np.mean([h["cl"] for h in hist[-20:]]))
    ok = acc >= 5 * chance and acc >= 0.05 and cl_last < math.log(32)
    report(9, ok, f"masked-token accuracy {acc:.3f} >= {5 * chance:.3f} (5x chance); contrastive loss "
                  f"{cl_first:.3f} -> {cl_last:.3f} < ln 32 = {math.log(32):.3f}")


# 10 ---------------------------------------------------------------------

def test_c10_determinism_roundtrip(report, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    steps = [
        ["generate", "--kind", "motif", "--n", "80", "--seed", "7", "--out", "data.jsonl"],
        ["mine-vocab", "--corpus", "data.jsonl", "--size", "40", "--out", "vocab.txt"],
        ["pretrain", "--corpus", "data.jsonl", "--vocab", "vocab.txt", "--out-dir", "pre", "--steps", "5", "--d", "16"],
        ["finetune", "--data", "data.jsonl", "--vocab", "vocab.txt", "--out-dir", "ft", "--epochs", "3",
         "--pretrained", "pre/checkpoint.bin", "--d", "16"],
    ]
    outputs = ["data.jsonl", "vocab.txt", "pre/checkpoint.bin", "pre/metrics.json", "ft/checkpoint.bin",
               "ft/metrics.json"]
    runs = []
    for _ in range(2):
        codes = [cli.main(s) for s in steps]
        assert codes == [0, 0, 0, 0]
        runs.append([open(p, "rb").read() for p in outputs])
    identical = [a == b for a, b in zip(*runs)]

    # in-process round trip: trained model -> file -> fresh model
    ds = Dataset.from_records(generate_atoms(40, seed=8))
    ds.split = np.array(["train"] * 30 + ["valid"] * 5 + ["test"] * 5, dtype=object)
    vocab = mine_vocabulary(ds.molecules, 30)
    res = finetune(ds, vocab, FinetuneConfig(epochs=2, encoder=EncoderConfig(d=16)))
    save_checkpoint(tmp_path / "rt.bin", res.model.store.snapshot(), 2, {"encoder": res.model.cfg.to_dict()})
    arrays, _, meta = load_checkpoint(tmp_path / "rt.bin")
    fresh = ASBAModel(EncoderConfig(**meta["encoder"]), seed=99)
    fresh.store.load_matching(arrays)
    batch = GraphBatch(ds.molecules, [decompose(g, vocab) for g in ds.molecules])
    a, b = res.model.predict(batch), fresh.predict(batch)
    roundtrip = all(a[k].tobytes() == b[k].tobytes() for k in ("f", "g", "asba"))
    ok = all(identical) and roundtrip
    report(10, ok, f"{sum(identical)}/{len(identical)} output files byte-identical across reruns; "
                   f"checkpoint round trip bitwise: {roundtrip}")
