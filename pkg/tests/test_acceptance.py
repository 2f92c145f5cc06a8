"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line.

The conditional integration run needs real data and is skipped unless
TDGAT_SEMEVAL_DIR and TDGAT_GLOVE are set (see README).
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from tdgat.cli import run_cli
from tdgat.datasets import dataset_stats, load_corpus, read_split_sidecar, split_dev, synth_corpus, \
    synth_embeddings
from tdgat.depgraph import neighborhood, random_tree, relabel
from tdgat.embeddings import load_glove
from tdgat.model import (LayerState, LstmParams, ModelConfig, batch_graphs, encode, forward, init_params,
                         load_model, lstm_cell, model_gradcheck, param_count, save_model)
from tdgat.autodiff import Tensor
from tdgat.training import TrainConfig, ablate, apply_dropout, evaluate, format_ablation, train


def check(number, title, passed, detail):
    record_criterion(number, title, passed, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    assert passed, detail


# 1 ---------------------------------------------------------------------------------

def test_c01_gradient_fidelity():
    cfg = ModelConfig(hidden_dim=12, heads=3, layers=2, embed_dim=8)
    t0 = time.perf_counter()
    report = model_gradcheck(cfg, seed=7, nodes=6, lam=1e-4, h=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    check(1, "gradient fidelity", report.passed and elapsed < 60,
          f"max rel err {report.max_rel_error:.2e} over {report.checked} components (< 1e-4), {elapsed:.1f}s (< 60s)")


# 2 ---------------------------------------------------------------------------------

def test_c02_attention_normalization():
    rng = np.random.default_rng(2)
    worst, rows = 0.0, 0
    outside_zero = True
    for trial in range(100):
        K = int(rng.choice([1, 2, 3]))
        cfg = ModelConfig(hidden_dim=K * int(rng.integers(1, 4)), heads=K, layers=int(rng.integers(1, 4)),
                          embed_dim=int(rng.integers(1, 6)), self_loop=bool(rng.integers(0, 2)),
                          variant=str(rng.choice(["TDGAT", "GAT"])), lstm_mode=str(rng.choice(["all", "target"])))
        n = int(rng.integers(2, 12))
        graph = random_tree(n, rng)
        params = init_params(cfg, trial)
        # push weights well away from init scale so logits vary widely
        for t in params.tensors():
            t.values *= rng.uniform(0.5, 4.0)
        X = rng.normal(size=(n, cfg.embed_dim))
        trace = []
        encode(params, batch_graphs([graph], cfg.self_loop), X, trace)
        assert len(trace) == cfg.layers and all(len(h) == cfg.heads for h in trace)
        for layer in trace:
            for alpha in layer:
                for i in range(n):
                    nbrs = neighborhood(graph, i, cfg.self_loop)
                    worst = max(worst, abs(alpha[i, nbrs].sum() - 1.0))
                    others = np.delete(alpha[i], nbrs)
                    outside_zero &= bool(np.all(others == 0.0))
                    rows += 1
    check(2, "attention normalization", worst <= 1e-9 and outside_zero,
          f"{rows} rows over 100 graphs, max |sum - 1| = {worst:.1e} (<= 1e-9), zero outside n[i]: {outside_zero}")


# 3 ---------------------------------------------------------------------------------

def test_c03_permutation_equivariance():
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(50):
        cfg = ModelConfig(hidden_dim=6, heads=int(rng.choice([1, 2, 3])), layers=int(rng.integers(1, 4)), embed_dim=4,
                          lstm_mode=str(rng.choice(["all", "target"])))
        n = int(rng.integers(2, 10))
        graph = random_tree(n, rng)
        perm = rng.permutation(n)
        params = init_params(cfg, trial)
        X = rng.normal(size=(n, 4))
        Xp = np.empty_like(X)
        Xp[perm] = X
        a = forward(params, graph, X).values
        b = forward(params, relabel(graph, perm), Xp).values
        worst = max(worst, float(np.max(np.abs(a - b))))
    check(3, "permutation equivariance", worst <= 1e-9, f"50 pairs, max |delta| = {worst:.1e} (<= 1e-9)")


# 4 ---------------------------------------------------------------------------------

def test_c04_parameter_deltas():
    counts = [param_count(ModelConfig(hidden_dim=300, heads=6, layers=L, embed_dim=300)) for L in range(1, 7)]
    deltas = set(np.diff(counts).tolist())
    check(4, "parameter-count deltas", deltas == {90_600}, f"successive deltas for L=1..6: {sorted(deltas)} (== 90600)")


# 5 ---------------------------------------------------------------------------------

def _lstm(D, w, u, b):
    def t(v, shape):
        return Tensor(np.full(shape, v), requires_grad=True)
    kw = {}
    for g in "ifoc":
        kw[f"W_{g}"], kw[f"U_{g}"], kw[f"b_{g}"] = t(w, (D, D)), t(u, (D, D)), t(b, (1, D))
    return LstmParams(**kw)


def test_c05_lstm_cell_cases():
    D = 4
    zero = Tensor(np.zeros((3, D)))
    gates = {}
    out = lstm_cell(zero, LayerState(zero, zero), _lstm(D, 0.0, 0.0, 0.0), gates)
    zero_ok = bool(all(np.all(gates[g] == 0.5) for g in "ifo") and np.all(gates["c"] == 0.0)
                   and np.all(out.H.values == 0.0) and np.all(out.C.values == 0.0))

    # independent scalar evaluation of the gate equations
    x, h, c = 1.0, 0.5, 0.2
    s = 1.0 / (1.0 + math.exp(-(x + h)))  # i = f = o with unit weights, zero bias
    c_new = s * c + s * math.tanh(x + h)
    h_new = s * math.tanh(c_new)
    res = lstm_cell(Tensor([[x]]), LayerState(Tensor([[h]]), Tensor([[c]])), _lstm(1, 1.0, 1.0, 0.0))
    err = max(abs(res.H.item() - h_new), abs(res.C.item() - c_new))
    check(5, "LSTM zero and scalar cases", zero_ok and err <= 1e-12,
          f"zero case gates 0.5, c'=h'=0 exactly: {zero_ok}; scalar h'={res.H.item():.6f} c'={res.C.item():.6f}, err {err:.1e} (<= 1e-12)")


# 6 ---------------------------------------------------------------------------------

OVERFIT = TrainConfig(batch_size=8, dropout_rate=0.0, adam_lr=1e-3, switch_epoch=300, max_epochs=300, seed=0)


def test_c06_synthetic_overfit():
    corpus = synth_corpus(40, seed=0)
    emb = synth_embeddings(30, seed=0)
    cfg = ModelConfig(hidden_dim=30, heads=3, layers=3, embed_dim=30)
    t0 = time.perf_counter()
    _, log1 = train(cfg, corpus, None, emb, OVERFIT)
    elapsed = time.perf_counter() - t0
    _, log2 = train(cfg, corpus, None, emb, OVERFIT)
    first = next((r.epoch for r in log1.records if r.train_accuracy == 1.0), None)
    same = log1.deterministic_view() == log2.deterministic_view()
    check(6, "synthetic overfit", first is not None and elapsed < 120 and same,
          f"100% train accuracy first at epoch {first} (<= 300), {elapsed:.1f}s (< 120s), deterministic: {same}")


# 7 ---------------------------------------------------------------------------------

def test_c07_ablation_mechanics():
    corpus = synth_corpus(24, seed=7)
    train_set, dev_set = split_dev(corpus, 6, seed=7)
    emb = synth_embeddings(12, seed=7)
    cfg = ModelConfig(hidden_dim=12, heads=3, layers=2, embed_dim=12)
    tc = TrainConfig(max_epochs=3, batch_size=6, seed=7)
    magnitudes = []
    train(cfg.replace(variant="GAT"), train_set, dev_set, emb, tc,
          step_hook=lambda e, p: magnitudes.extend(float(np.abs(t.grad).max()) for t in p.lstm_tensors()))
    zero_grads = bool(magnitudes) and max(magnitudes) == 0.0
    rows, _ = ablate(cfg, train_set, dev_set, synth_corpus(9, seed=8, split="test"), emb, tc)
    report = format_ablation(rows, "synth").splitlines()
    shaped = ([r.variant for r in rows] == ["GAT", "TDGAT"] and len(report) == 3
              and report[1].startswith("GAT") and report[2].startswith("TD-GAT")
              and all(r.dev_accuracy is not None and r.test_accuracy is not None for r in rows))
    check(7, "ablation mechanics", zero_grads and shaped,
          f"GAT-variant LSTM grads identically zero over {len(magnitudes)} checks: {zero_grads}; report rows GAT/TD-GAT: {shaped}")


# 8 ---------------------------------------------------------------------------------

def test_c08_depth_sweep(tmp_path, capsys):
    c, e, out = tmp_path / "c.jsonl", tmp_path / "e.txt", tmp_path / "sweep.json"
    assert run_cli(["synth", "--size", "40", "--dim", "30", "--seed", "0", "--corpus-out", str(c),
                    "--embeddings-out", str(e)]) == 0
    code = run_cli(["sweep-depth", "--train", str(c), "--embeddings", str(e), "--dev-size", "10",
                    "--dim", "30", "--heads", "3", "--epochs", "3", "--batch-size", "8", "--seed", "0",
                    "--min", "1", "--max", "6", "--out", str(out)])
    table = capsys.readouterr().out.strip().splitlines()
    rows = json.loads(out.read_text()) if out.exists() else []
    ok = (code == 0 and [r["layers"] for r in rows] == list(range(1, 7)) and len(table) >= 7
          and [int(line.split()[0]) for line in table[-6:]] == list(range(1, 7)))
    check(8, "depth sweep", ok, f"exit {code}, table rows for L = {[r['layers'] for r in rows]}")


# 9 ---------------------------------------------------------------------------------

def test_c09_dropout_statistics():
    rng = np.random.default_rng(9)
    x = np.ones(100_000)
    mean = float(apply_dropout(x, 0.7, rng).mean())
    X = rng.normal(size=(7, 5))
    ident = apply_dropout(X, 0.0, rng) is X and apply_dropout(X, 0.7, rng, training=False) is X
    check(9, "dropout statistics", abs(mean - 1.0) < 0.02 and ident,
          f"mean at rate 0.7 = {mean:.4f} (within 2% of 1), identities exact: {ident}")


# 10 --------------------------------------------------------------------------------

def test_c10_determinism_and_roundtrip(tmp_path):
    corpus = synth_corpus(15, seed=10)
    emb = synth_embeddings(8, seed=10)
    cfg = ModelConfig(hidden_dim=8, heads=2, layers=2, embed_dim=8)
    tc = TrainConfig(max_epochs=3, batch_size=4, seed=10)
    p1, l1 = train(cfg, corpus, corpus, emb, tc)
    p2, l2 = train(cfg, corpus, corpus, emb, tc)
    repro = (l1.deterministic_view() == l2.deterministic_view()
             and all(a.values.tobytes() == b.values.tobytes() for a, b in zip(p1.tensors(), p2.tensors())))
    path = tmp_path / "m.json"
    save_model(p1, path)
    q = load_model(path)
    ex = corpus[0]
    before = forward(p1, ex.graph, ex.features(emb)).values.tobytes()
    after = forward(q, ex.graph, ex.features(emb)).values.tobytes()
    check(10, "determinism and round trip", repro and before == after,
          f"training bit-reproducible: {repro}; save/load/forward bit-identical: {before == after}")


# 11 --------------------------------------------------------------------------------

TABLE1 = {
    "laptop": {"train": (767, 373, 673), "dev": (220, 87, 193), "test": (341, 169, 128)},
    "restaurant": {"train": (1886, 531, 685), "dev": (278, 102, 120), "test": (728, 196, 196)},
}
PUBLISHED = {"laptop": 73.7, "restaurant": 81.1}


@pytest.mark.skipif(not (os.environ.get("TDGAT_SEMEVAL_DIR") and os.environ.get("TDGAT_GLOVE")),
                    reason="needs TDGAT_SEMEVAL_DIR and TDGAT_GLOVE")
@pytest.mark.parametrize("domain", ["laptop", "restaurant"])
def test_c11_integration(domain):
    root = Path(os.environ["TDGAT_SEMEVAL_DIR"])
    emb = load_glove(os.environ["TDGAT_GLOVE"], expected_dim=300)
    full = load_corpus(root / f"{domain}_train.jsonl", "train")
    train_set, dev_set = split_dev(full, indices=read_split_sidecar(root / f"{domain}_dev.txt"))
    test_set = load_corpus(root / f"{domain}_test.jsonl", "test")
    stats = dataset_stats(train_set + dev_set + test_set)
    table_ok = all(tuple(stats[s][p] for p in ("positive", "neutral", "negative")) == TABLE1[domain][s]
                   for s in ("train", "dev", "test"))
    epochs = int(os.environ.get("TDGAT_EPOCHS", TrainConfig().max_epochs))
    params, _ = train(ModelConfig(), train_set, dev_set, emb, TrainConfig(max_epochs=epochs, seed=0))
    acc = 100 * evaluate(params, test_set, emb)
    close = abs(acc - PUBLISHED[domain]) <= 2.5
    check(11, f"integration ({domain})", table_ok and close,
          f"split counts match: {table_ok}; test accuracy {acc:.1f} vs {PUBLISHED[domain]} (+-2.5)")
