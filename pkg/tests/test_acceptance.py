"""Acceptance criteria, one PASS/FAIL line each.

The lines are collected in ``LINES`` and printed in the terminal summary
(see conftest); ``-s`` also shows them as each test finishes.
Criteria that do not hold are marked ``xfail(strict=True)``: the line says
FAIL with the measured numbers, and the suite stays green only as long as
they keep failing, so an unexpected pass is noticed.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from fedali import transport as tp
from fedali.alp import ema_update
from fedali.clustering import kmeans_fit, weighted_prototype_average
from fedali.data import SynthConfig, stratified_split, synth_generate
from fedali.evalharness import run_experiment
from fedali.federation import ClientState, ServerState, Strategy, aggregate_fedavg, comm_cost, run_round
from fedali.model import DESK, FULL_SCALE, ModelConfig, TrainConfig, build, forward
from fedali.numerics import OpGraph, Tensor, cross_entropy, gradcheck
from oracles import macro_f1_reference, marginal_residual, separated_instances, tv

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk_acceptance.yaml"
LINES: list[str] = []


def report(cid: str, ok: bool, detail: str):
    line = f"[acceptance] criterion {cid:<3} {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)


def order_key(line: str):
    cid = line.split()[2]
    return int(cid.rstrip("ab")), cid


# 1 ------------------------------------------------------------------ transport

@pytest.fixture(scope="module")
def ot_instances():
    return {(n, m): separated_instances(n, m, d=4, count=20, seed=n) for n, m in [(4, 2), (6, 3)]}


def test_c1a_sinkhorn_matches_lp(ot_instances):
    t0 = time.perf_counter()
    dists = [tv(tp.transport_plan(x, p, epsilon=0.01, iterations=500).matrix, exact)
             for inst in ot_instances.values() for x, p, exact in inst]
    secs = time.perf_counter() - t0
    ok = max(dists) < 0.05 and secs < 10 and len(dists) >= 40
    report("1a", ok, f"{len(dists)} instances, max TV to LP plan {max(dists):.4f} (< 0.05), {secs:.2f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="plain Sinkhorn at eps=0.01 converges too slowly on some 6x3 draws")
def test_c1b_marginal_residual_at_200_iterations(ot_instances):
    res = {shape: [marginal_residual(tp.transport_plan(x, p, 0.01, 200).matrix) for x, p, _ in inst]
           for shape, inst in ot_instances.items()}
    worst = max(max(r) for r in res.values())
    over = sum(v >= 1e-3 for r in res.values() for v in r)
    per_shape = ", ".join(f"{n}x{m} max {max(r):.5f}" for (n, m), r in res.items())
    report("1b", worst < 1e-3, f"residual at eps=0.01, 200 it: {per_shape}; {over}/40 at or above 1e-3")
    assert worst < 1e-3


# 2 ------------------------------------------------------------------ gradients

def test_c2_full_model_gradcheck():
    w = build(DESK, 0)
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal((2, 16, 6)), np.array([1, 4])

    def loss(P):
        logits, _ = forward(w, x, "train", params=P)
        return cross_entropy(logits, y)

    t0 = time.perf_counter()
    errs = gradcheck(loss, w.params, step=1e-5, max_entries=400)
    secs = time.perf_counter() - t0

    leaves = {k: Tensor(v, requires_grad=True) for k, v in w.params.items()}
    graph = OpGraph.trace(loss(leaves))
    bank_free = not any(np.shares_memory(n.data, bank) for bank in w.banks.values()
                        for n in graph.nodes if n.requires_grad)

    worst = max(errs, key=errs.get)
    n_coords = sum(min(v.size, 400) for v in w.params.values())
    ok = errs[worst] < 1e-4 and bank_free and secs < 120
    report("2", ok, f"{n_coords} coordinates over {len(errs)} tensors, max rel err {errs[worst]:.2e} ({worst}); "
                    f"banks outside grad graph: {bank_free}; {secs:.0f}s")
    assert ok


# 3 ------------------------------------------------------------------ beta = 0

def test_c3_beta_zero_is_token_normalization():
    cfg = ModelConfig.with_prototypes((32, 16), dim=32, heads=2, mlp=64, seq_len=16, head_hidden=64,
                                     alp_beta=0.0)
    plain_cfg = cfg.plain()
    w = build(cfg, 3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 16, 6))
    worst = 0.0
    for mode in ("train", "infer"):
        taps = {}
        forward(w, x, mode, taps=taps)
        # reference: the ALP input of block i is norm1 applied to the plain residual stream,
        # fed the same ALP outputs as the model so the stream stays aligned
        p = w.params
        h = x @ p["embed.W"] + p["embed.b"] + p["pos"]
        for i in range(plain_cfg.blocks):
            mu = h.mean(-1, keepdims=True)
            var = ((h - mu) ** 2).mean(-1, keepdims=True)
            n1 = (h - mu) / np.sqrt(var + 1e-5) * p[f"block{i}.norm1.g"] + p[f"block{i}.norm1.b"]
            want = n1 / np.linalg.norm(n1, axis=-1, keepdims=True)
            worst = max(worst, float(np.abs(taps[i].data - want).max()))
            h = _block_rest(h, taps[i].data, p, i, plain_cfg.heads)
    ok = worst < 1e-6
    report("3", ok, f"max |ALP(x) - x/||x|||| over {plain_cfg.blocks} blocks, train and infer: {worst:.2e}")
    assert ok


def _block_rest(h, a, p, i, heads):
    """Attention and MLP half of a block, written directly in numpy."""
    from scipy.special import softmax

    b = f"block{i}."
    B, Z, d = a.shape
    dh = d // heads
    q = (a @ p[b + "attn.Wq"] + p[b + "attn.bq"]).reshape(B, Z, heads, dh).transpose(0, 2, 1, 3)
    k = (a @ p[b + "attn.Wk"] + p[b + "attn.bk"]).reshape(B, Z, heads, dh).transpose(0, 2, 1, 3)
    v = (a @ p[b + "attn.Wv"] + p[b + "attn.bv"]).reshape(B, Z, heads, dh).transpose(0, 2, 1, 3)
    att = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh), axis=-1) @ v
    h = h + att.transpose(0, 2, 1, 3).reshape(B, Z, d) @ p[b + "attn.Wo"] + p[b + "attn.bo"]
    mu = h.mean(-1, keepdims=True)
    var = ((h - mu) ** 2).mean(-1, keepdims=True)
    n2 = (h - mu) / np.sqrt(var + 1e-5) * p[b + "norm2.g"] + p[b + "norm2.b"]
    z = n2 @ p[b + "mlp.W1"] + p[b + "mlp.b1"]
    z = 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3)))
    return h + z @ p[b + "mlp.W2"] + p[b + "mlp.b2"]


# 4 ------------------------------------------------------------------ degeneracy

def test_c4_fedali_on_plain_equals_fedavg():
    parts = synth_generate(SynthConfig(clients=4, samples_min=30, samples_max=40, seed=9))
    pairs = [stratified_split(d, 0.8, seed=i) for i, d in enumerate(parts)]
    tc = TrainConfig(epochs=1, batch_size=16, lr=1e-3)
    outs = {}
    for name in ("fedavg", "fedali"):
        strategy = Strategy(name)
        init = build(DESK.plain(), 0)
        server = ServerState(0, init, strategy)
        clients = [ClientState(i, tr, te, init.copy()) for i, (tr, te) in enumerate(pairs)]
        for _ in range(3):
            server = run_round(server, clients, strategy, tc, seed=5)
        outs[name] = ([h.comparable() for h in server.history], server.weights.checksum(),
                      [c.weights.checksum() for c in clients])
    ok = outs["fedavg"] == outs["fedali"]
    report("4", ok, f"3 rounds x 4 clients, server checksum {outs['fedali'][1][:12]} for both strategies")
    assert ok


# 5 ------------------------------------------------------------------ algebra

def test_c5_ema_aggregation_kmeans():
    rng = np.random.default_rng(5)
    P, xb = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    ema_ok = (np.array_equal(ema_update(P, xb, 0.0), xb) and np.array_equal(ema_update(P, xb, 1.0), P)
              and np.array_equal(ema_update(P, xb, 0.9), 0.9 * P + (1 - 0.9) * xb)
              and np.array_equal(ema_update(np.array([1.0]), np.array([3.0]), 0.5), np.array([2.0])))

    avg_err = 0.0
    avg_err = max(avg_err, abs(float(aggregate_fedavg([{"w": np.array(0.0)}, {"w": np.array(4.0)}], [1, 3])["w"]) - 3))
    cs = [{"a": rng.standard_normal((3, 2))} for _ in range(3)]
    got = aggregate_fedavg(cs, [2, 5, 3])["a"]
    avg_err = max(avg_err, float(np.abs(got - (0.2 * cs[0]["a"] + 0.5 * cs[1]["a"] + 0.3 * cs[2]["a"])).max()))
    banks = [rng.standard_normal((4, 3)) for _ in range(2)]
    got = weighted_prototype_average(banks, [1, 3])
    avg_err = max(avg_err, float(np.abs(got - (0.25 * banks[0] + 0.75 * banks[1])).max()))

    runs, monotone = 0, True
    for seed in range(25):
        r = np.random.default_rng(seed)
        pts = r.standard_normal((int(r.integers(20, 80)), 4))
        k = int(r.integers(2, 7))
        res = kmeans_fit(pts, pts[r.choice(len(pts), k, replace=False)])
        hist = np.asarray(res.inertia_history)
        monotone &= bool(np.all(np.diff(hist) <= 1e-12 * max(1.0, hist[0])))
        runs += 1
    ok = ema_ok and avg_err <= 1e-12 and monotone
    report("5", ok, f"EMA cases exact: {ema_ok}; max averaging error {avg_err:.1e}; "
                    f"inertia non-increasing on {runs} runs: {monotone}")
    assert ok


# 6 ------------------------------------------------------------------ communication

def test_c6_full_scale_comm_ratio():
    t0 = time.perf_counter()
    ratio = comm_cost("fedali", FULL_SCALE).total / comm_cost("fedavg", FULL_SCALE.plain()).total
    secs = time.perf_counter() - t0
    ok = 1.69 <= ratio <= 1.99 and secs < 1
    report("6", ok, f"fedali/fedavg bytes per round at full scale: {ratio:.4f} (in [1.69, 1.99])")
    assert ok


# 7-10 -------------------------------------------------------------- desk experiment

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "run"
    t0 = time.perf_counter()
    run_experiment(DESK_CONFIG, out)
    return out, time.perf_counter() - t0


def _gen(summary, label):
    return {int(s): r["generalization"]["mean"] for s, r in summary[label].items()}


@pytest.mark.xfail(strict=True, reason="FedAli trails FedAvg on the desk surrogate; see per-seed margins")
def test_c7a_fedali_generalizes_at_least_as_well_as_fedavg(desk_run):
    out, secs = desk_run
    summary = json.loads((out / "summary.json").read_text())
    ali, avg = _gen(summary, "fedali"), _gen(summary, "fedavg")
    margins = " ".join(f"s{s}:{ali[s] - avg[s]:+.2f}" for s in sorted(ali))
    m_ali, m_avg = np.mean(list(ali.values())), np.mean(list(avg.values()))
    report("7a", m_ali >= m_avg, f"mean generalization FedAli {m_ali:.2f} vs FedAvg {m_avg:.2f}; "
                                 f"per-seed margin {margins}; {secs / 60:.1f} min")
    assert m_ali >= m_avg


def test_c7b_fedavg_generalizes_better_than_local(desk_run):
    out, secs = desk_run
    summary = json.loads((out / "summary.json").read_text())
    avg, loc = _gen(summary, "fedavg"), _gen(summary, "local")
    m_avg, m_loc = np.mean(list(avg.values())), np.mean(list(loc.values()))
    ok = m_avg >= m_loc and secs < 15 * 60
    report("7b", ok, f"mean generalization FedAvg {m_avg:.2f} vs Local {m_loc:.2f}; "
                     f"3-seed sweep took {secs / 60:.1f} min (< 15)")
    assert ok


def test_c8_local_personalization_gap(desk_run):
    out, _ = desk_run
    summary = json.loads((out / "summary.json").read_text())["local"]
    pers = np.mean([r["personalization"]["mean"] for r in summary.values()])
    gen = np.mean([r["generalization"]["mean"] for r in summary.values()])
    gaps = [r["personalization"]["mean"] - r["generalization"]["mean"] for r in summary.values()]
    ok = min(gaps) >= 20
    report("8", ok, f"Local personalization {pers:.2f} vs generalization {gen:.2f}; "
                    f"smallest per-seed gap {min(gaps):.2f} (>= 20)")
    assert ok


def _recompute(pred_file: Path):
    """Scores from the prediction dump alone, via scikit-learn."""
    with np.load(pred_file) as z:
        arrays = {k: z[k] for k in z.files}
    n = sum(1 for k in arrays if k.startswith("labels_"))
    labels = [arrays[f"labels_{j}"] for j in range(n)]
    pers = [macro_f1_reference(arrays[f"pred_{i}_{i}"], labels[i]) for i in range(n)]
    gen = [np.mean([macro_f1_reference(arrays[f"pred_{i}_{j}"], labels[j]) for j in range(n)]) for i in range(n)]
    return (np.mean(pers), np.std(pers)), (np.mean(gen), np.std(gen))


def test_c9_scores_match_independent_recomputation(desk_run):
    out, _ = desk_run
    worst, checked = 0.0, 0
    for scores_file in sorted(out.glob("*/seed*/scores.json")):
        scores = json.loads(scores_file.read_text())
        if scores["personalization"] is None:
            continue
        (pm, ps), (gm, gs) = _recompute(scores_file.parent / "predictions.npz")
        diffs = [pm - scores["personalization"]["mean"], ps - scores["personalization"]["std"],
                 gm - scores["generalization"]["mean"], gs - scores["generalization"]["std"]]
        worst = max(worst, max(abs(d) for d in diffs))
        checked += 1
    ok = checked == 9 and worst < 1e-9
    report("9", ok, f"{checked} strategy/seed runs recomputed from predictions.npz; max deviation {worst:.1e}")
    assert ok


def test_c10_rerun_reproduces_checksums(desk_run, tmp_path):
    out, _ = desk_run
    first = json.loads((out / "checksums.json").read_text())
    run_experiment(DESK_CONFIG, tmp_path / "again", seeds=[0])
    second = json.loads((tmp_path / "again" / "checksums.json").read_text())
    shared = [k for k in second if k != "summary.json"]
    mismatched = [k for k in shared if first.get(k) != second[k]]
    ok = bool(shared) and not mismatched
    report("10", ok, f"seed 0 rerun: {len(shared)} artifact files compared, {len(mismatched)} differ")
    assert ok
