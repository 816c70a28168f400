"""Acceptance suite: one printed PASS/FAIL line per criterion.

The desk-scale run (criteria 7, 9, 10) takes several minutes on one CPU core.
"""
import math
import time

import numpy as np
import pytest

from stitchkit import runner
from stitchkit import tensor as T
from stitchkit.anchors import AnchorConfig, block_forward, build_family, classify, embed_forward
from stitchkit.config import ExperimentConfig
from stitchkit.controller import ImportanceTracker, prepare, sample_stitch
from stitchkit.deploy import evaluate_palette, pareto_frontier, select_deployment
from stitchkit.optim import AdamW
from stitchkit.pst import effective_weight, trainable_set
from stitchkit.stitching import cost_of, ls_init, stitch_forward
from stitchkit.tensor import Tensor, grad_check

from conftest import randomize
from test_tensor import PRIMITIVES

TOL_PTS = 0.02


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


# -- 1 ------------------------------------------------------------------------------------------

def test_criterion_01_autodiff(report):
    t0 = time.perf_counter()
    worst_prim = 0.0
    for name, make in PRIMITIVES.items():
        for seed in range(10):
            fn, params = make(np.random.default_rng(seed))
            worst_prim = max(worst_prim, grad_check(fn, params, eps=1e-5))

    cfg = AnchorConfig(2, 8, heads=2, mlp_ratio=2.0, num_classes=3, seq_len=4, vocab_size=11)
    anchor = build_family([cfg, AnchorConfig(2, 16, num_classes=3, seq_len=4, vocab_size=11)], seed=0)[0]
    rng = np.random.default_rng(0)
    for p in anchor.parameters().values():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    tokens, labels = rng.integers(0, 11, (3, 4)), np.array([0, 2, 1])

    def one_block_loss():
        return T.cross_entropy(classify(anchor, block_forward(anchor, embed_forward(anchor, tokens), 1)), labels)

    params = list(anchor.embed.values()) + list(anchor.blocks[0].values()) + list(anchor.norm.values()) \
        + list(anchor.head.values())
    worst_model = grad_check(one_block_loss, params, eps=1e-5)
    elapsed = time.perf_counter() - t0
    ok = worst_prim < 1e-4 and worst_model < 1e-4 and elapsed < 30
    report(1, ok, f"primitives max rel err {worst_prim:.2e}, 1-block model {worst_model:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------------

def test_criterion_02_zero_init_neutrality(report, toy_family, toy_data):
    t0 = time.perf_counter()
    palette, overlay = prepare(toy_family, toy_data, ranks=[4, 2], calib_batches=3, batch_size=32)
    worst = 0.0
    for s in palette.stitches:
        fresh = stitch_forward(s, palette.family, palette.layers, overlay.view(s.id), toy_data).data
        frozen = stitch_forward(s, palette.family, palette.layers, overlay.heads_only(), toy_data).data
        worst = max(worst, float(np.abs(fresh - frozen).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    report(2, ok, f"{len(palette.stitches)} stitches, max |diff| {worst:.1e}, {elapsed:.2f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------------------

def test_criterion_03_least_squares(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    beaten = 0
    recovery = 0.0
    for _ in range(20):
        n, d1, d2 = rng.integers(40, 120), rng.integers(4, 16), rng.integers(4, 24)
        A, B = rng.standard_normal((n, d1)), rng.standard_normal((n, d2))
        M = ls_init(A, B)
        best = np.linalg.norm(A @ M - B)
        for _ in range(100):
            if np.linalg.norm(A @ (M + 1e-2 * rng.standard_normal(M.shape)) - B) < best:
                beaten += 1
        G = rng.standard_normal((d1, d2))
        recovery = max(recovery, float(np.linalg.norm(ls_init(A, A @ G) - G)))
    elapsed = time.perf_counter() - t0
    ok = beaten == 0 and recovery < 1e-8 and elapsed < 30
    report(3, ok, f"perturbations beating LS: {beaten}/2000, max recovery error {recovery:.1e}, {elapsed:.1f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------------------------

def test_criterion_04_score_recurrence(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        eta = rng.uniform(0.0, 0.99)
        Q = rng.random(1000) * rng.uniform(0.1, 10)
        tr = ImportanceTracker(np.array([1, 2]), eta=eta, n_intervals=1)
        for q in Q:
            tr.update(0, q)
        K = len(Q)
        closed = (1 - eta) * float(np.sum(eta ** np.arange(K - 1, -1, -1) * Q))
        worst = max(worst, abs(tr.scores[0] - closed))
    ok = worst <= 1e-12
    report(4, ok, f"10 streams x 1000 steps, max |tracker - closed form| {worst:.1e}")
    assert ok


# -- 5 ------------------------------------------------------------------------------------------

def test_criterion_05_sampling_law(report):
    n = 100_000
    flops = np.array([100, 150, 400, 450, 900])
    tr = ImportanceTracker(flops, n_intervals=3, warmup_iters=1, scores=np.array([0.2, 0.9, 0.1, 0.5, 0.3]))
    rng = np.random.default_rng(0)
    warm = np.bincount([sample_stitch(tr, rng) for _ in range(n)], minlength=5) / n
    l1_warm = float(np.abs(warm - 1 / 5).sum())
    tr.iter = 1
    law = np.zeros(5)
    for members in tr.members:
        q = tr.scores[members]
        z = (q - q.mean()) / q.std() if q.std() > 0 else np.zeros_like(q)
        law[members] += np.exp(z) / np.exp(z).sum() / len(tr.members)
    post = np.bincount([sample_stitch(tr, rng) for _ in range(n)], minlength=5) / n
    l1_post = float(np.abs(post - law).sum())
    ok = l1_warm < 0.01 and l1_post < 0.01
    report(5, ok, f"L1 to exact law {l1_post:.4f}, warm-up L1 to uniform {l1_warm:.4f} ({n} draws each)")
    assert ok


# -- 6 ------------------------------------------------------------------------------------------

def test_criterion_06_bias_isolation(report, toy_family, toy_data):
    palette, overlay = prepare(toy_family, toy_data, ranks=[4, 2], calib_batches=3, batch_size=32)
    s, other = palette.stitches[2], palette.stitches[3]
    biases = {k: t.data.copy() for k, (t, role) in overlay.tensors().items() if role == "bias"}
    shared = [k for k in overlay.lora if k[0] != "stitch"
              and f"lora.{'.'.join(map(str, k))}.down" in trainable_set(s, overlay, palette)
              and f"lora.{'.'.join(map(str, k))}.down" in trainable_set(other, overlay, palette)]
    before = {k: effective_weight(k, overlay, _frozen(palette, k)).data.copy() for k in shared}

    params = trainable_set(s, overlay, palette)
    logits = stitch_forward(s, palette.family, palette.layers, overlay.view(s.id), toy_data)
    T.backward(T.cross_entropy(logits, toy_data.labels))
    AdamW(lr=1e-2).step(params.values())

    state = overlay.state_dict()
    foreign_changed = sum(state[k].tobytes() != v.tobytes() for k, v in biases.items()
                          if not k.startswith(f"bias.s{s.id}."))
    own_changed = sum(state[k].tobytes() != v.tobytes() for k, v in biases.items()
                      if k.startswith(f"bias.s{s.id}."))
    moved = sum(not np.array_equal(effective_weight(k, overlay, _frozen(palette, k)).data, before[k])
                for k in shared)
    ok = foreign_changed == 0 and own_changed > 0 and moved > 0
    report(6, ok, f"other-stitch biases changed: {foreign_changed}, own: {own_changed}, "
                  f"shared weights moved: {moved}/{len(shared)}")
    assert ok


def _frozen(palette, key):
    a, j, p = key
    return palette.family[a].blocks[j - 1][f"attn.{p}.w"]


# -- 7, 9, 10: desk-scale experiment -------------------------------------------------------------

def _desk_run(seed, root):
    cfg = ExperimentConfig(seed=seed)
    t0 = time.perf_counter()
    run_dir = root / f"seed{seed}"
    pre = runner.pretrain(cfg, run_dir)
    family = runner.load_family(cfg, run_dir)
    state, _ = runner.train(cfg, run_dir, family)
    _, _, _, tgt_eval = runner.make_data(cfg)
    rows = evaluate_palette(state.palette, state.overlay, tgt_eval)
    dep = select_deployment(runner.load_tracker(run_dir))
    ats_cfg = ExperimentConfig(seed=seed, pipeline="adapt-then-stitch")
    ats_state, _ = runner.train(ats_cfg, root / f"seed{seed}-ats", family)
    ats_rows = evaluate_palette(ats_state.palette, ats_state.overlay, tgt_eval)
    return dict(cfg=cfg, run_dir=run_dir, pretrain=pre, state=state, rows=rows, dep=dep, ats_rows=ats_rows,
                seconds=time.perf_counter() - t0)


def _judge(run):
    palette, rows = run["state"].palette, run["rows"]
    acc = {r.stitch_id: r.accuracy for r in rows}
    flops = palette.flops()
    anchors = [s for s in palette.stitches if s.is_anchor]
    lo_acc, hi_acc = acc[anchors[0].id], acc[anchors[-1].id]
    lo_f, hi_f = flops[anchors[0].id], flops[anchors[-1].id]
    inside = all(lo_f < flops[s.id] < hi_f for s in palette.stitches if not s.is_anchor)

    front = pareto_frontier(rows)
    bounded = all(lo_acc - TOL_PTS <= acc[i] <= hi_acc + TOL_PTS for i in front)

    members = run["state"].tracker.members
    near = sum(acc[d.stitch_id] >= max(acc[i] for i in m) - TOL_PTS for d, m in zip(run["dep"], members))
    need = math.ceil(5 / 6 * len(members))

    ats_front = pareto_frontier(run["ats_rows"])
    ats_acc = {r.stitch_id: r.accuracy for r in run["ats_rows"]}
    one, ats = np.mean([acc[i] for i in front]), np.mean([ats_acc[i] for i in ats_front])
    return dict(a=inside, b=bounded, c=near >= need, d=one >= ats,
                detail=f"pareto {front} acc {[round(acc[i], 3) for i in front]} "
                       f"(anchors {lo_acc:.3f}/{hi_acc:.3f}); deployment near-best in {near}/{len(members)} "
                       f"occupied intervals (need {need}); mean pareto acc one-stage {one:.3f} "
                       f"vs adapt-then-stitch {ats:.3f}")


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    runs = [_desk_run(0, root)]
    verdicts = [_judge(runs[0])]
    if not all(verdicts[0][k] for k in "bcd"):
        # soft tolerances: a second consecutive seed decides
        runs.append(_desk_run(1, root))
        verdicts.append(_judge(runs[1]))
    return dict(root=root, runs=runs, verdicts=verdicts, seconds=time.perf_counter() - t0)


def test_pretrained_anchors_reach_source_accuracy(desk):
    accs = [v["source_acc"] for v in desk["runs"][0]["pretrain"].values()]
    assert min(accs) >= 0.90
    assert accs[1] >= accs[0] - 0.01


def test_criterion_07_desk_experiment(report, desk):
    vs = desk["verdicts"]
    hard_a = all(v["a"] for v in vs)
    soft = {k: any(v[k] for v in vs) for k in "bcd"}
    fast = desk["seconds"] < 15 * 60
    ok = hard_a and all(soft.values()) and fast
    seeds = ", ".join(f"seed {r['cfg'].seed}: {v['detail']}" for r, v in zip(desk["runs"], vs))
    flags = " ".join(f"({k})={'ok' if (hard_a if k == 'a' else soft[k]) else 'violated'}" for k in "abcd")
    report(7, ok, f"{flags}; {desk['seconds']:.0f}s total; {seeds}")
    assert ok


# -- 8 ------------------------------------------------------------------------------------------

def test_criterion_08_parameter_accounting(report):
    cfg = ExperimentConfig()
    family = randomize(build_family(cfg.anchor_configs(), seed=0), scale=0.05)
    palette, overlay = prepare(family, runner.make_data(cfg)[2][:512], cfg.kernel, cfg.stride, cfg.ranks,
                               cfg.num_classes, calib_batches=4)
    mismatches = 0
    for s in palette.stitches:
        counted = sum(t.size for t in trainable_set(s, overlay, palette).values())
        if counted != cost_of(s, palette.family, cfg.ranks, cfg.num_classes).params_trainable:
            mismatches += 1
    frozen = sum(p.size for a in family for p in a.parameters().values()) \
        + sum(layer.M.size for layer in palette.layers)
    trainable = overlay.num_trainable()
    ratio = trainable / (frozen + trainable)
    ok = mismatches == 0 and ratio < 0.1
    report(8, ok, f"count mismatches {mismatches}/{len(palette.stitches)}, "
                  f"trainable {trainable} of {frozen + trainable} total = {ratio:.3f}")
    assert ok


# -- 9 ------------------------------------------------------------------------------------------

def test_criterion_09_determinism(report, desk):
    run = desk["runs"][0]
    again = desk["root"] / "repeat"
    again.mkdir()
    (again / "anchors").symlink_to(run["run_dir"] / "anchors")
    runner.train(run["cfg"], again)
    a, b = (run["run_dir"] / "metrics.csv").read_bytes(), (again / "metrics.csv").read_bytes()
    ok = a == b
    report(9, ok, f"metrics.csv byte-identical across two train runs ({len(a)} bytes)")
    assert ok


# -- 10 -----------------------------------------------------------------------------------------

def test_criterion_10_gradient_angles(report, desk):
    run = desk["runs"][0]
    res = runner.angles(run["cfg"], run["run_dir"])
    ok = True
    for domain in ("source", "target"):
        mat = res[domain]["matrix"]
        ok &= np.array_equal(mat, mat.T, equal_nan=True)
        ok &= bool((np.diag(mat) == 0).all())
        vals = mat[np.isfinite(mat)]
        ok &= bool(((vals >= 0) & (vals <= 180)).all())
        ok &= int(res[domain]["counts"].sum()) <= len(mat) * (len(mat) - 1) // 2
    report(10, ok, f"block {res['block']}, stitches {res['stitch_ids']}; median angle source "
                   f"{res['source']['median']:.1f} deg vs target {res['target']['median']:.1f} deg")
    assert ok
