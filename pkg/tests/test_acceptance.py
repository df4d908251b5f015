"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Heavy runs happen at desk scale (5 tasks x 5 classes, 100 train / 20 test
per class, u=2, oracle decomposition, 4 seeds) and are shared between
criteria through a session cache.
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from nesycl import cli, harness, neural, symbolic
from nesycl.baselines import EwcAnchor, SiState, distillation, empirical_fisher, ewc_penalty, project_gem, project_single
from nesycl.decompose import detect_objects, match_detections, oracle_detect
from nesycl.harness import EpisodeConfig
from nesycl.neural import TrainConfig
from nesycl.scenegen import StreamConfig, build_task_stream

from oracles import brute_force_ged, random_graph
from test_baselines import kink_free_head, perturbed
from test_neural import fd_check, small_problem

DESK = StreamConfig(num_tasks=5, classes_per_task=5, train_per_class=100, test_per_class=20, noise_scale=2.0)
SEEDS = (0, 1, 2, 3)
DESK_FLAGS = ["--tasks", "5", "--classes", "5", "--train", "100", "--test", "20"]

_RUNS: dict = {}


@pytest.fixture(scope="session")
def extractor():
    return harness.get_extractor(DESK, TrainConfig())


def episode(method, extractor, stream=DESK, seeds=SEEDS, decomposition="oracle", train=TrainConfig()):
    cfg = EpisodeConfig(method=method, decomposition=decomposition, stream=stream, train=train, seeds=seeds)
    key = (cfg.hash(), seeds)
    if key not in _RUNS:
        _RUNS[key] = harness.run_episode(cfg, extractor=None if method == "symbolic" else extractor)
    return _RUNS[key]


def mean(values):
    return float(np.mean(values))


def rows_constant(R, start_offset=0):
    T = len(R)
    return all(R[i][j] == R[i][i + start_offset] for i in range(T - start_offset) for j in range(i + start_offset, T))


@pytest.mark.slow
def test_c01_zero_forgetting(extractor, criterion):
    long = replace(DESK, num_tasks=50, train_per_class=20, test_per_class=5)
    checks = {
        "symbolic desk": all(rows_constant(s.matrix.R) for s in episode("symbolic", extractor).seeds),
        "nesybicl desk": all(rows_constant(s.matrix.R, 1) for s in episode("nesybicl", extractor).seeds),
        "symbolic T=50": rows_constant(episode("symbolic", extractor, long, (0,)).seeds[0].matrix.R),
        "nesybicl T=50": rows_constant(episode("nesybicl", extractor, long, (0,)).seeds[0].matrix.R, 1),
    }
    shape_ok = len(episode("symbolic", extractor, long, (0,)).seeds[0].matrix.R) == 50
    ok = all(checks.values()) and shape_ok
    detail = ", ".join(f"{k}={'ok' if v else 'VIOLATED'}" for k, v in checks.items())
    assert criterion(1, ok, detail)


def test_c02_perfect_recovery_zero_noise(tmp_path, criterion):
    code = cli.main(["run", *DESK_FLAGS, "--method", "symbolic", "--noise", "0", "--decomp", "oracle", "--out-dir", str(tmp_path)])
    results = harness.load_results([tmp_path / "runs"])
    rows = harness.aggregate(results)
    ok = code == 0 and len(results) == 4 and all(r["A_all"] == 100.0 and r["A_last"] == 100.0 for r in results)
    ok = ok and rows[0]["A_all_mean"] == 100.0 and rows[0]["A_last_mean"] == 100.0
    assert criterion(2, ok, f"A_all={rows[0]['A_all_mean']} A_last={rows[0]['A_last_mean']} over {len(results)} seeds")


def test_c03_kb_order_invariance(criterion):
    prepared = harness.prepare(DESK, "oracle", None)
    tasks = prepared.tasks

    def build(order):
        kb = symbolic.KnowledgeBase()
        for t in order:
            task = tasks[t]
            kb = symbolic.kb_update(kb, {y: [g for g, lab in zip(task.train_graphs, task.train_y) if lab == y] for y in task.class_ids})
        return kb

    orders = [list(range(5)), [4, 3, 2, 1, 0], [2, 0, 4, 1, 3]]
    kbs = [build(o) for o in orders]
    same_bytes = len({kb.to_json().encode() for kb in kbs}) == 1
    preds = [[harness.symbolic_predictions(kb, t.test_graphs, t.class_ids) for t in tasks] for kb in kbs]
    same_preds = all(p == preds[0] for p in preds)
    assert criterion(3, same_bytes and same_preds, f"{len(orders)} task orders: KB bytes identical={same_bytes}, predictions identical={same_preds}")


def test_c04_ged_oracle(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        a, b = random_graph(rng, 4), random_graph(rng, 4)
        mismatches += symbolic.ged(a, b) != brute_force_ged(a, b)
    asym = tri = 0
    for _ in range(1000):
        a, b, c = (random_graph(rng, 5) for _ in range(3))
        ab, ba, bc, ac = symbolic.ged(a, b), symbolic.ged(b, a), symbolic.ged(b, c), symbolic.ged(a, c)
        asym += ab != ba
        tri += ac > ab + bc + 1e-12
    ok = mismatches == 0 and asym == 0 and tri == 0
    assert criterion(4, ok, f"brute-force mismatches={mismatches}/200, asymmetric={asym}/1000, triangle violations={tri}/1000")


def test_c05_gradient_checks(criterion):
    errors = {}
    for lam in (0.0, 1.5):
        for seed in range(3):
            p, X, y, A = small_problem(seed)
            _, grads = neural.loss(p, X, y, A, lam)
            errors[f"mlp lam={lam} seed={seed}"] = fd_check(p, lambda: neural.loss(p, X, y, A, lam)[0], grads)

    head, X = kink_free_head(0)
    rng = np.random.default_rng(0)
    rows = np.array([0, 1, 2, 3, 0, 1, 2])
    anchor = EwcAnchor(empirical_fisher(head.params, X, rows), {k: v + 0.2 * rng.normal(size=v.shape) for k, v in head.params.arrays().items()})
    _, grads = ewc_penalty(head.params, [anchor], 100.0)
    errors["ewc"] = fd_check(head.params, lambda: ewc_penalty(head.params, [anchor], 100.0)[0], grads)

    si = SiState(0.1, 1e-3)
    si.begin_task(head.params)
    for _ in range(3):
        g = {k: rng.normal(size=v.shape) for k, v in head.params.arrays().items()}
        for v in head.params.arrays().values():
            v -= 0.05 * rng.normal(size=v.shape)
        si.record_step(head.params, g)
    si.end_task(head.params)
    head.params = perturbed(head.params, rng)
    _, grads = si.penalty(head.params)
    errors["si"] = fd_check(head.params, lambda: si.penalty(head.params)[0], grads)

    old = perturbed(head.params, rng, 0.3)
    _, h_old = neural.hidden_forward(old, X)
    old_logits = h_old @ old.W.T + old.b

    def lwf_value():
        _, h = neural.hidden_forward(head.params, X)
        return distillation(h @ head.params.W.T + head.params.b, old_logits, 2, 2.0, 1.0)[0]

    z, h = neural.hidden_forward(head.params, X)
    _, dlogits = distillation(h @ head.params.W.T + head.params.b, old_logits, 2, 2.0, 1.0)
    errors["lwf"] = fd_check(head.params, lwf_value, neural.backward(head.params, X, z, h, dlogits))

    gem_gap = 0.0
    for _ in range(50):
        g = rng.normal(size=200)
        gk = -g + 0.5 * rng.normal(size=200)
        gem_gap = max(gem_gap, float(np.linalg.norm(project_single(g, gk) - project_gem(g, gk[None]))))
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and gem_gap < 1e-5
    assert criterion(5, ok, f"worst FD rel err {errors[worst]:.2e} ({worst}); GEM closed-form vs iterative L2 {gem_gap:.2e}")


@pytest.mark.slow
def test_c06_table_ordering(extractor, criterion):
    names = ["multitask", "nesybicl", "symbolic", "er", "finetune"]
    runs = {m: episode(m, extractor) for m in names}
    a_all = {m: runs[m].report.a_all_mean for m in names}
    a_last = {m: runs[m].report.a_last_mean for m in ("nesybicl", "symbolic")}
    old = []
    for s in runs["finetune"].seeds:
        R = s.matrix.R
        old.append(100.0 * mean([R[i][-1] for i in range(len(R) - 1)]))
    ft_old = mean(old)
    checks = {
        "multitask>nesybicl": a_all["multitask"] > a_all["nesybicl"],
        "nesybicl>=symbolic": a_all["nesybicl"] >= a_all["symbolic"],
        "symbolic>er": a_all["symbolic"] > a_all["er"],
        "er>finetune": a_all["er"] > a_all["finetune"],
        "A_last nesybicl>=symbolic+10": a_last["nesybicl"] >= a_last["symbolic"] + 10,
        "finetune old-task within 10 of 20%": abs(ft_old - 20.0) <= 10.0,
    }
    detail = (
        "A_all " + " / ".join(f"{m} {a_all[m]:.1f}" for m in names)
        + f"; A_last nesybicl {a_last['nesybicl']:.1f} vs symbolic {a_last['symbolic']:.1f}"
        + f"; finetune old-task {ft_old:.1f}; failed: {[k for k, v in checks.items() if not v] or 'none'}"
    )
    assert criterion(6, all(checks.values()), detail)


@pytest.mark.slow
def test_c07_noise_trend(extractor, criterion):
    grid = [0.0, 2.0, 4.0, 6.0, 8.0]
    sym = [episode("symbolic", extractor, replace(DESK, noise_scale=u), (0,), "classical").seeds[0].a_last for u in grid]
    rises = [b - a for a, b in zip(sym, sym[1:]) if b > a]
    trend_ok = len(rises) <= 1 and all(r <= 2.0 for r in rises)
    neural_u8 = episode("nesybicl", extractor, replace(DESK, noise_scale=grid[-1]), SEEDS, "classical").report.a_last_mean
    ok = trend_ok and neural_u8 >= sym[-1]
    curve = ", ".join(f"u={u:g}:{a:.1f}" for u, a in zip(grid, sym))
    assert criterion(7, ok, f"symbolic [{curve}]; neural at u=8 {neural_u8:.1f} vs symbolic {sym[-1]:.1f}")


@pytest.mark.slow
def test_c08_sample_efficiency(extractor, criterion):
    few = replace(DESK, train_per_class=10)
    with_head = episode("nesybicl", extractor, few, train=TrainConfig(lam=1.5)).report.a_last_mean
    without = episode("nesybicl", extractor, few, train=TrainConfig(lam=0.0)).report.a_last_mean
    sym_few = episode("symbolic", extractor, few, (0,)).seeds[0].a_last
    sym_full = episode("symbolic", extractor, DESK, (0,)).seeds[0].a_last
    ok = with_head >= without and abs(sym_few - sym_full) < 5.0
    detail = f"neural A_last at 10/class: lam=1.5 {with_head:.2f} vs lam=0 {without:.2f}; symbolic A_last 10/class {sym_few:.1f} vs 100/class {sym_full:.1f}"
    assert criterion(8, ok, detail)


@pytest.mark.slow
def test_c09_runtime_direction(extractor, criterion):
    timings = [s.timing for s in episode("nesybicl", extractor).seeds]
    sym = [t["symbolic_infer_per_sample_s"] for t in timings]
    neu = [t["neural_infer_per_sample_s"] for t in timings]
    ok = all(s is not None and n is not None and s > n for s, n in zip(sym, neu))
    assert criterion(9, ok, f"per-sample inference: symbolic {mean(sym) * 1e3:.3f} ms vs neural {mean(neu) * 1e3:.4f} ms ({mean(sym) / mean(neu):.0f}x)")


def test_c10_detector_quality(criterion):
    fresh = StreamConfig(num_tasks=5, classes_per_task=5, train_per_class=1, test_per_class=20, noise_scale=2.0, master_seed=777, pretrain_classes=0)
    tp = n_pred = n_true = 0
    for task in build_task_stream(fresh).tasks:
        for s in task.test:
            pred, truth = detect_objects(s.raster), oracle_detect(s.scene)
            tp += match_detections(pred, truth, 0.5)
            n_pred += len(pred)
            n_true += len(truth)
    precision, recall = tp / n_pred, tp / n_true
    ok = precision >= 0.95 and recall >= 0.95
    assert criterion(10, ok, f"precision {precision:.4f}, recall {recall:.4f} at IoU 0.5 over {n_true} objects")


def test_c11_determinism(tmp_path, criterion):
    small = ["--tasks", "2", "--classes", "3", "--train", "10", "--test", "5", "--seeds", "1", "--epochs", "5", "--extractor", "random"]
    identical = {}
    for method in ("nesybicl", "er", "symbolic"):
        files = []
        for rep in ("a", "b"):
            harness.clear_caches()
            out = tmp_path / method / rep
            assert cli.main(["run", *small, "--method", method, "--out-dir", str(out)]) == 0
            files.append(sorted(out.rglob("matrix.csv")))
        identical[method] = len(files[0]) == 1 and files[0][0].read_bytes() == files[1][0].read_bytes()
    ok = all(identical.values())
    assert criterion(11, ok, ", ".join(f"{m} matrix.csv byte-identical={v}" for m, v in identical.items()))
