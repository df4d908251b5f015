"""Quick invariant checks runnable from an installed package (``nesycl selftest``)."""

from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from . import baselines, harness, neural, symbolic
from .concepts import NUM_COLORS, NUM_SHAPES, ColorKind, ShapeKind
from .decompose import ConceptGraph, ConceptNode, RelationEdge
from .scenegen import StreamConfig, build_task_stream, render


def random_graph(rng: np.random.Generator, max_nodes: int) -> ConceptGraph:
    n = int(rng.integers(0, max_nodes + 1))
    nodes = tuple(ConceptNode(ShapeKind(int(rng.integers(NUM_SHAPES))), ColorKind(int(rng.integers(NUM_COLORS)))) for _ in range(n))
    edges = tuple(RelationEdge(i, j, int(rng.integers(8))) for i in range(n) for j in range(i + 1, n))
    return ConceptGraph(nodes, edges)


def brute_force_ged(g1: ConceptGraph, g2: ConceptGraph, costs=symbolic.DEFAULT_COSTS) -> float:
    """Minimum edit cost over every injective partial mapping, enumerated directly."""
    n1, n2 = len(g1), len(g2)
    d1, d2 = g1.directions, g2.directions
    best = math.inf
    for m in range(min(n1, n2) + 1):
        for src in itertools.combinations(range(n1), m):
            for dst in itertools.permutations(range(n2), m):
                f = dict(zip(src, dst))
                cost = (n1 - m + n2 - m) * costs.node_indel
                for a, b in f.items():
                    x, y = g1.nodes[a], g2.nodes[b]
                    cost += costs.node_shape_sub * (x.shape != y.shape) + costs.node_color_sub * (x.color != y.color)
                for i, j in itertools.combinations(range(n1), 2):
                    if i in f and j in f:
                        cost += costs.edge_sub * (d1[i][j] != d2[f[i]][f[j]])
                    else:
                        cost += costs.edge_indel
                mapped = set(dst)
                for i, j in itertools.combinations(range(n2), 2):
                    if i not in mapped or j not in mapped:
                        cost += costs.edge_indel
                best = min(best, cost)
    return best


def check_ged(n_pairs: int = 50) -> None:
    rng = np.random.default_rng(0)
    for _ in range(n_pairs):
        a, b = random_graph(rng, 4), random_graph(rng, 4)
        assert symbolic.ged(a, b) == brute_force_ged(a, b), "ged differs from brute force"
        assert symbolic.ged(a, b) == symbolic.ged(b, a), "ged is not symmetric"


def check_gradients() -> None:
    rng = np.random.default_rng(1)
    p = neural.init_params(rng, 6, 3, hidden=4, dtype=np.float64)
    X = rng.normal(size=(5, 6))
    y = rng.integers(0, 3, 5)
    A = rng.integers(0, 3, (5, neural.ATTR_DIM)).astype(float)
    for lam in (0.0, 1.5):
        _, grads = neural.loss(p, X, y, A, lam)
        for name, arr in p.arrays().items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + 1e-4
                up, _ = neural.loss(p, X, y, A, lam)
                arr[idx] = old - 1e-4
                down, _ = neural.loss(p, X, y, A, lam)
                arr[idx] = old
                fd = (up - down) / 2e-4
                err = abs(fd - grads[name][idx]) / max(abs(fd) + abs(grads[name][idx]), 1e-8)
                assert err < 1e-4, f"gradient mismatch in {name}"


def check_gem_projection() -> None:
    rng = np.random.default_rng(2)
    g = rng.normal(size=20)
    gk = -g + 0.1 * rng.normal(size=20)
    closed = baselines.project_single(g, gk)
    iterative = baselines.project_gem(g, gk[None])
    assert np.linalg.norm(closed - iterative) < 1e-5, "GEM projection mismatch"


def check_zero_forgetting() -> None:
    cfg = harness.EpisodeConfig(
        method="symbolic",
        stream=StreamConfig(num_tasks=3, classes_per_task=3, train_per_class=4, test_per_class=4, noise_scale=2.0, pretrain_classes=0),
        seeds=(0,),
    )
    R = harness.run_episode(cfg).seeds[0].matrix.R
    for i in range(3):
        assert all(R[i][j] == R[i][i] for j in range(i, 3)), "symbolic rows changed after later tasks"


def check_determinism() -> None:
    cfg = StreamConfig(num_tasks=1, classes_per_task=2, train_per_class=2, test_per_class=1, pretrain_classes=0, noise_scale=3.0)
    a, b = build_task_stream(cfg), build_task_stream(cfg)
    for sa, sb in zip(a.tasks[0].train, b.tasks[0].train):
        assert sa.scene == sb.scene and np.array_equal(sa.raster, sb.raster), "stream is not deterministic"
        assert np.array_equal(render(sa.scene), sa.raster), "render is not deterministic"


CHECKS: dict[str, Callable[[], None]] = {
    "ged matches brute force": check_ged,
    "mlp gradients": check_gradients,
    "gem projection": check_gem_projection,
    "symbolic zero forgetting": check_zero_forgetting,
    "stream determinism": check_determinism,
}


def run(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            fn()
            echo(f"PASS {name}")
        except AssertionError as exc:
            ok = False
            echo(f"FAIL {name}: {exc}")
    return ok
