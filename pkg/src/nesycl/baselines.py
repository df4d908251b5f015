"""Neural continual-learning baselines on a shared frozen-feature MLP.

Every method trains one network with a growing single head: task t
appends rows for its classes, training uses cross-entropy over all rows
seen so far, and evaluation masks logits to the queried task's rows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .neural import (
    HIDDEN,
    Adam,
    MlpParams,
    TrainConfig,
    _uniform,
    backward,
    cross_entropy,
    hidden_forward,
    log_softmax,
    softmax,
)

METHODS = ("finetune", "multitask", "er", "ewc", "si", "lwf", "gem")


@dataclass(frozen=True)
class BaselineConfig:
    buffer_per_class: int = 5
    lambda_ewc: float = 100.0
    c_si: float = 0.1
    xi_si: float = 1e-3
    lambda_lwf: float = 1.0
    temperature: float = 2.0
    gem_mem_per_task: int = 25
    gem_tol: float = 1e-6
    gem_max_iter: int = 500

    def __post_init__(self):
        if self.buffer_per_class < 0 or self.gem_mem_per_task < 0:
            raise ValueError("memory sizes must be >= 0")
        if min(self.lambda_ewc, self.c_si, self.lambda_lwf) < 0 or self.xi_si <= 0 or self.temperature <= 0:
            raise ValueError("invalid regularisation strength")


@dataclass(frozen=True, eq=False)
class TaskData:
    """Pre-extracted features of one task; labels are global class ids."""

    task_id: int
    class_ids: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class BaselineResult:
    method: str
    matrix: list[list[float | None]]
    train_seconds: float = 0.0
    inference_seconds: float = 0.0
    inference_samples: int = 0
    buffer_size: int = 0
    traces: list[list[float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Growing head


class GrowingHead:
    """MLP whose classifier gains rows as tasks arrive."""

    def __init__(self, dim: int, hidden: int, seed: int, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.seed = seed
        self.params = MlpParams(
            _uniform(rng, dim, (dim, hidden), dtype),
            _uniform(rng, dim, (hidden,), dtype),
            np.zeros((0, hidden), dtype),
            np.zeros((0,), dtype),
        )
        self.rows: dict[int, int] = {}
        self.task_rows: dict[int, np.ndarray] = {}

    def add_task(self, task_id: int, class_ids: Sequence[int]) -> None:
        if task_id in self.task_rows:
            return
        hidden = self.params.W1.shape[1]
        dtype = self.params.W1.dtype
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1, task_id]))
        start = self.params.num_classes
        self.params.W = np.vstack([self.params.W, _uniform(rng, hidden, (len(class_ids), hidden), dtype)])
        self.params.b = np.concatenate([self.params.b, _uniform(rng, hidden, (len(class_ids),), dtype)])
        for k, y in enumerate(class_ids):
            self.rows[int(y)] = start + k
        self.task_rows[task_id] = np.arange(start, start + len(class_ids))

    def row_labels(self, y: np.ndarray) -> np.ndarray:
        return np.array([self.rows[int(c)] for c in y], dtype=np.int64)

    def predict_task(self, X: np.ndarray, task_id: int, class_ids: Sequence[int]) -> np.ndarray:
        """Class ids predicted with logits masked to the task's rows."""
        _, h = hidden_forward(self.params, X)
        rows = self.task_rows[task_id]
        logits = h @ self.params.W[rows].T + self.params.b[rows]
        return np.asarray(class_ids)[logits.argmax(axis=1)]


def ce_loss(params: MlpParams, X, rows, mask=None):
    """Cross-entropy over all current head rows (or a per-sample mask); returns (value, grads, cache)."""
    z, h = hidden_forward(params, X)
    logits = h @ params.W.T + params.b
    value, dlogits = cross_entropy(logits, rows, mask)
    return value, backward(params, X, z, h, dlogits), (z, h, logits)


# ---------------------------------------------------------------------------
# Regularisers


@dataclass
class EwcAnchor:
    fisher: dict[str, np.ndarray]
    theta: dict[str, np.ndarray]


def empirical_fisher(params: MlpParams, X: np.ndarray, rows: np.ndarray, chunk: int = 512) -> dict[str, np.ndarray]:
    """Mean of squared per-sample log-likelihood gradients, in closed form per layer."""
    acc = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.arrays().items()}
    for i in range(0, len(X), chunk):
        x = X[i : i + chunk].astype(np.float64)
        z, h = hidden_forward(params, x)
        h = h.astype(np.float64)
        d = softmax(h @ params.W.T.astype(np.float64) + params.b)
        d[np.arange(len(x)), rows[i : i + chunk]] -= 1.0
        dh = (d @ params.W.astype(np.float64)) * (z > 0)
        acc["W"] += (d * d).T @ (h * h)
        acc["b"] += (d * d).sum(axis=0)
        acc["W1"] += (x * x).T @ (dh * dh)
        acc["b1"] += (dh * dh).sum(axis=0)
    return {k: (v / len(X)).astype(params.W1.dtype) for k, v in acc.items()}


def _overlap(arr: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Leading block of ``arr`` matching the shape of an anchor from an earlier, smaller head."""
    return arr[tuple(slice(0, s) for s in ref.shape)]


def ewc_penalty(params: MlpParams, anchors: Sequence[EwcAnchor], lam: float):
    """(lam/2) * sum_k sum_i F_k,i (theta_i - theta*_k,i)^2 and its gradient."""
    arrays = params.arrays()
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    value = 0.0
    for anchor in anchors:
        for name, F in anchor.fisher.items():
            diff = _overlap(arrays[name], F) - anchor.theta[name]
            value += 0.5 * lam * float(np.sum(F * diff * diff))
            _overlap(grads[name], F)[...] += lam * F * diff
    return value, grads


class EwcState:
    """Anchors plus their running sums, so the penalty gradient costs one pass per step."""

    def __init__(self, lam: float):
        self.lam = lam
        self.anchors: list[EwcAnchor] = []
        self.f_sum: dict[str, np.ndarray] = {}
        self.f_theta: dict[str, np.ndarray] = {}

    def consolidate(self, params: MlpParams, X: np.ndarray, rows: np.ndarray) -> None:
        fisher = empirical_fisher(params, X, rows)
        theta = {k: v.copy() for k, v in params.arrays().items()}
        self.anchors.append(EwcAnchor(fisher, theta))
        for name, F in fisher.items():
            prev_s = self.f_sum.get(name)
            s = np.zeros_like(F)
            ft = np.zeros_like(F)
            if prev_s is not None:
                _overlap(s, prev_s)[...] = prev_s
                _overlap(ft, prev_s)[...] = self.f_theta[name]
            s += F
            ft += F * theta[name]
            self.f_sum[name], self.f_theta[name] = s, ft

    def add_grad(self, params: MlpParams, grads: dict[str, np.ndarray]) -> None:
        """grads += lam * (F_sum * theta - sum_k F_k * theta*_k), the gradient of ``ewc_penalty``."""
        for name, s in self.f_sum.items():
            theta = _overlap(getattr(params, name), s)
            _overlap(grads[name], s)[...] += self.lam * (s * theta - self.f_theta[name])


class SiState:
    """Path-integral importance with omega clamped at zero before consolidation."""

    def __init__(self, c: float, xi: float):
        self.c, self.xi = c, xi
        self.omega: dict[str, np.ndarray] = {}
        self.big_omega: dict[str, np.ndarray] = {}
        self.anchor: dict[str, np.ndarray] = {}
        self.start: dict[str, np.ndarray] = {}
        self.prev: dict[str, np.ndarray] = {}

    def begin_task(self, params: MlpParams) -> None:
        arrays = params.arrays()
        self.omega = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.start = {k: v.copy() for k, v in arrays.items()}
        self.prev = {k: v.copy() for k, v in arrays.items()}

    def record_step(self, params: MlpParams, task_grads: dict[str, np.ndarray]) -> None:
        for name, p in params.arrays().items():
            prev = self.prev[name]
            self.omega[name] -= task_grads[name] * (p - prev)
            prev[...] = p

    def end_task(self, params: MlpParams) -> None:
        for name, p in params.arrays().items():
            delta = p - self.start[name]
            contrib = np.maximum(self.omega[name], 0) / (delta * delta + self.xi)
            old = self.big_omega.get(name)
            total = contrib.copy()
            if old is not None:
                _overlap(total, old)[...] += old
            self.big_omega[name] = total
            self.anchor[name] = p.copy()

    def penalty(self, params: MlpParams):
        """c * sum Omega (theta - theta*)^2 and its gradient."""
        arrays = params.arrays()
        grads = {k: np.zeros_like(v) for k, v in arrays.items()}
        value = 0.0
        for name, om in self.big_omega.items():
            diff = _overlap(arrays[name], om) - self.anchor[name]
            value += self.c * float(np.sum(om * diff * diff))
            _overlap(grads[name], om)[...] = 2.0 * self.c * om * diff
        return value, grads

    def add_grad(self, params: MlpParams, grads: dict[str, np.ndarray]) -> None:
        for name, om in self.big_omega.items():
            diff = _overlap(getattr(params, name), om) - self.anchor[name]
            _overlap(grads[name], om)[...] += (2.0 * self.c) * om * diff


def distillation(logits: np.ndarray, old_logits: np.ndarray, old_rows: int, temperature: float, lam: float):
    """lam * mean KL(softmax(old/T) || softmax(new/T)) over the first ``old_rows`` logits.

    Returns the value and the gradient w.r.t. the full logits matrix. The
    KL form equals the soft cross-entropy minus a constant, so the value is
    exactly 0 when the current model reproduces the snapshot.
    """
    n = len(logits)
    new = logits[:, :old_rows] / temperature
    old = old_logits[:, :old_rows] / temperature
    log_q = log_softmax(new)
    log_p = log_softmax(old)
    p = np.exp(log_p)
    value = lam * float(np.sum(p * (log_p - log_q))) / n
    grad = np.zeros_like(logits)
    grad[:, :old_rows] = lam * (np.exp(log_q) - p) / (temperature * n)
    return value, grad


# ---------------------------------------------------------------------------
# GEM projection


def project_single(g: np.ndarray, gk: np.ndarray) -> np.ndarray:
    """Closest vector to g with <g~, gk> >= 0 for one constraint."""
    dot = float(g @ gk)
    if dot >= 0:
        return g.copy()
    return g - (dot / float(gk @ gk)) * gk


def project_gem(g: np.ndarray, G: np.ndarray, tol: float = 1e-6, max_iter: int = 500) -> np.ndarray:
    """Project g onto {x : G x >= 0} (rows of G are reference gradients).

    Solves the dual min_v 0.5 v'GG'v + g'G'v, v >= 0 by accelerated
    projected gradient with step 1/L (L the top eigenvalue of GG'); the
    primal solution is g + G'v. Each iteration also solves the equality
    system on the current support and stops as soon as that candidate
    satisfies the KKT conditions to ``tol``, which makes the answer exact
    once the support is identified.
    """
    G = np.atleast_2d(G).astype(np.float64)
    g = g.astype(np.float64)
    if G.shape[0] == 0 or np.all(G @ g >= 0):
        return g.copy()
    GG = G @ G.T
    Gg = G @ g
    L = float(np.linalg.eigvalsh(GG)[-1])
    if L <= 0:
        return g.copy()

    def kkt(v):
        grad = GG @ v + Gg
        return bool((v >= 0).all() and (grad >= -tol).all() and np.abs(v * grad).max() <= tol * max(1.0, L))

    v = np.zeros(len(GG))
    y, t = v.copy(), 1.0
    best = v
    for _ in range(max_iter):
        v_new = np.maximum(y - (GG @ y + Gg) / L, 0.0)
        support = v_new > 0
        if support.any():
            cand = np.zeros_like(v_new)
            cand[support] = np.linalg.lstsq(GG[np.ix_(support, support)], -Gg[support], rcond=None)[0]
            if kkt(cand):
                best = cand
                break
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = v_new + ((t - 1.0) / t_new) * (v_new - v)
        done = np.max(np.abs(v_new - v)) < tol * 1e-3
        v, t, best = v_new, t_new, v_new
        if done:
            break
    return g + G.T @ best


def _flatten(grads: dict[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in names])


def _unflatten(vec: np.ndarray, like: dict[str, np.ndarray], names: Sequence[str]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for n in names:
        size = like[n].size
        out[n] = vec[i : i + size].reshape(like[n].shape).astype(like[n].dtype)
        i += size
    return out


# ---------------------------------------------------------------------------
# Episode driver


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _evaluate(model: GrowingHead, tasks: Sequence[TaskData], upto: int, result: BaselineResult) -> list[float]:
    accs = []
    for task in tasks[: upto + 1]:
        t0 = time.perf_counter()
        pred = model.predict_task(task.test_x, task.task_id, task.class_ids)
        result.inference_seconds += time.perf_counter() - t0
        result.inference_samples += len(task.test_x)
        accs.append(float(np.mean(pred == task.test_y)) if len(pred) else 0.0)
    return accs


def run_baseline(
    method: str,
    tasks: Sequence[TaskData],
    train: TrainConfig,
    config: BaselineConfig = BaselineConfig(),
    on_step: Callable[[str, GrowingHead], None] | None = None,
) -> BaselineResult:
    """Train ``method`` over the task sequence; R[i][j] is task-masked accuracy on task i after task j."""
    if method not in METHODS:
        raise ValueError(f"unknown baseline {method!r}")
    if not tasks:
        raise ValueError("empty task sequence")
    if method == "multitask":
        return _run_multitask(tasks, train)
    T = len(tasks)
    dim = tasks[0].train_x.shape[1]
    model = GrowingHead(dim, train.hidden, train.seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train.seed, 2]))
    memory_rng = np.random.default_rng(np.random.SeedSequence([train.seed, 3]))
    result = BaselineResult(method, [[None] * T for _ in range(T)])

    buffer_x: list[np.ndarray] = []
    buffer_y: list[np.ndarray] = []
    ewc = EwcState(config.lambda_ewc)
    si = SiState(config.c_si, config.xi_si)
    gem_mem: list[tuple[int, np.ndarray, np.ndarray]] = []

    for t, task in enumerate(tasks):
        model.add_task(task.task_id, task.class_ids)
        params = model.params
        X = np.asarray(task.train_x, dtype=params.W1.dtype)
        rows = model.row_labels(task.train_y)
        opt = Adam(train.learning_rate, train.beta1, train.beta2, train.eps)
        arrays = params.arrays()
        old_rows = int(model.task_rows[task.task_id][0])
        old_logits = None
        if method == "lwf" and old_rows > 0:
            _, h = hidden_forward(params, X)
            old_logits = h @ params.W[:old_rows].T + params.b[:old_rows]
        if method == "si":
            si.begin_task(params)
        if method == "er" and buffer_x:
            bx, by = np.concatenate(buffer_x), model.row_labels(np.concatenate(buffer_y))
        else:
            bx = by = None
        names = list(arrays)
        trace = []
        t0 = time.perf_counter()
        for _ in range(train.epochs):
            total = 0.0
            for idx in _batches(shuffle_rng, len(X), train.batch_size):
                xb, yb = X[idx], rows[idx]
                if bx is not None:
                    pick = memory_rng.choice(len(bx), size=min(train.batch_size, len(bx)), replace=False)
                    xb = np.concatenate([xb, bx[pick]])
                    yb = np.concatenate([yb, by[pick]])
                value, grads, (z, h, logits) = ce_loss(params, xb, yb)
                if old_logits is not None:
                    d_value, dlogits = distillation(logits, old_logits[idx], old_rows, config.temperature, config.lambda_lwf)
                    value += d_value
                    extra = backward(params, xb, z, h, dlogits)
                    for k in grads:
                        grads[k] += extra[k]
                if method == "ewc":
                    ewc.add_grad(params, grads)
                elif method == "si":
                    task_grads = {k: v.copy() for k, v in grads.items()}
                    si.add_grad(params, grads)
                elif method == "gem" and gem_mem:
                    refs = []
                    for mt, mx, my in gem_mem:
                        mask = np.zeros((len(mx), params.num_classes), dtype=bool)
                        mask[:, model.task_rows[mt]] = True
                        _, g_k, _ = ce_loss(params, mx, my, mask)
                        refs.append(_flatten(g_k, names))
                    flat = _flatten(grads, names)
                    proj = project_gem(flat, np.stack(refs), config.gem_tol, config.gem_max_iter)
                    grads = _unflatten(proj, grads, names)
                opt.step(arrays, grads)
                if method == "si":
                    si.record_step(params, task_grads)
                total += value * len(idx)
            trace.append(total / len(X))
        result.traces.append(trace)
        if method == "ewc":
            ewc.consolidate(params, X, rows)
        elif method == "si":
            si.end_task(params)
        elif method == "er" and config.buffer_per_class > 0:
            for y in task.class_ids:
                members = np.flatnonzero(task.train_y == y)
                keep = memory_rng.choice(members, size=min(config.buffer_per_class, len(members)), replace=False)
                buffer_x.append(X[np.sort(keep)])
                buffer_y.append(task.train_y[np.sort(keep)])
        elif method == "gem" and config.gem_mem_per_task > 0:
            keep = np.sort(memory_rng.choice(len(X), size=min(config.gem_mem_per_task, len(X)), replace=False))
            gem_mem.append((task.task_id, X[keep], rows[keep]))
        result.train_seconds += time.perf_counter() - t0
        if on_step is not None:
            on_step(method, model)
        for i, acc in enumerate(_evaluate(model, tasks, t, result)):
            result.matrix[i][t] = acc
    result.buffer_size = sum(len(b) for b in buffer_x)
    return result


def _run_multitask(tasks: Sequence[TaskData], train: TrainConfig) -> BaselineResult:
    """Joint training on the union of all tasks, each sample's softmax masked to its own task head."""
    T = len(tasks)
    dim = tasks[0].train_x.shape[1]
    model = GrowingHead(dim, train.hidden, train.seed)
    for task in tasks:
        model.add_task(task.task_id, task.class_ids)
    params = model.params
    X = np.concatenate([np.asarray(t.train_x, dtype=params.W1.dtype) for t in tasks])
    rows = np.concatenate([model.row_labels(t.train_y) for t in tasks])
    mask = np.zeros((len(X), params.num_classes), dtype=bool)
    i = 0
    for t in tasks:
        mask[i : i + len(t.train_x), model.task_rows[t.task_id]] = True
        i += len(t.train_x)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train.seed, 2]))
    opt = Adam(train.learning_rate, train.beta1, train.beta2, train.eps)
    arrays = params.arrays()
    result = BaselineResult("multitask", [[None] * T for _ in range(T)])
    trace = []
    t0 = time.perf_counter()
    for _ in range(train.epochs):
        total = 0.0
        for idx in _batches(shuffle_rng, len(X), train.batch_size):
            value, grads, _ = ce_loss(params, X[idx], rows[idx], mask[idx])
            opt.step(arrays, grads)
            total += value * len(idx)
        trace.append(total / len(X))
    result.train_seconds = time.perf_counter() - t0
    result.traces.append(trace)
    final = _evaluate(model, tasks, T - 1, result)
    for i, acc in enumerate(final):
        for j in range(i, T):
            result.matrix[i][j] = acc
    return result
