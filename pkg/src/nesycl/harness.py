"""Continual episodes end to end: data preparation, training loops, metrics and result files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import baselines, neural, symbolic
from .decompose import ConceptGraph, build_graph, decompose, oracle_detect
from .scenegen import RENDERER_VERSION, StreamConfig, TaskStream, build_task_stream

log = logging.getLogger(__name__)

METHODS = ("nesybicl", "symbolic") + baselines.METHODS
DECOMPOSITIONS = ("oracle", "classical")
SWEEP_KINDS = ("uncertainty", "samples_per_class", "lambda", "long_episode")
MATRIX_HEADER = "task,after_task,accuracy"


class IncompleteMatrix(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    method: str = "nesybicl"
    decomposition: str = "oracle"
    stream: StreamConfig = StreamConfig()
    train: neural.TrainConfig = neural.TrainConfig()
    baseline: baselines.BaselineConfig = baselines.BaselineConfig()
    seeds: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.decomposition not in DECOMPOSITIONS:
            raise ConfigError(f"unknown decomposition {self.decomposition!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.train.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "decomposition": self.decomposition,
            "stream": asdict(self.stream),
            "train": asdict(self.train),
            "baseline": asdict(self.baseline),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> EpisodeConfig:
        return cls(
            method=data["method"],
            decomposition=data["decomposition"],
            stream=StreamConfig(**data["stream"]),
            train=neural.TrainConfig(**data["train"]),
            baseline=baselines.BaselineConfig(**data["baseline"]),
            seeds=tuple(data["seeds"]),
        )

    def hash(self) -> str:
        """Identity of the run, independent of which seeds are executed."""
        payload = self.to_dict()
        del payload["seeds"]
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Accuracy matrix and metrics


@dataclass
class AccuracyMatrix:
    """R[i][j]: accuracy on task i after learning task j, for i <= j."""

    R: list[list[float | None]]

    @classmethod
    def empty(cls, T: int) -> AccuracyMatrix:
        return cls([[None] * T for _ in range(T)])

    @property
    def T(self) -> int:
        return len(self.R)

    def is_complete(self) -> bool:
        return all(self.R[i][j] is not None for i in range(self.T) for j in range(i, self.T))

    def to_csv(self) -> str:
        lines = [MATRIX_HEADER]
        for i in range(self.T):
            for j in range(i, self.T):
                v = self.R[i][j]
                lines.append(f"{i},{j},{'' if v is None else repr(float(v))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> AccuracyMatrix:
        rows = list(csv.DictReader(io.StringIO(text)))
        T = 1 + max((int(r["after_task"]) for r in rows), default=-1)
        m = cls.empty(T)
        for r in rows:
            m.R[int(r["task"])][int(r["after_task"])] = float(r["accuracy"]) if r["accuracy"] else None
        return m


def metrics(R: Sequence[Sequence[float | None]] | AccuracyMatrix) -> tuple[float, float]:
    """(A_all, A_last) in percent: means of the last column and of the diagonal."""
    if isinstance(R, AccuracyMatrix):
        R = R.R
    T = len(R)
    if T == 0:
        raise IncompleteMatrix("empty matrix")
    needed = [R[i][j] for i in range(T) for j in range(i, T)]
    if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in needed):
        raise IncompleteMatrix("matrix has missing entries on or above the diagonal")
    a_all = 100.0 * math.fsum(R[i][T - 1] for i in range(T)) / T
    a_last = 100.0 * math.fsum(R[i][i] for i in range(T)) / T
    return a_all, a_last


@dataclass
class SeedResult:
    seed: int
    matrix: AccuracyMatrix
    a_all: float
    a_last: float | None
    timing: dict[str, float] = field(default_factory=dict)

    def to_dict(self, config: EpisodeConfig) -> dict:
        return {
            "method": config.method,
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "seed": self.seed,
            "matrix": self.matrix.R,
            "A_all": self.a_all,
            "A_last": self.a_last,
            "timing": self.timing,
        }


@dataclass
class MetricsReport:
    method: str
    config_hash: str
    a_all: list[float]
    a_last: list[float | None]

    @staticmethod
    def _stats(values):
        if not values or any(v is None for v in values):
            return None, None
        return statistics.fmean(values), statistics.pstdev(values) if len(values) > 1 else 0.0

    @property
    def a_all_mean(self):
        return self._stats(self.a_all)[0]

    @property
    def a_all_std(self):
        return self._stats(self.a_all)[1]

    @property
    def a_last_mean(self):
        return self._stats(self.a_last)[0]

    @property
    def a_last_std(self):
        return self._stats(self.a_last)[1]


@dataclass
class EpisodeResult:
    config: EpisodeConfig
    seeds: list[SeedResult]

    @property
    def report(self) -> MetricsReport:
        return MetricsReport(
            self.config.method,
            self.config.hash(),
            [s.a_all for s in self.seeds],
            [s.a_last for s in self.seeds],
        )


# ---------------------------------------------------------------------------
# Shared data: streams, graphs, features


@dataclass(eq=False)
class PreparedTask:
    task_id: int
    class_ids: tuple[int, ...]
    train_graphs: list[ConceptGraph]
    test_graphs: list[ConceptGraph]
    train_y: np.ndarray
    test_y: np.ndarray
    train_x: np.ndarray | None = None
    test_x: np.ndarray | None = None

    def as_task_data(self) -> baselines.TaskData:
        return baselines.TaskData(self.task_id, self.class_ids, self.train_x, self.train_y, self.test_x, self.test_y)


@dataclass(eq=False)
class PreparedStream:
    stream: TaskStream
    tasks: list[PreparedTask]
    extractor: neural.FeatureExtractor | None
    decompose_seconds: float = 0.0
    decompose_samples: int = 0


_STREAMS: OrderedDict = OrderedDict()
_PREPARED: OrderedDict = OrderedDict()
_EXTRACTORS: dict = {}
_CACHE_LIMIT = 3


def _lru_get(cache: OrderedDict, key, build):
    if key in cache:
        cache.move_to_end(key)
        return cache[key]
    value = build()
    cache[key] = value
    while len(cache) > _CACHE_LIMIT:
        cache.popitem(last=False)
    return value


def get_stream(config: StreamConfig) -> TaskStream:
    return _lru_get(_STREAMS, config, lambda: build_task_stream(config))


def _pretrain_key(config: StreamConfig, epochs: int) -> str:
    payload = {
        "renderer": RENDERER_VERSION,
        "master_seed": config.master_seed,
        "pretrain_classes": config.pretrain_classes,
        "train_per_class": config.train_per_class,
        "noise_scale": config.noise_scale,
        "continual_classes": config.num_tasks * config.classes_per_task,
        "epochs": epochs,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def get_extractor(stream_config: StreamConfig, train: neural.TrainConfig) -> neural.FeatureExtractor:
    """Frozen extractor for a stream; pretrained ones are cached in memory and on disk."""
    if train.extractor_mode == "random":
        key = ("random", stream_config.master_seed)
        if key not in _EXTRACTORS:
            _EXTRACTORS[key] = neural.FeatureExtractor.random(stream_config.master_seed)
        return _EXTRACTORS[key]
    key = ("pretrained", _pretrain_key(stream_config, train.pretrain_epochs))
    if key not in _EXTRACTORS:

        def split():
            stream = get_stream(stream_config)
            if not stream.pretrain:
                raise ConfigError("pretrained extractor needs pretrain_classes > 0")
            return np.stack([s.raster for s in stream.pretrain]), np.array([s.label for s in stream.pretrain])

        _EXTRACTORS[key] = neural.cached_pretrained_extractor(
            key[1], split, train.pretrain_epochs, stream_config.master_seed
        )
    return _EXTRACTORS[key]


def graph_of(sample, decomposition: str) -> ConceptGraph:
    if decomposition == "oracle":
        return build_graph(oracle_detect(sample.scene))
    return decompose(sample.raster)


def prepare(
    stream_config: StreamConfig,
    decomposition: str,
    extractor: neural.FeatureExtractor | None,
) -> PreparedStream:
    """Graphs and features for every sample, computed once and shared by all methods and seeds."""
    fp = extractor.fingerprint() if extractor is not None else None

    def build():
        stream = get_stream(stream_config)
        tasks = []
        t0 = time.perf_counter()
        count = 0
        for task in stream.tasks:
            tasks.append(
                PreparedTask(
                    task.task_id,
                    task.class_ids,
                    [graph_of(s, decomposition) for s in task.train],
                    [graph_of(s, decomposition) for s in task.test],
                    np.array([s.label for s in task.train], dtype=np.int64),
                    np.array([s.label for s in task.test], dtype=np.int64),
                )
            )
            count += len(task.train) + len(task.test)
        elapsed = time.perf_counter() - t0
        if extractor is not None:
            for pt, task in zip(tasks, stream.tasks):
                pt.train_x = extractor(np.stack([s.raster for s in task.train]))
                pt.test_x = extractor(np.stack([s.raster for s in task.test])) if task.test else np.zeros((0, extractor.dim), np.float32)
        return PreparedStream(stream, tasks, extractor, elapsed, count)

    return _lru_get(_PREPARED, (stream_config, decomposition, fp), build)


def clear_caches() -> None:
    _STREAMS.clear()
    _PREPARED.clear()
    _EXTRACTORS.clear()


# ---------------------------------------------------------------------------
# Episodes


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _accuracy(pred: Sequence[int], truth: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == truth)) if len(truth) else 0.0


# Detector output with more nodes than the exact GED accepts counts as a failed
# parse: it never matches at test time and is not a prototype candidate.
FAILED_PARSE = -1


def parsable(graph: ConceptGraph) -> bool:
    return len(graph) <= symbolic.MAX_NODES


def prototype_candidates(graphs: Sequence[ConceptGraph]) -> list[ConceptGraph]:
    kept = [g for g in graphs if parsable(g)]
    return kept if kept or not graphs else [ConceptGraph((), ())]


def symbolic_predictions(kb: symbolic.KnowledgeBase, graphs: Iterable[ConceptGraph], classes, costs=symbolic.DEFAULT_COSTS):
    return [
        symbolic.predict(symbolic.classify(kb, g, classes, costs)) if parsable(g) else FAILED_PARSE
        for g in graphs
    ]


def _run_dual(prepared: PreparedStream, config: EpisodeConfig, seed: int, stub=None) -> SeedResult:
    """nesybicl and symbolic: knowledge-base growth, optional neural training, switching inference."""
    tasks = prepared.tasks
    T = len(tasks)
    matrix = AccuracyMatrix.empty(T)
    timing = {
        "symbolic_train_s": 0.0,
        "neural_train_s": 0.0,
        "symbolic_infer_s": 0.0,
        "neural_infer_s": 0.0,
        "symbolic_infer_samples": 0,
        "neural_infer_samples": 0,
    }
    use_neural = config.method == "nesybicl"
    kb = symbolic.KnowledgeBase()
    params = None
    for t, task in enumerate(tasks):
        t0 = time.perf_counter()
        per_class = {
            y: prototype_candidates([g for g, lab in zip(task.train_graphs, task.train_y) if lab == y])
            for y in task.class_ids
        }
        kb = symbolic.kb_update(kb, per_class)
        timing["symbolic_train_s"] += time.perf_counter() - t0
        if use_neural and stub is None:
            t0 = time.perf_counter()
            local = {y: k for k, y in enumerate(task.class_ids)}
            labels = np.array([local[int(y)] for y in task.train_y], dtype=np.int64)
            targets = neural.attribute_targets(task.train_graphs)
            init_rng = np.random.default_rng(np.random.SeedSequence([seed, 4, task.task_id]))
            fresh = neural.init_params(init_rng, task.train_x.shape[1], len(task.class_ids), config.train.hidden)
            cfg = replace(config.train, seed=_derived_seed(seed, 5, task.task_id))
            params = neural.train_task(fresh, task.train_x, labels, targets, cfg).params
            timing["neural_train_s"] += time.perf_counter() - t0
        for i in range(t + 1):
            ti = tasks[i]
            if stub is not None:
                pred = stub(ti, t)
            elif use_neural and i == t:
                t0 = time.perf_counter()
                local_pred = neural.predict(params, ti.test_x)
                pred = np.asarray(ti.class_ids)[local_pred]
                timing["neural_infer_s"] += time.perf_counter() - t0
                timing["neural_infer_samples"] += len(ti.test_y)
            else:
                t0 = time.perf_counter()
                pred = symbolic_predictions(kb, ti.test_graphs, ti.class_ids)
                timing["symbolic_infer_s"] += time.perf_counter() - t0
                timing["symbolic_infer_samples"] += len(ti.test_y)
            matrix.R[i][t] = _accuracy(pred, ti.test_y)
    _per_sample(timing)
    a_all, a_last = metrics(matrix)
    return SeedResult(seed, matrix, a_all, a_last, timing)


def _per_sample(timing: dict) -> None:
    for kind in ("symbolic", "neural"):
        n = timing.get(f"{kind}_infer_samples", 0)
        timing[f"{kind}_infer_per_sample_s"] = timing[f"{kind}_infer_s"] / n if n else None


def run_seed(config: EpisodeConfig, seed: int, extractor=None, stub=None) -> SeedResult:
    needs_features = config.method != "symbolic" and stub is None
    if needs_features and extractor is None:
        extractor = get_extractor(config.stream, config.train)
    prepared = prepare(config.stream, config.decomposition, extractor if needs_features else None)
    if config.method in ("nesybicl", "symbolic"):
        result = _run_dual(prepared, config, seed, stub)
    else:
        data = [t.as_task_data() for t in prepared.tasks]
        res = baselines.run_baseline(config.method, data, replace(config.train, seed=seed), config.baseline)
        matrix = AccuracyMatrix(res.matrix)
        a_all, a_last = metrics(matrix)
        timing = {
            "neural_train_s": res.train_seconds,
            "neural_infer_s": res.inference_seconds,
            "neural_infer_samples": res.inference_samples,
            "symbolic_infer_s": 0.0,
        }
        _per_sample(timing)
        result = SeedResult(seed, matrix, a_all, None if config.method == "multitask" else a_last, timing)
    result.timing["decompose_s"] = prepared.decompose_seconds
    result.timing["decompose_samples"] = prepared.decompose_samples
    return result


def _run_seed_job(args):
    config_dict, seed = args
    return run_seed(EpisodeConfig.from_dict(config_dict), seed)


def run_episode(
    config: EpisodeConfig,
    *,
    extractor: neural.FeatureExtractor | None = None,
    stub: Callable | None = None,
    jobs: int = 1,
    out_dir: str | os.PathLike | None = None,
) -> EpisodeResult:
    """Run every seed of ``config``; with ``out_dir`` each finished seed is written immediately."""
    results: list[SeedResult] = []
    if jobs > 1 and stub is None and extractor is None and len(config.seeds) > 1:
        if config.method != "symbolic":
            get_extractor(config.stream, config.train)  # pretrain once before forking workers
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_run_seed_job, [(config.to_dict(), s) for s in config.seeds]):
                results.append(res)
                if out_dir is not None:
                    write_seed(out_dir, config, res)
    else:
        for seed in config.seeds:
            res = run_seed(config, seed, extractor, stub)
            results.append(res)
            if out_dir is not None:
                write_seed(out_dir, config, res)
    return EpisodeResult(config, results)


# ---------------------------------------------------------------------------
# Files


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def seed_dir(out_dir, config: EpisodeConfig, seed: int) -> Path:
    return Path(out_dir) / "runs" / config.hash() / f"seed{seed}"


def write_seed(out_dir, config: EpisodeConfig, result: SeedResult) -> Path:
    d = seed_dir(out_dir, config, result.seed)
    atomic_write(d / "matrix.csv", result.matrix.to_csv())
    atomic_write(d / "result.json", json.dumps(result.to_dict(config), indent=2, sort_keys=True) + "\n")
    return d


def load_results(paths: Iterable[str | os.PathLike]) -> list[dict]:
    """Every result.json found under the given directories."""
    found = []
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("result.json"))
        for f in files:
            found.append(json.loads(f.read_text()))
    return found


def aggregate(results: Sequence[dict]) -> list[dict]:
    """One row per (method, config hash) with mean and population std over seeds, sorted by method."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in results:
        groups.setdefault((r["method"], r["config_hash"]), []).append(r)
    rows = []
    for (method, chash), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r["seed"])
        rep = MetricsReport(method, chash, [r["A_all"] for r in rs], [r["A_last"] for r in rs])
        rows.append(
            {
                "method": method,
                "decomposition": rs[0]["config"]["decomposition"],
                "config_hash": chash,
                "seeds": len(rs),
                "A_all_mean": rep.a_all_mean,
                "A_all_std": rep.a_all_std,
                "A_last_mean": rep.a_last_mean,
                "A_last_std": rep.a_last_std,
            }
        )
    return rows


REPORT_FIELDS = ["method", "decomposition", "config_hash", "seeds", "A_all_mean", "A_all_std", "A_last_mean", "A_last_std"]


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("-" if r[k] is None else r[k]) for k in REPORT_FIELDS})
    return buf.getvalue()


def report_md(rows: Sequence[dict]) -> str:
    lines = ["| Method | Decomposition | Seeds | A_all (%) | A_last (%) |", "|---|---|---|---|---|"]
    for r in rows:
        a_all = f"{_fmt(r['A_all_mean'])} ± {_fmt(r['A_all_std'])}" if r["A_all_mean"] is not None else "-"
        a_last = f"{_fmt(r['A_last_mean'])} ± {_fmt(r['A_last_std'])}" if r["A_last_mean"] is not None else "-"
        lines.append(f"| {r['method']} | {r['decomposition']} | {r['seeds']} | {a_all} | {a_last} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Sweeps


def sweep_config(kind: str, value, base: EpisodeConfig) -> EpisodeConfig:
    if kind == "uncertainty":
        return replace(base, stream=replace(base.stream, noise_scale=float(value)))
    if kind == "samples_per_class":
        return replace(base, stream=replace(base.stream, train_per_class=int(value)))
    if kind == "lambda":
        return replace(base, train=replace(base.train, lam=float(value)))
    if kind == "long_episode":
        return replace(base, stream=replace(base.stream, num_tasks=int(value)))
    raise ConfigError(f"unknown sweep kind {kind!r}; choose from {', '.join(SWEEP_KINDS)}")


SWEEP_FIELDS = ["kind", "value", "method", "config_hash", "seeds", "A_all_mean", "A_all_std", "A_last_mean", "A_last_std", "error"]


@dataclass
class SweepRow:
    kind: str
    value: float
    result: EpisodeResult | None
    error: str | None = None


def sweep(
    kind: str,
    grid: Sequence,
    base: EpisodeConfig,
    methods: Sequence[str] | None = None,
    out_dir=None,
    extractor: neural.FeatureExtractor | None = None,
) -> list[SweepRow]:
    """One full run per grid point and method; failures are recorded and the sweep moves on.

    The frozen extractor is built once from the base stream and shared by
    every grid point.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    methods = list(methods or [base.method])
    if extractor is None and any(m != "symbolic" for m in methods):
        extractor = get_extractor(base.stream, base.train)
    rows = []
    for value in grid:
        for method in methods:
            try:
                cfg = sweep_config(kind, value, replace(base, method=method))
                res = run_episode(cfg, extractor=extractor, out_dir=out_dir)
                rows.append(SweepRow(kind, value, res))
            except Exception as exc:  # noqa: BLE001 - recorded per point
                log.exception("sweep point %s=%s (%s) failed", kind, value, method)
                rows.append(SweepRow(kind, value, None, f"{method}: {exc}"))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        if row.result is None:
            w.writerow({"kind": row.kind, "value": row.value, "error": row.error})
            continue
        rep = row.result.report
        w.writerow(
            {
                "kind": row.kind,
                "value": row.value,
                "method": rep.method,
                "config_hash": rep.config_hash,
                "seeds": len(rep.a_all),
                "A_all_mean": rep.a_all_mean,
                "A_all_std": rep.a_all_std,
                "A_last_mean": "-" if rep.a_last_mean is None else rep.a_last_mean,
                "A_last_std": "-" if rep.a_last_std is None else rep.a_last_std,
                "error": "",
            }
        )
    return buf.getvalue()
