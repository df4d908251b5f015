"""Command-line entry point: ``nesycl {gen,run,sweep,plot,report,selftest}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import cv2
import numpy as np

from . import harness, selftest, svg
from .baselines import BaselineConfig
from .neural import TrainConfig
from .scenegen import RENDERER_VERSION, StreamConfig, build_task_stream

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

FORMAT_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# flat config key -> (section, field, type)
KEYS: dict[str, tuple[str, str, type]] = {
    "method": ("episode", "method", str),
    "decomposition": ("episode", "decomposition", str),
    "seeds": ("episode", "seeds", int),
    "tasks": ("stream", "num_tasks", int),
    "classes": ("stream", "classes_per_task", int),
    "train": ("stream", "train_per_class", int),
    "test": ("stream", "test_per_class", int),
    "noise": ("stream", "noise_scale", float),
    "seed": ("stream", "master_seed", int),
    "pretrain_classes": ("stream", "pretrain_classes", int),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "learning_rate", float),
    "lam": ("train", "lam", float),
    "hidden": ("train", "hidden", int),
    "extractor": ("train", "extractor_mode", str),
    "pretrain_epochs": ("train", "pretrain_epochs", int),
    "buffer_per_class": ("baseline", "buffer_per_class", int),
    "lambda_ewc": ("baseline", "lambda_ewc", float),
    "c_si": ("baseline", "c_si", float),
    "xi_si": ("baseline", "xi_si", float),
    "lambda_lwf": ("baseline", "lambda_lwf", float),
    "temperature": ("baseline", "temperature", float),
    "gem_mem_per_task": ("baseline", "gem_mem_per_task", int),
}
FLAG_ALIASES = {"decomposition": "--decomp"}


class ConfigError(Exception):
    pass


def flag_name(key: str) -> str:
    return FLAG_ALIASES.get(key, "--" + key.replace("_", "-"))


def load_config_file(path: str) -> dict:
    """Flat key/value mapping from a JSON or TOML file; unknown keys are rejected."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        if p.suffix == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    unknown = sorted(set(data) - set(KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    out = {}
    for key, value in data.items():
        kind = KEYS[key][2]
        try:
            if kind is int and (isinstance(value, bool) or float(value) != int(value)):
                raise ValueError
            out[key] = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: key {key!r} expects {kind.__name__}, got {value!r}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    """File values overlaid with explicitly given flags."""
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if "seed" not in values:
        env = os.environ.get("NESYCL_SEED")
        if env is not None:
            try:
                values["seed"] = int(env)
            except ValueError:
                raise ConfigError(f"NESYCL_SEED: expected an integer, got {env!r}") from None
    return values


def _build(values: dict, cls, section: str, base=None):
    base = base if base is not None else cls()
    kwargs = {KEYS[k][1]: v for k, v in values.items() if KEYS[k][0] == section}
    try:
        return replace(base, **kwargs)
    except (ValueError, harness.ConfigError) as exc:
        flags = ", ".join(flag_name(k) for k in values if KEYS[k][0] == section)
        raise ConfigError(f"{flags}: {exc}") from None


def stream_config(values: dict) -> StreamConfig:
    return _build(values, StreamConfig, "stream")


def episode_config(values: dict) -> harness.EpisodeConfig:
    stream = stream_config(values)
    train = _build(values, TrainConfig, "train")
    base = _build(values, BaselineConfig, "baseline")
    n_seeds = values.get("seeds", 4)
    if n_seeds < 1:
        raise ConfigError("--seeds: must be >= 1")
    try:
        return harness.EpisodeConfig(
            method=values.get("method", "nesybicl"),
            decomposition=values.get("decomposition", "oracle"),
            stream=stream,
            train=train,
            baseline=base,
            seeds=tuple(range(n_seeds)),
        )
    except harness.ConfigError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Subcommands


def _refuse_existing(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ConfigError(f"refusing to overwrite {existing[0]} (use --force)")


def cmd_gen(args) -> int:
    values = resolve(args)
    config = stream_config(values)
    out = Path(args.out_dir)
    _refuse_existing([out / "stream.json"], args.force)
    stream = build_task_stream(config)
    samples = []
    n_images = 0

    def write(sample, group: str, split: str, idx: int):
        nonlocal n_images
        rel = Path("images") / group / str(sample.label) / f"{idx}.png"
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        ok, buf = cv2.imencode(".png", cv2.cvtColor(sample.raster, cv2.COLOR_RGB2BGR))
        if not ok:
            raise OSError(f"failed to encode {rel}")
        _write_bytes(path, buf.tobytes())
        n_images += 1
        samples.append(
            {"task": sample.task_id, "class": sample.label, "split": split, "index": idx, "path": rel.as_posix(), "scene": sample.scene.to_dict()}
        )

    for task in stream.tasks:
        per_class: dict[int, int] = {}
        for split, items in (("train", task.train), ("test", task.test)):
            for s in items:
                idx = per_class.get(s.label, 0)
                per_class[s.label] = idx + 1
                write(s, str(task.task_id), split, idx)
    if args.include_pretrain:
        per_class = {}
        for s in stream.pretrain:
            idx = per_class.get(s.label, 0)
            per_class[s.label] = idx + 1
            write(s, "pretrain", "pretrain", idx)
    doc = {
        "format_version": FORMAT_VERSION,
        "renderer_version": RENDERER_VERSION,
        "config": asdict(config),
        "tasks": [{"task_id": t.task_id, "class_ids": list(t.class_ids)} for t in stream.tasks],
        "schemas": [stream.schemas[k].to_dict() for k in sorted(stream.schemas)],
        "samples": samples,
    }
    harness.atomic_write(out / "stream.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    n_classes = config.num_tasks * config.classes_per_task
    print(f"wrote {n_images} images ({config.num_tasks} tasks, {n_classes} classes) to {out}")
    return EXIT_OK


def _write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _write_reports(out: Path) -> list[dict]:
    rows = harness.aggregate(harness.load_results([out / "runs"]))
    harness.atomic_write(out / "report.csv", harness.report_csv(rows))
    harness.atomic_write(out / "report.md", harness.report_md(rows))
    return rows


def cmd_run(args) -> int:
    config = episode_config(resolve(args))
    out = Path(args.out_dir)
    _refuse_existing([harness.seed_dir(out, config, s) for s in config.seeds], args.force)
    result = harness.run_episode(config, jobs=args.jobs, out_dir=out)
    _write_reports(out)
    rep = result.report
    a_last = "-" if rep.a_last_mean is None else f"{rep.a_last_mean:.1f}"
    print(f"method={config.method} config={config.hash()} seeds={len(config.seeds)} A_all={rep.a_all_mean:.1f} A_last={a_last}")
    print(f"results in {out / 'runs' / config.hash()}")
    return EXIT_OK


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--grid: expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    values = resolve(args)
    base = episode_config(values)
    grid = _parse_grid(args.grid)
    if not grid:
        raise ConfigError("--grid: empty")
    methods = args.methods.split(",") if args.methods else [base.method]
    for m in methods:
        if m not in harness.METHODS:
            raise ConfigError(f"--methods: unknown method {m!r}")
    out = Path(args.out_dir)
    _refuse_existing([out / f"sweep_{args.kind}.csv"], args.force)
    rows = harness.sweep(args.kind, grid, base, methods, out_dir=out)
    harness.atomic_write(out / f"sweep_{args.kind}.csv", harness.sweep_csv(rows))
    _write_reports(out)
    failed = [r for r in rows if r.error]
    print(f"sweep {args.kind}: {len(rows) - len(failed)} points done, {len(failed)} failed; see {out / f'sweep_{args.kind}.csv'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _curves(results: list[dict]):
    """Mean over seeds of the all-tasks-so-far and the latest-task accuracy, per run group."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in results:
        groups.setdefault((r["method"], r["config_hash"]), []).append(r)
    all_series, last_series = [], []
    for (method, chash), rs in sorted(groups.items()):
        T = len(rs[0]["matrix"])
        xs = list(range(1, T + 1))
        so_far = [np.mean([np.mean([r["matrix"][i][j] for i in range(j + 1)]) for r in rs]) * 100 for j in range(T)]
        latest = [np.mean([r["matrix"][j][j] for r in rs]) * 100 for j in range(T)]
        label = f"{method} ({chash[:6]})"
        all_series.append((label, xs, [float(v) for v in so_far]))
        last_series.append((label, xs, [float(v) for v in latest]))
    return all_series, last_series


def cmd_plot(args) -> int:
    try:
        results = harness.load_results(args.results)
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeError(f"cannot read results: {exc}") from None
    sweeps = sorted(p for d in args.results for p in Path(d).glob("sweep_*.csv")) if args.results else []
    if not results and not sweeps:
        raise RuntimeError("no results found")
    for r in results:
        if not all(k in r for k in ("method", "config_hash", "matrix")):
            raise RuntimeError("ill-formed result.json (missing method/config_hash/matrix)")
    docs = {}
    if results:
        all_series, last_series = _curves(results)
        docs["curve_all_tasks.svg"] = svg.line_chart("Accuracy over all learned tasks", "Task", "Accuracy (%)", all_series)
        docs["curve_last_task.svg"] = svg.line_chart("Accuracy on the latest task", "Task", "Accuracy (%)", last_series)
    for path in sweeps:
        rows = [r for r in csv.DictReader(path.open()) if not r["error"]]
        by_method: dict[str, list[tuple[float, float]]] = {}
        for r in rows:
            if r["A_last_mean"] not in ("", "-"):
                by_method.setdefault(r["method"], []).append((float(r["value"]), float(r["A_last_mean"])))
        series = [(m, [x for x, _ in sorted(v)], [y for _, y in sorted(v)]) for m, v in sorted(by_method.items())]
        kind = path.stem[len("sweep_") :]
        docs[f"{path.stem}.svg"] = svg.line_chart(f"Sweep: {kind}", kind, "A_last (%)", series)
    out = Path(args.out_dir)
    _refuse_existing([out / name for name in docs], args.force)
    for name, text in docs.items():
        harness.atomic_write(out / name, text)
    print(f"wrote {len(docs)} SVG file(s) to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    results = harness.load_results(args.results)
    if not results:
        raise RuntimeError("no results found")
    rows = harness.aggregate(results)
    out = Path(args.out_dir or args.results[0])
    _refuse_existing([out / "report.csv", out / "report.md"], args.force)
    harness.atomic_write(out / "report.csv", harness.report_csv(rows))
    harness.atomic_write(out / "report.md", harness.report_md(rows))
    print(harness.report_md(rows), end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if selftest.run() else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Parser


def _add_config_flags(p: argparse.ArgumentParser, sections: set[str]) -> None:
    p.add_argument("--config", help="JSON or TOML file of flat keys; flags override it")
    for key, (section, _, kind) in KEYS.items():
        if section not in sections:
            continue
        kwargs = {"type": kind, "default": None, "dest": key}
        if key == "method":
            kwargs["choices"] = harness.METHODS
        elif key == "decomposition":
            kwargs["choices"] = harness.DECOMPOSITIONS
        elif key == "extractor":
            kwargs["choices"] = ("pretrained", "random")
        elif key == "seed":
            kwargs["help"] = "master seed of the stream (default: $NESYCL_SEED or 0)"
        elif key == "seeds":
            kwargs["help"] = "number of training seeds (default 4)"
        p.add_argument(flag_name(key), **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nesycl", description="Neuro-symbolic continual-learning lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a task stream on disk")
    _add_config_flags(p, {"stream"})
    p.add_argument("--out-dir", required=True)
    p.add_argument("--include-pretrain", action="store_true", help="also write the pretraining split")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    all_sections = {"episode", "stream", "train", "baseline"}
    p = sub.add_parser("run", help="run one method over all seeds")
    _add_config_flags(p, all_sections)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    _add_config_flags(p, all_sections)
    p.add_argument("--kind", required=True, choices=harness.SWEEP_KINDS)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--methods", help="comma-separated methods (default: --method)")
    p.add_argument("--out-dir", default="results")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render SVG curves from results")
    p.add_argument("results", nargs="+")
    p.add_argument("--out-dir", default="plots")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("report", help="aggregate results into report.csv and report.md")
    p.add_argument("results", nargs="+")
    p.add_argument("--out-dir")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"nesycl {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"nesycl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
