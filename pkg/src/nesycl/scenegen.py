"""Procedural compositional scenes: class schemas, noisy instances, rasters and task streams.

A class is a centre object plus 1-4 objects on a ring around it, each
ring object snapped to one of eight 45-degree placements. Samples of a
class share that layout up to Gaussian translational jitter and
class-irrelevant nuisance (scale, rotation, fill, stroke width).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import cv2
import numpy as np

from .concepts import BACKGROUND, NUM_COLORS, NUM_SHAPES, PALETTE, ColorKind, ShapeKind
from .decompose import ConceptGraph, Detection, build_graph
from .symbolic import ged

RENDERER_VERSION = 1
CANVAS = 64
RING_RADIUS = 20.0
BASE_RADIUS = 7.0
CIRCLE_FACTOR = 0.85
SCALE_RANGE = (0.7, 1.3)
STROKE_WIDTHS = (1, 2, 3)
MAX_SCHEMA_RETRIES = 10_000
MAX_JITTER_RETRIES = 1_000
_SHIFT = 4  # cv2 sub-pixel bits


class SchemaSpaceExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassSchema:
    class_id: int
    center: tuple[ShapeKind, ColorKind]
    ring: tuple[tuple[ShapeKind, ColorKind, float], ...]
    ring_radius: float = RING_RADIUS

    def nominal_positions(self) -> list[tuple[float, float]]:
        c = CANVAS / 2
        pos = [(c, c)]
        for _, _, angle in self.ring:
            a = math.radians(angle)
            pos.append((c + self.ring_radius * math.cos(a), c - self.ring_radius * math.sin(a)))
        return pos

    def canonical_graph(self) -> ConceptGraph:
        kinds = [self.center] + [(s, c) for s, c, _ in self.ring]
        dets = [
            Detection((x - 1, y - 1, x + 1, y + 1), s, c, (x, y))
            for (s, c), (x, y) in zip(kinds, self.nominal_positions())
        ]
        return build_graph(dets)

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "center": [int(self.center[0]), int(self.center[1])],
            "ring": [[int(s), int(c), float(a)] for s, c, a in self.ring],
            "ring_radius": self.ring_radius,
        }


@dataclass(frozen=True)
class ObjectInstance:
    shape: ShapeKind
    color: ColorKind
    cx: float
    cy: float
    scale: float
    rotation: float
    filled: bool
    stroke_width: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"], d["color"] = int(self.shape), int(self.color)
        return d


@dataclass(frozen=True)
class Scene:
    class_id: int
    objects: tuple[ObjectInstance, ...]
    width: int = CANVAS
    height: int = CANVAS

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "objects": [o.to_dict() for o in self.objects],
            "canvas": [self.width, self.height],
        }


@dataclass(frozen=True, eq=False)
class Sample:
    raster: np.ndarray
    scene: Scene
    label: int
    task_id: int


@dataclass(frozen=True)
class StreamConfig:
    num_tasks: int = 10
    classes_per_task: int = 10
    train_per_class: int = 200
    test_per_class: int = 50
    noise_scale: float = 0.0
    master_seed: int = 0
    pretrain_classes: int = 50

    def __post_init__(self):
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise ValueError("need at least one task and one class per task")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.train_per_class < 1 or self.test_per_class < 0 or self.pretrain_classes < 0:
            raise ValueError("invalid per-class sample counts")


@dataclass(frozen=True, eq=False)
class Task:
    task_id: int
    class_ids: tuple[int, ...]
    train: list[Sample]
    test: list[Sample]


@dataclass(frozen=True, eq=False)
class TaskStream:
    tasks: list[Task]
    pretrain: list[Sample]
    config: StreamConfig
    schemas: dict[int, ClassSchema] = field(default_factory=dict)


def _unit_polygon(shape: ShapeKind) -> np.ndarray:
    n = {ShapeKind.TRIANGLE: 3, ShapeKind.SQUARE: 4, ShapeKind.PENTAGON: 5}[shape]
    offset = 45.0 if shape == ShapeKind.SQUARE else 90.0
    angles = np.radians(offset + 360.0 / n * np.arange(n))
    return np.stack([np.cos(angles), -np.sin(angles)], axis=1)


def object_outline(obj: ObjectInstance) -> np.ndarray:
    """Polygon vertices (x, y) in pixel coordinates; circles return an empty array."""
    if obj.shape == ShapeKind.CIRCLE:
        return np.zeros((0, 2))
    r = BASE_RADIUS * obj.scale
    rot = math.radians(obj.rotation)
    c, s = math.cos(rot), math.sin(rot)
    unit = _unit_polygon(obj.shape) @ np.array([[c, -s], [s, c]])
    return unit * r + np.array([obj.cx, obj.cy])


def object_bbox(obj: ObjectInstance) -> tuple[float, float, float, float]:
    """Extent of painted pixels, in pixel-centre coordinates widened by half a pixel."""
    pad = 0.5 if obj.filled else max(0.5, obj.stroke_width / 2)
    if obj.shape == ShapeKind.CIRCLE:
        r = BASE_RADIUS * obj.scale * CIRCLE_FACTOR
        return (obj.cx - r - pad, obj.cy - r - pad, obj.cx + r + pad, obj.cy + r + pad)
    pts = object_outline(obj)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return (x0 - pad, y0 - pad, x1 + pad, y1 + pad)


def _in_canvas(obj: ObjectInstance, width: int = CANVAS, height: int = CANVAS) -> bool:
    x0, y0, x1, y1 = object_bbox(obj)
    return x0 >= -0.5 and y0 >= -0.5 and x1 <= width - 0.5 and y1 <= height - 0.5


def _schema_from_draws(class_id, rng: np.random.Generator) -> ClassSchema:
    center = (ShapeKind(int(rng.integers(NUM_SHAPES))), ColorKind(int(rng.integers(NUM_COLORS))))
    k = int(rng.integers(1, 5))
    bins = sorted(int(b) for b in rng.choice(8, size=k, replace=False))
    ring = tuple(
        (
            ShapeKind(int(rng.integers(NUM_SHAPES))),
            ColorKind(int(rng.integers(NUM_COLORS))),
            45.0 * b,
        )
        for b in bins
    )
    return ClassSchema(class_id, center, ring)


def sample_class_schema(
    rng: np.random.Generator,
    existing_schemas: Sequence[ClassSchema] = (),
    class_id: int | None = None,
) -> ClassSchema:
    """Draw a schema whose canonical graph is at edit distance >= 1 from every existing one."""
    if class_id is None:
        class_id = len(existing_schemas)
    existing = [s.canonical_graph() for s in existing_schemas]
    for _ in range(MAX_SCHEMA_RETRIES):
        schema = _schema_from_draws(class_id, rng)
        g = schema.canonical_graph()
        if all(ged(g, other, upper_bound=1.0) >= 1.0 for other in existing):
            return schema
    raise SchemaSpaceExhausted(f"no distinct schema after {MAX_SCHEMA_RETRIES} draws")


def instantiate_scene(schema: ClassSchema, rng: np.random.Generator, u: float) -> Scene:
    if u < 0:
        raise ValueError("noise scale must be >= 0")
    kinds = [schema.center] + [(s, c) for s, c, _ in schema.ring]
    objects = []
    for (shape, color), (nx, ny) in zip(kinds, schema.nominal_positions()):
        scale = float(rng.uniform(*SCALE_RANGE))
        rotation = float(rng.uniform(0.0, 360.0))
        filled = bool(rng.random() < 0.5)
        stroke = int(STROKE_WIDTHS[int(rng.integers(len(STROKE_WIDTHS)))])
        obj = ObjectInstance(shape, color, nx, ny, scale, rotation, filled, stroke)
        for _ in range(MAX_JITTER_RETRIES):
            dx, dy = rng.normal(0.0, u, size=2)
            moved = ObjectInstance(shape, color, nx + float(dx), ny + float(dy), scale, rotation, filled, stroke)
            if _in_canvas(moved):
                obj = moved
                break
        objects.append(obj)
    return Scene(schema.class_id, tuple(objects))


def _fixed(points: np.ndarray) -> np.ndarray:
    return np.round(points * (1 << _SHIFT)).astype(np.int32)


def render(scene: Scene) -> np.ndarray:
    """Rasterise a scene to an HxWx3 uint8 RGB array (no anti-aliasing)."""
    img = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in scene.objects:
        color = tuple(int(v) for v in PALETTE[obj.color])
        thickness = -1 if obj.filled else obj.stroke_width
        if obj.shape == ShapeKind.CIRCLE:
            r = BASE_RADIUS * obj.scale * CIRCLE_FACTOR
            center = tuple(int(v) for v in _fixed(np.array([obj.cx, obj.cy])))
            cv2.circle(img, center, int(round(r * (1 << _SHIFT))), color, thickness, cv2.LINE_8, _SHIFT)
        else:
            pts = _fixed(object_outline(obj)).reshape(-1, 1, 2)
            if obj.filled:
                cv2.fillPoly(img, [pts], color, cv2.LINE_8, _SHIFT)
            else:
                cv2.polylines(img, [pts], True, color, obj.stroke_width, cv2.LINE_8, _SHIFT)
    return img


def sample_rng(master_seed: int, class_id: int, split: int, index: int) -> np.random.Generator:
    """Independent generator per (seed, class, split, index); split 0=train, 1=test."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, class_id, split, index]))


def make_sample(schema: ClassSchema, config: StreamConfig, split: int, index: int, task_id: int) -> Sample:
    rng = sample_rng(config.master_seed, schema.class_id, split, index)
    scene = instantiate_scene(schema, rng, config.noise_scale)
    return Sample(render(scene), scene, schema.class_id, task_id)


def generate_schemas(config: StreamConfig) -> dict[int, ClassSchema]:
    """Continual classes take ids 0..N-1, pretraining classes N..N+P-1."""
    rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, 0x5C4E]))
    total = config.num_tasks * config.classes_per_task + config.pretrain_classes
    schemas: list[ClassSchema] = []
    for class_id in range(total):
        schemas.append(sample_class_schema(rng, schemas, class_id))
    return {s.class_id: s for s in schemas}


def build_task_stream(config: StreamConfig) -> TaskStream:
    schemas = generate_schemas(config)
    n_cont = config.num_tasks * config.classes_per_task
    tasks = []
    for t in range(config.num_tasks):
        ids = tuple(range(t * config.classes_per_task, (t + 1) * config.classes_per_task))
        train = [make_sample(schemas[y], config, 0, i, t) for y in ids for i in range(config.train_per_class)]
        test = [make_sample(schemas[y], config, 1, i, t) for y in ids for i in range(config.test_per_class)]
        tasks.append(Task(t, ids, train, test))
    pretrain = [
        make_sample(schemas[y], config, 0, i, -1)
        for y in range(n_cont, n_cont + config.pretrain_classes)
        for i in range(config.train_per_class)
    ]
    return TaskStream(tasks, pretrain, config, schemas)
