"""Raster/scene to concept-graph decomposition.

A concept graph has one node per object, labelled (shape, color), and one
edge per unordered node pair labelled with an 8-sector direction bin.
Directions use the mathematical convention: bin 0 points along +x, bin 2
points up (towards smaller image rows).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, NamedTuple, Sequence

import cv2
import numpy as np

from .concepts import BACKGROUND, PALETTE, ColorKind, ShapeKind

if TYPE_CHECKING:
    from .scenegen import Scene

NUM_BINS = 8
POSITION_QUANTUM = 4.0
MIN_COMPONENT_AREA = 12
COLOR_TOLERANCE = 60.0


class Detection(NamedTuple):
    bbox: tuple[float, float, float, float]
    shape: ShapeKind
    color: ColorKind
    centroid: tuple[float, float]


class ConceptNode(NamedTuple):
    shape: ShapeKind
    color: ColorKind


class RelationEdge(NamedTuple):
    from_idx: int
    to_idx: int
    direction_bin: int


@dataclass(frozen=True)
class ConceptGraph:
    nodes: tuple[ConceptNode, ...] = ()
    edges: tuple[RelationEdge, ...] = field(default=())

    def __post_init__(self):
        n = len(self.nodes)
        pairs = {(e.from_idx, e.to_idx) for e in self.edges}
        if len(pairs) != len(self.edges) or len(pairs) != n * (n - 1) // 2:
            raise ValueError("edge set must cover every node pair exactly once")
        for e in self.edges:
            if not 0 <= e.from_idx < e.to_idx < n or not 0 <= e.direction_bin < NUM_BINS:
                raise ValueError(f"invalid edge {e}")

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def directions(self) -> tuple[tuple[int, ...], ...]:
        """directions[i][j] is the bin pointing from node i to node j (-1 on the diagonal)."""
        n = len(self.nodes)
        mat = [[-1] * n for _ in range(n)]
        for e in self.edges:
            mat[e.from_idx][e.to_idx] = e.direction_bin
            mat[e.to_idx][e.from_idx] = (e.direction_bin + NUM_BINS // 2) % NUM_BINS
        return tuple(tuple(row) for row in mat)

    def to_dict(self) -> dict:
        return {
            "nodes": [[int(s), int(c)] for s, c in self.nodes],
            "edges": [[e.from_idx, e.to_idx, e.direction_bin] for e in sorted(self.edges)],
        }

    @cached_property
    def key(self) -> str:
        """Canonical compact JSON; equal keys exactly when the graphs are isomorphic.

        Nodes with identical labels are interchangeable, so the key takes
        the smallest edge listing over all orders of each equal-label run.
        """
        return json.dumps(self.canonical().to_dict(), separators=(",", ":"))

    def canonical(self) -> ConceptGraph:
        order = sorted(range(len(self.nodes)), key=lambda i: self.nodes[i])
        groups = [list(g) for _, g in itertools.groupby(order, key=lambda i: self.nodes[i])]
        best = None
        for perms in itertools.product(*(itertools.permutations(g) for g in groups)):
            perm = [i for p in perms for i in p]
            listing = tuple(
                self.directions[perm[a]][perm[b]] for a in range(len(perm)) for b in range(a + 1, len(perm))
            )
            if best is None or listing < best[0]:
                best = (listing, perm)
        if best is None:
            return self
        perm = best[1]
        n = len(perm)
        nodes = tuple(self.nodes[i] for i in perm)
        edges = tuple(RelationEdge(a, b, self.directions[perm[a]][perm[b]]) for a in range(n) for b in range(a + 1, n))
        return ConceptGraph(nodes, edges)

    @classmethod
    def from_dict(cls, data: dict) -> ConceptGraph:
        nodes = tuple(ConceptNode(ShapeKind(s), ColorKind(c)) for s, c in data["nodes"])
        edges = tuple(sorted(RelationEdge(int(i), int(j), int(b)) for i, j, b in data["edges"]))
        return cls(nodes, edges)


def direction_bin(dx: float, dy: float) -> int:
    """Sector index of the image-space displacement (dx, dy).

    Sector boundaries sit at 22.5 deg + k*45 deg; a vector exactly on a
    boundary falls in the sector that ends there (the counter-clockwise
    earlier one). Angles are rounded to 1e-7 deg first so that float noise
    from equivalent computations cannot split a tie.
    """
    angle = round(math.degrees(math.atan2(-dy, dx)) % 360.0, 7)
    return math.ceil((angle - 22.5) / 45.0) % NUM_BINS


def _order_key(det: Detection):
    # rounding keeps float noise (31.999999 vs 32.0) from flipping a quantum
    cx, cy = (round(v, 6) for v in det.centroid)
    return (
        int(det.shape),
        int(det.color),
        math.floor(cx / POSITION_QUANTUM),
        math.floor(cy / POSITION_QUANTUM),
        cx,
        cy,
    )


def build_graph(detections: Iterable[Detection]) -> ConceptGraph:
    dets = sorted(detections, key=_order_key)
    nodes = tuple(ConceptNode(ShapeKind(d.shape), ColorKind(d.color)) for d in dets)
    edges = []
    for i in range(len(dets)):
        xi, yi = dets[i].centroid
        for j in range(i + 1, len(dets)):
            xj, yj = dets[j].centroid
            edges.append(RelationEdge(i, j, direction_bin(xj - xi, yj - yi)))
    return ConceptGraph(nodes, tuple(edges))


def oracle_detect(scene: Scene) -> list[Detection]:
    """Ground-truth detections straight from scene metadata."""
    from .scenegen import object_bbox

    return [
        Detection(object_bbox(obj), obj.shape, obj.color, (obj.cx, obj.cy))
        for obj in scene.objects
    ]


_PALETTE_ARRAY = np.array([PALETTE[c] for c in ColorKind], dtype=np.float64)


def segment_colors(raster: np.ndarray) -> np.ndarray:
    """Per-pixel palette index, or -1 for background / off-palette pixels."""
    pix = raster.reshape(-1, 3).astype(np.float64)
    dist = np.linalg.norm(pix[:, None, :] - _PALETTE_ARRAY[None, :, :], axis=2)
    labels = dist.argmin(axis=1)
    labels[dist.min(axis=1) >= COLOR_TOLERANCE] = -1
    return labels.reshape(raster.shape[:2])


def radial_harmonics(contour: np.ndarray, orders: Sequence[int] = (3, 4, 5)) -> list[float]:
    """Normalised Fourier magnitudes of the hull's radius-versus-angle profile.

    A regular n-gon concentrates energy at harmonic n; a circle has none.
    The hull outline is resampled uniformly by arc length and integrated
    over angle about the hull centroid, so the result is rotation invariant.
    """
    hull = cv2.convexHull(contour).reshape(-1, 2).astype(np.float64)
    if len(hull) < 3:
        return [0.0] * len(orders)
    closed = np.vstack([hull, hull[:1]])
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(closed, axis=0).T))])
    t = np.linspace(0.0, arc[-1], _RESAMPLE, endpoint=False)
    x = np.interp(t, arc, closed[:, 0])
    y = np.interp(t, arc, closed[:, 1])
    m = cv2.moments(hull.astype(np.float32))
    if m["m00"] <= 0:
        return [0.0] * len(orders)
    cx, cy = m["m10"] / m["m00"], m["m01"] / m["m00"]
    theta = np.arctan2(y - cy, x - cx)
    order = np.argsort(theta)
    theta, r = theta[order], np.hypot(x - cx, y - cy)[order]
    dtheta = np.diff(np.concatenate([theta, [theta[0] + 2 * np.pi]]))
    base = float(np.sum(r * dtheta))
    return [abs(np.sum(r * dtheta * np.exp(-1j * k * theta))) / base for k in orders]


def classify_contour(contour: np.ndarray) -> ShapeKind:
    """Shape label from an external contour.

    The polygon order is read off as the dominant radial harmonic (3, 4
    or 5, each scaled by its value for a rasterised regular polygon); if
    none reaches ``HARMONIC_THRESHOLD`` of its reference the outline is
    round. Plain vertex counting from ``approxPolyDP`` is unreliable at
    the 5-9 px radii used here.
    """
    h = np.array(radial_harmonics(contour)) / _HARMONIC_REF
    k = int(h.argmax())
    if h[k] < HARMONIC_THRESHOLD:
        return ShapeKind.CIRCLE
    return (ShapeKind.TRIANGLE, ShapeKind.SQUARE, ShapeKind.PENTAGON)[k]


_RESAMPLE = 256
# harmonic 3/4/5 magnitude of rasterised triangles/squares/pentagons (medians)
_HARMONIC_REF = np.array([0.12, 0.056, 0.032])
HARMONIC_THRESHOLD = 0.55


def detect_objects(raster: np.ndarray) -> list[Detection]:
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 raster, got {raster.shape}")
    labels = segment_colors(raster)
    detections = []
    for color in ColorKind:
        mask = (labels == int(color)).astype(np.uint8)
        if not mask.any():
            continue
        count, comp, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=8)
        for k in range(1, count):
            x, y, w, h, npix = (int(v) for v in stats[k])
            if npix < MIN_COMPONENT_AREA:
                continue
            comp_mask = (comp == k).astype(np.uint8)
            contours, _ = cv2.findContours(comp_mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
            contour = max(contours, key=cv2.contourArea)
            m = cv2.moments(contour)
            if m["m00"] > 0:
                centroid = (m["m10"] / m["m00"], m["m01"] / m["m00"])
            else:
                ys, xs = np.nonzero(comp_mask)
                centroid = (float(xs.mean()), float(ys.mean()))
            votes = np.bincount(labels[comp == k], minlength=len(ColorKind))
            detections.append(
                Detection(
                    (x - 0.5, y - 0.5, x + w - 0.5, y + h - 0.5),
                    classify_contour(contour),
                    ColorKind(int(votes.argmax())),
                    centroid,
                )
            )
    return detections


def bbox_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def match_detections(
    predicted: Sequence[Detection], truth: Sequence[Detection], iou_threshold: float = 0.5
) -> int:
    """Greedy one-to-one matching; a match needs IoU >= threshold and equal labels."""
    pairs = []
    for i, p in enumerate(predicted):
        for j, t in enumerate(truth):
            if p.shape == t.shape and p.color == t.color:
                iou = bbox_iou(p.bbox, t.bbox)
                if iou >= iou_threshold:
                    pairs.append((-iou, i, j))
    used_p, used_t = set(), set()
    for _, i, j in sorted(pairs):
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
    return len(used_p)


def decompose(raster: np.ndarray) -> ConceptGraph:
    return build_graph(detect_objects(raster))


assert BACKGROUND not in PALETTE.values()
