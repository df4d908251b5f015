"""Fast reasoner: frozen conv features, a two-layer perceptron and an attribute head.

The convolutional extractor is built (and optionally pretrained) with
torch, then frozen; everything trained during a continual episode is plain
numpy with hand-written gradients.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .concepts import NUM_COLORS, NUM_SHAPES
from .decompose import ConceptGraph

log = logging.getLogger(__name__)

HIDDEN = 256
ATTR_DIM = NUM_SHAPES + NUM_COLORS


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, trace: Sequence[float] = ()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 32
    lam: float = 1.5
    seed: int = 0
    hidden: int = HIDDEN
    extractor_mode: str = "pretrained"
    pretrain_epochs: int = 50

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.extractor_mode not in ("pretrained", "random"):
            raise ValueError(f"unknown extractor mode {self.extractor_mode!r}")


# ---------------------------------------------------------------------------
# Feature extractor


class ConvTrunk(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, kernel_size=5, padding=2)
        self.conv2 = nn.Conv2d(8, 16, kernel_size=5, padding=2)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        return torch.flatten(x, 1)


class FeatureExtractor:
    """Frozen conv trunk mapping HxWx3 uint8 rasters to flat feature vectors."""

    def __init__(self, trunk: ConvTrunk, canvas: tuple[int, int] = (64, 64), mode: str = "random"):
        self.trunk = trunk.eval()
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.canvas = canvas
        self.mode = mode
        self.dim = 16 * (canvas[0] // 4) * (canvas[1] // 4)

    @classmethod
    def random(cls, seed: int, canvas=(64, 64)) -> FeatureExtractor:
        torch.manual_seed(seed)
        return cls(ConvTrunk(), canvas, "random")

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.trunk.state_dict().items()}

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], canvas=(64, 64), mode="pretrained"):
        trunk = ConvTrunk()
        trunk.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in state.items()})
        return cls(trunk, canvas, mode)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def __call__(self, rasters: np.ndarray, batch: int = 256) -> np.ndarray:
        rasters = np.asarray(rasters)
        if rasters.ndim == 3:
            return self(rasters[None], batch)[0]
        if rasters.shape[1:] != (*self.canvas, 3):
            raise ShapeMismatch(f"expected rasters of shape (*, {self.canvas[0]}, {self.canvas[1]}, 3), got {rasters.shape}")
        out = np.empty((len(rasters), self.dim), dtype=np.float32)
        with torch.no_grad():
            for i in range(0, len(rasters), batch):
                x = torch.from_numpy(_to_chw(rasters[i : i + batch]))
                out[i : i + batch] = self.trunk(x).numpy()
        return out


def _to_chw(rasters: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(rasters.transpose(0, 3, 1, 2), dtype=np.float32) / np.float32(255.0)


def extract_features(extractor: FeatureExtractor, raster: np.ndarray) -> np.ndarray:
    return extractor(raster)


def pretrain_extractor(
    rasters: np.ndarray,
    labels: np.ndarray,
    epochs: int = 50,
    seed: int = 0,
    hidden: int = HIDDEN,
    batch_size: int = 64,
    learning_rate: float = 1e-3,
) -> FeatureExtractor:
    """Train trunk + MLP on a labelled split with cross-entropy, keep the trunk frozen."""
    if len(rasters) == 0:
        raise ValueError("pretraining needs a non-empty split")
    torch.manual_seed(seed)
    classes, y = np.unique(labels, return_inverse=True)
    trunk = ConvTrunk()
    canvas = rasters.shape[1:3]
    dim = 16 * (canvas[0] // 4) * (canvas[1] // 4)
    model = nn.Sequential(trunk, nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, len(classes)))
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    x_all = torch.from_numpy(_to_chw(rasters))
    y_all = torch.from_numpy(y.astype(np.int64))
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(x_all[idx]), y_all[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.debug("pretrain epoch %d loss %.4f", epoch, total / len(order))
    return FeatureExtractor(trunk, tuple(canvas), "pretrained")


def cache_dir() -> Path:
    root = os.environ.get("NESYCL_CACHE_DIR") or os.path.join(
        os.environ.get("XDG_CACHE_HOME", os.path.expanduser("~/.cache")), "nesycl"
    )
    return Path(root)


def cached_pretrained_extractor(key: str, rasters_fn, epochs: int, seed: int) -> FeatureExtractor:
    """Pretrain once per ``key`` and keep the frozen trunk on disk."""
    path = cache_dir() / "extractors" / f"{key}.npz"
    if path.exists():
        with np.load(path) as data:
            return FeatureExtractor.from_state(dict(data))
    rasters, labels = rasters_fn()
    extractor = pretrain_extractor(rasters, labels, epochs=epochs, seed=seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **extractor.state())
    os.replace(tmp, path)
    return extractor


# ---------------------------------------------------------------------------
# Perceptron parameters


@dataclass
class MlpParams:
    """theta_n = (W1, b1), classifier (W, b), integration head (Wi, bi).

    Weight layouts: W1 is d x p, W is classes x p, Wi is p x 11.
    """

    W1: np.ndarray
    b1: np.ndarray
    W: np.ndarray
    b: np.ndarray
    Wi: np.ndarray | None = None
    bi: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def copy(self) -> MlpParams:
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()})

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def has_integration_head(self) -> bool:
        return self.Wi is not None


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(
    rng: np.random.Generator,
    dim: int,
    num_classes: int,
    hidden: int = HIDDEN,
    integration_head: bool = True,
    dtype=np.float32,
) -> MlpParams:
    W1 = _uniform(rng, dim, (dim, hidden), dtype)
    b1 = _uniform(rng, dim, (hidden,), dtype)
    W = _uniform(rng, hidden, (num_classes, hidden), dtype)
    b = _uniform(rng, hidden, (num_classes,), dtype)
    if not integration_head:
        return MlpParams(W1, b1, W, b)
    Wi = _uniform(rng, hidden, (hidden, ATTR_DIM), dtype)
    bi = _uniform(rng, hidden, (ATTR_DIM,), dtype)
    return MlpParams(W1, b1, W, b, Wi, bi)


def reset_heads(params: MlpParams, rng: np.random.Generator, num_classes: int | None = None) -> MlpParams:
    """Fresh theta_n, W, b and integration head; the feature extractor is not touched."""
    dim, hidden = params.W1.shape
    return init_params(
        rng,
        dim,
        params.num_classes if num_classes is None else num_classes,
        hidden,
        params.has_integration_head,
        params.W1.dtype,
    )


# ---------------------------------------------------------------------------
# Attribute summaries


@dataclass(frozen=True)
class AttributeSummary:
    shape_counts: tuple[int, ...]
    color_counts: tuple[int, ...]

    def vector(self) -> np.ndarray:
        return np.array(self.shape_counts + self.color_counts, dtype=np.float64)


def summarize_attributes(graph: ConceptGraph) -> AttributeSummary:
    shapes = [0] * NUM_SHAPES
    colors = [0] * NUM_COLORS
    for node in graph.nodes:
        shapes[int(node.shape)] += 1
        colors[int(node.color)] += 1
    return AttributeSummary(tuple(shapes), tuple(colors))


def attribute_targets(graphs: Iterable[ConceptGraph], dtype=np.float32) -> np.ndarray:
    return np.array([summarize_attributes(g).vector() for g in graphs], dtype=dtype).reshape(-1, ATTR_DIM)


# ---------------------------------------------------------------------------
# Forward / backward


def hidden_forward(params: MlpParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != params.W1.shape[0]:
        raise ShapeMismatch(f"features of width {params.W1.shape[0]} expected, got {X.shape}")
    z = X @ params.W1
    z += params.b1
    h = np.maximum(z, 0)
    return z, h


def forward(params: MlpParams, X: np.ndarray):
    """Logits (n x classes) and attribute predictions (n x 11, or None without a head)."""
    _, h = hidden_forward(params, X)
    logits = h @ params.W.T + params.b
    attr = h @ params.Wi + params.bi if params.has_integration_head else None
    return logits, attr


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None):
    """Mean cross-entropy and its gradient w.r.t. logits.

    ``mask`` (n x classes, bool) restricts each row's softmax to the
    allowed classes; masked logits get zero gradient.
    """
    n = len(y)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    logp = log_softmax(logits)
    value = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return value, grad


def backward(params: MlpParams, X, z, h, dlogits, dattr=None) -> dict[str, np.ndarray]:
    """Reverse pass through the heads and the hidden layer."""
    grads = {"W": dlogits.T @ h, "b": dlogits.sum(axis=0)}
    dh = dlogits @ params.W
    if params.has_integration_head:
        if dattr is None:
            dattr = np.zeros((len(X), ATTR_DIM), dtype=h.dtype)
        grads["Wi"] = h.T @ dattr
        grads["bi"] = dattr.sum(axis=0)
        dh += dattr @ params.Wi.T
    dh *= z > 0
    grads["W1"] = X.T @ dh
    grads["b1"] = dh.sum(axis=0)
    return grads


def loss(params: MlpParams, X: np.ndarray, y: np.ndarray, targets: np.ndarray | None, lam: float):
    """Cross-entropy plus lam times the attribute mean squared error; returns (value, grads)."""
    if len(X) == 0:
        raise ValueError("empty batch")
    z, h = hidden_forward(params, X)
    logits = h @ params.W.T + params.b
    value, dlogits = cross_entropy(logits, y)
    dattr = None
    if params.has_integration_head:
        attr = h @ params.Wi + params.bi
        diff = attr - targets
        value += lam * float(np.mean(diff * diff))
        dattr = diff * (2.0 * lam / diff.size)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    return value, backward(params, X, z, h, dlogits, dattr)


# ---------------------------------------------------------------------------
# Optimisation


# Moments below this are zeroed every FLUSH_EVERY steps. Entries whose
# gradient stays 0 otherwise decay geometrically into the subnormal range,
# where arithmetic is ~30x slower; at 1e-30 their contribution to an update
# is far below float32 resolution of any weight.
TINY_MOMENT = 1e-30
FLUSH_EVERY = 64


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self._tmp: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self._tmp[name] = np.empty_like(p)
            m, v, tmp = self.m[name], self.v[name], self._tmp[name]
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=tmp)
            m += tmp
            v *= self.beta2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / np.sqrt(bc2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / bc1
            p -= tmp
            if self.t % FLUSH_EVERY == 0:
                for arr in (m, v):
                    np.abs(arr, out=tmp)
                    np.copyto(arr, 0.0, where=tmp < TINY_MOMENT)


def minibatches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


@dataclass
class TrainResult:
    params: MlpParams
    trace: list[float] = field(default_factory=list)


def train_task(
    params: MlpParams,
    features: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray | None,
    config: TrainConfig,
) -> TrainResult:
    """Adam on the combined loss for ``config.epochs`` epochs; labels are task-local indices."""
    params = params.copy()
    if config.epochs == 0:
        return TrainResult(params, [])
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    arrays = params.arrays()
    features = np.asarray(features, dtype=params.W1.dtype)
    if targets is not None:
        targets = np.asarray(targets, dtype=params.W1.dtype)
    trace = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in minibatches(rng, len(features), config.batch_size):
            try:
                value, grads = loss(params, features[idx], labels[idx], None if targets is None else targets[idx], config.lam)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(str(exc), trace) from None
            opt.step(arrays, grads)
            total += value * len(idx)
        trace.append(total / len(features))
    return TrainResult(params, trace)


def predict(params: MlpParams, X: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, X)
    return logits.argmax(axis=1)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: MlpParams, directory: str | os.PathLike) -> None:
    """Flat little-endian float32 archive plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"dtype": "<f4", "tensors": []}
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name, arr in params.arrays().items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += data.nbytes
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(directory: str | os.PathLike) -> MlpParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = (directory / "params.bin").read_bytes()
    arrays = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(raw, dtype=manifest["dtype"], count=count, offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    return MlpParams(**arrays)
