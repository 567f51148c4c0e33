"""Anchor-grid convolutional detector: strided 3x3 backbone, 3x3 head.

The backbone halves resolution at each stage; the last stage's activations
are the S x S x embedding_dim feature map. A stride-1 3x3 head maps each
cell (with its 8 neighbours, widening the receptive field past the cell) to
B * (5 + num_classes + 2) raw outputs: objectness logit, (tx, ty, tw, th),
class logits, and the (sx, sy) stem offset pair in cell units.

Forward/backward are written against the im2col/col2im kernels so the whole
model is differentiable by hand; see losses.gradient_check.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import backends
from .errors import ConfigError, NumericalError

LEAKY_SLOPE = 0.1
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 256
    grid_size: int = 32
    anchors: Tuple[Tuple[float, float], ...] = ((24.0, 24.0), (40.0, 40.0))
    num_classes: int = 4
    channels: Tuple[int, ...] = (12, 24, 48)
    head_seed: int = 0

    def __post_init__(self):
        if self.input_size % self.grid_size != 0:
            raise ConfigError("input_size must be divisible by grid_size")
        n_stages = len(self.channels)
        if self.input_size // self.grid_size != 2**n_stages:
            raise ConfigError(
                f"need input_size/grid_size == 2^len(channels); got "
                f"{self.input_size}/{self.grid_size} with {n_stages} stages"
            )
        if len(self.anchors) < 1 or any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ConfigError("anchors must be non-empty with positive dims")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def cell_size(self) -> float:
        return self.input_size / self.grid_size

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]

    @property
    def channels_per_anchor(self) -> int:
        return 5 + self.num_classes + 2

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "grid_size": self.grid_size,
            "anchors": [list(a) for a in self.anchors],
            "num_classes": self.num_classes,
            "channels": list(self.channels),
            "head_seed": self.head_seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "DetectorConfig":
        return DetectorConfig(
            input_size=int(d["input_size"]),
            grid_size=int(d["grid_size"]),
            anchors=tuple(tuple(float(v) for v in a) for a in d["anchors"]),
            num_classes=int(d["num_classes"]),
            channels=tuple(int(c) for c in d["channels"]),
            head_seed=int(d.get("head_seed", 0)),
        )


@dataclass
class RawGridOutput:
    """grid: (..., S, S, B, 5 + C + 2); features: (..., S, S, embedding_dim)."""

    grid: np.ndarray
    features: np.ndarray


Params = Dict[str, np.ndarray]


def init_params(config: DetectorConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    c_in = 3
    for i, c_out in enumerate(config.channels):
        fan_in = 9 * c_in
        params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, c_in, c_out))
        params[f"conv{i}_b"] = np.zeros(c_out)
        c_in = c_out
    k = config.num_anchors * config.channels_per_anchor
    params["head_w"] = rng.normal(0.0, np.sqrt(1.0 / (9 * c_in)), size=(9 * c_in, k))
    params["head_b"] = np.zeros(k)
    return params


def normalize_image(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 255.0 - 0.5


def _check_shapes(images: np.ndarray, params: Params, config: DetectorConfig) -> None:
    n, h, w, c = images.shape
    if h != config.input_size or w != config.input_size or c != 3:
        raise ConfigError(f"image batch {images.shape} does not match input_size {config.input_size}")
    c_in = 3
    for i, c_out in enumerate(config.channels):
        key = f"conv{i}_w"
        if key not in params or params[key].shape != (3, 3, c_in, c_out):
            raise ConfigError(f"parameter {key} missing or mis-shaped for config")
        c_in = c_out
    k = config.num_anchors * config.channels_per_anchor
    if params["head_w"].shape != (9 * c_in, k):
        raise ConfigError("head parameters do not match config")


def forward_batch(images: np.ndarray, params: Params, config: DetectorConfig,
                  want_cache: bool = False):
    """images: (N, H, W, 3) normalized float. Returns (RawGridOutput, cache)."""
    _check_shapes(images, params, config)
    x = images
    caches: List[tuple] = []
    for i, c_out in enumerate(config.channels):
        w = params[f"conv{i}_w"]
        b = params[f"conv{i}_b"]
        c_in = w.shape[2]
        cols = backends.im2col(x)
        pre = cols @ w.reshape(9 * c_in, c_out) + b
        act = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
        if want_cache:
            caches.append((cols, pre, x.shape))
        x = act
    features = x  # (N, S, S, E)
    n, s, _, e = features.shape
    head_cols = backends.im2col_s1(features)
    head_out = head_cols @ params["head_w"] + params["head_b"]
    grid = head_out.reshape(n, s, s, config.num_anchors, config.channels_per_anchor)
    if not np.all(np.isfinite(grid)):
        raise NumericalError("non-finite values in detector output")
    out = RawGridOutput(grid=grid, features=features)
    return (out, (caches, features, head_cols)) if want_cache else (out, None)


def forward(image: np.ndarray, params: Params, config: DetectorConfig) -> RawGridOutput:
    """Single already-normalized image (H, W, 3) -> single-image RawGridOutput."""
    out, _ = forward_batch(image[None], params, config)
    return RawGridOutput(grid=out.grid[0], features=out.features[0])


def backward_batch(d_grid: np.ndarray, params: Params, config: DetectorConfig,
                   cache) -> Params:
    """Gradient of a scalar loss w.r.t. params, given d loss / d grid."""
    caches, features, head_cols = cache
    n, s, e = features.shape[0], features.shape[1], features.shape[-1]
    k = config.num_anchors * config.channels_per_anchor
    d_head_out = d_grid.reshape(n, s, s, k)
    grads: Params = {}
    cols_flat = head_cols.reshape(-1, 9 * e)
    dho_flat = d_head_out.reshape(-1, k)
    grads["head_w"] = cols_flat.T @ dho_flat
    grads["head_b"] = dho_flat.sum(axis=0)
    d_cols = (dho_flat @ params["head_w"].T).reshape(n, s, s, 9 * e)
    d_x = backends.col2im_s1(d_cols, s, s, e)
    for i in range(len(config.channels) - 1, -1, -1):
        cols, pre, x_shape = caches[i]
        w = params[f"conv{i}_w"]
        c_in, c_out = w.shape[2], w.shape[3]
        d_pre = d_x * np.where(pre > 0, 1.0, LEAKY_SLOPE)
        d_pre_flat = d_pre.reshape(-1, c_out)
        cols_flat = cols.reshape(-1, 9 * c_in)
        grads[f"conv{i}_w"] = (cols_flat.T @ d_pre_flat).reshape(3, 3, c_in, c_out)
        grads[f"conv{i}_b"] = d_pre_flat.sum(axis=0)
        d_cols = d_pre_flat @ w.reshape(9 * c_in, c_out).T
        d_cols = d_cols.reshape(d_pre.shape[0], d_pre.shape[1], d_pre.shape[2], 9 * c_in)
        d_x = backends.col2im(d_cols, x_shape[1], x_shape[2], c_in)
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Params, config: DetectorConfig, step: int) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "step": int(step)}
    arrays = {f"param::{k}": v for k, v in params.items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, expected_config: DetectorConfig | None = None):
    """Returns (params, config, step); rejects config mismatches."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        config = DetectorConfig.from_dict(meta["config"])
        if expected_config is not None and config != expected_config:
            raise ConfigError("checkpoint config does not match the requested config")
        params = {k[len("param::"):]: data[k].copy() for k in data.files if k.startswith("param::")}
    return params, config, meta["step"]
