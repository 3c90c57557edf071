"""Visual feature encoders.

Two interchangeable producers of the image embedding: a deterministic
region-statistics extractor (the default feature source for the trainable
recognizer) and a frozen randomly initialized mini vision transformer
(shape and invariant coverage; no training path exists for it).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .dataset import Image
from .prng import SplitMix64, derive_seed

GRID = 8  # region-stats cells per side
_LN_EPS = 1e-5


def config_hash(config: dict) -> str:
    """Short stable digest of a config mapping, for artifact tags."""
    payload = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class VisualEmbedding:
    values: np.ndarray  # (D_v,) float64
    encoder_tag: str

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("embedding must be a flat vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# region statistics
# ---------------------------------------------------------------------------

REGION_STATS_TAG = "region_stats/" + config_hash({"grid": GRID, "stats": ["mean", "std"]})


def encode_region_stats(image: Image) -> VisualEmbedding:
    """Per-cell mean and population std over an 8x8 grid, cell-major.

    Output layout is (mean, std) interleaved per cell, cells in row-major
    order, 128 values total.
    """
    h, w = image.pixels.shape
    if h % GRID or w % GRID:
        raise ValueError(f"image sides must be divisible by {GRID}, got {w}x{h}")
    cells = image.pixels.astype(np.float64).reshape(GRID, h // GRID, GRID, w // GRID)
    means = cells.mean(axis=(1, 3))
    stds = cells.std(axis=(1, 3))  # ddof=0
    values = np.stack([means, stds], axis=-1).reshape(-1)
    return VisualEmbedding(values=values, encoder_tag=REGION_STATS_TAG)


# ---------------------------------------------------------------------------
# frozen mini ViT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VitConfig:
    patch_size: int = 8
    d_model: int = 32
    layers: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must divide evenly into heads")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size


@dataclass(frozen=True)
class VitLayerWeights:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w1: np.ndarray  # (d_model, 4*d_model)
    w2: np.ndarray  # (4*d_model, d_model)


@dataclass(frozen=True)
class VitWeights:
    patch_projection: np.ndarray  # (patch_dim, d_model)
    layers: tuple[VitLayerWeights, ...]
    config: VitConfig
    seed: int

    def __post_init__(self):
        d = self.config.d_model
        if self.patch_projection.shape != (self.config.patch_dim, d):
            raise ValueError("patch projection shape inconsistent with config")
        if len(self.layers) != self.config.layers:
            raise ValueError("layer count inconsistent with config")
        for layer in self.layers:
            for m in (layer.wq, layer.wk, layer.wv, layer.wo):
                if m.shape != (d, d):
                    raise ValueError("attention projection shape inconsistent")
            if layer.w1.shape != (d, 4 * d) or layer.w2.shape != (4 * d, d):
                raise ValueError("mlp shape inconsistent")

    @property
    def tag(self) -> str:
        cfg = {
            "kind": "toy_vit",
            "patch_size": self.config.patch_size,
            "d_model": self.config.d_model,
            "layers": self.config.layers,
            "heads": self.config.heads,
            "seed": self.seed,
            "pool": "mean",
            "norm": "pre",
        }
        return "toy_vit/" + config_hash(cfg)


def init_vit_weights(seed: int, config: VitConfig = VitConfig()) -> VitWeights:
    """Frozen uniform[-0.05, 0.05] weights from one seeded stream.

    Draw order is part of the format: patch projection first, then per
    layer wq, wk, wv, wo, w1, w2. Layer-norm gains are 1, biases 0.
    """
    rng = SplitMix64(derive_seed(seed, "vit-init"))
    d = config.d_model

    def draw(shape):
        return rng.uniform_array(shape, -0.05, 0.05)

    patch_projection = draw((config.patch_dim, d))
    layers = []
    for _ in range(config.layers):
        layers.append(
            VitLayerWeights(
                ln1_gain=np.ones(d),
                ln1_bias=np.zeros(d),
                wq=draw((d, d)),
                wk=draw((d, d)),
                wv=draw((d, d)),
                wo=draw((d, d)),
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
                w1=draw((d, 4 * d)),
                w2=draw((4 * d, d)),
            )
        )
    return VitWeights(
        patch_projection=patch_projection, layers=tuple(layers), config=config, seed=seed
    )


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos positional encodings, (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    enc = np.zeros((n, d))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(x: np.ndarray, layer: VitLayerWeights, heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head softmax attention; returns (output, probs (heads, n, n))."""
    n, d = x.shape
    dh = d // heads

    def split(m):
        return (x @ m).reshape(n, heads, dh).transpose(1, 0, 2)

    q, k, v = split(layer.wq), split(layer.wk), split(layer.wv)
    probs = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh))
    merged = (probs @ v).transpose(1, 0, 2).reshape(n, d)
    return merged @ layer.wo, probs


def vit_forward(
    tokens: np.ndarray,
    weights: VitWeights,
    positional: bool = True,
    attention_sink: list | None = None,
) -> np.ndarray:
    """Run the pre-norm transformer stack over a (n, d_model) token matrix.

    `positional=False` skips the positional encodings (equivariance test
    hook); `attention_sink`, when given, collects one (heads, n, n) probs
    array per layer.
    """
    n, d = tokens.shape
    if d != weights.config.d_model:
        raise ValueError(f"token width {d} != d_model {weights.config.d_model}")
    x = tokens + sinusoidal_positions(n, d) if positional else tokens.copy()
    for layer in weights.layers:
        attn_out, probs = _attention(_layer_norm(x, layer.ln1_gain, layer.ln1_bias),
                                     layer, weights.config.heads)
        if attention_sink is not None:
            attention_sink.append(probs)
        x = x + attn_out
        hidden = _gelu(_layer_norm(x, layer.ln2_gain, layer.ln2_bias) @ layer.w1)
        x = x + hidden @ layer.w2
    return x


def image_to_tokens(image: Image, weights: VitWeights) -> np.ndarray:
    """Patchify to [0,1], flatten row-major, project to d_model."""
    p = weights.config.patch_size
    h, w = image.pixels.shape
    if h % p or w % p:
        raise ValueError(f"image sides must be divisible by patch size {p}, got {w}x{h}")
    scaled = image.pixels.astype(np.float64) / 255.0
    patches = (
        scaled.reshape(h // p, p, w // p, p)
        .transpose(0, 2, 1, 3)
        .reshape(-1, p * p)
    )
    return patches @ weights.patch_projection


def encode_vit(image: Image, weights: VitWeights) -> VisualEmbedding:
    """Patch, encode with the frozen stack, mean-pool to d_model values."""
    tokens = vit_forward(image_to_tokens(image, weights), weights)
    return VisualEmbedding(values=tokens.mean(axis=0), encoder_tag=weights.tag)


def vit_attention_maps(image: Image, weights: VitWeights) -> list[np.ndarray]:
    """Attention probabilities per layer, each (heads, n_patches, n_patches)."""
    sink: list[np.ndarray] = []
    vit_forward(image_to_tokens(image, weights), weights, attention_sink=sink)
    return sink


# ---------------------------------------------------------------------------
# uniform interface used by the pipeline
# ---------------------------------------------------------------------------


class RegionStatsEncoder:
    dim = 2 * GRID * GRID

    def __init__(self):
        self.tag = REGION_STATS_TAG

    def encode(self, image: Image) -> VisualEmbedding:
        return encode_region_stats(image)


class ToyVitEncoder:
    def __init__(self, seed: int, config: VitConfig = VitConfig()):
        self.weights = init_vit_weights(seed, config)
        self.tag = self.weights.tag
        self.dim = config.d_model

    def encode(self, image: Image) -> VisualEmbedding:
        return encode_vit(image, self.weights)


def make_encoder(kind: str, seed: int = 0):
    if kind == "region_stats":
        return RegionStatsEncoder()
    if kind == "toy_vit":
        return ToyVitEncoder(seed)
    raise ValueError(f"unknown encoder kind {kind!r}")
