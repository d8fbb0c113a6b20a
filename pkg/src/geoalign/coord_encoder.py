"""Multi-scale coordinate encoder.

A location is projected to the Equal Earth plane, rescaled into [-1, 1]^2 by
the projection bounding box, and expanded into K sinusoidal tokens through
fixed random spectral matrices with increasing bandwidths. The tokens (plus
learnable register tokens) pass through a stack of self-attention blocks, and
the K frequency tokens are mean-pooled into a single D-dimensional embedding.
With depth 0 and no registers this reduces to the plain mean of the fixed
sinusoidal tokens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError
from .geo import X_MAX, Y_MAX, CellId, GeoCoordinate, cell_centroid, project
from .nn import AttentionBlock
from .tensor import ComputationGraph, Parameter, Tensor

log = logging.getLogger(__name__)


def rescale_plane(x, y):
    """Affinely map Equal Earth coordinates onto [-1, 1]^2."""
    return np.asarray(x) / X_MAX, np.asarray(y) / Y_MAX


class RffBank:
    """K fixed spectral projection matrices, each (dim/2) x 2.

    Matrix k has entries drawn from N(0, sigma_k^2); the draw is fully
    determined by (seed, scales, dim) and the matrices are never updated by
    training.
    """

    def __init__(self, seed: int, scales, dim: int):
        if dim % 2 != 0:
            raise ConfigError(f"embedding dim {dim} must be even")
        scales = tuple(float(s) for s in scales)
        if not scales or any(s <= 0 for s in scales):
            raise ConfigError(f"scales must be positive, got {scales}")
        if any(a >= b for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be strictly increasing, got {scales}")
        self.seed = seed
        self.scales = scales
        self.dim = dim
        rng = np.random.default_rng(seed)
        self.matrices = [rng.normal(0.0, s, size=(dim // 2, 2)) for s in scales]

    @property
    def num_scales(self) -> int:
        return len(self.scales)


def rff_tokens(bank: RffBank, uv: np.ndarray) -> np.ndarray:
    """Sinusoidal tokens for rescaled planar points.

    Args:
        uv: array (..., 2) of points already rescaled into [-1, 1]^2.

    Returns:
        Array (..., K, dim): token k is [cos(2 pi M_k p), sin(2 pi M_k p)].
    """
    uv = np.asarray(uv, dtype=np.float64)
    toks = []
    for m in bank.matrices:
        proj = 2.0 * math.pi * (uv @ m.T)
        toks.append(np.concatenate([np.cos(proj), np.sin(proj)], axis=-1))
    return np.stack(toks, axis=-2)


def rff_encode(bank: RffBank, p) -> np.ndarray:
    """Tokens (K, dim) for one rescaled planar point (ProjectedPoint or pair)."""
    x, y = (p.x, p.y) if hasattr(p, "x") else (p[0], p[1])
    return rff_tokens(bank, np.array([x, y]))


@dataclass(frozen=True)
class CoordEncoderConfig:
    dim: int = 128
    scales: tuple = (1.0, 16.0, 256.0)
    depth: int = 4
    registers: int = 4
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2 != 0:
            raise ConfigError(f"dim must be positive and even, got {self.dim}")
        if self.depth < 0 or self.registers < 0:
            raise ConfigError("depth and registers must be >= 0")
        if self.depth > 0 and self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "scales": list(self.scales),
            "depth": self.depth,
            "registers": self.registers,
            "heads": self.heads,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoordEncoderConfig":
        return cls(
            dim=int(d["dim"]),
            scales=tuple(d["scales"]),
            depth=int(d["depth"]),
            registers=int(d["registers"]),
            heads=int(d["heads"]),
            seed=int(d["seed"]),
        )


class CoordEncoder:
    """Trainable location encoder over a fixed multi-scale spectral bank."""

    def __init__(self, config: CoordEncoderConfig, rng: np.random.Generator):
        self.config = config
        self.bank = RffBank(config.seed, config.scales, config.dim)
        self.registers = (
            Parameter("coord/registers", rng.normal(0.0, 1.0, (config.registers, config.dim)))
            if config.registers > 0
            else None
        )
        self.blocks = [
            AttentionBlock(f"coord/block{i}", config.dim, config.heads, rng)
            for i in range(config.depth)
        ]

    def parameters(self) -> list[Parameter]:
        params = [] if self.registers is None else [self.registers]
        for b in self.blocks:
            params.extend(b.parameters())
        return params

    def tokens_for(self, lats, lons) -> np.ndarray:
        """Fixed input tokens (B, K, dim) for arrays of degrees."""
        x, y = project(lats, lons)
        uv = np.stack(rescale_plane(x, y), axis=-1)
        return rff_tokens(self.bank, uv)

    def encode_batch_tensor(self, graph: ComputationGraph, lats, lons) -> Tensor:
        """Differentiable (B, dim) embeddings for a batch of coordinates."""
        toks = self.tokens_for(np.atleast_1d(lats), np.atleast_1d(lons))
        k = self.bank.num_scales
        x = graph.constant(toks)
        if self.registers is not None:
            regs = T.expand_batch(graph.param(self.registers), toks.shape[0])
            x = T.concat([x, regs], axis=1)
        for block in self.blocks:
            x = block(x)
        if self.registers is not None:
            x = T.slice_axis(x, 1, 0, k)
        return T.mean(x, 1)

    def encode_coords(self, coords: np.ndarray, batch: int = 1024) -> np.ndarray:
        """Non-differentiable (N, dim) embeddings; coords is (N, 2) lat/lon."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        outs = []
        for i in range(0, len(coords), batch):
            chunk = coords[i : i + batch]
            g = ComputationGraph()
            outs.append(self.encode_batch_tensor(g, chunk[:, 0], chunk[:, 1]).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.config.dim))

    def encode_location(self, c: GeoCoordinate) -> np.ndarray:
        """Embedding (dim,) of a single coordinate."""
        return self.encode_coords(np.array([[c.lat, c.lon]]))[0]

    def encode_cell_centroids(self, cells: list[CellId]):
        """Embeddings of cell centroids, skipping cells without one.

        Returns:
            (embeddings (M, dim), kept): ``kept`` maps embedding rows to
            indices into ``cells``; cells whose planar center falls outside
            the projection image are skipped with a warning.
        """
        coords = []
        kept = []
        for i, cell in enumerate(cells):
            try:
                c = cell_centroid(cell)
            except DomainError:
                log.warning("skipping cell %s: centroid outside projection image", cell)
                continue
            coords.append((c.lat, c.lon))
            kept.append(i)
        if not coords:
            return np.zeros((0, self.config.dim)), []
        return self.encode_coords(np.array(coords)), kept
