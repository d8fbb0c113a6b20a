"""Per-modality encoders mapping raw feature vectors into the shared space.

The four non-coordinate modalities use a 3-layer GELU MLP
(input_dim -> 4D -> 4D -> D) followed by a layer norm; coordinates go
through the multi-scale coordinate encoder. All encoders emit exactly D
dimensions and hold disjoint parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .coord_encoder import CoordEncoder
from .errors import ConfigError, ShapeError
from .nn import linear, normal_weight, ones_param, zeros_param
from .tensor import ComputationGraph, Parameter, Tensor

#: Closed set of modality names; "gps" is the coordinate modality.
MODALITIES = ("street", "aerial", "dsm", "text", "gps")
FEATURE_MODALITIES = ("street", "aerial", "dsm", "text")


def check_modality(name: str):
    if name not in MODALITIES:
        raise ConfigError(f"unknown modality {name!r}; expected one of {MODALITIES}")


class ModalityEncoder:
    """MLP encoder for one feature modality."""

    def __init__(self, modality: str, input_dim: int, dim: int, rng: np.random.Generator):
        check_modality(modality)
        if modality == "gps":
            raise ConfigError("gps uses the coordinate encoder, not an MLP")
        self.modality = modality
        self.input_dim = input_dim
        self.dim = dim
        hidden = 4 * dim
        prefix = f"enc/{modality}"
        self.w1 = normal_weight(f"{prefix}/w1", rng, input_dim, hidden)
        self.b1 = zeros_param(f"{prefix}/b1", hidden)
        self.w2 = normal_weight(f"{prefix}/w2", rng, hidden, hidden)
        self.b2 = zeros_param(f"{prefix}/b2", hidden)
        self.w3 = normal_weight(f"{prefix}/w3", rng, hidden, dim)
        self.b3 = zeros_param(f"{prefix}/b3", dim)
        self.ln_gain = ones_param(f"{prefix}/ln_gain", dim)
        self.ln_bias = zeros_param(f"{prefix}/ln_bias", dim)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3,
                self.ln_gain, self.ln_bias]

    def __call__(self, graph: ComputationGraph, raw: np.ndarray) -> Tensor:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.input_dim:
            raise ShapeError(
                f"{self.modality} encoder expects (B, {self.input_dim}), got {raw.shape}"
            )
        x = graph.constant(raw)
        h = T.gelu(linear(x, self.w1, self.b1))
        h = T.gelu(linear(h, self.w2, self.b2))
        e = linear(h, self.w3, self.b3)
        return T.layer_norm(e, graph.param(self.ln_gain), graph.param(self.ln_bias))

    def encode(self, raw: np.ndarray) -> np.ndarray:
        """Non-differentiable convenience forward."""
        return self(ComputationGraph(), raw).data


@dataclass
class BatchEmbeddings:
    """Per-modality (B, D) embedding blocks for one co-located batch."""

    blocks: Dict[str, Tensor]

    def __post_init__(self):
        shapes = {m: t.data.shape for m, t in self.blocks.items()}
        if len(set(shapes.values())) > 1:
            raise ShapeError(f"embedding blocks disagree on (B, D): {shapes}")

    @property
    def batch_size(self) -> int:
        return next(iter(self.blocks.values())).data.shape[0]


class EncoderSet:
    """All trainable encoders for a run: feature MLPs plus the coordinate encoder."""

    def __init__(self, feature: Dict[str, ModalityEncoder], coord: Optional[CoordEncoder]):
        self.feature = feature
        self.coord = coord

    def parameters(self) -> list[Parameter]:
        params = []
        for m in FEATURE_MODALITIES:
            if m in self.feature:
                params.extend(self.feature[m].parameters())
        if self.coord is not None:
            params.extend(self.coord.parameters())
        return params


def encode_batch(
    encoders: EncoderSet,
    samples: Sequence,
    graph: ComputationGraph,
    modalities: Sequence[str] = MODALITIES,
) -> BatchEmbeddings:
    """Encode every requested modality of a co-located batch.

    Each sample must supply every requested feature modality; the contrastive
    loss is defined over complete batches only.
    """
    if not samples:
        raise ConfigError("empty batch")
    blocks: Dict[str, Tensor] = {}
    for m in modalities:
        check_modality(m)
        if m == "gps":
            if encoders.coord is None:
                raise ConfigError("gps requested but no coordinate encoder configured")
            lats = np.array([s.coord.lat for s in samples])
            lons = np.array([s.coord.lon for s in samples])
            blocks[m] = encoders.coord.encode_batch_tensor(graph, lats, lons)
        else:
            if m not in encoders.feature:
                raise ConfigError(f"no encoder configured for modality {m!r}")
            rows = []
            for s in samples:
                if m not in s.raw:
                    raise ConfigError(f"sample {s.id} missing modality {m!r}")
                rows.append(np.asarray(s.raw[m], dtype=np.float64))
            blocks[m] = encoders.feature[m](graph, np.stack(rows))
    return BatchEmbeddings(blocks)
