"""Co-located five-modality synthetic data.

A fixed random smooth latent field z over the Equal Earth plane (sinusoidal
features through a frozen mixing matrix and tanh) provides the shared
geographic content. Each feature modality observes tanh(W_m z) plus
independent Gaussian noise; the gps modality carries only the coordinate.
All randomness is fully determined by the seeds.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .coord_encoder import RffBank, rff_tokens
from .errors import ConfigError, DataError
from .geo import GeoCoordinate, project
from .io_utils import atomic_write_bytes
from .modality import FEATURE_MODALITIES

#: Timestamp range covered by the generator: 2017-01-01 .. 2025-01-01 UTC.
TS_MIN = 1483228800
TS_MAX = 1735689600

DEFAULT_INPUT_DIM = 32
DEFAULT_LATENT_DIM = 16
DEFAULT_NOISE = 0.05


@dataclass(frozen=True)
class Bbox:
    """Geographic box: west/east longitudes, south/north latitudes."""

    west: float
    south: float
    east: float
    north: float

    def __post_init__(self):
        if not (-180.0 <= self.west < self.east <= 180.0):
            raise ConfigError(f"degenerate longitude range [{self.west}, {self.east}]")
        if not (-90.0 <= self.south < self.north <= 90.0):
            raise ConfigError(f"degenerate latitude range [{self.south}, {self.north}]")

    @classmethod
    def parse(cls, text: str) -> "Bbox":
        parts = text.split(",")
        if len(parts) != 4:
            raise ConfigError(f"bbox must be 'west,south,east,north', got {text!r}")
        return cls(*(float(p) for p in parts))

    def __str__(self) -> str:
        return f"{self.west},{self.south},{self.east},{self.north}"


@dataclass
class MultimodalSample:
    id: int
    coord: GeoCoordinate
    timestamp: int
    raw: Dict[str, np.ndarray]  # float32 feature vectors, gps excluded


class LatentField:
    """Deterministic smooth map from locations to a latent vector.

    Built from a dedicated sinusoidal bank over bbox-normalized planar
    coordinates, a fixed random mixing matrix, and tanh; smooth by
    construction since the spectral bank has bounded frequencies.
    """

    def __init__(
        self,
        seed: int,
        bbox: Bbox,
        latent_dim: int = DEFAULT_LATENT_DIM,
        scales: Sequence[float] = (1.0, 4.0),
        bank_dim: int = 64,
    ):
        self.seed = seed
        self.bbox = bbox
        self.latent_dim = latent_dim
        self.bank = RffBank(seed, scales, bank_dim)
        x0, x1 = sorted(project(np.array([0.0, 0.0]), np.array([bbox.west, bbox.east]))[0])
        # x extent varies with latitude; widest span within the box bounds it
        xs, _ = project(
            np.linspace(bbox.south, bbox.north, 513).repeat(2),
            np.tile(np.array([bbox.west, bbox.east]), 513),
        )
        self._x0, self._x1 = float(xs.min()), float(xs.max())
        ys = project(np.array([bbox.south, bbox.north]), np.array([0.0, 0.0]))[1]
        self._y0, self._y1 = float(ys[0]), float(ys[1])
        fan = len(scales) * bank_dim
        rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
        self.mix = rng.normal(0.0, 1.7 / math.sqrt(fan), size=(fan, latent_dim))
        self._modality_mats: Dict[Tuple[str, int], np.ndarray] = {}

    def normalized_plane(self, lats, lons) -> np.ndarray:
        """Planar coordinates affinely mapped to [-1, 1]^2 by the bbox."""
        x, y = project(lats, lons)
        u = 2.0 * (x - self._x0) / (self._x1 - self._x0) - 1.0
        v = 2.0 * (y - self._y0) / (self._y1 - self._y0) - 1.0
        return np.stack([u, v], axis=-1)

    def latent(self, lats, lons) -> np.ndarray:
        """Latent vectors (N, latent_dim) for arrays of degrees."""
        uv = self.normalized_plane(np.atleast_1d(lats), np.atleast_1d(lons))
        toks = rff_tokens(self.bank, uv)
        feats = toks.reshape(toks.shape[0], -1)
        return np.tanh(feats @ self.mix)

    def modality_matrix(self, modality: str, input_dim: int) -> np.ndarray:
        """Fixed per-modality observation matrix, derived from the field seed."""
        key = (modality, input_dim)
        if key not in self._modality_mats:
            idx = FEATURE_MODALITIES.index(modality)
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, 500 + idx)))
            self._modality_mats[key] = rng.normal(
                0.0, 1.7 / math.sqrt(self.latent_dim), size=(input_dim, self.latent_dim)
            )
        return self._modality_mats[key]


def gen_locations(n: int, bbox: Bbox, seed: int) -> List[GeoCoordinate]:
    """n locations area-uniform over the bbox (uniform in the Equal Earth
    plane): longitude uniform, sine of latitude uniform."""
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    sin_lat = rng.uniform(
        math.sin(math.radians(bbox.south)), math.sin(math.radians(bbox.north)), n
    )
    lats = np.degrees(np.arcsin(sin_lat))
    lons = rng.uniform(bbox.west, bbox.east, n)
    return [GeoCoordinate(float(a), float(o)) for a, o in zip(lats, lons)]


def gen_sample(
    field: LatentField,
    sample_id: int,
    coord: GeoCoordinate,
    timestamp: int,
    noise_scale: float,
    seed: int,
    input_dims: Dict[str, int],
) -> MultimodalSample:
    """One co-located sample: tanh(W_m z) plus N(0, noise_scale^2) noise."""
    z = field.latent(coord.lat, coord.lon)[0]
    raw = {}
    for k, m in enumerate(FEATURE_MODALITIES):
        w = field.modality_matrix(m, input_dims[m])
        rng = np.random.default_rng(np.random.SeedSequence((seed, sample_id, k)))
        base = np.tanh(w @ z)
        raw[m] = (base + rng.normal(0.0, noise_scale, input_dims[m])).astype(np.float32)
    return MultimodalSample(sample_id, coord, timestamp, raw)


def gen_dataset(
    field: LatentField,
    n: int,
    seed: int,
    noise_scale: float = DEFAULT_NOISE,
    input_dims: Optional[Dict[str, int]] = None,
    id_start: int = 0,
) -> List[MultimodalSample]:
    """Generate n samples at fresh locations with uniform timestamps."""
    if input_dims is None:
        input_dims = {m: DEFAULT_INPUT_DIM for m in FEATURE_MODALITIES}
    coords = gen_locations(n, field.bbox, seed)
    ts_rng = np.random.default_rng(np.random.SeedSequence((seed, 424242)))
    stamps = ts_rng.integers(TS_MIN, TS_MAX, size=n)
    return [
        gen_sample(field, id_start + i, c, int(t), noise_scale, seed, input_dims)
        for i, (c, t) in enumerate(zip(coords, stamps))
    ]


MAGIC = b"GSYN"
VERSION = 1
# header: magic(4) version(u16) count(u64) n_mod(u8) dims(u32 x 4)
# record: id(u64) lat(f64) lon(f64) ts(i64) features(f32 x sum(dims))


def serialize_dataset(samples: Sequence[MultimodalSample], input_dims: Dict[str, int]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<Q", len(samples))
    out += struct.pack("<B", len(FEATURE_MODALITIES))
    for m in FEATURE_MODALITIES:
        out += struct.pack("<I", input_dims[m])
    for s in samples:
        out += struct.pack("<Qddq", s.id, s.coord.lat, s.coord.lon, s.timestamp)
        for m in FEATURE_MODALITIES:
            vec = np.ascontiguousarray(s.raw[m], dtype="<f4")
            if vec.shape != (input_dims[m],):
                raise DataError(
                    f"sample {s.id}: {m} feature shape {vec.shape} != ({input_dims[m]},)"
                )
            out += vec.tobytes()
    return bytes(out)


def write_dataset(path: str, samples: Sequence[MultimodalSample], input_dims: Dict[str, int]):
    atomic_write_bytes(path, serialize_dataset(samples, input_dims))


def read_dataset(path: str) -> Tuple[List[MultimodalSample], Dict[str, int]]:
    """Load samples and per-modality input dims from a GSYN file.

    Raises:
        DataError: naming the byte offset on truncation or corruption.
    """
    with open(path, "rb") as f:
        data = f.read()

    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated at byte {pos} (needed {n} more)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise DataError(f"{path}: bad magic at byte 0 (not a GSYN file)")
    version = struct.unpack("<H", take(2))[0]
    if version != VERSION:
        raise DataError(f"{path}: unsupported GSYN version {version}")
    count = struct.unpack("<Q", take(8))[0]
    n_mod = struct.unpack("<B", take(1))[0]
    if n_mod != len(FEATURE_MODALITIES):
        raise DataError(f"{path}: expected {len(FEATURE_MODALITIES)} modalities, got {n_mod}")
    input_dims = {
        m: struct.unpack("<I", take(4))[0] for m in FEATURE_MODALITIES
    }
    samples = []
    for _ in range(count):
        sid, lat, lon, ts = struct.unpack("<Qddq", take(32))
        raw = {}
        for m in FEATURE_MODALITIES:
            d = input_dims[m]
            raw[m] = np.frombuffer(take(4 * d), dtype="<f4").copy()
        samples.append(MultimodalSample(sid, GeoCoordinate(lat, lon), ts, raw))
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    return samples, input_dims
