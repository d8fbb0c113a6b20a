"""Cross-modal retrieval, geocell localization, linear probing, PCA export.

Embeddings are l2-normalized and compared by cosine similarity; a query's
predicted location is the gallery candidate with the highest score (ties to
the smaller gallery id). Multi-gallery ensembling averages similarity
matrices entrywise before the argmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geo
from .errors import ConfigError, DataError, DomainError, ShapeError
from .geo import CellId, GeoCoordinate, haversine_m
from .io_utils import atomic_write_bytes
from .loss import similarity

DEFAULT_RADIUS_M = 100.0
DEFAULT_RIDGE_LAM = 1e-3


@dataclass
class EmbeddingStore:
    """Georeferenced embeddings of one modality; immutable after load."""

    modality: str
    ids: np.ndarray  # (n,) int64, unique
    coords: np.ndarray  # (n, 2) float64 lat/lon
    timestamps: np.ndarray  # (n,) int64
    vectors: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        n = len(self.ids)
        if self.vectors.ndim != 2 or len(self.vectors) != n or len(self.coords) != n:
            raise DataError(
                f"store {self.modality}: inconsistent lengths "
                f"(ids {n}, coords {len(self.coords)}, vectors {self.vectors.shape})"
            )
        if len(np.unique(self.ids)) != n:
            raise DataError(f"store {self.modality}: duplicate ids")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


STORE_MAGIC = b"GEMB"
STORE_VERSION = 1
# header: magic(4) version(u16) tag_len(u16) tag dim(u32) count(u64)
# record: id(u64) lat(f64) lon(f64) ts(i64) values(f32 x dim)


def serialize_store(store: EmbeddingStore) -> bytes:
    tag = store.modality.encode("utf-8")
    out = bytearray()
    out += STORE_MAGIC
    out += struct.pack("<H", STORE_VERSION)
    out += struct.pack("<H", len(tag))
    out += tag
    out += struct.pack("<I", store.dim)
    out += struct.pack("<Q", len(store))
    for i in range(len(store)):
        out += struct.pack(
            "<Qddq",
            int(store.ids[i]),
            float(store.coords[i, 0]),
            float(store.coords[i, 1]),
            int(store.timestamps[i]),
        )
        out += np.ascontiguousarray(store.vectors[i], dtype="<f4").tobytes()
    return bytes(out)


def write_store(path: str, store: EmbeddingStore):
    atomic_write_bytes(path, serialize_store(store))


def read_store(path: str) -> EmbeddingStore:
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

    if take(4) != STORE_MAGIC:
        raise DataError(f"{path}: bad magic at byte 0 (not a GEMB file)")
    version = struct.unpack("<H", take(2))[0]
    if version != STORE_VERSION:
        raise DataError(f"{path}: unsupported GEMB version {version}")
    modality = take(struct.unpack("<H", take(2))[0]).decode("utf-8")
    dim = struct.unpack("<I", take(4))[0]
    count = struct.unpack("<Q", take(8))[0]
    ids = np.empty(count, dtype=np.int64)
    coords = np.empty((count, 2), dtype=np.float64)
    stamps = np.empty(count, dtype=np.int64)
    vectors = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        sid, lat, lon, ts = struct.unpack("<Qddq", take(32))
        ids[i] = sid
        coords[i] = (lat, lon)
        stamps[i] = ts
        vectors[i] = np.frombuffer(take(4 * dim), dtype="<f4")
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    return EmbeddingStore(modality, ids, coords, stamps, vectors)


@dataclass
class SimilarityMatrix:
    """Query-vs-gallery cosine scores with both id orderings attached."""

    query_ids: np.ndarray
    gallery_ids: np.ndarray
    scores: np.ndarray  # (Q, G) in [-1, 1]

    def __post_init__(self):
        if self.scores.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise ShapeError(
                f"scores shape {self.scores.shape} does not match id lists "
                f"({len(self.query_ids)}, {len(self.gallery_ids)})"
            )


def build_similarity(queries: EmbeddingStore, gallery: EmbeddingStore) -> SimilarityMatrix:
    """Normalized cosine scores; rows and columns ordered by ascending id."""
    if queries.dim != gallery.dim:
        raise ShapeError(f"embedding dims differ: {queries.dim} vs {gallery.dim}")
    q_order = np.argsort(queries.ids)
    g_order = np.argsort(gallery.ids)
    scores = similarity(
        queries.vectors[q_order].astype(np.float64),
        gallery.vectors[g_order].astype(np.float64),
    )
    return SimilarityMatrix(queries.ids[q_order], gallery.ids[g_order], scores)


def ensemble(mats: Sequence[SimilarityMatrix]) -> SimilarityMatrix:
    """Entrywise mean of similarity matrices over identical id lists.

    Computed as base + mean(differences), which is exact (bit-for-bit) when
    all matrices are identical.
    """
    if not mats:
        raise ConfigError("ensemble of zero matrices")
    base = mats[0]
    for m in mats[1:]:
        if m.scores.shape != base.scores.shape:
            raise ShapeError(
                f"ensemble shape mismatch: {m.scores.shape} vs {base.scores.shape}"
            )
        if not (
            np.array_equal(m.query_ids, base.query_ids)
            and np.array_equal(m.gallery_ids, base.gallery_ids)
        ):
            raise DataError("ensemble id lists differ")
    mean = base.scores.copy()
    if len(mats) > 1:
        delta = np.zeros_like(base.scores)
        for m in mats[1:]:
            delta += m.scores - base.scores
        mean = base.scores + delta / len(mats)
    return SimilarityMatrix(base.query_ids.copy(), base.gallery_ids.copy(), mean)


def top1_localize(
    sim: SimilarityMatrix, gallery: EmbeddingStore
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-query predicted coordinate and gallery id.

    Ties resolve to the smaller gallery id (columns ascend by id and argmax
    returns the first maximum).
    """
    if len(gallery) == 0:
        raise DataError("empty gallery")
    g_order = np.argsort(gallery.ids)
    sorted_coords = gallery.coords[g_order]
    best = np.argmax(sim.scores, axis=1)
    return sorted_coords[best], sim.gallery_ids[best]


def match_rate(sim: SimilarityMatrix) -> float:
    """Fraction of queries whose top gallery id equals their own id."""
    best = np.argmax(sim.scores, axis=1)
    return float(np.mean(sim.gallery_ids[best] == sim.query_ids))


def acc_at_distance(
    preds: np.ndarray, truths: np.ndarray, radius: float = DEFAULT_RADIUS_M
) -> float:
    """Share of predictions within ``radius`` meters of the truth."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    if len(preds) == 0:
        raise DataError("acc_at_distance on empty input")
    if len(preds) != len(truths):
        raise DataError(f"length mismatch: {len(preds)} preds vs {len(truths)} truths")
    d = haversine_m(preds[:, 0], preds[:, 1], truths[:, 0], truths[:, 1])
    return float(np.mean(d <= radius))


@dataclass
class GeocellResult:
    pred_coords: np.ndarray  # (Q, 2) predicted centroid coordinates
    pred_cells: List[CellId]  # per-query winning cell
    cells: List[CellId]  # gallery cells actually encoded (skips removed)


def geocell_retrieve(
    queries: EmbeddingStore, cells: Sequence[CellId], encoder
) -> GeocellResult:
    """Retrieve against encoded cell centroids.

    The gallery is the centroid embedding of every usable cell; each query
    maps to the centroid of its best-scoring cell (ties to the first cell in
    list order).
    """
    if not cells:
        raise ConfigError("geocell retrieval needs at least one cell")
    embs, kept = encoder.encode_cell_centroids(list(cells))
    if not kept:
        raise DataError("no cell centroid could be encoded")
    kept_cells = [cells[i] for i in kept]
    centroids = np.array(
        [(c.lat, c.lon) for c in (geo.cell_centroid(cell) for cell in kept_cells)]
    )
    scores = similarity(queries.vectors.astype(np.float64), embs)
    best = np.argmax(scores, axis=1)
    return GeocellResult(
        centroids[best], [kept_cells[i] for i in best], kept_cells
    )


def cell_half_diagonal_m(cell: CellId) -> float:
    """Half the ground diagonal of a cell, from its planar corners."""
    n = 1 << cell.level
    w, h = geo.X_MAX / n, geo.Y_MAX / n  # half cell extents
    center = geo.cell_center_plane(cell)
    lat0, lon0 = geo.unproject(center.x - w, center.y - h)
    lat1, lon1 = geo.unproject(center.x + w, center.y + h)
    return float(haversine_m(lat0, lon0, lat1, lon1)) / 2.0


def geocell_accuracy(result: GeocellResult, truths: np.ndarray) -> float:
    """Fraction of queries whose true location lies within half the winning
    cell's diagonal of the predicted centroid."""
    truths = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    d = haversine_m(
        result.pred_coords[:, 0], result.pred_coords[:, 1], truths[:, 0], truths[:, 1]
    )
    limits = np.array([cell_half_diagonal_m(c) for c in result.pred_cells])
    return float(np.mean(d <= limits))


@dataclass
class ProbeTask:
    """Frozen-feature linear probe specification."""

    kind: str  # "regression" or "classification"
    features: np.ndarray  # (N, D)
    targets: np.ndarray  # (N,) reals or integer class labels
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ConfigError(f"unknown probe kind {self.kind!r}")
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ConfigError("probe train/test splits overlap")
        if self.kind == "classification" and len(np.unique(self.targets)) < 2:
            raise ConfigError("classification probe needs >= 2 classes")


def _ridge_solve(x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Closed-form ridge with an unpenalized intercept column appended."""
    xa = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    penalty = lam * np.eye(xa.shape[1])
    penalty[-1, -1] = 0.0
    lhs = xa.T @ xa + penalty
    try:
        beta = np.linalg.solve(lhs, xa.T @ y)
    except np.linalg.LinAlgError as exc:
        raise DomainError(
            "ridge normal matrix is singular; rerun with a positive lam"
        ) from exc
    if lam == 0.0 and not np.all(np.isfinite(beta)):
        raise DomainError("ridge normal matrix is singular; rerun with a positive lam")
    return beta


def linear_probe(task: ProbeTask, lam: float = DEFAULT_RIDGE_LAM) -> float:
    """Train a linear readout on the train split and score the test split.

    Regression returns R^2 on the test split; classification returns overall
    accuracy of a one-vs-rest ridge on one-hot targets.
    """
    x = np.asarray(task.features, dtype=np.float64)
    x_train, x_test = x[task.train_idx], x[task.test_idx]
    if task.kind == "regression":
        y = np.asarray(task.targets, dtype=np.float64)
        beta = _ridge_solve(x_train, y[task.train_idx], lam)
        pred = np.concatenate([x_test, np.ones((len(x_test), 1))], axis=1) @ beta
        resid = y[task.test_idx] - pred
        total = y[task.test_idx] - y[task.test_idx].mean()
        return float(1.0 - np.sum(resid**2) / np.sum(total**2))
    classes = np.unique(task.targets)
    onehot = (np.asarray(task.targets).reshape(-1, 1) == classes).astype(np.float64)
    beta = _ridge_solve(x_train, onehot[task.train_idx], lam)
    scores = np.concatenate([x_test, np.ones((len(x_test), 1))], axis=1) @ beta
    pred = classes[np.argmax(scores, axis=1)]
    return float(np.mean(pred == np.asarray(task.targets)[task.test_idx]))


@dataclass
class PcaResult:
    components: np.ndarray  # (k, D), orthonormal rows, variance-ordered
    eigenvalues: np.ndarray  # (k,), non-increasing
    explained_ratio: np.ndarray  # (k,)
    mean: np.ndarray  # (D,)
    projections: np.ndarray  # (N, k)
    scaled: np.ndarray  # (N, k) per-component min-max scaled into [0, 1]


def pca_export(store, k: int = 3) -> PcaResult:
    """Top-k principal components of a store's vectors via the covariance
    eigendecomposition, plus projections rescaled per component for RGB use."""
    x = np.asarray(getattr(store, "vectors", store), dtype=np.float64)
    n = len(x)
    if n <= k:
        raise DomainError(f"PCA needs more than k={k} records, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    comps = eigvecs[:, order].T
    for row in comps:  # deterministic sign: largest-magnitude entry positive
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    proj = xc @ comps.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = np.where(hi > lo, (proj - lo) / span, 0.5)
    total = np.trace(cov)
    return PcaResult(
        comps,
        eigvals[order],
        eigvals[order] / total,
        mean,
        proj,
        scaled,
    )


def format_metrics(rows: Sequence[Dict]) -> str:
    """Structured-text metrics report, one task per line."""
    lines = []
    for row in rows:
        parts = [f"task={row['task']}"]
        for key in ("radius_m", "accuracy", "match_rate", "n_queries", "config_hash"):
            if key in row and row[key] is not None:
                val = row[key]
                parts.append(f"{key}={val:.6f}" if isinstance(val, float) else f"{key}={val}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
