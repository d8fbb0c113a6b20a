"""Dataset-construction pipeline.

Observations are split temporally (evaluation year vs. surrounding training
years), partitioned into geocells, thinned per cell by greedy farthest-point
sampling with a minimum-separation stop rule, and cells left with too few
selections are discarded. The result is a pair of deterministic manifests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .geo import CellId, GeoCoordinate, cell_of, haversine_m
from .io_utils import atomic_write_text

log = logging.getLogger(__name__)

EVAL_YEAR = 2023
TRAIN_YEAR_MIN = 2017
TRAIN_YEAR_MAX = 2024

DEFAULT_LEVEL = 16
DEFAULT_BUDGET = 120
DEFAULT_MIN_SEP_M = 40.0
DEFAULT_MIN_COUNT = 5


@dataclass(frozen=True)
class Observation:
    id: int
    coord: GeoCoordinate
    timestamp: int  # seconds since epoch, UTC


@dataclass(frozen=True)
class ManifestRecord:
    id: int
    coord: GeoCoordinate
    timestamp: int
    cell: CellId


@dataclass
class SampleManifest:
    split: str  # "train" or "eval"
    records: List[ManifestRecord]
    config_hash: str
    seed: int


def partition(
    observations: Sequence[Observation], level: int
) -> Dict[CellId, List[Observation]]:
    """Bucket observations by containing cell; empty cells are absent."""
    buckets: Dict[CellId, List[Observation]] = {}
    for obs in observations:
        buckets.setdefault(cell_of(obs.coord, level), []).append(obs)
    return buckets


def fps_select(
    points: Sequence[Observation],
    budget: int = DEFAULT_BUDGET,
    min_sep: float = DEFAULT_MIN_SEP_M,
) -> List[Observation]:
    """Greedy farthest-point sampling with a separation stop rule.

    Starts from the observation with the smallest id, then repeatedly adds
    the point maximizing its minimum haversine distance to the selected set
    (ties broken by smaller id). Stops when the budget is reached or the best
    candidate would sit closer than ``min_sep`` to the selection; every
    selected pair is therefore at least ``min_sep`` apart.

    Returns selections in selection order.
    """
    if budget < 1:
        raise ConfigError(f"fps budget must be >= 1, got {budget}")
    if min_sep <= 0:
        raise ConfigError(f"fps min_sep must be positive, got {min_sep}")
    if not points:
        return []
    ids = np.array([p.id for p in points], dtype=np.int64)
    lats = np.array([p.coord.lat for p in points])
    lons = np.array([p.coord.lon for p in points])

    start = int(np.argmin(ids))
    selected = [start]
    dist = haversine_m(lats, lons, lats[start], lons[start])
    dist[start] = -1.0
    while len(selected) < budget:
        best = dist.max()
        if best < min_sep:
            break
        candidates = np.flatnonzero(dist == best)
        nxt = int(candidates[np.argmin(ids[candidates])])
        selected.append(nxt)
        dist = np.minimum(dist, haversine_m(lats, lons, lats[nxt], lons[nxt]))
        dist[nxt] = -1.0
    return [points[i] for i in selected]


def filter_cells(
    buckets: Dict[CellId, List[Observation]], min_count: int = DEFAULT_MIN_COUNT
) -> Dict[CellId, List[Observation]]:
    """Drop cells holding fewer than ``min_count`` observations."""
    return {cell: obs for cell, obs in buckets.items() if len(obs) >= min_count}


def observation_year(obs: Observation) -> int:
    return datetime.fromtimestamp(obs.timestamp, tz=timezone.utc).year


def temporal_split(
    observations: Sequence[Observation],
) -> Tuple[List[Observation], List[Observation]]:
    """Split by UTC year: the evaluation year vs. the surrounding training
    years; anything outside the covered range is dropped (count logged)."""
    train: List[Observation] = []
    eval_: List[Observation] = []
    dropped = 0
    for obs in observations:
        year = observation_year(obs)
        if year == EVAL_YEAR:
            eval_.append(obs)
        elif TRAIN_YEAR_MIN <= year <= TRAIN_YEAR_MAX:
            train.append(obs)
        else:
            dropped += 1
    log.info(
        "temporal split: %d train, %d eval, %d dropped (outside %d-%d)",
        len(train), len(eval_), dropped, TRAIN_YEAR_MIN, TRAIN_YEAR_MAX,
    )
    return train, eval_


def build_manifest(
    observations: Sequence[Observation],
    level: int = DEFAULT_LEVEL,
    budget: int = DEFAULT_BUDGET,
    min_sep: float = DEFAULT_MIN_SEP_M,
    min_count: int = DEFAULT_MIN_COUNT,
    seed: int = 0,
    config_hash: str = "",
) -> Tuple[SampleManifest, SampleManifest]:
    """Run the full pipeline: split, partition, FPS, filter, sort.

    Records are sorted by (cell, id) so manifests are byte-identical across
    reruns with the same configuration.
    """
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    if min_sep <= 0:
        raise ConfigError(f"min_sep must be positive, got {min_sep}")
    ids = [o.id for o in observations]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate observation ids")

    manifests = []
    for split, obs in zip(("train", "eval"), temporal_split(observations)):
        records: List[ManifestRecord] = []
        buckets = partition(obs, level)
        selected = {cell: fps_select(pts, budget, min_sep) for cell, pts in buckets.items()}
        for cell, pts in filter_cells(selected, min_count).items():
            records.extend(
                ManifestRecord(p.id, p.coord, p.timestamp, cell) for p in pts
            )
        records.sort(key=lambda r: (r.cell, r.id))
        manifests.append(SampleManifest(split, records, config_hash, seed))
    return manifests[0], manifests[1]


MANIFEST_HEADER = "id,lat,lon,timestamp,cell_id"


def format_manifest(manifest: SampleManifest) -> str:
    lines = [f"# config_hash={manifest.config_hash} seed={manifest.seed}", MANIFEST_HEADER]
    for r in manifest.records:
        lines.append(f"{r.id},{r.coord.lat:.9f},{r.coord.lon:.9f},{r.timestamp},{r.cell}")
    return "\n".join(lines) + "\n"


def write_manifest(path: str, manifest: SampleManifest):
    atomic_write_text(path, format_manifest(manifest))


def read_manifest(path: str, split: str = "train") -> SampleManifest:
    config_hash, seed = "", 0
    records: List[ManifestRecord] = []
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("config_hash="):
                    config_hash = tok.split("=", 1)[1]
                elif tok.startswith("seed="):
                    seed = int(tok.split("=", 1)[1])
            continue
        if line != MANIFEST_HEADER:
            raise DataError(f"{path} line {i + 1}: expected header {MANIFEST_HEADER!r}")
        body_start = i + 1
        break
    for i, line in enumerate(lines[body_start:], start=body_start + 1):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{path} line {i}: expected 5 fields, got {len(parts)}")
        try:
            records.append(
                ManifestRecord(
                    int(parts[0]),
                    GeoCoordinate(float(parts[1]), float(parts[2])),
                    int(parts[3]),
                    CellId.parse(parts[4]),
                )
            )
        except (ValueError, DataError) as exc:
            raise DataError(f"{path} line {i}: {exc}") from exc
    return SampleManifest(split, records, config_hash, seed)


def read_observations_csv(path: str) -> List[Observation]:
    """Parse an observation CSV with header id,lat,lon,timestamp."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    rows = [(i + 1, ln) for i, ln in enumerate(lines) if ln and not ln.startswith("#")]
    if not rows:
        return []
    first_no, header = rows[0]
    if header.strip() != "id,lat,lon,timestamp":
        raise DataError(f"{path} line {first_no}: expected header 'id,lat,lon,timestamp'")
    out = []
    for lineno, line in rows[1:]:
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path} line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            out.append(
                Observation(
                    int(parts[0]),
                    GeoCoordinate(float(parts[1]), float(parts[2])),
                    int(parts[3]),
                )
            )
        except ValueError as exc:
            raise DataError(f"{path} line {lineno}: {exc}") from exc
    return out
