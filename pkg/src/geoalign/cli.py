"""Command-line orchestration.

Subcommands cover the whole pipeline: synthesize data, build sampling
manifests, train, encode embedding stores, evaluate retrieval, run the
depth ablation, linear probing, and PCA export. Every output embeds the
resolved config hash; identical config and seed reproduce identical files.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from typing import List, Optional

import numpy as np

from . import geo, retrieval, sampler, synthdata, training
from .config import RunConfig, resolve_config
from .errors import ConfigError, DataError, DomainError, NumericError, ShapeError
from .io_utils import atomic_write_text
from .modality import FEATURE_MODALITIES, MODALITIES
from .sampler import Observation

log = logging.getLogger("geoalign")

DEFAULT_BBOX = "-100,35,-90,45"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file (flat key = value with sections)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--scales", type=lambda s: tuple(float(x) for x in s.split(",")))
    p.add_argument("--depth", type=int)
    p.add_argument("--registers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--tau-init", dest="tau_init", type=float)
    p.add_argument(
        "--include-self-pairs", dest="include_self_pairs", action="store_const", const=True
    )
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument(
        "--modalities", type=lambda s: tuple(m.strip() for m in s.split(",") if m.strip())
    )


_CONFIG_KEYS = (
    "seed", "dim", "scales", "depth", "registers", "heads", "tau_init",
    "include_self_pairs", "batch_size", "steps", "lr", "modalities",
)


def _resolve(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    return resolve_config(getattr(args, "config", None), overrides)


def cmd_synth(args) -> int:
    bbox = synthdata.Bbox.parse(args.bbox)
    field = synthdata.LatentField(args.field_seed, bbox, latent_dim=args.latent_dim)
    input_dims = {m: args.input_dim for m in FEATURE_MODALITIES}
    samples = synthdata.gen_dataset(
        field, args.n, seed=args.seed, noise_scale=args.noise,
        input_dims=input_dims, id_start=args.id_start,
    )
    synthdata.write_dataset(args.out, samples, input_dims)
    print(f"wrote {len(samples)} samples to {args.out} sha256={sha256_file(args.out)}")
    return 0


def _load_observations(path: str) -> List[Observation]:
    if path.endswith(".csv"):
        return sampler.read_observations_csv(path)
    samples, _ = synthdata.read_dataset(path)
    return [Observation(s.id, s.coord, s.timestamp) for s in samples]


def cmd_sample(args) -> int:
    obs = _load_observations(args.input)
    params = {
        "level": args.level, "budget": args.budget, "min_sep": args.min_sep,
        "min_count": args.min_count, "seed": args.seed,
    }
    config_hash = hashlib.sha256(
        json.dumps(params, sort_keys=True).encode()
    ).hexdigest()[:12]
    train_m, eval_m = sampler.build_manifest(
        obs, level=args.level, budget=args.budget, min_sep=args.min_sep,
        min_count=args.min_count, seed=args.seed, config_hash=config_hash,
    )
    for m, path in ((train_m, args.out_train), (eval_m, args.out_eval)):
        sampler.write_manifest(path, m)
        cells = {r.cell for r in m.records}
        per_cell = [sum(1 for r in m.records if r.cell == c) for c in cells]
        print(
            f"{m.split}: {len(m.records)} records in {len(cells)} cells "
            f"(min {min(per_cell) if per_cell else 0}, "
            f"max {max(per_cell) if per_cell else 0}) -> {path} "
            f"sha256={sha256_file(path)}"
        )
    return 0


def _manifest_filter(samples, manifest_path: Optional[str]):
    if not manifest_path:
        return samples
    manifest = sampler.read_manifest(manifest_path)
    wanted = {r.id for r in manifest.records}
    kept = [s for s in samples if s.id in wanted]
    missing = wanted - {s.id for s in kept}
    if missing:
        raise DataError(f"manifest ids missing from dataset: {sorted(missing)[:5]}")
    return kept


def cmd_train(args) -> int:
    cfg = _resolve(args)
    samples, _ = synthdata.read_dataset(args.data)
    samples = _manifest_filter(samples, args.manifest)
    result = training.train(cfg, samples, log_path=args.log)
    training.save_model(args.out, result.model)
    final = result.losses[-1] if result.losses else float("nan")
    print(
        f"trained {cfg.steps} steps (batch {min(cfg.batch_size, len(samples))}, "
        f"config {cfg.config_hash()}): final loss {final:.6f}, tau {result.model.tau:.4f}"
    )
    print(f"checkpoint {args.out} sha256={sha256_file(args.out)}")
    return 0


def cmd_encode(args) -> int:
    model = training.load_model(args.checkpoint)
    samples, _ = synthdata.read_dataset(args.data)
    m = args.modality
    if m not in MODALITIES:
        raise ConfigError(f"unknown modality {m!r}")
    if m == "gps":
        if model.encoders.coord is None:
            raise ConfigError("checkpoint has no coordinate encoder")
        coords = np.array([[s.coord.lat, s.coord.lon] for s in samples])
        vectors = model.encoders.coord.encode_coords(coords)
    else:
        if m not in model.encoders.feature:
            raise ConfigError(f"checkpoint has no encoder for modality {m!r}")
        raw = np.stack([s.raw[m] for s in samples]).astype(np.float64)
        vectors = model.encoders.feature[m].encode(raw)
    store = retrieval.EmbeddingStore(
        modality=m,
        ids=np.array([s.id for s in samples]),
        coords=np.array([[s.coord.lat, s.coord.lon] for s in samples]),
        timestamps=np.array([s.timestamp for s in samples]),
        vectors=vectors.astype(np.float32),
    )
    retrieval.write_store(args.out, store)
    print(
        f"encoded {len(store)} x {store.dim} ({m}) -> {args.out} "
        f"sha256={sha256_file(args.out)}"
    )
    return 0


def cmd_eval(args) -> int:
    queries = retrieval.read_store(args.queries)
    truth_by_id = dict(zip(queries.ids.tolist(), queries.coords))
    rows = []

    def evaluate(task: str, sim, gallery):
        preds, _ = retrieval.top1_localize(sim, gallery)
        truths = np.array([truth_by_id[i] for i in sim.query_ids.tolist()])
        rows.append({
            "task": task,
            "radius_m": args.radius,
            "accuracy": retrieval.acc_at_distance(preds, truths, args.radius),
            "match_rate": retrieval.match_rate(sim),
            "n_queries": len(sim.query_ids),
            "config_hash": args.config_hash,
        })

    galleries = [retrieval.read_store(p) for p in args.gallery]
    sims = []
    for g in galleries:
        sim = retrieval.build_similarity(queries, g)
        sims.append(sim)
        evaluate(f"{queries.modality}->{g.modality}", sim, g)
    if args.ensemble:
        if not galleries:
            raise ConfigError("--ensemble needs at least one gallery")
        evaluate(
            f"{queries.modality}->ensemble({','.join(g.modality for g in galleries)})",
            retrieval.ensemble(sims),
            galleries[0],
        )
    if args.geocell:
        model = training.load_model(args.checkpoint)
        cells = sorted({geo.cell_of(geo.GeoCoordinate(*c), args.level) for c in queries.coords})
        result = retrieval.geocell_retrieve(queries, cells, model.encoders.coord)
        truths = queries.coords
        rows.append({
            "task": f"{queries.modality}->geocell(L{args.level})",
            "accuracy": retrieval.geocell_accuracy(result, truths),
            "n_queries": len(queries),
            "config_hash": args.config_hash,
        })
    report = retrieval.format_metrics(rows)
    print(report, end="")
    if args.report:
        atomic_write_text(args.report, report)
    return 0


def cmd_ablate_depth(args) -> int:
    cfg = _resolve(args)
    samples, _ = synthdata.read_dataset(args.data)
    samples = _manifest_filter(samples, args.manifest)
    eval_samples, _ = synthdata.read_dataset(args.eval_data)
    results = {}
    for depth in args.depths:
        run_cfg = RunConfig.from_dict({**cfg.to_dict(), "depth": depth})
        res = training.train(run_cfg, samples)
        model = res.model
        street = model.encoders.feature["street"].encode(
            np.stack([s.raw["street"] for s in eval_samples]).astype(np.float64)
        )
        gps = model.encoders.coord.encode_coords(
            np.array([[s.coord.lat, s.coord.lon] for s in eval_samples])
        )
        from .loss import similarity

        sim = similarity(street, gps)
        acc = float(np.mean(np.argmax(sim, axis=1) == np.arange(len(eval_samples))))
        results[depth] = acc
        print(f"depth {depth}: street->gps top-1 {acc:.4f} (seed {run_cfg.seed})")
    if args.trend and 0 in results and 4 in results:
        ok = results[4] >= results[0]
        print(f"depth-4 >= depth-0: {'yes' if ok else 'no'}")
    return 0


def cmd_probe(args) -> int:
    store = retrieval.read_store(args.store)
    targets = {}
    with open(args.targets, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "id,value":
        raise DataError(f"{args.targets} line 1: expected header 'id,value'")
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{args.targets} line {i}: expected 2 fields")
        targets[int(parts[0])] = float(parts[1])
    if set(targets) != set(store.ids.tolist()) or len(targets) != len(store):
        raise DataError(
            f"targets rows ({len(targets)}) do not match store records ({len(store)})"
        )
    order = np.argsort(store.ids)
    y = np.array([targets[i] for i in store.ids[order].tolist()])
    if args.kind == "classification":
        y = y.astype(np.int64)
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(store))
    n_train = int(round(args.train_frac * len(store)))
    task = retrieval.ProbeTask(
        kind=args.kind,
        features=store.vectors[order].astype(np.float64),
        targets=y,
        train_idx=perm[:n_train],
        test_idx=perm[n_train:],
    )
    metric = retrieval.linear_probe(task, lam=args.lam)
    name = "r2" if args.kind == "regression" else "accuracy"
    print(f"task=probe:{args.kind} {name}={metric:.6f} n_train={n_train} "
          f"n_test={len(store) - n_train} lam={args.lam}")
    return 0


def cmd_pca(args) -> int:
    store = retrieval.read_store(args.store)
    result = retrieval.pca_export(store, k=args.k)
    lines = ["id,lat,lon," + ",".join(f"pc{i + 1}" for i in range(args.k))]
    for i in range(len(store)):
        comps = ",".join(f"{v:.6f}" for v in result.scaled[i])
        lines.append(
            f"{store.ids[i]},{store.coords[i, 0]:.9f},{store.coords[i, 1]:.9f},{comps}"
        )
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    ratios = ", ".join(f"{r:.4f}" for r in result.explained_ratio)
    print(f"wrote {len(store)} projections to {args.out} (explained ratios: {ratios})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoalign",
        description="Multimodal geospatial contrastive alignment at desk scale",
    )
    parser.add_argument("--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--bbox", default=DEFAULT_BBOX, help="west,south,east,north")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--field-seed", dest="field_seed", type=int, default=7)
    p.add_argument("--noise", type=float, default=synthdata.DEFAULT_NOISE)
    p.add_argument("--latent-dim", dest="latent_dim", type=int,
                   default=synthdata.DEFAULT_LATENT_DIM)
    p.add_argument("--input-dim", dest="input_dim", type=int,
                   default=synthdata.DEFAULT_INPUT_DIM)
    p.add_argument("--id-start", dest="id_start", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="build train/eval manifests")
    p.add_argument("--in", dest="input", required=True,
                   help="observations CSV (id,lat,lon,timestamp) or GSYN dataset")
    p.add_argument("--level", type=int, default=sampler.DEFAULT_LEVEL)
    p.add_argument("--budget", type=int, default=sampler.DEFAULT_BUDGET)
    p.add_argument("--min-sep", dest="min_sep", type=float, default=sampler.DEFAULT_MIN_SEP_M)
    p.add_argument("--min-count", dest="min_count", type=int, default=sampler.DEFAULT_MIN_COUNT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train", dest="out_train", required=True)
    p.add_argument("--out-eval", dest="out_eval", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train encoders with the multi-way objective")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", help="restrict training to manifest ids")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="write an embedding store for one modality")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--modality", required=True, choices=MODALITIES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="cross-modal retrieval metrics")
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", action="append", default=[])
    p.add_argument("--radius", type=float, default=retrieval.DEFAULT_RADIUS_M)
    p.add_argument("--ensemble", action="store_true")
    p.add_argument("--geocell", action="store_true")
    p.add_argument("--level", type=int, default=sampler.DEFAULT_LEVEL)
    p.add_argument("--checkpoint", help="needed for --geocell centroid encoding")
    p.add_argument("--config-hash", dest="config_hash", default="-")
    p.add_argument("--report", help="write the metrics report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-depth", help="train once per depth and compare retrieval")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--depths", type=lambda s: tuple(int(d) for d in s.split(",")),
                   default=(0, 4, 8, 12))
    p.add_argument("--trend", action="store_true",
                   help="print whether depth-4 >= depth-0")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate_depth)

    p = sub.add_parser("probe", help="linear probe on a store")
    p.add_argument("--store", required=True)
    p.add_argument("--targets", required=True, help="CSV id,value")
    p.add_argument("--kind", choices=("regression", "classification"), default="regression")
    p.add_argument("--lam", type=float, default=retrieval.DEFAULT_RIDGE_LAM)
    p.add_argument("--train-frac", dest="train_frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pca", help="export principal-component projections")
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DomainError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
