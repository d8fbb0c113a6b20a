"""Training loop: encoders, multi-way contrastive loss, Adam, checkpointing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import assign_parameters, read_checkpoint, write_checkpoint
from .config import RunConfig
from .coord_encoder import CoordEncoder
from .errors import ConfigError, NumericError
from .io_utils import atomic_write_text
from .loss import LossConfig, clamp_log_tau, total_loss
from .modality import FEATURE_MODALITIES, EncoderSet, ModalityEncoder, encode_batch
from .nn import Adam
from .tensor import ComputationGraph, Parameter

log = logging.getLogger(__name__)


def build_encoders(cfg: RunConfig, input_dims: Dict[str, int]) -> EncoderSet:
    """Fresh encoders for the configured modalities, deterministic in seed."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    feature = {}
    for m in FEATURE_MODALITIES:  # fixed creation order keeps init deterministic
        if m in cfg.modalities:
            feature[m] = ModalityEncoder(m, input_dims[m], cfg.dim, rng)
    coord = CoordEncoder(cfg.coord_config(), rng) if "gps" in cfg.modalities else None
    return EncoderSet(feature, coord)


@dataclass
class Model:
    cfg: RunConfig
    input_dims: Dict[str, int]
    encoders: EncoderSet
    log_tau: Parameter

    def parameters(self) -> List[Parameter]:
        return self.encoders.parameters() + [self.log_tau]

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.value))


def new_model(cfg: RunConfig, input_dims: Dict[str, int]) -> Model:
    encoders = build_encoders(cfg, input_dims)
    log_tau = LossConfig(cfg.tau_init, cfg.include_self_pairs).make_log_tau()
    return Model(cfg, input_dims, encoders, log_tau)


class _BatchSampler:
    """Cycles through sample indices reshuffled with the run seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return out


@dataclass
class TrainResult:
    model: Model
    losses: List[float]
    log_lines: List[str]


def train(cfg: RunConfig, samples: Sequence, log_path: Optional[str] = None) -> TrainResult:
    """Train encoders with the all-pairs objective over sampled batches."""
    if not samples:
        raise ConfigError("no training samples")
    input_dims = {m: len(samples[0].raw[m]) for m in FEATURE_MODALITIES if m in samples[0].raw}
    model = new_model(cfg, input_dims)
    return train_model(model, samples, log_path)


def train_model(model: Model, samples: Sequence, log_path: Optional[str] = None) -> TrainResult:
    cfg = model.cfg
    sampler = _BatchSampler(len(samples), cfg.batch_size, cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    losses: List[float] = []
    lines: List[str] = []
    header_pairs: Optional[List[str]] = None
    for step in range(cfg.steps):
        idx = sampler.next_batch()
        graph = ComputationGraph()
        embs = encode_batch(model.encoders, [samples[i] for i in idx], graph, cfg.modalities)
        tau = T.exp(graph.param(model.log_tau))
        loss, pairs = total_loss(embs, tau, cfg.include_self_pairs)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss at step {step} (config {cfg.config_hash()})"
            )
        opt.zero_grad()
        graph.backward(loss)
        opt.step()
        clamp_log_tau(model.log_tau)
        if header_pairs is None:
            header_pairs = list(pairs)
            lines.append("# step,loss,tau," + ",".join(header_pairs))
        losses.append(value)
        lines.append(
            f"{step},{value:.9f},{model.tau:.9f},"
            + ",".join(f"{pairs[p]:.9f}" for p in header_pairs)
        )
        if step % 200 == 0:
            log.info("step %d loss %.4f tau %.4f", step, value, model.tau)
    if log_path:
        atomic_write_text(log_path, "\n".join(lines) + ("\n" if lines else ""))
    return TrainResult(model, losses, lines)


def checkpoint_config(model: Model) -> dict:
    return {"run": model.cfg.to_dict(), "input_dims": model.input_dims}


def save_model(path: str, model: Model):
    write_checkpoint(path, checkpoint_config(model), model.parameters())


def load_model(path: str) -> Model:
    config, arrays = read_checkpoint(path)
    cfg = RunConfig.from_dict(config["run"])
    input_dims = {m: int(d) for m, d in config["input_dims"].items()}
    model = new_model(cfg, input_dims)
    assign_parameters(model.parameters(), arrays)
    return model
