"""Multi-way all-pairs InfoNCE objective.

For every ordered modality pair (m, n), rows of the two embedding blocks are
l2-normalized, their cosine similarity matrix is divided by the temperature,
and the co-located diagonal entry is contrasted against the rest of its row.
The total loss averages over ordered pairs; diagonal pairs (m = m) can be
included to follow the literal M^2 enumeration, or excluded (the default,
since a self-pair's positive is the query itself).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .modality import MODALITIES, BatchEmbeddings
from .tensor import Parameter, Tensor

#: Temperature bounds applied after every optimizer step.
TAU_MIN = 1e-3
TAU_MAX = 10.0

#: Default initial temperature (CLIP-style 0.07).
TAU_INIT = 0.07


@dataclass
class LossConfig:
    tau_init: float = TAU_INIT
    include_self_pairs: bool = False

    def make_log_tau(self) -> Parameter:
        if not TAU_MIN <= self.tau_init <= TAU_MAX:
            raise ConfigError(
                f"tau_init {self.tau_init} outside [{TAU_MIN}, {TAU_MAX}]"
            )
        return Parameter("loss/log_tau", np.array(math.log(self.tau_init)))


def clamp_log_tau(log_tau: Parameter):
    """Clamp the learnable temperature into [TAU_MIN, TAU_MAX] after a step."""
    np.clip(log_tau.value, math.log(TAU_MIN), math.log(TAU_MAX), out=log_tau.value)


def _as_tau_tensor(graph, tau: Union[float, Tensor]) -> Tensor:
    if isinstance(tau, Tensor):
        if tau.data.shape != ():
            raise ShapeError(f"temperature must be scalar, got shape {tau.data.shape}")
        return tau
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return graph.constant(float(tau))


def pairwise_infonce(fm: Tensor, fn: Tensor, tau: Union[float, Tensor]) -> Tensor:
    """InfoNCE of modality m against modality n (one direction).

    Both blocks are (B, D); row i of each refers to the same location. Rows
    are l2-normalized internally, so the loss is invariant to positive
    rescaling of any embedding row.
    """
    if fm.data.shape != fn.data.shape or fm.data.ndim != 2:
        raise ShapeError(
            f"pairwise_infonce expects matching (B, D) blocks, got "
            f"{fm.data.shape} and {fn.data.shape}"
        )
    graph = fm.graph
    logits = T.mul_scalar(
        T.matmul(T.l2_normalize(fm), T.transpose(T.l2_normalize(fn))),
        T.reciprocal(_as_tau_tensor(graph, tau)),
    )
    return T.mean_all(T.sub(T.logsumexp(logits), T.diag(logits)))


def total_loss(
    batch: BatchEmbeddings,
    tau: Union[float, Tensor],
    include_self_pairs: bool = False,
) -> Tuple[Tensor, Dict[str, float]]:
    """Mean InfoNCE over all ordered modality pairs.

    Returns the scalar loss tensor and the per-pair values ("m->n" keys) in
    a fixed canonical order for logging. Each block is normalized once and
    each unordered pair shares one similarity matrix; the reverse direction
    reads its logits from the transpose, which matches pairwise_infonce.
    """
    present = [m for m in MODALITIES if m in batch.blocks]
    present += sorted(set(batch.blocks) - set(present))
    if len(present) < 2:
        raise ConfigError(f"contrastive loss needs >= 2 modalities, got {present}")
    graph = next(iter(batch.blocks.values())).graph
    inv_tau = T.reciprocal(_as_tau_tensor(graph, tau))
    normed = {m: T.l2_normalize(batch.blocks[m]) for m in present}

    def directed(logits: Tensor) -> Tensor:
        return T.mean_all(T.sub(T.logsumexp(logits), T.diag(logits)))

    terms: Dict[str, Tensor] = {}
    for i, m in enumerate(present):
        for n in present[i:]:
            if m == n and not include_self_pairs:
                continue
            logits = T.mul_scalar(T.matmul(normed[m], T.transpose(normed[n])), inv_tau)
            terms[f"{m}->{n}"] = directed(logits)
            if n != m:
                terms[f"{n}->{m}"] = directed(T.transpose(logits))

    ordered = [
        f"{m}->{n}"
        for m in present
        for n in present
        if f"{m}->{n}" in terms
    ]
    total = terms[ordered[0]]
    for key in ordered[1:]:
        total = T.add(total, terms[key])
    pair_values = {key: float(terms[key].data) for key in ordered}
    return T.scale(total, 1.0 / len(ordered)), pair_values


def similarity(fm: np.ndarray, fn: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix between the rows of two blocks.

    Raises:
        DomainError: on any zero-norm row.
        ShapeError: on mismatched embedding dims.
    """
    fm = np.asarray(fm, dtype=np.float64)
    fn = np.asarray(fn, dtype=np.float64)
    if fm.ndim != 2 or fn.ndim != 2 or fm.shape[1] != fn.shape[1]:
        raise ShapeError(f"similarity expects (Q, D) and (G, D), got {fm.shape}, {fn.shape}")
    nm = np.linalg.norm(fm, axis=1, keepdims=True)
    nn = np.linalg.norm(fn, axis=1, keepdims=True)
    if np.any(nm == 0.0) or np.any(nn == 0.0):
        raise DomainError("similarity: zero-norm embedding row")
    return np.clip((fm / nm) @ (fn / nn).T, -1.0, 1.0)
