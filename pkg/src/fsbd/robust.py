"""Byzantine-tolerant aggregation: Krum and FoolsGold.

Both take the same inputs as FedAvg and return a new global model, so the
orchestrator can swap them in per config. Krum is stateless; FoolsGold keeps a
per-participant history of accumulated deltas across rounds.
"""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from . import nn
from .errors import InputError
from .fl import UpdateMessage


def krum_select(deltas: np.ndarray, f: int) -> int:
    """Index of the update minimizing the summed squared distance to its m-f-2 nearest neighbors.

    Rows must be ordered by ascending participant id; ties resolve to the
    first (lowest-id) row. Falls back to using all other updates as neighbors
    when m < 2f + 3.
    """
    m = deltas.shape[0]
    k = m - f - 2
    if m < 2 * f + 3:
        warnings.warn(f"krum: m={m} < 2f+3={2 * f + 3}; scoring over all available neighbors")
        k = m - 1
    sq_norms = np.einsum("id,id->i", deltas, deltas)
    d2 = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (deltas @ deltas.T)
    np.fill_diagonal(d2, np.inf)
    d2 = np.maximum(d2, 0.0)
    scores = np.zeros(m)
    if k > 0:
        part = np.sort(d2, axis=1)[:, :k]
        scores = part.sum(axis=1)
    return int(np.argmin(scores))


def krum_aggregate(global_model: nn.Model, updates: Sequence[UpdateMessage], f: int) -> nn.Model:
    """Apply the single Krum-selected update to the global model."""
    if not updates:
        raise InputError("no updates to aggregate")
    for u in updates:
        global_model.params.require_same_layout(u.delta)
    ordered = sorted(updates, key=lambda u: u.participant_id)
    deltas = np.stack([u.delta.values for u in ordered]).astype(np.float64)
    chosen = ordered[krum_select(deltas, f)]
    return global_model.with_params(global_model.params + chosen.delta)


class FoolsGoldState:
    """Accumulated per-participant update history, persisted across rounds."""

    def __init__(self, logit_base: float = 99.0):
        self.histories: dict[int, np.ndarray] = {}
        self.logit_base = float(logit_base)

    def accumulate(self, updates: Sequence[UpdateMessage]) -> None:
        for u in updates:
            prev = self.histories.get(u.participant_id)
            vals = u.delta.values.astype(np.float64)
            self.histories[u.participant_id] = vals if prev is None else prev + vals


def foolsgold_weights(histories: np.ndarray, logit_base: float = 99.0) -> np.ndarray:
    """Per-participant weights in [0,1] from pairwise cosine similarity of histories.

    Mutually similar (sybil-like) histories are driven to 0; dissimilar ones
    keep weight 1. Zero-norm histories count as dissimilar to everyone.
    """
    m = histories.shape[0]
    if m == 1:
        return np.ones(1)
    norms = np.linalg.norm(histories, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = histories / safe[:, None]
    cs = unit @ unit.T
    cs[norms == 0, :] = 0.0
    cs[:, norms == 0] = 0.0
    np.fill_diagonal(cs, -np.inf)
    v = cs.max(axis=1)
    # pardoning: participant i with a cleaner record (v_i < v_j) scales down its
    # similarity to the more suspect j
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(v[None, :] > 0, v[:, None] / v[None, :], 1.0)
    pardoned = np.where(v[:, None] < v[None, :], cs * ratio, cs)
    w = 1.0 - pardoned.max(axis=1)
    w = np.clip(w, 0.0, 1.0)
    top = w.max()
    if top <= 0.0:
        return np.zeros(m)
    w = w / top
    with np.errstate(divide="ignore"):
        w = np.log(w / (1.0 - w)) / np.log(logit_base) + 0.5
    return np.clip(w, 0.0, 1.0)


def foolsgold_aggregate(global_model: nn.Model, updates: Sequence[UpdateMessage],
                        state: FoolsGoldState) -> nn.Model:
    """Weight updates by history dissimilarity, then apply their weighted mean.

    Degenerate case: if every weight is 0 (all histories mutually identical)
    the global model is returned unchanged.
    """
    if not updates:
        raise InputError("no updates to aggregate")
    for u in updates:
        global_model.params.require_same_layout(u.delta)
    state.accumulate(updates)
    ordered = sorted(updates, key=lambda u: u.participant_id)
    hist = np.stack([state.histories[u.participant_id] for u in ordered])
    w = foolsgold_weights(hist, state.logit_base)
    total = w.sum()
    if total <= 0.0:
        return global_model
    acc = np.zeros_like(global_model.params.values)
    for wi, u in zip(w, ordered):
        acc += np.asarray(wi / total, dtype=acc.dtype) * u.delta.values
    return global_model.with_params(
        nn.ParamVector(global_model.params.values + acc, global_model.params.layout))
