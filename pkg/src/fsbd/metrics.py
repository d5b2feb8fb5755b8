"""Evaluation: task accuracies, linear CKA model similarity, variance tracking, trigger spread."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import nn
from .attack import ParamMask, TriggerSet
from .data import Dataset
from .errors import InputError

_EVAL_CHUNK = 512


def _predict_all(model: nn.Model, images: np.ndarray) -> np.ndarray:
    preds = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], _EVAL_CHUNK):
        preds[start:start + _EVAL_CHUNK] = nn.predict(model, images[start:start + _EVAL_CHUNK])
    return preds


def acc_main(model: nn.Model, test: Dataset) -> float:
    """Fraction of clean images classified correctly."""
    if len(test) == 0:
        raise InputError("test set is empty")
    return float((_predict_all(model, test.images) == test.labels).mean())


def acc_backdoor(model: nn.Model, triggers: TriggerSet) -> float:
    """Fraction of trigger images classified as the adversary's target label."""
    preds = _predict_all(model, triggers.images())
    return float((preds == triggers.target_label).mean())


def source_misclassification(model: nn.Model, test: Dataset, source_label: int,
                             target_label: int, limit: int = 500) -> float:
    """Fraction of clean source-label images predicted as the target label.

    Stands in for backdoor accuracy before any trigger set exists; stays near
    chance on an honest model.
    """
    idx = test.label_indices(source_label)[:limit]
    if idx.size == 0:
        raise InputError(f"test set has no images with label {source_label}")
    preds = _predict_all(model, test.images[idx])
    return float((preds == target_label).mean())


def _layer_cka(xa: np.ndarray, xb: np.ndarray) -> float:
    xa = xa.astype(np.float64)
    xb = xb.astype(np.float64)
    xa = xa - xa.mean(axis=0, keepdims=True)
    xb = xb - xb.mean(axis=0, keepdims=True)
    num = np.linalg.norm(xb.T @ xa, "fro") ** 2
    da = np.linalg.norm(xa.T @ xa, "fro")
    db = np.linalg.norm(xb.T @ xb, "fro")
    if da == 0.0 or db == 0.0:
        return 1.0 if da == db else 0.0
    return float(num / (da * db))


def linear_cka(model_a: nn.Model, model_b: nn.Model, probe: Dataset) -> float:
    """Mean over layers of linear CKA between the two models' activations on the probe.

    1.0 means identical representations up to orthogonal transforms and
    isotropic scaling; topology must match so layers pair up.
    """
    if model_a.topology != model_b.topology:
        raise InputError("models must share a topology")
    if len(probe) < 2:
        raise InputError("probe needs at least 2 examples")
    acts_a = nn.forward_activations(model_a, probe.images)
    acts_b = nn.forward_activations(model_b, probe.images)
    return float(np.mean([_layer_cka(a, b) for a, b in zip(acts_a, acts_b)]))


@dataclass(frozen=True)
class VarianceSeries:
    """Mean per-coordinate variance inside and outside a mask, per cumulative window."""

    masked: np.ndarray       # window sizes 2..T
    complement: np.ndarray
    masked_empty: bool
    complement_empty: bool


def param_variance_series(snapshots: Sequence[Union[nn.ParamVector, np.ndarray]],
                          mask: ParamMask, ddof: int = 1) -> VarianceSeries:
    """Cumulative-window variance averaged over masked and unmasked coordinates.

    Window t covers the first t snapshots; entries run t = 2..len(snapshots).
    An empty mask side yields zeros with its empty flag set.
    """
    if len(snapshots) < 2:
        raise InputError("need at least 2 snapshots")
    stack = np.stack([s.values if isinstance(s, nn.ParamVector) else np.asarray(s)
                      for s in snapshots]).astype(np.float64)
    t_total, d = stack.shape
    if mask.size != d:
        raise InputError("mask length does not match snapshot width")
    csum = np.cumsum(stack, axis=0)
    csum2 = np.cumsum(stack * stack, axis=0)
    bits = mask.bits
    n_in, n_out = int(bits.sum()), int((~bits).sum())
    masked = np.zeros(t_total - 1)
    complement = np.zeros(t_total - 1)
    for t in range(2, t_total + 1):
        var = (csum2[t - 1] - csum[t - 1] ** 2 / t) / (t - ddof)
        var = np.maximum(var, 0.0)  # guard rounding
        if n_in:
            masked[t - 2] = var[bits].mean()
        if n_out:
            complement[t - 2] = var[~bits].mean()
    return VarianceSeries(masked, complement, masked_empty=n_in == 0, complement_empty=n_out == 0)


def trigger_ssd(triggers: TriggerSet) -> np.ndarray:
    """Pixel-wise sum of squared differences between every unordered pair of perturbations."""
    if len(triggers) < 2:
        raise InputError("need at least 2 triggers")
    etas = np.stack([e.eta.reshape(-1) for e in triggers.entries]).astype(np.float64)
    gram = etas @ etas.T
    sq = np.diag(gram)
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    iu = np.triu_indices(len(triggers), k=1)
    return np.maximum(d2[iu], 0.0)
