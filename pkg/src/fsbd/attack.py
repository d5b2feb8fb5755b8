"""The persistent-backdoor attack pipeline.

Pieces, in the order the adversary uses them: snapshot the broadcast global
model whenever selected (analysis window); mask parameters whose inter-round
variance is below a threshold; mask parameters whose contribution to the
clean-task output is below their layer mean; intersect the two masks; craft
adversarial trigger images with iterative signed-gradient steps under an
L-infinity budget; nudge only the masked parameters toward classifying the
triggers as the target label, with per-step clipping; and scale the resulting
delta so a weighted-average aggregator reproduces the malicious model exactly.
A fixed cross-stamp data-poisoning attack is included as the comparison
baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import Dataset
from .errors import InputError, LayoutMismatchError
from .fl import UpdateMessage
from .seeding import derive_rng


@dataclass(frozen=True)
class BackdoorConfig:
    t_delta: float = 0.001          # variance threshold for the stability mask
    delta: float = 1e-5             # injection strength / per-step clip
    inject_iters: int = 200         # K
    epsilon: float = 0.1            # L-inf trigger budget
    bim_iters: int = 30
    alpha: Optional[float] = None   # step size; defaults to epsilon / bim_iters
    source_label: int = 0
    target_label: int = 6
    trigger_count: int = 50
    variance_ddof: int = 1
    cumulative_clip: bool = False   # clip total masked deviation instead of each step
    baseline_epochs: int = 6
    baseline_lr: float = 0.05

    def __post_init__(self):
        if self.t_delta <= 0 or self.delta <= 0 or self.inject_iters < 0:
            raise InputError("t_delta and delta must be positive, inject_iters non-negative")
        if self.epsilon < 0 or self.bim_iters < 1 or self.trigger_count < 1:
            raise InputError("epsilon must be >= 0, bim_iters and trigger_count >= 1")
        if self.source_label == self.target_label:
            raise InputError("source and target labels must differ")

    @property
    def step_size(self) -> float:
        return self.epsilon / self.bim_iters if self.alpha is None else self.alpha


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class ParamMask:
    """Boolean vector over flat parameter positions."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    @property
    def size(self) -> int:
        return self.bits.size

    def count(self) -> int:
        return int(self.bits.sum())

    def intersect(self, other: "ParamMask") -> "ParamMask":
        if self.size != other.size:
            raise LayoutMismatchError("mask lengths differ")
        return ParamMask(self.bits & other.bits)

    def complement(self) -> "ParamMask":
        return ParamMask(~self.bits)


class AnalysisWindow:
    """Ordered snapshots of the broadcast global model at the rounds the adversary saw it."""

    def __init__(self):
        self.snapshots: list[np.ndarray] = []
        self.round_ids: list[int] = []
        self._layout = None

    def __len__(self) -> int:
        return len(self.snapshots)


def record_snapshot(window: AnalysisWindow, broadcast: nn.Model, round_id: int) -> AnalysisWindow:
    if window._layout is not None and broadcast.params.layout != window._layout:
        raise LayoutMismatchError("snapshot layout differs from the window's")
    if window.round_ids and round_id <= window.round_ids[-1]:
        raise InputError(f"round id {round_id} not greater than last recorded {window.round_ids[-1]}")
    window._layout = broadcast.params.layout
    window.snapshots.append(broadcast.params.values.copy())
    window.round_ids.append(int(round_id))
    return window


def stability_mask(window: AnalysisWindow, t_delta: float, ddof: int = 1) -> ParamMask:
    """Mask of parameters whose inter-round sample variance is below the threshold."""
    if len(window) < 2:
        raise InputError("need at least 2 snapshots to estimate variance")
    stack = np.stack(window.snapshots)
    var = stack.var(axis=0, ddof=ddof, dtype=np.float64)
    return ParamMask(var < t_delta)


def importance_vector(model: nn.Model, probe: Dataset, chunk: int = 256) -> np.ndarray:
    """Mean gradient of the true-label output over the probe, for every parameter."""
    if len(probe) == 0:
        raise InputError("probe is empty")
    total = np.zeros(model.params.size, dtype=np.float64)
    for start in range(0, len(probe), chunk):
        xs = probe.images[start:start + chunk]
        ys = probe.labels[start:start + chunk]
        g = nn.grad_logprob_params(model, xs, ys)
        total += g.values.astype(np.float64) * len(ys)
    return (total / len(probe)).astype(model.dtype)


def importance(model: nn.Model, probe: Dataset, layer: int) -> np.ndarray:
    """Per-parameter contribution scores for one layer (weights then bias, flattened)."""
    if layer not in model.topology.parameterized_layers():
        raise InputError(f"layer {layer} is not a parameterized layer")
    full = importance_vector(model, probe)
    return full[model.params.layer_slice(layer)]


def low_importance_mask(model: nn.Model, probe: Dataset) -> ParamMask:
    """Mask of parameters strictly below their layer's mean contribution score."""
    full = importance_vector(model, probe)
    bits = np.zeros(model.params.size, dtype=bool)
    for layer in model.topology.parameterized_layers():
        sl = model.params.layer_slice(layer)
        scores = full[sl]
        bits[sl] = scores < scores.mean()
    return ParamMask(bits)


def backdoor_mask(delta_mask: ParamMask, sigma_mask: ParamMask) -> ParamMask:
    mask = delta_mask.intersect(sigma_mask)
    if mask.count() == 0:
        warnings.warn("backdoor mask is empty: stability and low-importance masks are disjoint")
    return mask


# ---------------------------------------------------------------- triggers


@dataclass(frozen=True)
class TriggerEntry:
    x_hat: np.ndarray       # perturbed image
    eta: np.ndarray         # x_hat - source, stored so the bound is exact
    source: np.ndarray      # original image
    target_label: int
    converged: bool         # model predicted the target label at generation time
    source_index: int = -1  # position in the originating dataset, for bookkeeping


@dataclass(frozen=True)
class TriggerSet:
    entries: tuple[TriggerEntry, ...]
    target_label: int
    epsilon: float

    def __post_init__(self):
        if not self.entries:
            raise InputError("trigger set is empty")
        if any(e.target_label != self.target_label for e in self.entries):
            raise InputError("all triggers must share the target label")

    def __len__(self) -> int:
        return len(self.entries)

    def images(self) -> np.ndarray:
        return np.stack([e.x_hat for e in self.entries])

    def labels(self) -> np.ndarray:
        return np.full(len(self.entries), self.target_label, dtype=np.int64)

    def source_indices(self) -> list[int]:
        return [e.source_index for e in self.entries]


def _project_linf(x0: np.ndarray, x_cand: np.ndarray, eps32: np.float32):
    """Clamp x_cand into the eps ball around x0 and into [0,1], exactly in float32.

    Returns (x_hat, eta) with x_hat == x0 + eta bitwise and |eta| <= eps32.
    Where float rounding pushes x0 + clip(eta) back outside the ball, x_hat is
    nudged one ulp toward x0 until the recomputed difference fits; each nudge
    strictly shrinks it, so the loop terminates.
    """
    eta = np.clip(x_cand - x0, -eps32, eps32)
    x_hat = np.clip(x0 + eta, np.float32(0), np.float32(1)).astype(np.float32)
    for _ in range(16):
        eta = x_hat - x0
        over = np.abs(eta) > eps32
        if not over.any():
            return x_hat, eta
        x_hat = np.where(over, np.nextafter(x_hat, x0, dtype=np.float32), x_hat)
    raise AssertionError("L-inf projection failed to stabilize")


def _bim_batch(model: nn.Model, images: np.ndarray, target: int, cfg: BackdoorConfig) -> np.ndarray:
    """Run signed-gradient descent toward the target label for a whole batch at once.

    Per-row input gradients are independent, so one backward pass per
    iteration gives each image exactly the gradient it would get alone.
    """
    eps32 = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.step_size)
    x0 = images.astype(np.float32)
    xk = x0.copy()
    labels = np.full(x0.shape[0], int(target), dtype=np.int64)
    for _ in range(cfg.bim_iters):
        log_probs, caches = nn._forward_cached(model, xk.astype(model.dtype))
        d = np.zeros_like(log_probs)
        d[np.arange(labels.size), labels] = -1.0
        _, dx = nn._backward(model, log_probs, caches, d)
        xk = xk - alpha * np.sign(dx, dtype=np.float32) if model.dtype == np.float32 \
            else (xk - alpha * np.sign(dx)).astype(np.float32)
        xk = x0 + np.clip(xk - x0, -eps32, eps32)
    x_hat, _ = _project_linf(x0, xk, eps32)
    return x_hat


def bim_generate(model: nn.Model, x: np.ndarray, target: int, cfg: BackdoorConfig,
                 source_index: int = -1) -> TriggerEntry:
    """Craft one adversarial trigger; the perturbation never leaves the eps ball around x."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape != model.topology.input_shape:
        raise InputError(f"expected a single input of shape {model.topology.input_shape}")
    x_hat = _bim_batch(model, x[None], target, cfg)[0]
    eta = x_hat - x
    converged = int(nn.predict(model, x_hat[None])[0]) == int(target)
    return TriggerEntry(x_hat, eta, x.copy(), int(target), converged, source_index)


def trigger_test_set(model: nn.Model, test: Dataset, cfg: BackdoorConfig,
                     count: Optional[int] = None) -> TriggerSet:
    """Adversarial triggers from the first source-label images of a dataset.

    Frozen against the model passed in; the run reuses the same set for every
    later backdoor-accuracy measurement.
    """
    count = cfg.trigger_count if count is None else count
    candidates = test.label_indices(cfg.source_label)
    if candidates.size == 0:
        raise InputError(f"dataset has no images with source label {cfg.source_label}")
    if candidates.size < count:
        raise InputError(f"need {count} source-label images, dataset has {candidates.size}")
    chosen = candidates[:count]
    x_hats = _bim_batch(model, test.images[chosen], cfg.target_label, cfg)
    preds = nn.predict(model, x_hats)
    entries = []
    for i, idx in enumerate(chosen):
        src = test.images[idx].astype(np.float32)
        entries.append(TriggerEntry(x_hats[i], x_hats[i] - src, src.copy(), cfg.target_label,
                                    bool(preds[i] == cfg.target_label), int(idx)))
    n_flagged = sum(not e.converged for e in entries)
    if n_flagged:
        warnings.warn(f"{n_flagged}/{len(entries)} triggers did not reach the target label")
    return TriggerSet(tuple(entries), cfg.target_label, cfg.epsilon)


# ---------------------------------------------------------------- injection


def inject_backdoor(global_model: nn.Model, mask: ParamMask, triggers: TriggerSet,
                    cfg: BackdoorConfig) -> nn.Model:
    """Iteratively nudge only the masked parameters toward the trigger labels.

    Starts from the global model; each of the inject_iters iterations takes
    the mean trigger-set loss gradient, scales it by delta, clips every
    coordinate's step to magnitude delta, and applies it at masked positions
    only. All unmasked coordinates stay bitwise equal to the global model.
    """
    if mask.size != global_model.params.size:
        raise LayoutMismatchError("mask length does not match model parameters")
    if mask.count() == 0:
        raise InputError("backdoor mask is empty: no capacity to inject")
    if len(triggers) == 0:
        raise InputError("trigger set is empty")
    delta32 = np.asarray(cfg.delta, dtype=global_model.dtype)
    idx = np.nonzero(mask.bits)[0]
    images = triggers.images()
    labels = triggers.labels()
    values = global_model.params.values.copy()
    base = global_model.params.values[idx]
    model = global_model
    for _ in range(cfg.inject_iters):
        g = nn.grad_loss_params(model, images, labels)
        step = np.clip(delta32 * g.values[idx], -delta32, delta32)
        if cfg.cumulative_clip:
            values[idx] = base + np.clip(values[idx] - step - base, -delta32, delta32)
        else:
            values[idx] = values[idx] - step
        model = global_model.with_params(nn.ParamVector(values.copy(), global_model.params.layout))
    return model


def model_replacement(global_model: nn.Model, malicious_local: nn.Model,
                      n_total: int, n_adv: int, participant_id: int = 0) -> UpdateMessage:
    """Scale the malicious delta so the weighted average contributes it at weight one."""
    if n_adv <= 0:
        raise InputError("adversary data count must be positive")
    global_model.params.require_same_layout(malicious_local.params)
    scale = np.asarray(n_total / n_adv, dtype=global_model.dtype)
    delta = nn.ParamVector(
        scale * (malicious_local.params.values - global_model.params.values),
        global_model.params.layout)
    return UpdateMessage(participant_id, delta, n_adv)


# ---------------------------------------------------------------- baseline


CROSS_ARM = 5  # 5x5 stamp: center row plus center column, 9 pixels


def stamp_cross(images: np.ndarray) -> np.ndarray:
    """Set the fixed cross pattern at the top-left corner of each image."""
    out = np.array(images, dtype=np.float32, copy=True)
    mid = CROSS_ARM // 2
    out[..., mid, 0:CROSS_ARM] = 1.0
    out[..., 0:CROSS_ARM, mid] = 1.0
    return out


def cross_trigger_set(test: Dataset, cfg: BackdoorConfig, count: Optional[int] = None) -> TriggerSet:
    """Stamped source-label images; the uniform-trigger analog of trigger_test_set."""
    count = cfg.trigger_count if count is None else count
    candidates = test.label_indices(cfg.source_label)
    if candidates.size < count:
        raise InputError(f"need {count} source-label images, dataset has {candidates.size}")
    chosen = candidates[:count]
    entries = []
    for idx in chosen:
        src = test.images[idx].astype(np.float32)
        x_hat = stamp_cross(src)
        entries.append(TriggerEntry(x_hat, x_hat - src, src.copy(), cfg.target_label,
                                    False, int(idx)))
    return TriggerSet(tuple(entries), cfg.target_label, epsilon=1.0)


def baseline_lr_schedule(epoch: int, base_lr: float = 0.05) -> float:
    """Tenfold decay every two epochs: epochs 0-1 at base, 2-3 at base/10, 4-5 at base/100."""
    return base_lr * 0.1 ** (epoch // 2)


def baseline_cross_attack(global_model: nn.Model, shard: Dataset, cfg: BackdoorConfig,
                          batch_size: int = 32,
                          rng: Optional[np.random.Generator] = None) -> nn.Model:
    """Traditional poisoning: train on cross-stamped source images relabeled to the target.

    Each batch is half clean, half poisoned; the learning rate starts at
    baseline_lr and drops tenfold every two epochs.
    """
    if len(shard) == 0:
        raise InputError("shard is empty")
    if rng is None:
        rng = derive_rng(0, "baseline-cross")
    src_idx = shard.label_indices(cfg.source_label)
    if src_idx.size == 0:
        warnings.warn("shard has no source-label images; baseline attack trains on clean data only")
    poison_images = stamp_cross(shard.images[src_idx]) if src_idx.size else np.empty((0,) + shard.input_shape, np.float32)
    half = max(1, batch_size // 2)
    model = global_model
    for epoch in range(cfg.baseline_epochs):
        lr = baseline_lr_schedule(epoch, cfg.baseline_lr)
        clean_order = rng.permutation(len(shard))
        poison_order = rng.permutation(len(poison_images)) if len(poison_images) else np.array([], dtype=int)
        p_pos = 0
        for start in range(0, len(shard), half):
            cidx = clean_order[start:start + half]
            xs = [shard.images[cidx]]
            ys = [shard.labels[cidx]]
            if len(poison_images):
                take = [poison_order[(p_pos + k) % len(poison_images)] for k in range(len(cidx))]
                p_pos += len(cidx)
                xs.append(poison_images[take])
                ys.append(np.full(len(take), cfg.target_label, dtype=np.int64))
            batch = np.concatenate(xs)
            labels = np.concatenate(ys)
            grad = nn.grad_loss_params(model, batch, labels)
            model = nn.sgd_step(model, grad, lr)
    return model
