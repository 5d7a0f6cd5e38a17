"""Class-balanced self-training: per-class reference confidences, optional
spatial priors, pseudo-label generation, and the multi-round loop.

Selection is class-balanced: each class c gets its own reference
confidence lambda_c so rare classes are not starved; a pixel is kept when
its best normalized score p_c / lambda_c exceeds 1 strictly, otherwise it
becomes IGNORE. Thresholds are determined dataset-wide by default.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import segmodel
from .imagecore import IGNORE_LABEL, gaussian_kernel, correlate_separable
from .segmodel import Model, TrainConfig


@dataclass(frozen=True)
class RoundSchedule:
    """Selected-portion curriculum: p grows by delta_p per round up to p_max."""

    p0: float = 0.2
    delta_p: float = 0.05
    p_max: float = 0.5
    rounds: int = 3

    def __post_init__(self) -> None:
        if not (0.0 < self.p0 <= self.p_max <= 1.0):
            raise ValueError("need 0 < p0 <= p_max <= 1")
        if self.delta_p < 0 or self.rounds < 0:
            raise ValueError("delta_p and rounds must be >= 0")

    def portion(self, round_index: int) -> float:
        """Selected portion for 1-based round ``round_index``."""
        return min(self.p0 + (round_index - 1) * self.delta_p, self.p_max)


@dataclass(frozen=True)
class ClassThresholds:
    lam: np.ndarray  # (K,) float64; +inf marks a class with no pixels this round


@dataclass(frozen=True)
class SpatialPrior:
    grid: np.ndarray  # (H, W, K) float32, per-pixel sums ~1 where counts exist
    sigma: float


def determine_thresholds(
    probmaps: Sequence[np.ndarray],
    p: float,
    prior: SpatialPrior | None = None,
) -> ClassThresholds:
    """Reference confidence per class from pooled predictions.

    For each class, scores of pixels arg-maxed to it (prior-weighted when a
    prior is supplied) are sorted descending and lambda_c is the score at
    rank ceil(p * N_c); empty classes get +inf so nothing is selected.
    """
    if len(probmaps) == 0:
        raise ValueError("need at least one probability map")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must be in (0, 1], got {p}")
    k = probmaps[0].shape[2]
    per_class: list[list[np.ndarray]] = [[] for _ in range(k)]
    for pm in probmaps:
        scores = _weighted_scores(pm, prior)
        amax = scores.max(axis=2)
        aarg = scores.argmax(axis=2)
        for c in range(k):
            vals = amax[aarg == c]
            if vals.size:
                per_class[c].append(vals.astype(np.float64))
    lam = np.full(k, np.inf)
    for c in range(k):
        if not per_class[c]:
            continue
        vals = np.sort(np.concatenate(per_class[c]))  # ascending
        n_c = len(vals)
        rank = int(np.ceil(p * n_c))  # 1-based rank in descending order
        lam[c] = vals[n_c - rank]
    return ClassThresholds(lam=lam)


def _weighted_scores(probmap: np.ndarray, prior: SpatialPrior | None) -> np.ndarray:
    pm = np.asarray(probmap)
    if pm.ndim != 3:
        raise ValueError(f"probability map must be (H, W, K), got shape {pm.shape}")
    if prior is None:
        return pm
    if prior.grid.shape != pm.shape:
        raise ValueError(f"prior grid {prior.grid.shape} does not match probmap {pm.shape}")
    return pm * prior.grid


def generate_pseudolabels(
    probmap: np.ndarray,
    thresholds: ClassThresholds,
    prior: SpatialPrior | None = None,
) -> np.ndarray:
    """Label each pixel argmax_c of p_c (* prior_c) / lambda_c when the best
    normalized score strictly exceeds 1, IGNORE otherwise."""
    pm = np.asarray(probmap)
    if pm.ndim != 3 or pm.shape[2] != len(thresholds.lam):
        raise ValueError(
            f"probmap shape {pm.shape} inconsistent with {len(thresholds.lam)} thresholds"
        )
    scores = _weighted_scores(pm, prior).astype(np.float64)
    with np.errstate(divide="ignore"):
        inv_lam = np.where(np.isinf(thresholds.lam), 0.0, 1.0 / thresholds.lam)
    normalized = scores * inv_lam[None, None, :]
    labels = normalized.argmax(axis=2).astype(np.uint8)
    labels[normalized.max(axis=2) <= 1.0] = IGNORE_LABEL
    return labels


def selection_counts(
    probmaps: Sequence[np.ndarray],
    thresholds: ClassThresholds,
    prior: SpatialPrior | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Audit of the per-class curriculum: for each class, how many pixels are
    arg-maxed to it and how many of those clear its own threshold strictly.

    The selected count stays within the rank-quantization slack of
    p * N_c by construction, independent of how normalization reshuffles the
    final pseudo-label classes.
    """
    k = len(thresholds.lam)
    argmax_counts = np.zeros(k, dtype=np.int64)
    selected_counts = np.zeros(k, dtype=np.int64)
    for pm in probmaps:
        scores = _weighted_scores(pm, prior)
        amax = scores.max(axis=2).astype(np.float64)
        aarg = scores.argmax(axis=2)
        argmax_counts += np.bincount(aarg.ravel(), minlength=k)
        cleared = amax > thresholds.lam[aarg]
        selected_counts += np.bincount(aarg[cleared].ravel(), minlength=k)
    return argmax_counts, selected_counts


def nearest_resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    a = np.asarray(labels)
    h, w = a.shape
    ys = np.minimum(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.intp), h - 1)
    xs = np.minimum(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.intp), w - 1)
    return a[ys[:, None], xs[None, :]]


def compute_spatial_prior(
    source_labels: Sequence[np.ndarray],
    out_hw: tuple[int, int],
    n_classes: int,
    sigma: float,
) -> SpatialPrior:
    """Per-location class frequencies from source labels, smoothed and
    renormalized per pixel; ignore-labeled pixels contribute nothing."""
    if len(source_labels) == 0:
        raise ValueError("need at least one label map")
    out_h, out_w = out_hw
    counts = np.zeros((out_h, out_w, n_classes), dtype=np.float32)
    for lm in source_labels:
        a = np.asarray(lm)
        if a.shape != (out_h, out_w):
            a = nearest_resize_labels(a, out_h, out_w)
        for c in range(n_classes):
            counts[:, :, c] += a == c
    if sigma > 0:
        kernel = gaussian_kernel(sigma, max(1, int(np.ceil(3.0 * sigma))))
        for c in range(n_classes):
            counts[:, :, c] = correlate_separable(counts[:, :, c], kernel, kernel)
    total = counts.sum(axis=2, keepdims=True)
    grid = np.where(total > 0, counts / np.maximum(total, 1e-12), 0.0).astype(np.float32)
    return SpatialPrior(grid=grid, sigma=sigma)


@dataclass(frozen=True)
class TargetSample:
    """One target image prepared for adaptation: a per-pixel feature matrix
    in row-major order plus its dimensions."""

    features: np.ndarray  # (H*W, D) float32
    height: int
    width: int


@dataclass(frozen=True)
class RoundRow:
    round_index: int
    p: float
    class_id: int
    lam: float
    selected_fraction: float
    iou: float  # NaN when no eval labels were supplied


@dataclass
class SelfTrainResult:
    model: Model
    rows: list[RoundRow]
    pseudolabels: list[list[np.ndarray]]  # per round, per target image


def self_train(
    source_features: np.ndarray,
    source_labels: np.ndarray,
    targets: Sequence[TargetSample],
    model0: Model,
    schedule: RoundSchedule,
    train_cfg: TrainConfig,
    source_label_maps: Sequence[np.ndarray] | None = None,
    use_prior: bool = False,
    prior_sigma: float = 6.0,
    target_weight: float = 1.0,
    round_miou: Callable[[Model], float] | None = None,
) -> SelfTrainResult:
    """Alternate pseudo-label generation and retraining for ``schedule.rounds``.

    Each round predicts on every target image, determines dataset-wide
    thresholds at the round's portion p_r, pseudo-labels the targets, and
    fine-tunes the current model on source samples plus all selected target
    pixels (source:target loss weight 1:target_weight). ``round_miou``, when
    given, scores the retrained model after each round for the report.
    """
    if len(targets) == 0:
        raise ValueError("need at least one target image")
    k = model0.n_classes
    prior = None
    if use_prior:
        if not source_label_maps:
            raise ValueError("use_prior requires source label maps")
        prior = compute_spatial_prior(
            source_label_maps, (targets[0].height, targets[0].width), k, prior_sigma
        )

    model = model0.copy()
    rows: list[RoundRow] = []
    pseudo_rounds: list[list[np.ndarray]] = []
    for r in range(1, schedule.rounds + 1):
        p_r = schedule.portion(r)
        probmaps = [
            segmodel.forward_batch(model, t.features)
            .reshape(t.height, t.width, k)
            .astype(np.float32)
            for t in targets
        ]
        thresholds = determine_thresholds(probmaps, p_r, prior)
        pseudo = [generate_pseudolabels(pm, thresholds, prior) for pm in probmaps]
        pseudo_rounds.append(pseudo)

        argmax_counts, selected_counts = selection_counts(probmaps, thresholds, prior)

        feats_t = []
        labels_t = []
        for t, pl in zip(targets, pseudo):
            flat = pl.reshape(-1)
            keep = flat != IGNORE_LABEL
            if keep.any():
                feats_t.append(t.features[keep])
                labels_t.append(flat[keep])
        if feats_t:
            all_feats = np.concatenate([source_features] + feats_t, axis=0)
            all_labels = np.concatenate([source_labels] + labels_t, axis=0)
            weights = np.concatenate(
                [
                    np.ones(len(source_labels)),
                    np.full(sum(len(x) for x in labels_t), target_weight),
                ]
            )
        else:
            all_feats, all_labels, weights = source_features, source_labels, None
        round_cfg = TrainConfig(
            learning_rate=train_cfg.learning_rate,
            batch_size=train_cfg.batch_size,
            epochs=train_cfg.epochs,
            seed=train_cfg.seed + r,
            l2=train_cfg.l2,
        )
        model, _ = segmodel.train(model, all_feats, all_labels, round_cfg, weights)

        iou = float(round_miou(model)) if round_miou is not None else float("nan")
        for c in range(k):
            frac = (
                float(selected_counts[c]) / float(argmax_counts[c])
                if argmax_counts[c]
                else 0.0
            )
            rows.append(RoundRow(r, p_r, c, float(thresholds.lam[c]), frac, iou))
    return SelfTrainResult(model=model, rows=rows, pseudolabels=pseudo_rounds)
