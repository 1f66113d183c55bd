"""Sliding-window inference over whole volumes and hard-label Dice."""

from __future__ import annotations

import numpy as np

from .ml.model import SegModel, infer_logits_cl
from .ml.tensor_ops import softmax_lastaxis
from .preprocess import PAD_INTENSITY, Volume


def dice_score(pred_labels: np.ndarray, true_labels: np.ndarray, class_id: int) -> float:
    """2|P & G| / (|P| + |G|) on hard masks; 1.0 when both are empty, 0.0
    when exactly one is."""
    p = pred_labels == class_id
    g = true_labels == class_id
    np_, ng = int(p.sum()), int(g.sum())
    if np_ + ng == 0:
        return 1.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / (np_ + ng)


def _window_starts(dim: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, dim - patch + 1, stride))
    last = dim - patch
    if starts[-1] != last:
        starts.append(last)
    return starts


def predict_volume(
    model: SegModel,
    v: Volume,
    stride: tuple[int, int, int] | None = None,
    batch_windows: int = 8,
) -> Volume:
    """Overlapping sliding-window prediction: softmax averaging over
    windows, then voxel-wise argmax (ties break to the lowest class index).

    Default stride is half the patch size.  Volumes smaller than one patch
    are padded with the background intensity and cropped back.
    """
    patch = model.config.patch_size
    if stride is None:
        stride = tuple(max(1, p // 2) for p in patch)
    dims = v.dims
    padded_dims = tuple(max(d, p) for d, p in zip(dims, patch))
    grid = v.intensities
    if padded_dims != dims:
        grid = np.full(padded_dims, PAD_INTENSITY)
        grid[: dims[0], : dims[1], : dims[2]] = v.intensities

    starts = [
        (sx, sy, sz)
        for sx in _window_starts(padded_dims[0], patch[0], stride[0])
        for sy in _window_starts(padded_dims[1], patch[1], stride[1])
        for sz in _window_starts(padded_dims[2], patch[2], stride[2])
    ]
    k = model.config.n_classes
    prob_acc = np.zeros(padded_dims + (k,))
    counts = np.zeros(padded_dims)

    for i in range(0, len(starts), batch_windows):
        chunk = starts[i : i + batch_windows]
        x_cl = np.stack(
            [
                grid[sx : sx + patch[0], sy : sy + patch[1], sz : sz + patch[2]]
                for sx, sy, sz in chunk
            ]
        )[..., None]
        logits = infer_logits_cl(model.weights, model.config, x_cl)
        probs = softmax_lastaxis(logits)
        for j, (sx, sy, sz) in enumerate(chunk):
            sl = (
                slice(sx, sx + patch[0]),
                slice(sy, sy + patch[1]),
                slice(sz, sz + patch[2]),
            )
            prob_acc[sl] += probs[j]
            counts[sl] += 1.0

    mean_probs = prob_acc / counts[..., None]
    labels = np.argmax(mean_probs, axis=-1).astype(np.uint8)
    labels = labels[: dims[0], : dims[1], : dims[2]]
    return Volume(v.intensities.copy(), v.spacing_mm, labels)


def foreground_dice_scores(
    model: SegModel,
    volumes: list[Volume],
    stride: tuple[int, int, int] | None = None,
) -> list[float]:
    """Dice per (volume, foreground class present in that volume's labels)."""
    scores = []
    for v in volumes:
        pred = predict_volume(model, v, stride=stride)
        present = [c for c in range(1, model.config.n_classes) if (v.labels == c).any()]
        for c in present:
            scores.append(dice_score(pred.labels, v.labels, c))
    return scores


def mean_foreground_dice(
    model: SegModel,
    volumes: list[Volume],
    stride: tuple[int, int, int] | None = None,
) -> float:
    scores = foreground_dice_scores(model, volumes, stride=stride)
    return float(np.mean(scores)) if scores else 0.0
