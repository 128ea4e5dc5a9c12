"""Training objectives for span regression and attention supervision.

Two families live here: plain-float interval arithmetic (`temporal_iou`,
`giou_1d`) used by metrics and oracles, and graph-building losses on Tensors
used for training. The proposal-level attention loss penalizes only the
total attention mass outside the ground-truth window, so its value depends
on the window through nothing but that mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gather_rows, maximum, minimum

LOG_FLOOR = 1e-12  # attention entries can be exactly 0 after masking

ATTENTION_LOSS_VARIANTS = ("proposal", "position-wise", "none")


@dataclass(frozen=True)
class MomentSpan:
    """Normalized temporal interval, 0 <= t_s <= t_e <= 1."""

    t_s: float
    t_e: float

    def __post_init__(self):
        if not (0.0 <= self.t_s <= self.t_e <= 1.0):
            raise ValueError(f"invalid span ({self.t_s}, {self.t_e})")

    @property
    def length(self) -> float:
        return self.t_e - self.t_s

    def as_tuple(self) -> tuple[float, float]:
        return (self.t_s, self.t_e)


@dataclass
class LossWeights:
    """Trade-off weights for the L1 and interval-overlap terms."""

    lambda_l1: float = 2.0
    beta_iou: float = 2.0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.beta_iou < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_l1 == 0 and self.beta_iou == 0:
            raise ValueError("at least one loss weight must be positive")


# -- interval arithmetic (floats) ---------------------------------------------


def temporal_iou(a: MomentSpan, b: MomentSpan) -> float:
    """Intersection over union of two intervals, in [0, 1]."""
    inter = max(0.0, min(a.t_e, b.t_e) - max(a.t_s, b.t_s))
    union = a.length + b.length - inter
    if union <= 0.0:
        # both zero-length: 1 if they coincide, else 0
        return 1.0 if a.t_s == b.t_s else 0.0
    return inter / union


def giou_1d(pred: MomentSpan, gt: MomentSpan) -> float:
    """Generalized IoU for intervals: IoU minus the enclosure gap fraction.

    Equals plain IoU whenever the intervals overlap (in 1-D the union of
    overlapping intervals is their enclosure); negative when disjoint, which
    keeps a usable gradient for far-apart predictions.
    """
    inter = max(0.0, min(pred.t_e, gt.t_e) - max(pred.t_s, gt.t_s))
    union = pred.length + gt.length - inter
    enclosure = max(pred.t_e, gt.t_e) - min(pred.t_s, gt.t_s)
    if union <= 0.0:
        return 1.0 if pred.t_s == gt.t_s else 0.0
    if enclosure <= 0.0:
        return 1.0
    iou = inter / union
    return iou - (enclosure - union) / enclosure


# -- ground-truth clip membership ------------------------------------------------


def gt_clip_mask(gt: MomentSpan, n_clips: int) -> np.ndarray:
    """Boolean mask of clips whose center falls inside the span.

    Clip i covers [i/N, (i+1)/N); it belongs to the window iff its center
    (i + 0.5)/N lies in [t_s, t_e]. A span too short to contain any center
    gets the single clip whose center is nearest the span midpoint.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    centers = (np.arange(n_clips) + 0.5) / n_clips
    mask = (centers >= gt.t_s) & (centers <= gt.t_e)
    if not mask.any():
        mid = 0.5 * (gt.t_s + gt.t_e)
        mask[np.argmin(np.abs(centers - mid))] = True
    return mask


# -- differentiable losses --------------------------------------------------------


def _spans_array(spans) -> np.ndarray:
    if isinstance(spans, np.ndarray):
        arr = np.asarray(spans, dtype=np.float64)
    else:
        arr = np.asarray([s.as_tuple() for s in spans], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (K, 2) spans, got shape {arr.shape}")
    return arr


def _valid_indices(k: int, valid) -> np.ndarray:
    if valid is None:
        return np.arange(k)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (k,):
        raise ValueError(f"validity mask shape {valid.shape} != ({k},)")
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ValueError("no valid queries")
    return idx


def _overlap_terms(pred: Tensor, gt: np.ndarray):
    """Per-query (iou, union, enclosure) tensors for pred (K,1)-column spans."""
    ps = pred.slice_last(0, 1)
    pe = pred.slice_last(1, 2)
    gs = gt[:, 0:1]
    ge = gt[:, 1:2]
    inter = (minimum(pe, ge) - maximum(ps, gs)).relu()
    union = (pe - ps) + Tensor(ge - gs) - inter
    iou = inter / union
    enclosure = maximum(pe, Tensor(ge)) - minimum(ps, Tensor(gs))
    return iou, union, enclosure


def regression_loss(
    pred_spans: Tensor,
    gt_spans,
    weights: LossWeights,
    valid=None,
    iou_mode: str = "giou",
) -> Tensor:
    """Mean over valid queries of lambda * L1 + beta * (1 - overlap score).

    pred_spans: (K, 2) Tensor of (start, end) pairs; gt_spans: (K, 2) array
    or list of MomentSpans. iou_mode selects the overlap score: "giou"
    (default; informative gradient when disjoint) or plain "iou".
    """
    if iou_mode not in ("giou", "iou"):
        raise ValueError(f"unknown iou_mode {iou_mode!r}")
    gt = _spans_array(gt_spans)
    k = pred_spans.data.shape[0]
    if gt.shape[0] != k:
        raise ValueError(f"{k} predictions vs {gt.shape[0]} ground truths")
    idx = _valid_indices(k, valid)
    pv = gather_rows(pred_spans, idx)
    gv = gt[idx]

    l1 = (pv - Tensor(gv)).abs().sum(axis=-1)  # (Kv,)
    iou, union, enclosure = _overlap_terms(pv, gv)
    if iou_mode == "giou":
        score = iou - (enclosure - union) / enclosure
    else:
        score = iou
    per_query = l1 * weights.lambda_l1 + (-score + 1.0).sum(axis=-1) * weights.beta_iou
    return per_query.sum() * (1.0 / idx.size)


def _attention_rows(attn: Tensor, masks: np.ndarray, valid):
    k, n = attn.data.shape
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (k, n):
        raise ValueError(f"clip-mask shape {masks.shape} != attention shape {(k, n)}")
    idx = _valid_indices(k, valid)
    counts = masks[idx].sum(axis=1)
    if (counts == 0).any():
        bad = idx[np.flatnonzero(counts == 0)]
        raise ValueError(f"empty ground-truth clip mask for queries {bad.tolist()}")
    return gather_rows(attn, idx), masks[idx].astype(np.float64), idx


def position_wise_attention_loss(attn: Tensor, masks: np.ndarray, valid=None) -> Tensor:
    """Mean negative log-attention over every clip inside the window.

    Never reaches zero even for a perfectly concentrated row: the row sums
    to 1, so some in-window clip always has attention < 1 when the window
    spans more than one clip.
    """
    rows, m, idx = _attention_rows(attn, masks, valid)
    logs = maximum(rows, LOG_FLOOR).log()
    per_query = (logs * Tensor(m)).sum(axis=-1) * Tensor(1.0 / m.sum(axis=1))
    return per_query.sum() * (-1.0 / idx.size)


def proposal_attention_loss(attn: Tensor, masks: np.ndarray, valid=None) -> Tensor:
    """Negative log of total attention mass inside the window, meaned over queries.

    Zero exactly when all mass lies inside; depends on the row only through
    that mass, so it is invariant to how long the window is.
    """
    rows, m, idx = _attention_rows(attn, masks, valid)
    mass = (rows * Tensor(m)).sum(axis=-1)
    return maximum(mass, LOG_FLOOR).log().sum() * (-1.0 / idx.size)


def total_loss(reg: Tensor, attn: Tensor | None) -> Tensor:
    """Sum of regression and attention objectives (attn None = disabled)."""
    if not math.isfinite(float(reg.data)):
        raise ValueError(f"non-finite regression loss {float(reg.data)}")
    if attn is None:
        return reg
    if not math.isfinite(float(attn.data)):
        raise ValueError(f"non-finite attention loss {float(attn.data)}")
    return reg + attn
