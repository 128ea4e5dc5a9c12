"""Grounding evaluation: top-1 recall at IoU thresholds and mean IoU.

Predictions and ground truths are joined on (video id, query index); the
model emits exactly one span per query, so recall is over single
predictions. Recall uses a strict comparison (IoU > theta).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .losses import MomentSpan, temporal_iou

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    recalls: dict[float, float]
    miou: float
    n_queries: int
    ious: list[float] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "recalls": {f"{t:g}": r for t, r in self.recalls.items()},
            "miou": self.miou,
            "ious": self.ious,
        }


def recall_at_1(ious, theta: float) -> float:
    """Fraction of queries whose IoU strictly exceeds theta."""
    ious = list(ious)
    if not ious:
        raise ValueError("recall over an empty IoU list")
    if not (0.0 < theta < 1.0):
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    return sum(1 for v in ious if v > theta) / len(ious)


def evaluate(preds, gts, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Join predictions to ground truths by (video id, query index) and score.

    Both arguments are iterables of (video_id, query_index, MomentSpan).
    Every ground-truth key must be matched by exactly one prediction; extra,
    missing, or duplicated prediction keys are errors naming the keys.
    """
    gt_map: dict[tuple[str, int], MomentSpan] = {}
    for vid, qi, span in gts:
        key = (vid, int(qi))
        if key in gt_map:
            raise ValueError(f"duplicate ground-truth keys: {[key]}")
        gt_map[key] = span

    pred_map: dict[tuple[str, int], MomentSpan] = {}
    dups = []
    extras = []
    for vid, qi, span in preds:
        key = (vid, int(qi))
        if key in pred_map:
            dups.append(key)
        pred_map[key] = span
        if key not in gt_map:
            extras.append(key)
    missing = sorted(k for k in gt_map if k not in pred_map)
    if dups or extras or missing:
        parts = []
        if dups:
            parts.append(f"duplicate prediction keys: {sorted(set(dups))}")
        if extras:
            parts.append(f"predictions without ground truth: {sorted(set(extras))}")
        if missing:
            parts.append(f"ground truths without prediction: {missing}")
        raise ValueError("; ".join(parts))
    if not gt_map:
        raise ValueError("no ground-truth records")

    keys = sorted(gt_map)  # fixed reduction order regardless of input order
    ious = [temporal_iou(pred_map[k], gt_map[k]) for k in keys]
    recalls = {t: recall_at_1(ious, t) for t in thresholds}
    return EvalReport(
        thresholds=tuple(thresholds),
        recalls=recalls,
        miou=sum(ious) / len(ious),
        n_queries=len(ious),
        ious=ious,
    )


def report_table(report: EvalReport) -> str:
    """Deterministic text table of recalls (percent) and mIoU."""
    headers = [f"R@1,IoU={t:g}" for t in report.thresholds] + ["mIoU"]
    values = [100.0 * report.recalls[t] for t in report.thresholds] + [
        100.0 * report.miou
    ]
    cells = [f"{v:.1f}" for v in values]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return f"queries: {report.n_queries}\n{head}\n{row}\n"
