"""Optimization loop and evaluation protocol.

Training follows the paragraph protocol: per step, sample K queries (default
2..8) from each paragraph, keep or shuffle their temporal order, forward one
paragraph at a time, and average gradients across the batch. Evaluation
splits long paragraphs into chunks of at most max_queries and feeds whole
chunks; the single-query mode grounds each sentence independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import GroundingSample, split_subparagraphs, uniform_sample_clips
from .losses import (
    ATTENTION_LOSS_VARIANTS,
    LossWeights,
    MomentSpan,
    gt_clip_mask,
    position_wise_attention_loss,
    proposal_attention_loss,
    regression_loss,
    temporal_iou,
    total_loss,
)
from .metrics import DEFAULT_THRESHOLDS, EvalReport, evaluate
from .model import PRVG, ModelConfig, save_checkpoint
from .tensor import ParameterSet, Tensor, scale

QUERY_ORDER_MODES = ("ordered", "shuffled")
QUERY_EVAL_MODES = ("paragraph", "shuffled", "single")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    lambda_l1: float = 2.0
    beta_iou: float = 2.0
    attn_loss: str = "proposal"
    iou_mode: str = "giou"
    seed: int = 0
    k_min: int = 2
    k_max: int = 8
    query_order: str = "ordered"
    eval_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    warmup_steps: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.attn_loss not in ATTENTION_LOSS_VARIANTS:
            raise ValueError(
                f"attn_loss must be one of {ATTENTION_LOSS_VARIANTS}, got {self.attn_loss!r}"
            )
        if self.iou_mode not in ("giou", "iou"):
            raise ValueError(f"iou_mode must be 'giou' or 'iou', got {self.iou_mode!r}")
        if not (1 <= self.k_min <= self.k_max):
            raise ValueError(f"bad query-count range [{self.k_min}, {self.k_max}]")
        if self.query_order not in QUERY_ORDER_MODES:
            raise ValueError(
                f"query_order must be one of {QUERY_ORDER_MODES}, got {self.query_order!r}"
            )
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def weights(self) -> LossWeights:
        return LossWeights(lambda_l1=self.lambda_l1, beta_iou=self.beta_iou)


class Adam:
    """Bias-corrected Adam over a ParameterSet; step() consumes and zeroes grads."""

    def __init__(self, params: ParameterSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def adam_step(state: Adam, lr: float | None = None) -> None:
    state.step(lr)


def sample_training_queries(
    sample: GroundingSample, k_range: tuple[int, int], mode: str, rng
) -> GroundingSample:
    """Pick K queries without replacement, then order per mode.

    Ordered mode restores paragraph order; shuffled applies a uniform
    permutation. Spans stay aligned to their queries either way. Samples with
    fewer than two queries are passed through whole.
    """
    if mode not in QUERY_ORDER_MODES:
        raise ValueError(f"unknown query order mode {mode!r}")
    total = sample.n_queries
    if total < 2:
        idx = np.arange(total)
    else:
        lo = min(k_range[0], total)
        hi = min(k_range[1], total)
        k = int(rng.integers(lo, hi + 1))
        idx = rng.choice(total, size=k, replace=False)
        idx = np.sort(idx)
        if mode == "shuffled":
            idx = rng.permutation(idx)
    return GroundingSample(
        video_id=sample.video_id,
        clip_features=sample.clip_features,
        query_features=sample.query_features[idx],
        spans=[sample.spans[i] for i in idx],
    )


def _model_clips(model: PRVG, sample: GroundingSample) -> np.ndarray:
    if sample.clip_features.shape[1] != model.cfg.d_feat:
        raise ValueError(
            f"sample {sample.video_id!r} feature width {sample.clip_features.shape[1]} "
            f"!= model d_feat {model.cfg.d_feat}"
        )
    if sample.n_clips != model.cfg.max_clips:
        return uniform_sample_clips(sample.clip_features, model.cfg.max_clips)
    return sample.clip_features


def _sample_losses(model: PRVG, sub: GroundingSample, cfg: TrainConfig, rng):
    """Forward one paragraph and build (reg, attn, total, spans)."""
    out = model.forward(
        _model_clips(model, sub),
        sub.query_features,
        train=True,
        rng=rng,
    )
    reg = regression_loss(out.spans, sub.spans, cfg.weights(), iou_mode=cfg.iou_mode)
    attn = None
    if cfg.attn_loss != "none":
        masks = np.stack([gt_clip_mask(sp, out.attention.data.shape[1]) for sp in sub.spans])
        fn = proposal_attention_loss if cfg.attn_loss == "proposal" else position_wise_attention_loss
        attn = fn(out.attention, masks)
    return reg, attn, total_loss(reg, attn), out


@dataclass
class EpochStats:
    epoch: int
    reg_loss: float
    attn_loss: float
    miou: float

    def as_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "reg_loss": self.reg_loss,
                "attn_loss": self.attn_loss,
                "train_miou": self.miou,
            },
            sort_keys=True,
        )


@dataclass
class TrainResult:
    model: PRVG
    log: list[EpochStats]
    best_epoch: int
    best_miou: float
    best_state: dict = field(repr=False)


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    samples: list[GroundingSample],
    log_path=None,
    checkpoint_path=None,
    best_checkpoint_path=None,
) -> TrainResult:
    """Seeded, fully deterministic training loop.

    Per epoch: permute samples, process batches of paragraphs sequentially
    with per-sample losses scaled by 1/batch so accumulated grads equal the
    batch mean, one Adam step per batch. The epoch log records mean loss
    components and the mIoU of the training-pass predictions; the best-mIoU
    parameter snapshot is kept alongside the final one.
    """
    if not samples:
        raise ValueError("empty training dataset")
    model = PRVG(model_cfg)
    opt = Adam(model.params, lr=cfg.lr)
    ss = np.random.SeedSequence(cfg.seed).spawn(3)
    order_rng = np.random.default_rng(ss[0])
    query_rng = np.random.default_rng(ss[1])
    dropout_rng = np.random.default_rng(ss[2])

    log: list[EpochStats] = []
    best_miou = -1.0
    best_epoch = -1
    best_state = model.params.state_copy()
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(samples))
            reg_sum = attn_sum = 0.0
            iou_sum = 0.0
            n_queries = 0
            n_paragraphs = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                model.params.zero_grad()
                for si in batch:
                    sub = sample_training_queries(
                        samples[si], (cfg.k_min, cfg.k_max), cfg.query_order, query_rng
                    )
                    reg, attn, total, out = _sample_losses(model, sub, cfg, dropout_rng)
                    if not math.isfinite(float(total.data)):
                        raise RuntimeError(
                            f"non-finite loss at step {step}, sample "
                            f"{samples[si].video_id!r}: reg={float(reg.data)}, "
                            f"attn={float(attn.data) if attn is not None else None}"
                        )
                    scale(total, 1.0 / len(batch)).backward()
                    reg_sum += float(reg.data)
                    attn_sum += float(attn.data) if attn is not None else 0.0
                    for pred, gt in zip(out.span_list(), sub.spans):
                        iou_sum += temporal_iou(pred, gt)
                        n_queries += 1
                    n_paragraphs += 1
                lr = cfg.lr
                if cfg.warmup_steps and step < cfg.warmup_steps:
                    lr = cfg.lr * (step + 1) / cfg.warmup_steps
                opt.step(lr)
                step += 1
            stats = EpochStats(
                epoch=epoch,
                reg_loss=reg_sum / n_paragraphs,
                attn_loss=attn_sum / n_paragraphs,
                miou=iou_sum / n_queries,
            )
            log.append(stats)
            if log_fh:
                log_fh.write(stats.as_json() + "\n")
                log_fh.flush()
            if stats.miou > best_miou:
                best_miou = stats.miou
                best_epoch = epoch
                best_state = model.params.state_copy()
    finally:
        if log_fh:
            log_fh.close()

    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    if best_checkpoint_path:
        final_state = model.params.state_copy()
        model.params.load_state(best_state)
        save_checkpoint(model, best_checkpoint_path)
        model.params.load_state(final_state)
    return TrainResult(
        model=model, log=log, best_epoch=best_epoch, best_miou=best_miou, best_state=best_state
    )


# -- inference & evaluation ---------------------------------------------------------


def predict_sample(
    model: PRVG, sample: GroundingSample, query_mode: str = "paragraph", rng=None
) -> list[tuple[int, MomentSpan]]:
    """One span per query, chunking paragraphs at the model's query budget.

    paragraph: chunks in paragraph order; shuffled: a uniform permutation of
    each chunk (needs rng); single: every query grounded alone. Returned
    pairs carry the original query index.
    """
    if query_mode not in QUERY_EVAL_MODES:
        raise ValueError(f"unknown query mode {query_mode!r}")
    clips = _model_clips(model, sample)
    preds: list[tuple[int, MomentSpan]] = []
    if query_mode == "single":
        chunks = [[i] for i in range(sample.n_queries)]
    else:
        chunks = []
        off = 0
        for size in split_subparagraphs(sample.n_queries, model.cfg.max_queries):
            chunks.append(list(range(off, off + size)))
            off += size
    for chunk in chunks:
        idx = np.array(chunk)
        if query_mode == "shuffled":
            if rng is None:
                raise ValueError("shuffled query mode needs an rng")
            idx = rng.permutation(idx)
        out = model.forward(clips, sample.query_features[idx])
        for qi, span in zip(idx, out.span_list()):
            preds.append((int(qi), span))
    return preds


def evaluate_model(
    model: PRVG,
    samples: list[GroundingSample],
    thresholds=DEFAULT_THRESHOLDS,
    query_mode: str = "paragraph",
    rng=None,
) -> EvalReport:
    preds, gts = [], []
    for sample in samples:
        for qi, span in predict_sample(model, sample, query_mode, rng):
            preds.append((sample.video_id, qi, span))
        for qi, span in enumerate(sample.spans):
            gts.append((sample.video_id, qi, span))
    return evaluate(preds, gts, thresholds)


# -- the train/test-setting grid ---------------------------------------------------------


ABLATION_ROWS = (
    {"row": 1, "train": "multi-ordered", "test": "paragraph"},
    {"row": 2, "train": "multi-shuffled", "test": "shuffled"},
    {"row": 3, "train": "single", "test": "single"},
    {"row": 4, "train": "multi-ordered", "test": "single"},
    {"row": 5, "train": "multi-ordered", "test": "shuffled"},
)


def run_ablation(
    train_samples: list[GroundingSample],
    test_samples: list[GroundingSample],
    model_cfg: ModelConfig,
    base_cfg: TrainConfig,
) -> list[dict]:
    """Train once per training setting (shared seed/budget), evaluate each
    row's test setting on held-out data. Returns one dict per row with mIoU."""
    trainings = {
        "multi-ordered": TrainConfig(**{**base_cfg.__dict__, "query_order": "ordered"}),
        "multi-shuffled": TrainConfig(**{**base_cfg.__dict__, "query_order": "shuffled"}),
        "single": TrainConfig(
            **{**base_cfg.__dict__, "query_order": "ordered", "k_min": 1, "k_max": 1}
        ),
    }
    models = {
        name: train(tc, model_cfg, train_samples).model for name, tc in trainings.items()
    }
    results = []
    for spec_row in ABLATION_ROWS:
        rng = np.random.default_rng(base_cfg.seed + 1000 + spec_row["row"])
        report = evaluate_model(
            models[spec_row["train"]],
            test_samples,
            thresholds=base_cfg.eval_thresholds,
            query_mode=spec_row["test"],
            rng=rng,
        )
        results.append({**spec_row, "miou": report.miou, "recalls": report.recalls})
    return results
