"""Synthetic grounding data with planted spans, plus on-disk formats.

Each generated video plants K ordered, non-overlapping clip-aligned events.
Every event carries a latent code; the code's embedding is written into the
code half of the clip features inside the event's span, on top of a smooth
position drift in the context half. The matching query carries the same code
embedding plus an ordinal-context vector giving its rank among same-code
events. With a positive ambiguity rate a video can repeat a code, in which
case code matching alone cannot tell the occurrences apart and only the
paragraph order (plus the weak ordinal cue) disambiguates.

Feature files: 16-byte header (magic "PRVG", u32 version, u32 rows, u32
cols, little-endian) followed by row-major little-endian float32. A dataset
stores one feature file per video holding the clip matrix with the query
matrix stacked below it; the annotation file gives K, which splits them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .losses import MomentSpan

FEATURE_MAGIC = b"PRVG"
FEATURE_VERSION = 1
HEADER = struct.Struct("<4sIII")

ANNOTATION_FILENAME = "annotations.json"
FEATURES_DIRNAME = "features"
FEATURE_SUFFIX = ".prvg"

MIN_EVENT_CLIPS = 2
ORDINAL_SCALE = 1.0
DRIFT_SCALE = 0.35


@dataclass
class GroundingSample:
    """One video: clip features, ordered query features, aligned spans."""

    video_id: str
    clip_features: np.ndarray  # (N, d_feat) float32
    query_features: np.ndarray  # (K, d_feat) float32
    spans: list[MomentSpan]
    duration: float | None = None  # seconds, when known from annotations

    def __post_init__(self):
        if len(self.spans) != self.query_features.shape[0]:
            raise ValueError(
                f"{self.query_features.shape[0]} queries vs {len(self.spans)} spans"
            )
        if len(self.spans) < 1:
            raise ValueError("a sample needs at least one query")
        if not np.isfinite(self.clip_features).all() or not np.isfinite(
            self.query_features
        ).all():
            raise ValueError("non-finite features")

    @property
    def n_clips(self) -> int:
        return self.clip_features.shape[0]

    @property
    def n_queries(self) -> int:
        return self.query_features.shape[0]


@dataclass
class GeneratorConfig:
    n_clips: int = 32
    d_feat: int = 32
    k_min: int = 2
    k_max: int = 8
    vocab_size: int = 16
    noise_sigma: float = 0.05
    ambiguity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1 or self.d_feat < 4:
            raise ValueError("need n_clips >= 1 and d_feat >= 4")
        if not (1 <= self.k_min <= self.k_max):
            raise ValueError(f"bad event-count range [{self.k_min}, {self.k_max}]")
        if self.vocab_size < self.k_max:
            raise ValueError("vocabulary must cover the maximum event count")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not (0.0 <= self.ambiguity <= 1.0):
            raise ValueError("ambiguity rate must be in [0, 1]")

    @property
    def code_dim(self) -> int:
        return self.d_feat // 2

    def to_dict(self) -> dict:
        return {
            "n_clips": self.n_clips,
            "d_feat": self.d_feat,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "vocab_size": self.vocab_size,
            "noise_sigma": self.noise_sigma,
            "ambiguity": self.ambiguity,
            "seed": self.seed,
        }


def _unit_rows(rng, n: int, d: int) -> np.ndarray:
    """n random unit rows in R^d, orthonormal when n <= d."""
    g = rng.standard_normal((max(n, 1), d))
    if n <= d:
        q, _ = np.linalg.qr(g.T)
        return q.T[:n].copy()
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def vocabulary(cfg: GeneratorConfig):
    """Deterministic (code embeddings, ordinal vectors, drift basis) for a config."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0DE]))
    d_code = cfg.code_dim
    d_ctx = cfg.d_feat - d_code
    codes = _unit_rows(rng, cfg.vocab_size, d_code)
    ordinals = _unit_rows(rng, cfg.k_max, d_ctx) * ORDINAL_SCALE
    drift = _unit_rows(rng, 2, d_ctx) * DRIFT_SCALE
    return codes, ordinals, drift


def _place_spans(rng, n_clips: int, k: int) -> list[tuple[int, int]]:
    """K disjoint clip ranges (inclusive), separated by >= 1 clip, sorted."""
    reserve = MIN_EVENT_CLIPS * k + (k - 1)
    if reserve > n_clips:
        raise ValueError(
            f"cannot place {k} events of >= {MIN_EVENT_CLIPS} clips in {n_clips} clips"
        )
    max_len = max(MIN_EVENT_CLIPS, n_clips // max(2, k))
    budget = n_clips - (k - 1)  # inner gaps of one clip are reserved
    lengths = []
    for j in range(k):
        still_needed = MIN_EVENT_CLIPS * (k - j - 1)
        hi = min(max_len, budget - still_needed)
        lengths.append(int(rng.integers(MIN_EVENT_CLIPS, hi + 1)))
        budget -= lengths[-1]
    extra = rng.multinomial(budget, np.full(k + 1, 1.0 / (k + 1)))
    spans = []
    cursor = int(extra[0])
    for j, length in enumerate(lengths):
        spans.append((cursor, cursor + length - 1))
        cursor += length + int(extra[j + 1]) + (1 if j < k - 1 else 0)
    return spans


def generate_sample(cfg: GeneratorConfig, rng, video_id: str = "synth") -> GroundingSample:
    """One video with planted events; ground truth exact by construction."""
    codes, ordinals, drift = vocabulary(cfg)
    n, d = cfg.n_clips, cfg.d_feat
    d_code = cfg.code_dim

    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    clip_spans = _place_spans(rng, n, k)

    used: list[int] = []
    event_codes: list[int] = []
    for _ in range(k):
        if used and rng.random() < cfg.ambiguity:
            code = used[int(rng.integers(len(used)))]
        else:
            remaining = [c for c in range(cfg.vocab_size) if c not in used]
            code = remaining[int(rng.integers(len(remaining)))]
        event_codes.append(code)
        if code not in used:
            used.append(code)
    ranks = [event_codes[:j].count(c) for j, c in enumerate(event_codes)]

    t = np.arange(n) / max(n - 1, 1)
    clips = np.zeros((n, d))
    clips[:, d_code:] = np.outer(np.cos(np.pi * t), drift[0]) + np.outer(
        np.sin(np.pi * t), drift[1]
    )
    for (a, b), code in zip(clip_spans, event_codes):
        clips[a : b + 1, :d_code] = codes[code]
        if cfg.noise_sigma > 0:
            clips[a : b + 1] += cfg.noise_sigma * rng.standard_normal((b - a + 1, d))

    queries = np.zeros((k, d))
    for j, (code, rank) in enumerate(zip(event_codes, ranks)):
        queries[j, :d_code] = codes[code]
        queries[j, d_code:] = ordinals[rank]
    if cfg.noise_sigma > 0:
        queries += cfg.noise_sigma * rng.standard_normal((k, d))

    spans = [MomentSpan(a / n, (b + 1) / n) for a, b in clip_spans]
    return GroundingSample(
        video_id=video_id,
        clip_features=clips.astype(np.float32),
        query_features=queries.astype(np.float32),
        spans=spans,
    )


def generate_dataset(cfg: GeneratorConfig, n_samples: int) -> list[GroundingSample]:
    """n_samples videos from per-sample rng streams split off cfg.seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    children = np.random.SeedSequence(cfg.seed).spawn(n_samples)
    return [
        generate_sample(cfg, np.random.default_rng(ss), video_id=f"synth{i:04d}")
        for i, ss in enumerate(children)
    ]


# -- feature files ----------------------------------------------------------------


def write_features(path, matrix: np.ndarray) -> None:
    """Binary matrix file; float32 on disk."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("refusing to write non-finite features")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes) at byte 0")
    magic, version, rows, cols = HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at byte 0")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at byte 4")
    expected = HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload size mismatch at byte {HEADER.size}: "
            f"expected {expected} total bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size)
    return data.reshape(rows, cols).copy()


# -- annotations ---------------------------------------------------------------------


@dataclass
class AnnotationRecord:
    """One video's paragraph: normalized spans in paragraph order."""

    video_id: str
    duration: float
    spans: list[MomentSpan]
    sentences: list[str] | None = None


def write_annotations(path, records: list[dict]) -> None:
    """records: list of {video_id, duration, timestamps (seconds), sentences?}."""
    out = {}
    for rec in records:
        entry = {
            "duration": rec["duration"],
            "timestamps": [[float(s), float(e)] for s, e in rec["timestamps"]],
        }
        if rec.get("sentences") is not None:
            entry["sentences"] = list(rec["sentences"])
        out[rec["video_id"]] = entry
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_annotations(path) -> list[AnnotationRecord]:
    """Parse and normalize annotations: clamp each span to [0, duration],
    divide by duration. Records with start > end are rejected by name."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected an object keyed by video id")
    records = []
    for idx, (vid, entry) in enumerate(doc.items()):
        where = f"{path}: record {idx} ({vid!r})"
        if not isinstance(entry, dict):
            raise ValueError(f"{where}: expected an object")
        try:
            duration = float(entry["duration"])
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"{where}: field 'duration' missing or not a number")
        if not (duration > 0 and np.isfinite(duration)):
            raise ValueError(f"{where}: field 'duration' must be positive, got {duration}")
        timestamps = entry.get("timestamps")
        if not isinstance(timestamps, list) or not timestamps:
            raise ValueError(f"{where}: field 'timestamps' missing or empty")
        spans = []
        for j, ts in enumerate(timestamps):
            try:
                s, e = float(ts[0]), float(ts[1])
            except (TypeError, ValueError, IndexError):
                raise ValueError(f"{where}: field 'timestamps[{j}]' is not a number pair")
            if not (np.isfinite(s) and np.isfinite(e)):
                raise ValueError(f"{where}: field 'timestamps[{j}]' is non-finite")
            if s > e:
                raise ValueError(
                    f"{where}: field 'timestamps[{j}]': start {s} > end {e}"
                )
            s = min(max(s, 0.0), duration)
            e = min(max(e, 0.0), duration)
            spans.append(MomentSpan(s / duration, e / duration))
        sentences = entry.get("sentences")
        if sentences is not None:
            if not isinstance(sentences, list) or len(sentences) != len(spans):
                raise ValueError(
                    f"{where}: field 'sentences' must align with timestamps"
                )
        records.append(
            AnnotationRecord(video_id=vid, duration=duration, spans=spans, sentences=sentences)
        )
    return records


# -- dataset directory layout ----------------------------------------------------------


def write_dataset(out_dir, samples: list[GroundingSample], clip_duration: float = 1.0):
    """features/<vid>.prvg (clips with queries stacked below) + annotations.json."""
    import os

    feat_dir = os.path.join(out_dir, FEATURES_DIRNAME)
    os.makedirs(feat_dir, exist_ok=True)
    records = []
    for s in samples:
        stacked = np.vstack([s.clip_features, s.query_features])
        write_features(os.path.join(feat_dir, s.video_id + FEATURE_SUFFIX), stacked)
        duration = s.n_clips * clip_duration
        records.append(
            {
                "video_id": s.video_id,
                "duration": duration,
                "timestamps": [(sp.t_s * duration, sp.t_e * duration) for sp in s.spans],
            }
        )
    write_annotations(os.path.join(out_dir, ANNOTATION_FILENAME), records)


def load_dataset(data_dir) -> list[GroundingSample]:
    import os

    records = read_annotations(os.path.join(data_dir, ANNOTATION_FILENAME))
    samples = []
    for rec in records:
        path = os.path.join(data_dir, FEATURES_DIRNAME, rec.video_id + FEATURE_SUFFIX)
        stacked = read_features(path)
        k = len(rec.spans)
        if stacked.shape[0] <= k:
            raise ValueError(
                f"{path}: {stacked.shape[0]} rows cannot hold clips plus {k} queries"
            )
        samples.append(
            GroundingSample(
                video_id=rec.video_id,
                clip_features=stacked[:-k],
                query_features=stacked[-k:],
                spans=rec.spans,
                duration=rec.duration,
            )
        )
    return samples


# -- protocol helpers --------------------------------------------------------------------


def split_subparagraphs(k: int, max_k: int = 8) -> list[int]:
    """Greedy left-to-right chunk sizes, each <= max_k, summing to k."""
    if k < 1 or max_k < 1:
        raise ValueError("k and max_k must be >= 1")
    sizes = [max_k] * (k // max_k)
    if k % max_k:
        sizes.append(k % max_k)
    return sizes


def uniform_sample_clips(features: np.ndarray, n: int) -> np.ndarray:
    """n rows at indices floor((i + 0.5) * M / n); repeats rows when M < n."""
    m = features.shape[0]
    if m < 1 or n < 1:
        raise ValueError("need at least one row and n >= 1")
    idx = ((np.arange(n) + 0.5) * m / n).astype(int)
    return features[idx]
