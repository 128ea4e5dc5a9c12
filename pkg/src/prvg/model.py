"""Transformer encoder-decoder that regresses one temporal span per sentence.

Clip features self-attend in the encoder; sentence features act as decoder
queries, self-attending across the paragraph and cross-attending over the
encoded clips; a shared 3-layer head maps each query's representation to a
normalized (start, end) pair. Post-norm residual blocks throughout, fixed
sinusoidal positions added once at the inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .losses import MomentSpan
from .tensor import ParameterSet, Tensor

CHECKPOINT_FORMAT = "prvg-checkpoint-v1"


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position matrix: even dims sin(pos/10000^(2i/d)), odd dims cos."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if d_model % 2 != 0:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    denom = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos / denom)
    pe[:, 1::2] = np.cos(pos / denom)
    return pe


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are desk-scale."""

    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int | None = None  # resolved to 4 * d_model
    dropout: float = 0.1
    max_clips: int = 32
    max_queries: int = 8
    d_feat: int = 32  # raw feature width before the input projections
    seed: int = 0

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(
                f"n_heads must divide d_model ({self.d_model} % {self.n_heads} != 0)"
            )
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_clips < 1 or self.max_queries < 1 or self.d_feat < 1:
            raise ValueError("max_clips, max_queries, d_feat must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        """Closed-form learnable scalar count.

        2 input projections of (d_feat*d + d); per attention block 4(d^2+d);
        per feed-forward d*f + f + f*d + d; per layer-norm 2d. An encoder
        layer has 1 attention + 1 FFN + 2 norms; a decoder layer 2 attention
        + 1 FFN + 3 norms; the head is d->d->d->2 with biases.
        """
        d, f = self.d_model, self.ffn_dim
        proj = 2 * (self.d_feat * d + d)
        attn = 4 * (d * d + d)
        ffn = d * f + f + f * d + d
        norm = 2 * d
        enc = self.n_enc_layers * (attn + ffn + 2 * norm)
        dec = self.n_dec_layers * (2 * attn + ffn + 3 * norm)
        head = 2 * (d * d + d) + (d * 2 + 2)
        return proj + enc + dec + head

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DecoderOutput:
    """Per-query representations, designated cross-attention map, and spans."""

    representations: Tensor  # (K, d_model)
    attention: Tensor  # (K, N), head-averaged final decoder layer
    spans: Tensor  # (K, 2), each row (t_s, t_e) with t_s <= t_e, in [0, 1]

    def span_list(self) -> list[MomentSpan]:
        return [MomentSpan(float(s), float(e)) for s, e in self.spans.data]


class PRVG:
    """The grounding network; all learnable state lives in ``self.params``."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params = ParameterSet()
        rng = np.random.default_rng(cfg.seed)
        d, f = cfg.d_model, cfg.ffn_dim
        self._linear(rng, "video_proj", cfg.d_feat, d)
        self._linear(rng, "query_proj", cfg.d_feat, d)
        for l in range(cfg.n_enc_layers):
            self._attn_block(rng, f"enc.{l}.attn")
            self._norm(f"enc.{l}.norm1")
            self._linear(rng, f"enc.{l}.ffn.0", d, f)
            self._linear(rng, f"enc.{l}.ffn.1", f, d)
            self._norm(f"enc.{l}.norm2")
        for l in range(cfg.n_dec_layers):
            self._attn_block(rng, f"dec.{l}.self_attn")
            self._norm(f"dec.{l}.norm1")
            self._attn_block(rng, f"dec.{l}.cross_attn")
            self._norm(f"dec.{l}.norm2")
            self._linear(rng, f"dec.{l}.ffn.0", d, f)
            self._linear(rng, f"dec.{l}.ffn.1", f, d)
            self._norm(f"dec.{l}.norm3")
        self._linear(rng, "head.0", d, d)
        self._linear(rng, "head.1", d, d)
        self._linear(rng, "head.2", d, 2)
        self._pe_video = positional_encoding(cfg.max_clips, d)
        self._pe_query = positional_encoding(cfg.max_queries, d)

    # -- parameter construction ------------------------------------------------

    def _linear(self, rng, name: str, fan_in: int, fan_out: int):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.params.add(name + ".w", Tensor(rng.uniform(-limit, limit, (fan_in, fan_out))))
        self.params.add(name + ".b", Tensor(np.zeros(fan_out)))

    def _attn_block(self, rng, prefix: str):
        d = self.cfg.d_model
        for part in ("q", "k", "v", "o"):
            self._linear(rng, f"{prefix}.{part}", d, d)

    def _norm(self, prefix: str):
        d = self.cfg.d_model
        self.params.add(prefix + ".gain", Tensor(np.ones(d)))
        self.params.add(prefix + ".bias", Tensor(np.zeros(d)))

    # -- building blocks ---------------------------------------------------------

    def _apply_linear(self, x: Tensor, name: str) -> Tensor:
        return T.add(T.matmul(x, self.params[name + ".w"]), self.params[name + ".b"])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[prefix + ".gain"], self.params[prefix + ".bias"])

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        p = self.cfg.dropout
        if not train or p == 0.0:
            return x
        if rng is None:
            raise ValueError("training forward needs an rng for dropout")
        keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
        return T.mul(x, Tensor(keep))

    def _mha(self, q_in: Tensor, kv_in: Tensor, prefix: str, key_mask=None):
        """Multi-head attention; returns (output, head-averaged attention)."""
        cfg = self.cfg
        q = self._apply_linear(q_in, prefix + ".q")
        k = self._apply_linear(kv_in, prefix + ".k")
        v = self._apply_linear(kv_in, prefix + ".v")
        inv_sqrt_dk = 1.0 / np.sqrt(cfg.d_head)
        outs, attns = [], []
        for h in range(cfg.n_heads):
            lo, hi = h * cfg.d_head, (h + 1) * cfg.d_head
            qh = q.slice_last(lo, hi)
            kh = k.slice_last(lo, hi)
            vh = v.slice_last(lo, hi)
            scores = T.scale(T.matmul(qh, kh.transpose()), inv_sqrt_dk)
            attn = T.softmax(scores, mask=key_mask)
            attns.append(attn)
            outs.append(T.matmul(attn, vh))
        out = self._apply_linear(T.concat(outs), prefix + ".o")
        avg = attns[0]
        for a in attns[1:]:
            avg = T.add(avg, a)
        return out, T.scale(avg, 1.0 / cfg.n_heads)

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return self._apply_linear(self._apply_linear(x, prefix + ".0").relu(), prefix + ".1")

    # -- pipeline stages ------------------------------------------------------------

    def encode(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        """Self-attention stack over clip features (positions already added)."""
        for l in range(self.cfg.n_enc_layers):
            h, _ = self._mha(x, x, f"enc.{l}.attn")
            x = self._ln(T.add(x, self._dropout(h, train, rng)), f"enc.{l}.norm1")
            h = self._ffn(x, f"enc.{l}.ffn")
            x = self._ln(T.add(x, self._dropout(h, train, rng)), f"enc.{l}.norm2")
        return x

    def decode(self, y: Tensor, enc: Tensor, valid: np.ndarray, train: bool = False, rng=None):
        """Query stack: masked self-attention, cross-attention over clips, FFN.

        Padded queries are masked out as self-attention keys only; their rows
        still flow through and produce (ignored) spans. Returns the final
        representations and the last layer's head-averaged cross-attention.
        """
        cross_avg = None
        for l in range(self.cfg.n_dec_layers):
            h, _ = self._mha(y, y, f"dec.{l}.self_attn", key_mask=valid)
            y = self._ln(T.add(y, self._dropout(h, train, rng)), f"dec.{l}.norm1")
            h, cross_avg = self._mha(y, enc, f"dec.{l}.cross_attn")
            y = self._ln(T.add(y, self._dropout(h, train, rng)), f"dec.{l}.norm2")
            h = self._ffn(y, f"dec.{l}.ffn")
            y = self._ln(T.add(y, self._dropout(h, train, rng)), f"dec.{l}.norm3")
        return y, cross_avg

    def regress(self, dec: Tensor) -> Tensor:
        """Shared head mapping each query row to an ordered span in [0, 1]^2."""
        h = self._apply_linear(dec, "head.0").relu()
        h = self._apply_linear(h, "head.1").relu()
        raw = self._apply_linear(h, "head.2").sigmoid()
        u = raw.slice_last(0, 1)
        v = raw.slice_last(1, 2)
        return T.concat([T.minimum(u, v), T.maximum(u, v)])

    def forward(
        self,
        clip_features: np.ndarray,
        query_features: np.ndarray,
        valid: np.ndarray | None = None,
        positions: np.ndarray | None = None,
        train: bool = False,
        rng=None,
    ) -> DecoderOutput:
        """Full pass: project, add positions, encode, decode, regress.

        clip_features: (N, d_feat); query_features: (K, d_feat); valid marks
        real (non-padding) queries; positions are sentence position indices
        (default 0..K-1). Returns exactly one span per query row.
        """
        cfg = self.cfg
        clips = np.asarray(clip_features, dtype=np.float64)
        queries = np.asarray(query_features, dtype=np.float64)
        if clips.ndim != 2 or clips.shape[1] != cfg.d_feat:
            raise T.ShapeError(
                f"clip features shape {clips.shape} incompatible with d_feat={cfg.d_feat}"
            )
        if queries.ndim != 2 or queries.shape[1] != cfg.d_feat:
            raise T.ShapeError(
                f"query features shape {queries.shape} incompatible with d_feat={cfg.d_feat}"
            )
        n, k = clips.shape[0], queries.shape[0]
        if n > cfg.max_clips:
            raise ValueError(f"{n} clips exceeds max_clips={cfg.max_clips}")
        if k > cfg.max_queries:
            raise ValueError(f"{k} queries exceeds max_queries={cfg.max_queries}")
        if valid is None:
            valid = np.ones(k, dtype=bool)
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != (k,):
                raise ValueError(f"validity mask shape {valid.shape} != ({k},)")
        if not valid.any():
            raise ValueError("no valid queries")
        if positions is None:
            positions = np.arange(k)
        else:
            positions = np.asarray(positions, dtype=np.intp)
            if positions.shape != (k,):
                raise ValueError(f"positions shape {positions.shape} != ({k},)")

        x = self._apply_linear(Tensor(clips), "video_proj")
        x = T.add(x, Tensor(self._pe_video[:n]))
        enc = self.encode(x, train, rng)

        y = self._apply_linear(Tensor(queries), "query_proj")
        y = T.add(y, Tensor(self._pe_query[positions]))
        reps, attn = self.decode(y, enc, valid, train, rng)
        spans = self.regress(reps)
        return DecoderOutput(representations=reps, attention=attn, spans=spans)


# -- checkpointing ---------------------------------------------------------------


def save_checkpoint(model: PRVG, path) -> None:
    """Single file: u64-LE manifest length, JSON manifest, then f64-LE blobs
    concatenated in manifest order."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "params": [
            {"name": name, "shape": list(t.data.shape)}
            for name, t in model.params.items()
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in model.params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> PRVG:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"checkpoint truncated: {len(raw)} bytes")
    (mlen,) = struct.unpack_from("<Q", raw, 0)
    if len(raw) < 8 + mlen:
        raise ValueError(f"checkpoint truncated inside manifest at byte {len(raw)}")
    try:
        manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"checkpoint manifest is not valid JSON: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    model = PRVG(ModelConfig.from_dict(manifest["config"]))
    off = 8 + mlen
    state = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        chunk = raw[off : off + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(
                f"checkpoint truncated in parameter {entry['name']!r} at byte {off}"
            )
        state[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        off += nbytes
    if off != len(raw):
        raise ValueError(f"{len(raw) - off} trailing bytes after parameters")
    expected = set(model.params)
    got = set(state)
    if expected != got:
        raise ValueError(
            f"checkpoint parameters do not match model: missing {sorted(expected - got)}, "
            f"unexpected {sorted(got - expected)}"
        )
    model.params.load_state(state)
    return model
