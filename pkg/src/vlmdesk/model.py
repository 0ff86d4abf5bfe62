"""Single shared encoder over [CLS] video [SEP] text [SEP] sequences.

Video features pass through a small trainable MLP to become tokens in the
encoder's hidden space; text ids are looked up in the word-embedding table.
One post-LN transformer stack encodes both, and one affine head maps hidden
states to predicted token embeddings for either modality.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Kind(enum.IntEnum):
    CLS = 0
    VIDEO = 1
    SEP = 2
    TEXT = 3
    PAD = 4


VIDEO_SEGMENT = 0
TEXT_SEGMENT = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 512
    d_video_feat: int = 16
    max_len: int = 32
    max_video_tokens: int = 8
    d_proj_hidden: int | None = None
    pad_id: int = 0
    cls_id: int = 1
    sep_id: int = 2
    mask_id: int = 3
    dummy_text_id: int = 4
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_video_tokens + 3 >= self.max_len:
            raise ValueError("max_video_tokens plus the three specials must leave room for text")
        if min(self.d_model, self.n_layers, self.d_ff, self.d_video_feat, self.max_video_tokens) < 1:
            raise ValueError("model sizes must be positive")
        ids = self.special_ids
        if len(set(ids)) != len(ids):
            raise ValueError(f"special ids must be distinct: {ids}")
        if max(ids) >= self.vocab_size or min(ids) < 0:
            raise ValueError("special ids must lie inside the vocabulary")
        if self.vocab_size <= len(ids):
            raise ValueError("vocabulary has no room for ordinary words")

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (self.pad_id, self.cls_id, self.sep_id, self.mask_id, self.dummy_text_id)

    @property
    def first_word_id(self) -> int:
        return max(self.special_ids) + 1

    @property
    def proj_hidden(self) -> int:
        return self.d_proj_hidden or self.d_model

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def published(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=768, n_layers=12, n_heads=12, d_ff=3072, vocab_size=30522,
                    d_video_feat=512, max_len=96, max_video_tokens=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), True, k) for k, t in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, std = config.d_model, config.init_std
    p = ModelParams(config)

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    p.add("word_emb", normal(config.vocab_size, d))
    p.add("pos_emb", normal(config.max_len, d))
    p.add("seg_emb", normal(2, d))
    hid = config.proj_hidden
    p.add("proj.w1", rng.normal(0.0, 1.0 / math.sqrt(config.d_video_feat), size=(config.d_video_feat, hid)))
    p.add("proj.b1", np.zeros(hid))
    p.add("proj.w2", normal(hid, d))
    p.add("proj.b2", np.zeros(d))
    for i in range(config.n_layers):
        pre = f"layer{i}."
        for w in ("q", "k", "v", "o"):
            p.add(pre + "w" + w, normal(d, d))
            p.add(pre + "b" + w, np.zeros(d))
        p.add(pre + "ln1.g", np.ones(d))
        p.add(pre + "ln1.b", np.zeros(d))
        p.add(pre + "ff.w1", normal(d, config.d_ff))
        p.add(pre + "ff.b1", np.zeros(config.d_ff))
        p.add(pre + "ff.w2", normal(config.d_ff, d))
        p.add(pre + "ff.b2", np.zeros(d))
        p.add(pre + "ln2.g", np.ones(d))
        p.add(pre + "ln2.b", np.zeros(d))
    p.add("head.w", normal(d, d))
    p.add("head.b", np.zeros(d))
    p.add("mlm_bias", np.zeros(config.vocab_size))
    return p


# ---------------------------------------------------------------------------
# video projection and sequence layout
# ---------------------------------------------------------------------------


def project_video_features(features, params: ModelParams,
                           activation: Callable[[Tensor], Tensor] = nx.gelu) -> Tensor:
    """Map raw per-second features (T x d_video_feat) to video tokens (T x d_model)."""
    cfg = params.config
    f = nx.as_tensor(features)
    if f.ndim != 2 or f.shape[1] != cfg.d_video_feat:
        raise ValueError(f"expected features of width {cfg.d_video_feat}, got shape {f.shape}")
    if f.shape[0] == 0:
        raise ValueError("video has zero frames")
    if f.shape[0] > cfg.max_video_tokens:
        raise ValueError(f"{f.shape[0]} frames exceed max_video_tokens={cfg.max_video_tokens}")
    return video_mlp(f, params, activation)


def video_mlp(f: Tensor, params: ModelParams, activation=nx.gelu) -> Tensor:
    hidden = activation(f @ params["proj.w1"] + params["proj.b1"])
    return hidden @ params["proj.w2"] + params["proj.b2"]


@dataclass
class MultimodalSequence:
    """[CLS] video [SEP] text [SEP] padded to a fixed length.

    ``token_ids`` carries the vocabulary id at every non-video position (the
    pad id at video positions); ``video`` holds the video token vectors.
    Position ids restart at 0 in each segment so a text block is encoded
    identically whatever video block it is paired with.
    """

    kinds: np.ndarray
    token_ids: np.ndarray
    video: Tensor
    segment_ids: np.ndarray
    position_ids: np.ndarray
    n_video: int
    n_text: int

    @property
    def padded_len(self) -> int:
        return len(self.kinds)

    @property
    def length(self) -> int:
        return self.n_video + self.n_text + 3

    @property
    def video_positions(self) -> np.ndarray:
        return np.arange(1, 1 + self.n_video)

    @property
    def sep1(self) -> int:
        return self.n_video + 1

    @property
    def text_positions(self) -> np.ndarray:
        return np.arange(self.n_video + 2, self.n_video + 2 + self.n_text)

    @property
    def sep2(self) -> int:
        return self.n_video + self.n_text + 2

    @property
    def text_ids(self) -> np.ndarray:
        return self.token_ids[self.text_positions]

    def replace(self, **changes) -> "MultimodalSequence":
        return dataclasses.replace(self, **changes)


def dummy_video(config: ModelConfig) -> Tensor:
    return Tensor(np.zeros((1, config.d_model)))


def assemble_sequence(x_v, text_ids: Sequence[int], config: ModelConfig,
                      pad_to: int | None = None) -> MultimodalSequence:
    video = nx.as_tensor(x_v)
    text_ids = np.asarray(text_ids, dtype=np.int64).reshape(-1)
    m, n = video.shape[0], len(text_ids)
    if m < 1 or n < 1:
        raise ValueError(f"both blocks need at least one token (video={m}, text={n}); use dummy tokens")
    if video.ndim != 2 or video.shape[1] != config.d_model:
        raise ValueError(f"video tokens must be (m, {config.d_model}), got {video.shape}")
    total = m + n + 3
    pad_to = config.max_len if pad_to is None else pad_to
    if total > config.max_len or total > pad_to:
        raise ValueError(
            f"sequence overflow: {m} video + {n} text + 3 specials = {total} > max_len {min(config.max_len, pad_to)}")
    if np.any((text_ids < 0) | (text_ids >= config.vocab_size)):
        raise ValueError("text id outside vocabulary")
    kinds = np.full(pad_to, Kind.PAD, dtype=np.int64)
    ids = np.full(pad_to, config.pad_id, dtype=np.int64)
    seg = np.zeros(pad_to, dtype=np.int64)
    pos = np.zeros(pad_to, dtype=np.int64)
    kinds[0], ids[0] = Kind.CLS, config.cls_id
    kinds[1:m + 1] = Kind.VIDEO
    kinds[m + 1], ids[m + 1] = Kind.SEP, config.sep_id
    kinds[m + 2:m + 2 + n] = Kind.TEXT
    ids[m + 2:m + 2 + n] = text_ids
    kinds[m + n + 2], ids[m + n + 2] = Kind.SEP, config.sep_id
    pos[:m + 2] = np.arange(m + 2)
    pos[m + 2:total] = np.arange(n + 1)
    seg[m + 2:total] = TEXT_SEGMENT
    return MultimodalSequence(kinds, ids, video, seg, pos, m, n)


def embed_sequences(seqs: Sequence[MultimodalSequence], params: ModelParams) -> Tensor:
    """Input embeddings (B, L, d): token or video vector + position + segment."""
    cfg = params.config
    L = seqs[0].padded_len
    if any(s.padded_len != L for s in seqs):
        raise ValueError("sequences in a batch must share one padded length")
    table_rows = [params["word_emb"]]
    offset = cfg.vocab_size
    rows = np.empty((len(seqs), L), dtype=np.int64)
    for b, s in enumerate(seqs):
        rows[b] = s.token_ids
        rows[b, s.video_positions] = offset + np.arange(s.n_video)
        offset += s.n_video
        table_rows.append(s.video)
    table = nx.concat(table_rows, axis=0)
    tok = table[rows]
    pos = params["pos_emb"][np.stack([s.position_ids for s in seqs])]
    seg = params["seg_emb"][np.stack([s.segment_ids for s in seqs])]
    return tok + pos + seg


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def _effective_allow(seq: MultimodalSequence, allow: np.ndarray) -> np.ndarray:
    L = seq.padded_len
    if allow.shape != (L, L):
        raise ValueError(f"attention mask shape {allow.shape} does not match sequence length {L}")
    not_pad = seq.kinds != Kind.PAD
    eff = allow & not_pad[None, :]
    empty = ~eff.any(axis=1)
    if np.any(empty & not_pad):
        bad = np.flatnonzero(empty & not_pad)
        raise ValueError(f"attention rows {bad.tolist()} allow no key")
    # PAD queries are never read; let them see themselves so the softmax stays finite.
    eff[empty, empty] = True
    return eff


def _mask_array(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "allow", mask), dtype=bool)


def encode_batch(seqs: Sequence[MultimodalSequence], masks, params: ModelParams,
                 attn_out: list | None = None) -> Tensor:
    """Final-layer hidden states (B, L, d).

    ``masks`` is one attention mask per sequence. When ``attn_out`` is a list,
    the per-layer attention probabilities (B, H, L, L) are appended to it.
    """
    cfg = params.config
    allow = np.stack([_effective_allow(s, _mask_array(m)) for s, m in zip(seqs, masks)])
    x = embed_sequences(seqs, params)
    B, L, d = x.shape
    H = cfg.n_heads
    dh = d // H
    allow4 = np.broadcast_to(allow[:, None, :, :], (B, H, L, L))
    scale = 1.0 / math.sqrt(dh)

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        q = heads(x @ params[pre + "wq"] + params[pre + "bq"])
        k = heads(x @ params[pre + "wk"] + params[pre + "bk"])
        v = heads(x @ params[pre + "wv"] + params[pre + "bv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        probs = nx.masked_softmax(scores, allow4)
        if attn_out is not None:
            attn_out.append(probs.data.copy())
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        attn = ctx @ params[pre + "wo"] + params[pre + "bo"]
        x = nx.layer_norm(x + attn, params[pre + "ln1.g"], params[pre + "ln1.b"], cfg.ln_eps)
        ff = nx.gelu(x @ params[pre + "ff.w1"] + params[pre + "ff.b1"]) @ params[pre + "ff.w2"] + params[pre + "ff.b2"]
        x = nx.layer_norm(x + ff, params[pre + "ln2.g"], params[pre + "ln2.b"], cfg.ln_eps)
    return x


def encode(seq: MultimodalSequence, mask, params: ModelParams) -> Tensor:
    """Hidden states (L, d) for one sequence."""
    return encode_batch([seq], [mask], params)[0]


def predict_embeddings(h: Tensor, params: ModelParams) -> Tensor:
    """The shared prediction head: one affine map for video and text positions."""
    return h @ params["head.w"] + params["head.b"]


def vocab_logits(e: Tensor, params: ModelParams) -> Tensor:
    """Tied-vocabulary logits: predicted embedding against every word embedding, plus bias."""
    return e @ params["word_emb"].transpose() + params["mlm_bias"]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VLMCKPT1"


def save_checkpoint(path, params: ModelParams, extras: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write params (and optional extra arrays) as a flat float64 container.

    Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header
    {config, meta, tensors: [{name, shape}]}, then each tensor's row-major
    little-endian float64 payload in header order.
    """
    entries = [(k, t.data) for k, t in params.tensors.items()]
    entries += [(k, np.asarray(v)) for k, v in (extras or {}).items()]
    header = {
        "config": params.config.to_dict(),
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(a.shape), "extra": i >= len(params.tensors)}
                    for i, (k, a) in enumerate(entries)],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic at byte 0)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header length at byte 8")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: header of {hlen} bytes runs past end of file at byte 16")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header at byte 16: {exc}") from None
    params = ModelParams(config)
    extras: dict[str, np.ndarray] = {}
    off = 16 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']!r} at byte {off}")
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
        if entry["extra"]:
            extras[entry["name"]] = a
        else:
            params.add(entry["name"], a)
    return params, extras, header["meta"]
