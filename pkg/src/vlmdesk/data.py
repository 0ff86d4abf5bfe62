"""Synthetic paired video/text corpora, clip sampling, batching, and feature files.

Each synthetic video has a latent topic. Every second carries a latent concept
drawn from the topic's concept set (concepts persist for a few seconds, like
steps of a procedure). The frame feature for a second is topic prototype +
concept prototype + noise, and the words spoken during that second come mostly
from the concept's small word set, so text and video spans share signal.
"""

from __future__ import annotations

import logging
import struct
import threading
import queue
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .masking import MaskingConfig, MaskPlan, MaskTargets, apply_mask_plan, sample_mask_plan
from .model import ModelParams, MultimodalSequence, assemble_sequence, video_mlp
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass
class VideoRecord:
    video_id: str
    features: np.ndarray  # (T, d_video_feat) float32, one row per second
    token_ids: np.ndarray  # (n,) int64
    timestamps: np.ndarray  # (n,) float32 seconds, non-decreasing

    def same_content(self, other: "VideoRecord") -> bool:
        return (self.video_id == other.video_id
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.token_ids, other.token_ids)
                and np.array_equal(self.timestamps, other.timestamps))

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticVideo(VideoRecord):
    topic: int = -1
    concepts: np.ndarray | None = None  # (T,) latent concept per second


@dataclass(frozen=True)
class CorpusConfig:
    d_video_feat: int = 16
    vocab_size: int = 512
    first_word_id: int = 5
    seconds: int = 60
    text_rate: float = 2.0
    n_topics: int = 8
    concepts_per_topic: int = 4
    words_per_concept: int = 6
    concept_word_prob: float = 0.85
    mean_segment_seconds: float = 5.0
    topic_scale: float = 1.0
    concept_scale: float = 1.0
    noise: float = 0.3

    @property
    def n_concepts(self) -> int:
        return self.n_topics * self.concepts_per_topic

    def __post_init__(self):
        n_words = self.vocab_size - self.first_word_id
        if self.n_concepts * self.words_per_concept > n_words:
            raise ValueError("vocabulary too small for the concept word sets")
        if self.seconds < 1 or self.text_rate <= 0:
            raise ValueError("seconds and text_rate must be positive")


@dataclass
class CorpusWorld:
    """The latent prototypes shared by every video of a corpus."""

    topic_protos: np.ndarray
    concept_protos: np.ndarray
    concept_words: np.ndarray  # (n_concepts, words_per_concept)

    @classmethod
    def from_seed(cls, seed: int, cfg: CorpusConfig) -> "CorpusWorld":
        rng = np.random.default_rng([seed, 0])
        topics = rng.normal(0.0, cfg.topic_scale, size=(cfg.n_topics, cfg.d_video_feat))
        concepts = rng.normal(0.0, cfg.concept_scale, size=(cfg.n_concepts, cfg.d_video_feat))
        words = rng.permutation(np.arange(cfg.first_word_id, cfg.vocab_size))
        words = words[: cfg.n_concepts * cfg.words_per_concept].reshape(cfg.n_concepts, cfg.words_per_concept)
        return cls(topics, concepts, words)

    def topic_of_concept(self, concept: np.ndarray | int, cfg: CorpusConfig):
        return np.asarray(concept) // cfg.concepts_per_topic


def _concept_track(rng: np.random.Generator, topic: int, cfg: CorpusConfig) -> np.ndarray:
    out = np.empty(cfg.seconds, dtype=np.int64)
    t = 0
    p_switch = 1.0 / cfg.mean_segment_seconds
    while t < cfg.seconds:
        c = topic * cfg.concepts_per_topic + int(rng.integers(cfg.concepts_per_topic))
        run = int(rng.geometric(p_switch))
        out[t:t + run] = c
        t += run
    return out


def generate_video(rng: np.random.Generator, world: CorpusWorld, cfg: CorpusConfig,
                   video_id: str, topic: int | None = None) -> SyntheticVideo:
    if topic is None:
        topic = int(rng.integers(cfg.n_topics))
    concepts = _concept_track(rng, topic, cfg)
    feats = world.topic_protos[topic] + world.concept_protos[concepts]
    feats = feats + cfg.noise * rng.normal(size=feats.shape)
    ids, stamps = [], []
    for sec, c in enumerate(concepts):
        k = int(rng.poisson(cfg.text_rate))
        if k == 0:
            continue
        stamps.append(sec + np.sort(rng.random(k)))
        own = rng.random(k) < cfg.concept_word_prob
        ids.append(np.where(own,
                            world.concept_words[c][rng.integers(cfg.words_per_concept, size=k)],
                            rng.integers(cfg.first_word_id, cfg.vocab_size, size=k)))
    token_ids = np.concatenate(ids).astype(np.int64) if ids else np.zeros(0, dtype=np.int64)
    timestamps = np.concatenate(stamps).astype(np.float32) if stamps else np.zeros(0, dtype=np.float32)
    return SyntheticVideo(video_id, feats.astype(np.float32), token_ids, timestamps, topic, concepts)


def generate_corpus(n_videos: int, seed: int, cfg: CorpusConfig = CorpusConfig(),
                    world: CorpusWorld | None = None, id_prefix: str = "vid") -> list[SyntheticVideo]:
    """``n_videos`` synthetic videos, fully determined by ``seed`` and ``cfg``."""
    if n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    world = world or CorpusWorld.from_seed(seed, cfg)
    rng = np.random.default_rng([seed, 1])
    return [generate_video(rng, world, cfg, f"{id_prefix}{i:05d}") for i in range(n_videos)]


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------


@dataclass
class ClipPair:
    video_id: str
    text_ids: np.ndarray
    features: np.ndarray  # (frames, d_video_feat)
    frame_start: int
    frame_end: int  # exclusive
    token_start: int
    frame_labels: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.frame_end - self.frame_start


def sample_clips(video: VideoRecord, rng: np.random.Generator, n_clips: int,
                 len_range: tuple[int, int], max_frames: int | None = None,
                 max_tries: int = 100) -> list[ClipPair]:
    """Random text spans with the video seconds their timestamps cover.

    Start positions are drawn independently, so clips may overlap. A video with
    fewer tokens than the minimum length yields no clips.
    """
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length range {len_range}")
    n_tok = len(video.token_ids)
    if n_tok < lo:
        log.warning("skipping %s: %d tokens < minimum clip length %d", video.video_id, n_tok, lo)
        return []
    concepts = getattr(video, "concepts", None)
    clips: list[ClipPair] = []
    for _ in range(n_clips):
        for _ in range(max_tries):
            n = int(rng.integers(lo, min(hi, n_tok) + 1))
            start = int(rng.integers(0, n_tok - n + 1))
            f0 = int(np.floor(video.timestamps[start]))
            f1 = min(int(np.floor(video.timestamps[start + n - 1])) + 1, video.n_frames)
            if max_frames is None or f1 - f0 <= max_frames:
                break
        else:
            log.warning("no clip of %s fits %s frames; dropping one clip", video.video_id, max_frames)
            continue
        clips.append(ClipPair(
            video.video_id, video.token_ids[start:start + n].copy(), video.features[f0:f1],
            f0, f1, start, None if concepts is None else concepts[f0:f1].copy()))
    return clips


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class PretrainBatch:
    sequences: list[MultimodalSequence]  # masked inputs
    plans: list[MaskPlan]
    targets: list[MaskTargets]
    negatives: Tensor  # V': every non-masked video token in the batch
    clips: list[ClipPair] = field(default_factory=list)

    def scheme_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.plans:
            out[p.scheme.value] = out.get(p.scheme.value, 0) + 1
        return out


def project_clips(clips: Sequence[ClipPair], params: ModelParams) -> list[Tensor]:
    """Video tokens for every clip, computed in one MLP pass."""
    cfg = params.config
    for c in clips:
        if c.features.shape[1] != cfg.d_video_feat:
            raise ValueError(f"clip {c.video_id}@{c.frame_start}: feature width {c.features.shape[1]} "
                             f"!= model d_video_feat {cfg.d_video_feat}")
        if not 1 <= c.n_frames <= cfg.max_video_tokens:
            raise ValueError(f"clip {c.video_id}@{c.frame_start}: {c.n_frames} frames outside "
                             f"[1, {cfg.max_video_tokens}]")
    feats = np.concatenate([c.features for c in clips]).astype(np.float64)
    tokens = video_mlp(Tensor(feats), params)
    cuts = np.cumsum([c.n_frames for c in clips])
    starts = np.concatenate([[0], cuts[:-1]])
    return [tokens[int(s):int(e)] for s, e in zip(starts, cuts)]


def assemble_clip(clip: ClipPair, video_tokens: Tensor, params: ModelParams,
                  pad_to: int | None = None) -> MultimodalSequence:
    try:
        return assemble_sequence(video_tokens, clip.text_ids, params.config, pad_to)
    except ValueError as exc:
        raise ValueError(f"clip {clip.video_id}@{clip.frame_start}: {exc}") from None


def make_batch(clips: Sequence[ClipPair], params: ModelParams, config: MaskingConfig,
               rng: np.random.Generator) -> PretrainBatch:
    """Assemble, sample one mask plan per clip, apply it, and collect V'."""
    tokens = project_clips(clips, params)
    # pad to the longest clip only; padding is neutral for the encoder
    pad_to = min(max(c.n_frames + len(c.text_ids) + 3 for c in clips), params.config.max_len)
    seqs, plans, targets, keep = [], [], [], []
    for clip, tok in zip(clips, tokens):
        seq = assemble_clip(clip, tok, params, pad_to)
        plan = sample_mask_plan(seq, rng, config, params.config)
        masked, tgt = apply_mask_plan(seq, plan, params.config)
        seqs.append(masked)
        plans.append(plan)
        targets.append(tgt)
        kept = np.setdiff1d(np.arange(seq.n_video), tgt.video_rows)
        if len(kept):
            keep.append(tok[kept])
    d = params.config.d_model
    negatives = nx.concat(keep, axis=0) if keep else Tensor(np.zeros((0, d)))
    return PretrainBatch(seqs, plans, targets, negatives, list(clips))


def epoch_batches(corpus: Sequence[VideoRecord], rng: np.random.Generator, videos_per_batch: int,
                  clips_per_video: int, len_range: tuple[int, int],
                  max_frames: int | None) -> Iterator[list[ClipPair]]:
    """One pass over the corpus in a seeded order, ``videos_per_batch`` videos per batch."""
    order = rng.permutation(len(corpus))
    for i in range(0, len(order) - videos_per_batch + 1, videos_per_batch):
        clips: list[ClipPair] = []
        for j in order[i:i + videos_per_batch]:
            clips += sample_clips(corpus[j], rng, clips_per_video, len_range, max_frames)
        if clips:
            yield clips


class BatchQueue:
    """Produces clip batches on a worker thread through a bounded queue.

    One producer with its own seeded RNG keeps the batch order fixed by seed.
    Each item is ``(clips, batch_seed)``; the consumer builds the masked batch
    with ``np.random.default_rng(batch_seed)``.
    """

    _DONE = object()

    def __init__(self, corpus, seed: int, n_batches: int, videos_per_batch: int,
                 clips_per_video: int, len_range, max_frames, capacity: int = 4):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        args = (corpus, seed, n_batches, videos_per_batch, clips_per_video, len_range, max_frames)
        self._thread = threading.Thread(target=self._run, args=args, daemon=True)
        self._thread.start()

    def _run(self, corpus, seed, n_batches, vpb, cpv, len_range, max_frames):
        rng = np.random.default_rng([seed, 2])
        made = 0
        try:
            while made < n_batches and not self._stop.is_set():
                for clips in epoch_batches(corpus, rng, vpb, cpv, len_range, max_frames):
                    if made >= n_batches or self._stop.is_set():
                        break
                    self._q.put((clips, int(rng.integers(2**63))))
                    made += 1
                else:
                    if made == 0:
                        raise ValueError("corpus yields no batches")
        except Exception as exc:  # surfaced to the consumer
            self._q.put(exc)
        self._q.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self):
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._q.get_nowait()
            except queue.Empty:
                self._thread.join(timeout=0.05)


# ---------------------------------------------------------------------------
# feature files and manifests
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"VLMFEAT\x00"
FEATURE_VERSION = 1


class FeatureFileError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


def write_feature_file(path, records: Sequence[VideoRecord], d_video_feat: int | None = None) -> None:
    """Little-endian: magic, u32 version, u32 d_video_feat, u32 count, then per record
    u32 id length + UTF-8 id, u32 T, T*d float32 features, u32 n, n int32 token ids,
    n float32 timestamps."""
    if d_video_feat is None:
        if not records:
            raise ValueError("d_video_feat is required for an empty file")
        d_video_feat = records[0].features.shape[1]
    out = [FEATURE_MAGIC, struct.pack("<III", FEATURE_VERSION, d_video_feat, len(records))]
    for r in records:
        if r.features.ndim != 2 or r.features.shape[1] != d_video_feat:
            raise ValueError(f"{r.video_id}: feature width {r.features.shape} != {d_video_feat}")
        if len(r.token_ids) != len(r.timestamps):
            raise ValueError(f"{r.video_id}: token/timestamp count mismatch")
        vid = r.video_id.encode("utf-8")
        out.append(struct.pack("<I", len(vid)) + vid)
        out.append(struct.pack("<I", r.features.shape[0]))
        out.append(np.ascontiguousarray(r.features, dtype="<f4").tobytes())
        out.append(struct.pack("<I", len(r.token_ids)))
        out.append(np.asarray(r.token_ids, dtype="<i4").tobytes())
        out.append(np.asarray(r.timestamps, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_feature_file(path, expected_d_video_feat: int | None = None) -> list[VideoRecord]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FeatureFileError(f"{path}: truncated {what} at byte {off} (need {n}, have {len(raw) - off})")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(8, "magic") != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic at byte 0")
    version, d, count = struct.unpack("<III", take(12, "header"))
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version} at byte 8")
    if expected_d_video_feat is not None and d != expected_d_video_feat:
        raise ConfigMismatchError(f"{path}: feature width {d} does not match model d_video_feat {expected_d_video_feat}")
    records = []
    for _ in range(count):
        (nid,) = struct.unpack("<I", take(4, "id length"))
        at = off
        try:
            vid = take(nid, "id").decode("utf-8")
        except UnicodeDecodeError:
            raise FeatureFileError(f"{path}: video id is not UTF-8 at byte {at}") from None
        (T,) = struct.unpack("<I", take(4, "frame count"))
        feats = np.frombuffer(take(4 * T * d, "features"), dtype="<f4").reshape(T, d).astype(np.float32)
        (n,) = struct.unpack("<I", take(4, "token count"))
        ids = np.frombuffer(take(4 * n, "token ids"), dtype="<i4").astype(np.int64)
        stamps = np.frombuffer(take(4 * n, "timestamps"), dtype="<f4").astype(np.float32)
        records.append(VideoRecord(vid, feats, ids, stamps))
    if off != len(raw):
        raise FeatureFileError(f"{path}: {len(raw) - off} trailing bytes at byte {off}")
    return records


def write_manifest(path, splits: dict[str, str]) -> None:
    Path(path).write_text("".join(f"{vid}\t{tag}\n" for vid, tag in splits.items()))


def read_manifest(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FeatureFileError(f"{path}:{lineno}: expected '<video id>\\t<split>'")
        out[parts[0]] = parts[1]
    return out
