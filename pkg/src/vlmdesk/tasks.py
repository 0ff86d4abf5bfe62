"""Downstream heads: retrieval, segmentation, step localization, multiple-choice
QA, and captioning, plus their metrics.

Retrieval, segmentation, localization and QA all run the encoder under the
isolated attention geometry; captioning runs it under the caption-causal one
and reuses the tied language-model head for generation.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .masking import build_caption_mask, build_isolated_mask
from .model import (ModelParams, MultimodalSequence, assemble_sequence, dummy_video,
                    encode_batch, predict_embeddings, project_video_features, vocab_logits)
from .numerics import Tensor


class Mode(str, enum.Enum):
    JOINT = "JOINT"
    SPLIT = "SPLIT"


@dataclass
class PooledPair:
    video: np.ndarray
    text: np.ndarray
    pair_id: object = None


@dataclass
class SegmentationOutput:
    logits: np.ndarray  # (frames, n_labels)
    coverage: np.ndarray  # (frames,)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


# ---------------------------------------------------------------------------
# shared encoding helpers
# ---------------------------------------------------------------------------


def _tokens(features, params: ModelParams) -> Tensor:
    if isinstance(features, Tensor):
        return features
    return project_video_features(np.asarray(features, dtype=np.float64), params)


def mean_pool(h: Tensor, positions: np.ndarray) -> Tensor:
    return h[positions].mean(axis=0)


def _video_pool_positions(seq: MultimodalSequence, include_sep: bool) -> np.ndarray:
    pos = seq.video_positions
    return np.append(pos, seq.sep1) if include_sep else pos


def _text_pool_positions(seq: MultimodalSequence, include_sep: bool) -> np.ndarray:
    pos = seq.text_positions
    return np.append(pos, seq.sep2) if include_sep else pos


def encode_isolated(seqs: Sequence[MultimodalSequence], params: ModelParams) -> Tensor:
    return encode_batch(seqs, [build_isolated_mask(s) for s in seqs], params)


def video_only_sequence(video_tokens: Tensor, params: ModelParams, pad_to: int | None = None) -> MultimodalSequence:
    return assemble_sequence(video_tokens, [params.config.dummy_text_id], params.config, pad_to)


def text_only_sequence(text_ids, params: ModelParams, pad_to: int | None = None) -> MultimodalSequence:
    return assemble_sequence(dummy_video(params.config), text_ids, params.config, pad_to)


def _pad_len(lengths, params: ModelParams) -> int:
    # shortest padding that fits the batch; overflow is reported by assemble_sequence
    return min(max(lengths) + 3, params.config.max_len)


def pooled_joint(video_feats: Sequence, texts: Sequence, params: ModelParams,
                 include_sep: bool = False) -> tuple[Tensor, Tensor]:
    """One isolated-mask forward per pair; returns (B, d) video and text pools."""
    toks = [_tokens(f, params) for f in video_feats]
    pad = _pad_len([v.shape[0] + len(t) for v, t in zip(toks, texts)], params)
    seqs = [assemble_sequence(v, t, params.config, pad) for v, t in zip(toks, texts)]
    h = encode_isolated(seqs, params)
    v = [mean_pool(h[i], _video_pool_positions(s, include_sep)) for i, s in enumerate(seqs)]
    t = [mean_pool(h[i], _text_pool_positions(s, include_sep)) for i, s in enumerate(seqs)]
    return nx.concat([x.reshape(1, -1) for x in v]), nx.concat([x.reshape(1, -1) for x in t])


def video_only_batch(video_feats: Sequence, params: ModelParams) -> list[MultimodalSequence]:
    toks = [_tokens(f, params) for f in video_feats]
    pad = _pad_len([v.shape[0] + 1 for v in toks], params)
    return [video_only_sequence(v, params, pad) for v in toks]


def pooled_videos(video_feats: Sequence, params: ModelParams, include_sep: bool = False) -> Tensor:
    seqs = video_only_batch(video_feats, params)
    h = encode_isolated(seqs, params)
    return nx.concat([mean_pool(h[i], _video_pool_positions(s, include_sep)).reshape(1, -1)
                      for i, s in enumerate(seqs)])


def pooled_texts(texts: Sequence, params: ModelParams, include_sep: bool = False) -> Tensor:
    pad = _pad_len([1 + len(t) for t in texts], params)
    seqs = [text_only_sequence(t, params, pad) for t in texts]
    h = encode_isolated(seqs, params)
    return nx.concat([mean_pool(h[i], _text_pool_positions(s, include_sep)).reshape(1, -1)
                      for i, s in enumerate(seqs)])


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def retrieval_encode(features, text_ids, params: ModelParams, mode: Mode | str = Mode.SPLIT,
                     include_sep: bool = False, pair_id=None) -> PooledPair:
    mode = Mode(mode)
    if len(text_ids) == 0 or len(features) == 0:
        raise ValueError("retrieval needs both modalities; substitute dummy tokens explicitly")
    with nx.no_grad():
        if mode is Mode.JOINT:
            v, t = pooled_joint([features], [text_ids], params, include_sep)
        else:
            v = pooled_videos([features], params, include_sep)
            t = pooled_texts([text_ids], params, include_sep)
    return PooledPair(v.data[0].copy(), t.data[0].copy(), pair_id)


def retrieval_similarity(video_feats: Sequence, texts: Sequence, params: ModelParams,
                         include_sep: bool = False, normalize: bool = False,
                         batch_size: int = 32) -> np.ndarray:
    """Text-to-video similarity matrix (Q texts x C videos) from SPLIT encodings."""
    with nx.no_grad():
        v = np.concatenate([pooled_videos(video_feats[i:i + batch_size], params, include_sep).data
                            for i in range(0, len(video_feats), batch_size)])
        t = np.concatenate([pooled_texts(texts[i:i + batch_size], params, include_sep).data
                            for i in range(0, len(texts), batch_size)])
    if normalize:
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        t = t / np.linalg.norm(t, axis=1, keepdims=True)
    return t @ v.T


def ground_truth_ranks(similarity: np.ndarray, ground_truth: Sequence[int]) -> np.ndarray:
    """1-based rank of each ground truth; ties go to the lower candidate index."""
    sim = np.asarray(similarity, dtype=float)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if sim.ndim != 2 or sim.shape[1] < 1:
        raise ValueError("similarity must be a non-empty Q x C matrix")
    if len(gt) != sim.shape[0] or np.any((gt < 0) | (gt >= sim.shape[1])):
        raise ValueError("ground-truth indices do not match the similarity matrix")
    target = sim[np.arange(len(gt)), gt][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > target) | ((sim == target) & (cols < gt[:, None]))
    return 1 + ahead.sum(axis=1)


def recall_metrics(similarity: np.ndarray, ground_truth: Sequence[int]) -> dict[str, float]:
    ranks = ground_truth_ranks(similarity, ground_truth)
    srt = np.sort(ranks)
    return {
        "R@1": float(np.mean(ranks <= 1)),
        "R@5": float(np.mean(ranks <= 5)),
        "R@10": float(np.mean(ranks <= 10)),
        "MedianR": float(srt[(len(srt) - 1) // 2]),
    }


# ---------------------------------------------------------------------------
# action segmentation
# ---------------------------------------------------------------------------


def add_segmentation_head(params: ModelParams, n_labels: int, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    params.add("seg.w", rng.normal(0.0, params.config.init_std, size=(params.config.d_model, n_labels)))
    params.add("seg.b", np.zeros(n_labels))


def window_offsets(n_frames: int, window: int, step: int) -> list[tuple[int, int]]:
    """Half-open windows at 0, step, 2*step, ...; the last one is clamped to the end."""
    if n_frames < 1:
        raise ValueError("video has no frames")
    if window < 1 or step < 1:
        raise ValueError("window and step must be positive")
    out = []
    start = 0
    while True:
        end = min(start + window, n_frames)
        out.append((start, end))
        if end >= n_frames:
            return out
        start += step


def average_window_logits(n_frames: int, windows: Sequence[tuple[int, int]],
                          window_logits: Sequence[np.ndarray]) -> SegmentationOutput:
    n_labels = window_logits[0].shape[1]
    total = np.zeros((n_frames, n_labels))
    cover = np.zeros(n_frames, dtype=np.int64)
    for (s, e), lg in zip(windows, window_logits):
        total[s:e] += lg
        cover[s:e] += 1
    if np.any(cover == 0):
        raise ValueError("some frames are not covered by any window")
    return SegmentationOutput(total / cover[:, None], cover)


def frame_logits(video_feats: Sequence, params: ModelParams) -> list[Tensor]:
    """Per-frame label logits for each (short) video, one isolated forward each."""
    seqs = video_only_batch(video_feats, params)
    h = encode_isolated(seqs, params)
    return [h[i][s.video_positions] @ params["seg.w"] + params["seg.b"] for i, s in enumerate(seqs)]


def segment_video(features: np.ndarray, params: ModelParams, window: int = 32,
                  step: int = 16) -> SegmentationOutput:
    if "seg.w" not in params:
        raise ValueError("model has no segmentation head")
    features = np.asarray(features)
    wins = window_offsets(features.shape[0], window, step)
    with nx.no_grad():
        logits = frame_logits([features[s:e] for s, e in wins], params)
    return average_window_logits(features.shape[0], wins, [lg.data for lg in logits])


def segmentation_loss(video_feats: Sequence, labels: Sequence[np.ndarray], params: ModelParams) -> Tensor:
    logits = nx.concat(frame_logits(video_feats, params), axis=0)
    target = np.concatenate(labels)
    return -nx.log_softmax(logits)[np.arange(len(target)), target].mean()


# ---------------------------------------------------------------------------
# step localization
# ---------------------------------------------------------------------------


def step_logits(features, step_texts: Sequence, params: ModelParams) -> Tensor:
    """(frames, n_steps) dot products of frame states with pooled step texts."""
    if len(step_texts) == 0:
        raise ValueError("no step texts")
    vseq = video_only_batch([features], params)[0]
    frames = encode_isolated([vseq], params)[0][vseq.video_positions]
    steps = pooled_texts(step_texts, params)
    return frames @ steps.transpose()


def localize_steps(features, step_texts: Sequence, params: ModelParams) -> np.ndarray:
    """Per-frame distribution over the steps (rows sum to 1)."""
    with nx.no_grad():
        lp = nx.log_softmax(step_logits(features, step_texts, params))
    return np.exp(lp.data)


def localization_loss(features, step_texts: Sequence, frame_steps: np.ndarray, params: ModelParams) -> Tensor:
    lp = nx.log_softmax(step_logits(features, step_texts, params))
    return -lp[np.arange(len(frame_steps)), np.asarray(frame_steps)].mean()


# ---------------------------------------------------------------------------
# multiple-choice QA
# ---------------------------------------------------------------------------


def answer_scores(features, answers: Sequence, params: ModelParams) -> Tensor:
    if len(answers) == 0:
        raise ValueError("no candidate answers")
    v = pooled_videos([features], params)
    return (pooled_texts(answers, params) @ v.transpose()).reshape(-1)


def score_answers(features, answers: Sequence, params: ModelParams) -> tuple[np.ndarray, int]:
    with nx.no_grad():
        s = answer_scores(features, answers, params).data.copy()
    return s, int(np.argmax(s))


def qa_loss(features, answers: Sequence, correct: int, params: ModelParams) -> Tensor:
    """Contrastive loss over the question's own candidate answers."""
    s = answer_scores(features, answers, params).reshape(1, -1)
    return -nx.log_softmax(s)[0, correct]


# ---------------------------------------------------------------------------
# captioning
# ---------------------------------------------------------------------------


def caption_sequence(video_tokens: Tensor, generated: Sequence[int], params: ModelParams,
                     pad_to: int | None = None) -> MultimodalSequence:
    """Text block = [DUMMY_TEXT] + tokens so far; position i predicts token i+1."""
    return assemble_sequence(video_tokens, [params.config.dummy_text_id, *generated], params.config, pad_to)


def caption_loss(video_feats: Sequence, captions: Sequence, params: ModelParams) -> Tensor:
    """Shifted-target cross-entropy at text positions under the causal mask."""
    cfg = params.config
    seqs, targets = [], []
    toks = [_tokens(f, params) for f in video_feats]
    pad = _pad_len([v.shape[0] + 1 + len(c) for v, c in zip(toks, captions)], params)
    for v, cap in zip(toks, captions):
        seq = caption_sequence(v, cap, params, pad)
        seqs.append(seq)
        targets.append(np.append(np.asarray(cap, dtype=np.int64), cfg.sep_id))
    h = encode_batch(seqs, [build_caption_mask(s) for s in seqs], params)
    states = nx.concat([h[i][s.text_positions] for i, s in enumerate(seqs)], axis=0)
    logits = vocab_logits(predict_embeddings(states, params), params)
    target = np.concatenate(targets)
    return -nx.log_softmax(logits)[np.arange(len(target)), target].mean()


def _decodable(params: ModelParams) -> np.ndarray:
    cfg = params.config
    ok = np.ones(cfg.vocab_size, dtype=bool)
    ok[list(cfg.special_ids)] = False
    ok[cfg.sep_id] = True
    return ok


def caption_step_logits(video_tokens: Tensor, generated: Sequence[int], params: ModelParams) -> np.ndarray:
    """Vocabulary logits for the next token given only the tokens generated so far."""
    seq = caption_sequence(video_tokens, generated, params)
    h = encode_batch([seq], [build_caption_mask(seq)], params)[0]
    pos = seq.text_positions[-1]
    return vocab_logits(predict_embeddings(h[pos:pos + 1], params), params).data[0]


def greedy_decode(features, params: ModelParams, max_len: int, return_logits: bool = False):
    """Greedy argmax decoding, stopping at [SEP] or after ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cfg = params.config
    ok = _decodable(params)
    out: list[int] = []
    steps = []
    with nx.no_grad():
        tokens = _tokens(features, params)
        # the text block holds [DUMMY_TEXT] + generated tokens
        limit = min(max_len, cfg.max_len - tokens.shape[0] - 4)
        while len(out) < limit:
            logits = caption_step_logits(tokens, out, params)
            steps.append(logits)
            nxt = int(np.argmax(np.where(ok, logits, -np.inf)))
            if nxt == cfg.sep_id:
                break
            out.append(nxt)
    return (out, np.array(steps)) if return_logits else out


def caption_full_logits(features, caption: Sequence[int], params: ModelParams) -> np.ndarray:
    """Logits at every text position of the completed sequence in one forward."""
    with nx.no_grad():
        seq = caption_sequence(_tokens(features, params), caption, params)
        h = encode_batch([seq], [build_caption_mask(seq)], params)[0]
        return vocab_logits(predict_embeddings(h[seq.text_positions], params), params).data


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(hypothesis: Sequence, reference: Sequence, n: int = 4) -> float:
    """Sentence BLEU with uniform weights up to ``n``, one reference, no smoothing."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    hyp, ref = list(hypothesis), list(reference)
    if not hyp:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        h, r = _ngrams(hyp, k), _ngrams(ref, k)
        total = sum(h.values())
        if total == 0:
            return 0.0
        clipped = sum(min(c, r[g]) for g, c in h.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / n
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(log_p)
