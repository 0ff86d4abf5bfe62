"""Pretraining losses (MFM, MLM, their sum, the unified masked-token NCE) and
the in-batch contrastive retrieval loss.

All losses average over predict positions and use temperature 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class DegenerateBatchError(ValueError):
    """Raised when a contrastive pool has nothing to contrast against."""


class Provenance(enum.IntEnum):
    VIDEO_TOKEN = 0
    VOCAB_WORD = 1


@dataclass
class CandidateSet:
    embeddings: Tensor
    positive: int
    provenance: np.ndarray | None = None

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if n < 1:
            raise ValueError("candidate set is empty")
        if not 0 <= self.positive < n:
            raise IndexError(f"positive index {self.positive} outside {n} candidates")


@dataclass
class LossOutput:
    loss: Tensor
    log_probs: np.ndarray
    count: int
    hits: np.ndarray

    @property
    def value(self) -> float:
        return float(self.loss.data)

    @property
    def accuracy(self) -> float:
        return float(self.hits.mean()) if self.count else float("nan")


def _zero() -> LossOutput:
    return LossOutput(Tensor(0.0), np.zeros(0), 0, np.zeros(0, dtype=bool))


def _pick(log_probs: Tensor, target: np.ndarray) -> Tensor:
    return log_probs[np.arange(len(target)), target]


def _from_logits(logits: Tensor, target: np.ndarray) -> LossOutput:
    lp = nx.log_softmax(logits)
    picked = _pick(lp, target)
    hits = np.argmax(logits.data, axis=1) == target
    return LossOutput(-picked.mean(), picked.data.copy(), len(target), hits)


def nce(prediction: Tensor, cands: CandidateSet) -> Tensor:
    """Log-probability of the positive under a softmax over candidate dot products."""
    logits = cands.embeddings @ prediction.reshape(-1, 1)
    return nx.log_softmax(logits.reshape(1, -1))[0, cands.positive]


def mfm_loss(preds: Tensor, targets: Tensor, negatives: Tensor) -> LossOutput:
    """NCE of each predicted video embedding against its own token and V'.

    ``preds`` and ``targets`` are (P, d) for the video predict positions;
    ``negatives`` is (N, d), every non-masked video token in the batch.
    """
    if preds.shape[0] == 0:
        return _zero()
    if negatives.shape[0] == 0:
        raise DegenerateBatchError("no non-masked video tokens in the batch to contrast against")
    pos = (preds * targets).sum(axis=1, keepdims=True)
    logits = nx.concat([pos, preds @ negatives.transpose()], axis=1)
    return _from_logits(logits, np.zeros(preds.shape[0], dtype=np.int64))


def mlm_loss(preds: Tensor, target_ids: np.ndarray, word_emb: Tensor,
             bias: Tensor | None = None) -> LossOutput:
    """Cross-entropy over the tied vocabulary (BERT's MLM)."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if preds.shape[0] == 0:
        return _zero()
    V = word_emb.shape[0]
    if np.any((target_ids < 0) | (target_ids >= V)):
        raise IndexError("MLM target id outside vocabulary")
    logits = preds @ word_emb.transpose()
    if bias is not None:
        logits = logits + bias
    return _from_logits(logits, target_ids)


def loss_mfm_mlm(mfm: LossOutput, mlm: LossOutput) -> LossOutput:
    """Plain sum of the two baseline losses."""
    return LossOutput(
        mfm.loss + mlm.loss,
        np.concatenate([mfm.log_probs, mlm.log_probs]),
        mfm.count + mlm.count,
        np.concatenate([mfm.hits, mlm.hits]),
    )


def masked_token_loss(video_preds: Tensor, video_targets: Tensor, text_preds: Tensor,
                      text_ids: np.ndarray, negatives: Tensor, word_emb: Tensor) -> LossOutput:
    """One NCE for every masked token, video or text.

    The pool for each position is its positive, every non-masked video token
    in the batch, and the word-embedding table. For a text target the table
    row of the target itself is the positive, so it is not repeated among the
    negatives. Scores are raw dot products with no bias.
    """
    text_ids = np.asarray(text_ids, dtype=np.int64)
    parts_lp, parts_hits, picked = [], [], []
    if video_preds.shape[0]:
        pos = (video_preds * video_targets).sum(axis=1, keepdims=True)
        logits = nx.concat([pos, video_preds @ negatives.transpose(), video_preds @ word_emb.transpose()], axis=1)
        tgt = np.zeros(video_preds.shape[0], dtype=np.int64)
        p = _pick(nx.log_softmax(logits), tgt)
        picked.append(p)
        parts_lp.append(p.data)
        parts_hits.append(np.argmax(logits.data, axis=1) == tgt)
    if text_preds.shape[0]:
        if np.any((text_ids < 0) | (text_ids >= word_emb.shape[0])):
            raise IndexError("text target id outside vocabulary")
        logits = nx.concat([text_preds @ word_emb.transpose(), text_preds @ negatives.transpose()], axis=1)
        p = _pick(nx.log_softmax(logits), text_ids)
        picked.append(p)
        parts_lp.append(p.data)
        parts_hits.append(np.argmax(logits.data, axis=1) == text_ids)
    if not picked:
        return _zero()
    allp = nx.concat(picked, axis=0) if len(picked) > 1 else picked[0]
    return LossOutput(-allp.mean(), np.concatenate(parts_lp), allp.shape[0], np.concatenate(parts_hits))


def _normalize(x: Tensor) -> Tensor:
    norm = nx.exp(nx.log((x * x).sum(axis=1, keepdims=True)) * 0.5)
    return x / norm


def retrieval_contrastive_loss(video_pooled: Tensor, text_pooled: Tensor,
                               normalize: bool = False) -> Tensor:
    """Symmetric in-batch InfoNCE over the B x B video-text dot products."""
    B = video_pooled.shape[0]
    if B < 2 or text_pooled.shape[0] != B:
        raise ValueError(f"retrieval loss needs B >= 2 aligned pairs, got {video_pooled.shape[0]}/{text_pooled.shape[0]}")
    if normalize:
        video_pooled, text_pooled = _normalize(video_pooled), _normalize(text_pooled)
    sim = text_pooled @ video_pooled.transpose()
    diag = np.arange(B)
    t2v = _pick(nx.log_softmax(sim), diag).mean()
    v2t = _pick(nx.log_softmax(sim.transpose()), diag).mean()
    return (t2v + v2t) * -0.5


def choice_contrastive_loss(anchor: Tensor, options: Tensor, positive: int) -> Tensor:
    """Cross-entropy of ``anchor`` against (K, d) options, one of which is correct."""
    logits = (options @ anchor.reshape(-1, 1)).reshape(1, -1)
    return -nx.log_softmax(logits)[0, positive]
