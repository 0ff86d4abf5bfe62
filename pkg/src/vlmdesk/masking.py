"""Pretraining mask plans (MFM-MLM and whole-modality MMM) and attention geometries."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import Kind, ModelConfig, MultimodalSequence
from .numerics import Tensor


class Scheme(str, enum.Enum):
    MFM_MLM = "MFM_MLM"
    MMM_VIDEO = "MMM_VIDEO"
    MMM_TEXT = "MMM_TEXT"


class Action(enum.IntEnum):
    KEEP = 0
    MASK_ZERO = 1
    MASK_TOKEN = 2
    RANDOM = 3
    KEEP_PREDICT = 4


class Geometry(str, enum.Enum):
    FULL = "FULL"
    ISOLATED = "ISOLATED"
    CAPTION_CAUSAL = "CAPTION_CAUSAL"


@dataclass(frozen=True)
class MaskingConfig:
    p_mmm: float = 0.5
    p_token: float = 0.15
    # BERT corruption split for selected text tokens: [MASK] / random word / unchanged
    p_mask_token: float = 0.8
    p_random: float = 0.1

    def __post_init__(self):
        for name in ("p_mmm", "p_token", "p_mask_token", "p_random"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.p_mask_token + self.p_random > 1.0:
            raise ValueError("p_mask_token + p_random must not exceed 1")


@dataclass(frozen=True)
class MaskPlan:
    scheme: Scheme
    kinds: np.ndarray
    actions: np.ndarray
    replacement_ids: np.ndarray

    @property
    def predict_positions(self) -> np.ndarray:
        return np.flatnonzero(self.actions != Action.KEEP)

    def n_masked(self, kind: Kind) -> int:
        return int(np.sum((self.actions != Action.KEEP) & (self.kinds == kind)))


@dataclass
class MaskTargets:
    """What the masked positions must recover.

    ``video_rows`` index into the sequence's video block; ``video_vectors`` are
    the original (unmasked) video tokens at those rows, still attached to the
    graph that produced them.
    """

    video_positions: np.ndarray
    video_rows: np.ndarray
    video_vectors: Tensor
    text_positions: np.ndarray
    text_ids: np.ndarray

    @property
    def count(self) -> int:
        return len(self.video_positions) + len(self.text_positions)


def _select_strict_subset(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    # Redraw when every token of the modality is hit: whole-modality masking is MMM's job.
    while True:
        hit = rng.random(n) < p
        if n == 0 or not hit.all():
            return hit


def sample_mask_plan(seq: MultimodalSequence, rng: np.random.Generator,
                     config: MaskingConfig, model_config: ModelConfig) -> MaskPlan:
    L = seq.padded_len
    actions = np.full(L, Action.KEEP, dtype=np.int64)
    repl = np.full(L, -1, dtype=np.int64)
    vpos, tpos = seq.video_positions, seq.text_positions
    if rng.random() < config.p_mmm:
        if rng.random() < 0.5:
            actions[vpos] = Action.MASK_ZERO
            return MaskPlan(Scheme.MMM_VIDEO, seq.kinds.copy(), actions, repl)
        actions[tpos] = Action.MASK_TOKEN
        return MaskPlan(Scheme.MMM_TEXT, seq.kinds.copy(), actions, repl)

    actions[vpos[_select_strict_subset(len(vpos), config.p_token, rng)]] = Action.MASK_ZERO
    chosen = tpos[_select_strict_subset(len(tpos), config.p_token, rng)]
    for pos in chosen:
        u = rng.random()
        if u < config.p_mask_token:
            actions[pos] = Action.MASK_TOKEN
        elif u < config.p_mask_token + config.p_random:
            actions[pos] = Action.RANDOM
            repl[pos] = rng.integers(model_config.first_word_id, model_config.vocab_size)
        else:
            actions[pos] = Action.KEEP_PREDICT
    return MaskPlan(Scheme.MFM_MLM, seq.kinds.copy(), actions, repl)


def apply_mask_plan(seq: MultimodalSequence, plan: MaskPlan,
                    model_config: ModelConfig) -> tuple[MultimodalSequence, MaskTargets]:
    if plan.kinds.shape != seq.kinds.shape or np.any(plan.kinds != seq.kinds):
        raise ValueError("mask plan was sampled for a different sequence layout")
    acts = plan.actions
    vpos = seq.video_positions
    video_hit = acts[vpos] == Action.MASK_ZERO
    text_sel = np.isin(acts, (Action.MASK_TOKEN, Action.RANDOM, Action.KEEP_PREDICT))
    if np.any(text_sel & (seq.kinds != Kind.TEXT)) or np.any(
            (acts == Action.MASK_ZERO) & (seq.kinds != Kind.VIDEO)):
        raise ValueError("mask plan masks a position of the wrong kind")

    ids = seq.token_ids.copy()
    ids[acts == Action.MASK_TOKEN] = model_config.mask_id
    rand = acts == Action.RANDOM
    ids[rand] = plan.replacement_ids[rand]

    video = seq.video
    if video_hit.any():
        video = nx.mul(video, (~video_hit).astype(float)[:, None])
    rows = np.flatnonzero(video_hit)
    targets = MaskTargets(
        video_positions=vpos[rows],
        video_rows=rows,
        video_vectors=seq.video[rows],
        text_positions=np.flatnonzero(text_sel),
        text_ids=seq.token_ids[text_sel],
    )
    return seq.replace(token_ids=ids, video=video), targets


# ---------------------------------------------------------------------------
# attention geometries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray
    geometry: Geometry

    def to_text(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.allow) + "\n"


def _layout(n_video: int, n_text: int, pad_to: int | None):
    length = n_video + n_text + 3
    L = length if pad_to is None else pad_to
    if L < length:
        raise ValueError(f"pad_to={pad_to} shorter than sequence length {length}")
    return length, L


def full_mask(n_video: int, n_text: int, pad_to: int | None = None) -> AttentionMask:
    length, L = _layout(n_video, n_text, pad_to)
    allow = np.zeros((L, L), dtype=bool)
    allow[:length, :length] = True
    return AttentionMask(allow, Geometry.FULL)


def isolated_mask(n_video: int, n_text: int, pad_to: int | None = None) -> AttentionMask:
    length, L = _layout(n_video, n_text, pad_to)
    allow = np.zeros((L, L), dtype=bool)
    allow[0, 0] = True
    v_end = n_video + 2  # video block plus its [SEP]
    allow[1:v_end, 1:v_end] = True
    allow[v_end:length, v_end:length] = True
    return AttentionMask(allow, Geometry.ISOLATED)


def caption_mask(n_video: int, n_text: int, pad_to: int | None = None) -> AttentionMask:
    length, L = _layout(n_video, n_text, pad_to)
    if n_text < 1:
        raise ValueError("caption mask needs a non-empty text block")
    allow = np.zeros((L, L), dtype=bool)
    v_end = n_video + 2  # [CLS], video block, first [SEP]
    allow[:v_end, :v_end] = True
    allow[v_end:length, :v_end] = True
    tri = np.tril(np.ones((length - v_end, length - v_end), dtype=bool))
    allow[v_end:length, v_end:length] = tri
    return AttentionMask(allow, Geometry.CAPTION_CAUSAL)


_BUILDERS = {Geometry.FULL: full_mask, Geometry.ISOLATED: isolated_mask,
             Geometry.CAPTION_CAUSAL: caption_mask}


def mask_for_lengths(geometry: Geometry | str, n_video: int, n_text: int,
                     pad_to: int | None = None) -> AttentionMask:
    return _BUILDERS[Geometry(geometry)](n_video, n_text, pad_to)


def build_full_mask(seq: MultimodalSequence) -> AttentionMask:
    return full_mask(seq.n_video, seq.n_text, seq.padded_len)


def build_isolated_mask(seq: MultimodalSequence) -> AttentionMask:
    return isolated_mask(seq.n_video, seq.n_text, seq.padded_len)


def build_caption_mask(seq: MultimodalSequence) -> AttentionMask:
    return caption_mask(seq.n_video, seq.n_text, seq.padded_len)


def build_mask(seq: MultimodalSequence, geometry: Geometry | str) -> AttentionMask:
    return mask_for_lengths(geometry, seq.n_video, seq.n_text, seq.padded_len)
