"""Pretraining and fine-tuning loops over the synthetic (or file-backed) corpus."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import tasks
from .config import RunConfig
from .data import (BatchQueue, ClipPair, CorpusWorld, PretrainBatch, VideoRecord, generate_corpus,
                   make_batch, read_feature_file, read_manifest, sample_clips)
from .masking import build_full_mask
from .model import (ModelParams, encode_batch, init_params, load_checkpoint, predict_embeddings,
                    save_checkpoint)
from .objectives import (LossOutput, loss_mfm_mlm, masked_token_loss, mfm_loss, mlm_loss,
                         retrieval_contrastive_loss)
from .numerics import OptimizerState, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


@dataclass
class Corpora:
    train: list[VideoRecord]
    held_out: list[VideoRecord]
    world: CorpusWorld | None = None


def load_corpora(cfg: RunConfig) -> Corpora:
    """Pretraining videos and a disjoint set of held-out videos."""
    mc = cfg.model_config()
    if cfg.data == "synthetic":
        ccfg = cfg.corpus_config()
        world = CorpusWorld.from_seed(cfg.seed, ccfg)
        train = generate_corpus(cfg.n_videos, cfg.seed, ccfg, world, "vid")
        held = generate_corpus(cfg.n_eval_videos, cfg.seed + 7919, ccfg, world, "eval")
        return Corpora(train, held, world)
    records = read_feature_file(cfg.data, mc.d_video_feat)
    if cfg.manifest:
        splits = read_manifest(cfg.manifest)
        train = [r for r in records if splits.get(r.video_id, "train") == "train"]
        held = [r for r in records if splits.get(r.video_id) in ("val", "validation", "test")]
    else:
        train, held = records, []
    return Corpora(train, held, None)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def gather_predictions(e: Tensor, batch: PretrainBatch):
    """Predicted embeddings and targets at every predict position of the batch."""
    B, L, d = e.shape
    flat = e.reshape(B * L, d)
    vidx = np.concatenate([b * L + t.video_positions for b, t in enumerate(batch.targets)])
    tidx = np.concatenate([b * L + t.text_positions for b, t in enumerate(batch.targets)])
    vt = [t.video_vectors for t in batch.targets if len(t.video_rows)]
    video_targets = nx.concat(vt, axis=0) if vt else Tensor(np.zeros((0, d)))
    text_ids = np.concatenate([t.text_ids for t in batch.targets])
    return flat[vidx.astype(np.int64)], video_targets, flat[tidx.astype(np.int64)], text_ids


def pretrain_loss(batch: PretrainBatch, params: ModelParams, variant: str = "vlm") -> LossOutput:
    h = encode_batch(batch.sequences, [build_full_mask(s) for s in batch.sequences], params)
    e = predict_embeddings(h, params)
    vp, vt, tp, tids = gather_predictions(e, batch)
    if variant == "vlm":
        return masked_token_loss(vp, vt, tp, tids, batch.negatives, params["word_emb"])
    if variant == "mfm_mlm":
        return loss_mfm_mlm(mfm_loss(vp, vt, batch.negatives),
                            mlm_loss(tp, tids, params["word_emb"], params["mlm_bias"]))
    raise ValueError(f"unknown loss variant {variant!r}")


def optimizer_extras(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {f"adam.m.{k}": v for k, v in state.m.items()}
    out.update({f"adam.v.{k}": v for k, v in state.v.items()})
    return out


def optimizer_from_extras(extras: dict[str, np.ndarray], step: int) -> OptimizerState:
    st = OptimizerState(step=step)
    for k, v in extras.items():
        if k.startswith("adam.m."):
            st.m[k[7:]] = v.copy()
        elif k.startswith("adam.v."):
            st.v[k[7:]] = v.copy()
    return st


def _checkpoint_meta(cfg: RunConfig, step: int, opt_step: int, stage: str) -> dict:
    run = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "checkpoint")}
    return {"stage": stage, "step": step, "optimizer_step": opt_step, "run": run}


@dataclass
class PretrainResult:
    params: ModelParams
    state: OptimizerState
    step: int
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def pretrain(cfg: RunConfig, corpus: Sequence[VideoRecord], params: ModelParams | None = None,
             out_dir: str | Path | None = None, state: OptimizerState | None = None,
             start_step: int = 0, steps: int | None = None) -> PretrainResult:
    """Masked pretraining for ``cfg.steps`` updates (resumable from ``start_step``)."""
    total = cfg.steps if steps is None else steps
    params = params or init_params(cfg.model_config(), cfg.seed)
    state = state or OptimizerState()
    sched = cfg.schedule()
    mcfg = cfg.masking_config()
    out = Path(out_dir) if out_dir else None
    logf = timef = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if start_step else "w"
        logf = open(out / "train_log.jsonl", mode)
        timef = open(out / "timing.log", mode)
    ckpt = out / CHECKPOINT_NAME if out else None

    def save(step):
        if ckpt:
            save_checkpoint(ckpt, params, optimizer_extras(state), _checkpoint_meta(cfg, step, state.step, "pretrain"))

    queue = BatchQueue(corpus, cfg.seed, total, cfg.videos_per_batch, cfg.clips_per_video, cfg.len_range,
                       params.config.max_video_tokens, cfg.queue_capacity)
    losses: list[float] = []
    step = start_step
    try:
        for i, (clips, batch_seed) in enumerate(queue):
            if i < start_step:
                continue
            t0 = time.perf_counter()
            batch = make_batch(clips, params, mcfg, np.random.default_rng(batch_seed))
            res = pretrain_loss(batch, params, cfg.loss)
            if not np.isfinite(res.value):
                raise NumericFailure(f"non-finite loss at step {step + 1}")
            grads = nx.backward(res.loss, params.tensors)
            lr = nx.lr_at(step + 1, sched)
            try:
                nx.adam_step(params.tensors, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.clip_norm)
            except FloatingPointError as exc:
                raise NumericFailure(f"step {step + 1}: {exc}") from None
            step += 1
            losses.append(res.value)
            if logf:
                logf.write(json.dumps({"step": step, "loss_variant": cfg.loss, "loss": res.value, "lr": lr,
                                       "predict_positions": res.count, "accuracy": res.accuracy,
                                       "schemes": batch.scheme_counts()}, sort_keys=True) + "\n")
                timef.write(f"{step}\t{time.perf_counter() - t0:.6f}\n")
            if step % cfg.checkpoint_every == 0:
                save(step)
        if step != start_step and step % cfg.checkpoint_every:
            save(step)
    finally:
        queue.close()
        if logf:
            logf.close()
            timef.close()
    return PretrainResult(params, state, step, losses, ckpt)


def resume_pretraining(cfg: RunConfig, corpus, checkpoint, out_dir=None) -> PretrainResult:
    params, extras, meta = load_checkpoint(checkpoint)
    state = optimizer_from_extras(extras, meta.get("optimizer_step", 0))
    return pretrain(cfg, corpus, params, out_dir, state, start_step=int(meta.get("step", 0)))


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def optimize(params: ModelParams, loss_fn: Callable[[int, np.random.Generator], Tensor], cfg: RunConfig,
             seed: int, steps: int | None = None) -> list[float]:
    """Generic fine-tuning loop: Adam, global clipping, warmup + polynomial decay."""
    sched = cfg.finetune_schedule()
    state = OptimizerState()
    rng = np.random.default_rng([seed, 3])
    losses = []
    for step in range(cfg.finetune_steps if steps is None else steps):
        loss = loss_fn(step, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericFailure(f"non-finite fine-tuning loss at step {step + 1}")
        grads = nx.backward(loss, params.tensors)
        try:
            nx.adam_step(params.tensors, grads, state, nx.lr_at(step + 1, sched),
                         (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.clip_norm)
        except FloatingPointError as exc:
            raise NumericFailure(f"fine-tuning step {step + 1}: {exc}") from None
        losses.append(value)
    return losses


def one_clip_per_video(videos: Sequence[VideoRecord], n: int, rng: np.random.Generator,
                       len_range, max_frames: int) -> list[ClipPair]:
    clips: list[ClipPair] = []
    i = 0
    while len(clips) < n and i < 4 * n + len(videos):
        clips += sample_clips(videos[i % len(videos)], rng, 1, len_range, max_frames)
        i += 1
    return clips[:n]


@dataclass
class TaskData:
    held_in: list[ClipPair]
    held_out: list[ClipPair]
    train_videos: list[VideoRecord]
    eval_videos: list[VideoRecord]


def task_data(cfg: RunConfig, corpora: Corpora) -> TaskData:
    rng = np.random.default_rng([cfg.seed, 4])
    mf = cfg.model_config().max_video_tokens
    held_in = one_clip_per_video(corpora.train, cfg.finetune_pairs, rng, cfg.len_range, mf)
    pool = corpora.held_out or corpora.train
    held_out = one_clip_per_video(pool, cfg.eval_pairs, rng, cfg.len_range, mf)
    return TaskData(held_in, held_out, list(corpora.train), list(pool))


def _batch(items: Sequence, size: int, rng: np.random.Generator) -> list:
    idx = rng.choice(len(items), size=min(size, len(items)), replace=False)
    return [items[i] for i in np.sort(idx)]


def _records(task: str, metrics: dict[str, float]) -> list[dict]:
    return [{"task": task, "metric": k, "value": float(v)} for k, v in metrics.items()]


# retrieval ------------------------------------------------------------------


def retrieval_eval(clips: Sequence[ClipPair], params: ModelParams, cfg: RunConfig) -> dict[str, float]:
    sim = tasks.retrieval_similarity([c.features for c in clips], [c.text_ids for c in clips], params,
                                     cfg.pool_include_sep, cfg.normalize_retrieval)
    return tasks.recall_metrics(sim, np.arange(len(clips)))


def finetune_retrieval(params: ModelParams, data: TaskData, cfg: RunConfig) -> list[float]:
    def loss_fn(step, rng):
        clips = _batch(data.held_in, cfg.finetune_batch, rng)
        v, t = tasks.pooled_joint([c.features for c in clips], [c.text_ids for c in clips], params,
                                  cfg.pool_include_sep)
        return retrieval_contrastive_loss(v, t, cfg.normalize_retrieval)

    return optimize(params, loss_fn, cfg, cfg.seed)


# segmentation ---------------------------------------------------------------


def _windows_with_labels(videos, n, window, rng):
    out = []
    for _ in range(n):
        v = videos[int(rng.integers(len(videos)))]
        s = int(rng.integers(0, v.n_frames - window + 1))
        out.append((v.features[s:s + window], v.concepts[s:s + window]))
    return out


def _require_latents(videos):
    if not videos or getattr(videos[0], "concepts", None) is None:
        raise ValueError("this task needs per-frame labels (synthetic corpus only)")


def finetune_segmentation(params, data: TaskData, cfg: RunConfig, n_labels: int) -> list[float]:
    _require_latents(data.train_videos)
    if "seg.w" not in params:
        tasks.add_segmentation_head(params, n_labels, cfg.seed)

    def loss_fn(step, rng):
        wins = _windows_with_labels(data.train_videos, cfg.finetune_batch, cfg.window, rng)
        return tasks.segmentation_loss([w[0] for w in wins], [w[1] for w in wins], params)

    return optimize(params, loss_fn, cfg, cfg.seed)


def segmentation_eval(videos, params, cfg: RunConfig) -> dict[str, float]:
    correct = total = 0
    for v in videos:
        out = tasks.segment_video(v.features, params, cfg.window, cfg.window_step)
        correct += int(np.sum(out.labels == v.concepts))
        total += len(v.concepts)
    return {"frame_accuracy": correct / total}


# localization ---------------------------------------------------------------


def step_texts(world: CorpusWorld, n_words: int = 3) -> list[np.ndarray]:
    return [words[:n_words] for words in world.concept_words]


def _localization_loss(windows, topics, texts, params, cpt):
    vseqs = tasks.video_only_batch([f for f, _ in windows], params)
    h = tasks.encode_isolated(vseqs, params)
    steps = tasks.pooled_texts(texts, params)
    losses = []
    for i, ((f, labels), topic) in enumerate(zip(windows, topics)):
        frames = h[i][vseqs[i].video_positions]
        rows = np.arange(topic * cpt, (topic + 1) * cpt)
        lp = nx.log_softmax(frames @ steps[rows].transpose())
        losses.append(lp[np.arange(len(labels)), labels - topic * cpt].mean().reshape(1))
    return -nx.concat(losses).mean()


def finetune_localization(params, data: TaskData, cfg: RunConfig, world: CorpusWorld) -> list[float]:
    _require_latents(data.train_videos)
    cpt = cfg.corpus_config().concepts_per_topic
    texts = step_texts(world)

    def loss_fn(step, rng):
        wins = _windows_with_labels(data.train_videos, cfg.finetune_batch, cfg.window, rng)
        topics = [int(lab[0]) // cpt for _, lab in wins]
        return _localization_loss(wins, topics, texts, params, cpt)

    return optimize(params, loss_fn, cfg, cfg.seed)


def localization_eval(videos, params, cfg: RunConfig, world: CorpusWorld) -> dict[str, float]:
    cpt = cfg.corpus_config().concepts_per_topic
    texts = step_texts(world)
    correct = total = 0
    for v in videos:
        rows = np.arange(v.topic * cpt, (v.topic + 1) * cpt)
        for s, e in tasks.window_offsets(v.n_frames, cfg.window, cfg.window):
            dist = tasks.localize_steps(v.features[s:e], [texts[r] for r in rows], params)
            correct += int(np.sum(np.argmax(dist, axis=1) == v.concepts[s:e] - v.topic * cpt))
            total += e - s
    return {"frame_accuracy": correct / total}


# multiple-choice QA ---------------------------------------------------------


@dataclass
class QAItem:
    features: np.ndarray
    answers: list[np.ndarray]
    correct: int


def qa_items(clips: Sequence[ClipPair], k: int, rng: np.random.Generator) -> list[QAItem]:
    items = []
    for i, c in enumerate(clips):
        others = [j for j in range(len(clips)) if j != i]
        picks = rng.choice(others, size=min(k - 1, len(others)), replace=False)
        answers = [clips[j].text_ids for j in picks]
        pos = int(rng.integers(len(answers) + 1))
        answers.insert(pos, c.text_ids)
        items.append(QAItem(c.features, answers, pos))
    return items


def finetune_qa(params, items: Sequence[QAItem], cfg: RunConfig) -> list[float]:
    bs = max(1, cfg.finetune_batch // cfg.qa_choices)

    def loss_fn(step, rng):
        batch = _batch(items, bs, rng)
        v = tasks.pooled_videos([it.features for it in batch], params)
        t = tasks.pooled_texts([a for it in batch for a in it.answers], params)
        losses = []
        off = 0
        for i, it in enumerate(batch):
            k = len(it.answers)
            s = (t[off:off + k] @ v[i:i + 1].transpose()).reshape(1, -1)
            losses.append(-nx.log_softmax(s)[0:1, it.correct])
            off += k
        return nx.concat(losses).mean()

    return optimize(params, loss_fn, cfg, cfg.seed)


def qa_eval(items: Sequence[QAItem], params) -> dict[str, float]:
    hits = [tasks.score_answers(it.features, it.answers, params)[1] == it.correct for it in items]
    return {"accuracy": float(np.mean(hits))}


# captioning -----------------------------------------------------------------


def finetune_caption(params, clips: Sequence[ClipPair], cfg: RunConfig) -> list[float]:
    def loss_fn(step, rng):
        batch = _batch(clips, cfg.finetune_batch, rng)
        return tasks.caption_loss([c.features for c in batch], [c.text_ids for c in batch], params)

    return optimize(params, loss_fn, cfg, cfg.seed)


def caption_eval(clips: Sequence[ClipPair], params, cfg: RunConfig):
    hyps = [tasks.greedy_decode(c.features, params, cfg.caption_max_len) for c in clips]
    refs = [list(map(int, c.text_ids)) for c in clips]
    metrics = {f"BLEU-{n}": float(np.mean([tasks.bleu_n(h, r, n) for h, r in zip(hyps, refs)])) for n in (3, 4)}
    return metrics, hyps, refs


# dispatcher -----------------------------------------------------------------


@dataclass
class FinetuneResult:
    params: ModelParams
    records: list[dict]
    losses: list[float]
    captions: tuple | None = None


def finetune_and_evaluate(task: str, params: ModelParams, corpora: Corpora, cfg: RunConfig,
                          train: bool = True) -> FinetuneResult:
    data = task_data(cfg, corpora)
    losses: list[float] = []
    records: list[dict] = []
    captions = None
    if task == "retrieval":
        if train:
            losses = finetune_retrieval(params, data, cfg)
        for split, clips in (("held_in", data.held_in), ("held_out", data.held_out)):
            records += _records(task, {f"{split}.{k}": v for k, v in retrieval_eval(clips, params, cfg).items()})
    elif task == "segmentation":
        n_labels = cfg.corpus_config().n_concepts + 1
        if train:
            losses = finetune_segmentation(params, data, cfg, n_labels)
        records += _records(task, {f"held_out.{k}": v for k, v in segmentation_eval(data.eval_videos, params, cfg).items()})
    elif task == "localization":
        if corpora.world is None:
            raise ValueError("localization needs the synthetic corpus (step texts come from it)")
        if train:
            losses = finetune_localization(params, data, cfg, corpora.world)
        records += _records(task, {f"held_out.{k}": v for k, v in
                                   localization_eval(data.eval_videos, params, cfg, corpora.world).items()})
    elif task == "qa":
        rng = np.random.default_rng([cfg.seed, 5])
        train_items = qa_items(data.held_in, cfg.qa_choices, rng)
        eval_items = qa_items(data.held_out, cfg.qa_choices, rng)
        if train:
            losses = finetune_qa(params, train_items, cfg)
        records += _records(task, {"held_in.accuracy": qa_eval(train_items, params)["accuracy"],
                                   "held_out.accuracy": qa_eval(eval_items, params)["accuracy"]})
    elif task == "caption":
        if train:
            losses = finetune_caption(params, data.held_in, cfg)
        for split, clips in (("held_in", data.held_in), ("held_out", data.held_out)):
            metrics, hyps, refs = caption_eval(clips, params, cfg)
            records += _records(task, {f"{split}.{k}": v for k, v in metrics.items()})
            if split == "held_out":
                captions = (hyps, refs)
    else:
        raise ValueError(f"unknown task {task!r}")
    if losses:
        records.append({"task": task, "metric": "final_train_loss", "value": losses[-1]})
    return FinetuneResult(params, records, losses, captions)
