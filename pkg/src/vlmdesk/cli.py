"""Command-line entry point: ``vlmdesk <command> [flags]``.

Commands: pretrain, finetune, eval, ablate, dump-masks, gen-data. Every
command reads an optional flat config file (``--config``); flags override
config keys one-for-one and ``--set key=value`` reaches any other key.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ConfigError, RunConfig
from .data import (ConfigMismatchError, CorpusWorld, FeatureFileError, assemble_clip, generate_corpus,
                   project_clips, sample_clips, write_feature_file, write_manifest)
from .masking import Geometry, build_mask, mask_for_lengths
from .model import CheckpointError, ModelParams, encode_batch, init_params, load_checkpoint, save_checkpoint
from .train import CHECKPOINT_NAME, NumericFailure, finetune_and_evaluate, load_corpora, pretrain, resume_pretraining

log = logging.getLogger("vlmdesk")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

ABLATION_AXES = {
    "p_mmm": ("p_mmm", [0.0, 0.3, 0.5, 0.7]),
    "min_len": ("min_text_len", [4, 8]),
    "loss": ("loss", ["vlm", "mfm_mlm"]),
}

# flag dest -> config key
FLAG_KEYS = {"seed": "seed", "loss": "loss", "p_mmm": "p_mmm", "min_text_len": "min_text_len",
             "task": "task", "checkpoint": "checkpoint", "out": "out", "dump_attn": "dump_attn",
             "steps": "steps", "from_scratch": "from_scratch"}


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None and v is not False:
            overrides[key] = str(v)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return RunConfig.from_strings(overrides, "flags", base=cfg) if overrides else cfg


def _write_records(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    return out


def dump_attention(params: ModelParams, corpora, cfg: RunConfig, geometry: Geometry, out: Path) -> None:
    """Raw attention probabilities of one clip, one text grid per layer and head."""
    clip = sample_clips(corpora.train[0], np.random.default_rng(cfg.seed), 1, cfg.len_range,
                        params.config.max_video_tokens)[0]
    with nx.no_grad():
        seq = assemble_clip(clip, project_clips([clip], params)[0], params)
        attn: list = []
        encode_batch([seq], [build_mask(seq, geometry)], params, attn_out=attn)
    d = out / "attn"
    d.mkdir(exist_ok=True)
    L = seq.length
    for layer, probs in enumerate(attn):
        for head in range(probs.shape[1]):
            grid = probs[0, head, :L, :L]
            (d / f"layer{layer}_head{head}.txt").write_text(
                "\n".join(" ".join(f"{v:.6f}" for v in row) for row in grid) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig) -> Path:
    out = _prepare_out(cfg)
    corpora = load_corpora(cfg)
    if cfg.checkpoint:
        res = resume_pretraining(cfg, corpora.train, cfg.checkpoint, out)
    else:
        res = pretrain(cfg, corpora.train, out_dir=out)
    log.info("pretrained %d steps; final loss %.4f", res.step, res.losses[-1] if res.losses else float("nan"))
    if cfg.dump_attn:
        dump_attention(res.params, corpora, cfg, Geometry.FULL, out)
    return out / CHECKPOINT_NAME


def _load_for_task(cfg: RunConfig, need_head: bool = False) -> ModelParams:
    if cfg.from_scratch:
        return init_params(cfg.model_config(), cfg.seed)
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: a pretrained checkpoint is required (or pass --from-scratch)")
    params, _, meta = load_checkpoint(cfg.checkpoint)
    if params.config != cfg.model_config():
        raise ConfigError(f"checkpoint model config {params.config} does not match the run's model config")
    # only segmentation owns extra parameters; the other tasks reuse the shared head
    has_seg = any(name.startswith("seg.") for name in params.tensors)
    if has_seg and cfg.task != "segmentation":
        raise ConfigError(f"task: checkpoint carries a segmentation head (fine-tuned for "
                          f"{meta.get('task')!r}), not usable for {cfg.task!r}")
    if need_head and cfg.task == "segmentation" and not has_seg:
        raise ConfigError("task: checkpoint has no segmentation head to evaluate")
    return params


def _finish_task(res, out: Path) -> list[dict]:
    _write_records(out / "report.jsonl", res.records)
    if res.captions:
        hyps, refs = res.captions
        (out / "captions.hyp.txt").write_text("".join(" ".join(map(str, h)) + "\n" for h in hyps))
        (out / "captions.ref.txt").write_text("".join(" ".join(map(str, r)) + "\n" for r in refs))
    return res.records


def cmd_finetune(cfg: RunConfig) -> list[dict]:
    out = _prepare_out(cfg)
    params = _load_for_task(cfg)
    corpora = load_corpora(cfg)
    res = finetune_and_evaluate(cfg.task, params, corpora, cfg, train=True)
    meta = {"stage": "finetune", "task": cfg.task, "step": cfg.finetune_steps,
            "run": {k: v for k, v in cfg.to_dict().items() if k not in ("out", "checkpoint")}}
    save_checkpoint(out / "finetuned.ckpt", params, meta=meta)
    if cfg.dump_attn:
        geometry = Geometry.CAPTION_CAUSAL if cfg.task == "caption" else Geometry.ISOLATED
        dump_attention(params, corpora, cfg, geometry, out)
    return _finish_task(res, out)


def cmd_eval(cfg: RunConfig) -> list[dict]:
    out = _prepare_out(cfg)
    params = _load_for_task(cfg, need_head=True)
    res = finetune_and_evaluate(cfg.task, params, load_corpora(cfg), cfg, train=False)
    return _finish_task(res, out)


def cmd_ablate(base: RunConfig, axis: str, values=None, n_seeds: int = 1) -> list[dict]:
    """Pretrain + retrieval fine-tune for every (value, seed) cell of one axis."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis: must be one of {sorted(ABLATION_AXES)}")
    key, default = ABLATION_AXES[axis]
    values = default if values is None else list(values)
    if not values:
        raise ConfigError("axis values: the sweep list is empty")
    out = _prepare_out(base)
    rows = []
    for value in values:
        for s in range(n_seeds):
            seed = base.seed + s  # identical seeds across axis values -> paired comparison
            row = {"axis": axis, "value": value, "seed": seed}
            try:
                cell = RunConfig.from_strings({key: str(value), "seed": str(seed),
                                               "out": str(out / f"{axis}={value}" / f"seed{seed}")},
                                              "ablate", base=base)
                corpora = load_corpora(cell)
                res = pretrain(cell, corpora.train, out_dir=cell.out)
                ft = finetune_and_evaluate("retrieval", res.params, corpora, cell)
                for r in ft.records:
                    if r["metric"].startswith("held_out."):
                        row[r["metric"].split(".", 1)[1]] = r["value"]
                row["status"] = "ok"
            except (ConfigError, NumericFailure, ValueError) as exc:
                log.error("ablation cell %s=%s seed %d failed: %s", axis, value, seed, exc)
                row["status"] = f"error: {exc}"
            rows.append(row)
    cols = ["axis", "value", "seed", "R@1", "R@5", "R@10", "MedianR", "status"]
    lines = ["\t".join(cols)] + ["\t".join(str(r.get(c, "")) for c in cols) for r in rows]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    return rows


def cmd_dump_masks(geometry: str, n_video: int, n_text: int, pad_to: int | None = None) -> str:
    return mask_for_lengths(Geometry(geometry.upper()), n_video, n_text, pad_to).to_text()


def cmd_gen_data(cfg: RunConfig, val_fraction: float = 0.0) -> Path:
    out = _prepare_out(cfg)
    ccfg = cfg.corpus_config()
    videos = generate_corpus(cfg.n_videos, cfg.seed, ccfg, CorpusWorld.from_seed(cfg.seed, ccfg))
    path = out / "features.bin"
    write_feature_file(path, videos, ccfg.d_video_feat)
    n_val = int(round(val_fraction * len(videos)))
    write_manifest(out / "manifest.tsv",
                   {v.video_id: ("val" if i >= len(videos) - n_val else "train") for i, v in enumerate(videos)})
    return path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["vlm", "mfm_mlm"])
    p.add_argument("--p-mmm", dest="p_mmm", type=float)
    p.add_argument("--min-text-len", dest="min_text_len", type=int)
    p.add_argument("--task", choices=["retrieval", "segmentation", "localization", "qa", "caption"])
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--from-scratch", dest="from_scratch", action="store_true")
    p.add_argument("--dump-attn", dest="dump_attn", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlmdesk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "finetune", "eval", "gen-data"):
        _common(sub.add_parser(name))
    sub.choices["gen-data"].add_argument("--val-fraction", type=float, default=0.0)
    ab = sub.add_parser("ablate")
    _common(ab)
    ab.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    ab.add_argument("--values", help="comma-separated axis values (default: the standard sweep)")
    ab.add_argument("--seeds", type=int, default=1)
    dm = sub.add_parser("dump-masks")
    dm.add_argument("--geometry", required=True, choices=[g.value.lower() for g in Geometry])
    dm.add_argument("--video-len", type=int, required=True)
    dm.add_argument("--text-len", type=int, required=True)
    dm.add_argument("--pad-to", type=int)
    dm.add_argument("--out", help="write the grid here instead of stdout")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "dump-masks":
            text = cmd_dump_masks(args.geometry, args.video_len, args.text_len, args.pad_to)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = build_config(args)
        if args.command == "pretrain":
            print(cmd_pretrain(cfg))
        elif args.command in ("finetune", "eval"):
            records = cmd_finetune(cfg) if args.command == "finetune" else cmd_eval(cfg)
            for r in records:
                print(json.dumps(r, sort_keys=True))
        elif args.command == "ablate":
            values = None
            if args.values is not None:
                values = [v.strip() for v in args.values.split(",") if v.strip()]
            for row in cmd_ablate(cfg, args.axis, values, args.seeds):
                print(json.dumps(row, sort_keys=True))
        elif args.command == "gen-data":
            print(cmd_gen_data(cfg, args.val_fraction))
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FeatureFileError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
