import json
import subprocess
import sys

import pytest

from vlmdesk import cli
from vlmdesk.config import ConfigError, RunConfig
from vlmdesk.model import load_checkpoint

FAST = ["--set", "n_videos=8", "--set", "n_eval_videos=8", "--set", "video_seconds=30", "--set", "warmup_steps=2",
        "--set", "finetune_steps=4", "--set", "finetune_warmup=1", "--set", "finetune_pairs=8",
        "--set", "eval_pairs=8", "--set", "finetune_batch=4"]


def run(args):
    return cli.main(args)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pt")
    assert run(["pretrain", "--out", str(out), "--steps", "6", *FAST]) == 0
    return out


def test_pretrain_outputs(pretrained):
    assert (pretrained / "checkpoint.ckpt").exists()
    rows = (pretrained / "train_log.jsonl").read_text().splitlines()
    assert len(rows) == 6
    cfg = RunConfig.load(pretrained / "config.txt")
    assert cfg.steps == 6 and cfg.n_videos == 8 and cfg.out == str(pretrained)


def test_effective_config_reproduces_the_run(pretrained, tmp_path):
    cfg = RunConfig.load(pretrained / "config.txt").replace(out=str(tmp_path))
    cli.cmd_pretrain(cfg)
    assert (tmp_path / "checkpoint.ckpt").read_bytes() == (pretrained / "checkpoint.ckpt").read_bytes()


def test_loss_flag_is_logged(tmp_path):
    assert run(["pretrain", "--out", str(tmp_path), "--steps", "3", "--loss", "mfm_mlm", *FAST]) == 0
    rows = [json.loads(r) for r in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert {r["loss_variant"] for r in rows} == {"mfm_mlm"}


@pytest.mark.parametrize("task,metric", [("retrieval", "held_out.MedianR"), ("caption", "held_out.BLEU-4"),
                                         ("segmentation", "held_out.frame_accuracy")])
def test_finetune_then_eval(pretrained, tmp_path, task, metric, capsys):
    ft = tmp_path / "ft"
    assert run(["finetune", "--checkpoint", str(pretrained / "checkpoint.ckpt"), "--task", task,
                "--out", str(ft), *FAST]) == 0
    report = [json.loads(r) for r in (ft / "report.jsonl").read_text().splitlines()]
    assert metric in {r["metric"] for r in report}
    assert all(set(r) == {"task", "metric", "value"} for r in report)
    _, _, meta = load_checkpoint(ft / "finetuned.ckpt")
    assert meta["task"] == task
    if task == "caption":
        hyp = (ft / "captions.hyp.txt").read_text().split("\n")
        ref = (ft / "captions.ref.txt").read_text().split("\n")
        assert len(hyp) == len(ref) == 9
    ev = tmp_path / "ev"
    assert run(["eval", "--checkpoint", str(ft / "finetuned.ckpt"), "--task", task, "--out", str(ev), *FAST]) == 0
    assert metric in (ev / "report.jsonl").read_text()


def test_from_scratch_needs_no_checkpoint(tmp_path):
    assert run(["finetune", "--from-scratch", "--out", str(tmp_path), *FAST]) == 0
    assert "held_out.R@1" in (tmp_path / "report.jsonl").read_text()


def test_dump_attn(pretrained, tmp_path):
    assert run(["finetune", "--checkpoint", str(pretrained / "checkpoint.ckpt"), "--task", "caption",
                "--out", str(tmp_path), "--dump-attn", *FAST]) == 0
    grids = sorted((tmp_path / "attn").glob("*.txt"))
    assert len(grids) == 2 * 4
    rows = [list(map(float, r.split())) for r in grids[0].read_text().splitlines()]
    assert len(rows) == len(rows[0])
    assert all(abs(sum(r) - 1) < 1e-5 for r in rows)


def test_exit_codes(pretrained, tmp_path, capsys):
    ckpt = str(pretrained / "checkpoint.ckpt")
    assert run(["pretrain", "--p-mmm", "1.5", "--out", str(tmp_path)]) == 2
    assert "p_mmm" in capsys.readouterr().err
    assert run(["pretrain", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert run(["finetune", "--out", str(tmp_path)]) == 2
    assert run(["finetune", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)]) == 4
    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    assert run(["finetune", "--checkpoint", str(tmp_path / "junk.ckpt"), "--out", str(tmp_path)]) == 4
    assert run(["finetune", "--checkpoint", ckpt, "--set", "d_model=32", "--out", str(tmp_path)]) == 2
    assert run(["eval", "--checkpoint", ckpt, "--task", "segmentation", "--out", str(tmp_path), *FAST]) == 2
    assert run(["pretrain", "--config", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == 2


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def boom(cfg):
        raise cli.NumericFailure("non-finite loss at step 3")

    monkeypatch.setattr(cli, "cmd_pretrain", boom)
    assert run(["pretrain", "--out", str(tmp_path)]) == 3


def test_segmentation_head_mismatch(pretrained, tmp_path):
    seg = tmp_path / "seg"
    assert run(["finetune", "--checkpoint", str(pretrained / "checkpoint.ckpt"), "--task", "segmentation",
                "--out", str(seg), *FAST]) == 0
    assert run(["eval", "--checkpoint", str(seg / "finetuned.ckpt"), "--task", "retrieval",
                "--out", str(tmp_path / "x"), *FAST]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    (tmp_path / "c.txt").write_text("seed = 4\np_mmm = 0.3\n")
    args = cli.make_parser().parse_args(["pretrain", "--config", str(tmp_path / "c.txt"), "--p-mmm", "0.7"])
    cfg = cli.build_config(args)
    assert cfg.seed == 4 and cfg.p_mmm == 0.7


def test_dump_masks(capsys, tmp_path):
    assert run(["dump-masks", "--geometry", "isolated", "--video-len", "1", "--text-len", "1"]) == 0
    assert capsys.readouterr().out == "10000\n01100\n01100\n00011\n00011\n"
    assert run(["dump-masks", "--geometry", "caption_causal", "--video-len", "1", "--text-len", "2",
                "--pad-to", "7", "--out", str(tmp_path / "m.txt")]) == 0
    assert (tmp_path / "m.txt").read_text().splitlines()[-1] == "0000000"


def test_gen_data_round_trips_into_training(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path), "--set", "n_videos=6", "--val-fraction", "0.5"]) == 0
    assert (tmp_path / "manifest.tsv").read_text().count("\tval") == 3
    out = tmp_path / "pt"
    assert run(["pretrain", "--out", str(out), "--steps", "2", "--set", f"data={tmp_path / 'features.bin'}",
                "--set", f"manifest={tmp_path / 'manifest.tsv'}", "--set", "videos_per_batch=2"]) == 0


def test_ablate_rows_and_errors(tmp_path):
    base = RunConfig(out=str(tmp_path), steps=2, warmup_steps=1, n_videos=8, n_eval_videos=8, video_seconds=30,
                     finetune_steps=2, finetune_warmup=1, finetune_pairs=8, eval_pairs=8, finetune_batch=4)
    rows = cli.cmd_ablate(base, "p_mmm")
    assert [r["value"] for r in rows] == [0.0, 0.3, 0.5, 0.7]
    assert all(r["status"] == "ok" and "R@1" in r for r in rows)
    assert len((tmp_path / "ablation.tsv").read_text().splitlines()) == 5
    # a bad cell is recorded and the sweep continues
    rows = cli.cmd_ablate(base, "min_len", ["4", "20"])
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("error")
    with pytest.raises(ConfigError, match="empty"):
        cli.cmd_ablate(base, "loss", [])
    with pytest.raises(ConfigError):
        cli.cmd_ablate(base, "width")


def test_ablation_seeds_are_paired(tmp_path):
    base = RunConfig(out=str(tmp_path), steps=1, warmup_steps=1, n_videos=8, n_eval_videos=8, video_seconds=30,
                     finetune_steps=1, finetune_warmup=1, finetune_pairs=8, eval_pairs=8, finetune_batch=4, seed=7)
    rows = cli.cmd_ablate(base, "loss", n_seeds=2)
    assert [(r["value"], r["seed"]) for r in rows] == [("vlm", 7), ("vlm", 8), ("mfm_mlm", 7), ("mfm_mlm", 8)]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vlmdesk.cli", "dump-masks", "--geometry", "full",
                           "--video-len", "1", "--text-len", "1"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == "11111\n" * 5
