import numpy as np
import pytest

from vlmdesk.data import CorpusConfig, CorpusWorld, generate_corpus, sample_clips
from vlmdesk.model import ModelConfig, init_params


def corpus_config_for(mc: ModelConfig, **kw) -> CorpusConfig:
    return CorpusConfig(d_video_feat=mc.d_video_feat, vocab_size=mc.vocab_size,
                        first_word_id=mc.first_word_id, **kw)


def toy_clips(mc: ModelConfig, n_videos=4, per_video=2, seed=0, len_range=(4, 8), seconds=30):
    cc = corpus_config_for(mc, seconds=seconds)
    videos = generate_corpus(n_videos, seed, cc, CorpusWorld.from_seed(seed, cc))
    rng = np.random.default_rng(seed)
    return [c for v in videos for c in sample_clips(v, rng, per_video, len_range, mc.max_video_tokens)]


def perturbed_params(mc: ModelConfig, seed: int, std: float = 0.2):
    """Parameters moved off the small-init point so every gradient is well scaled."""
    p = init_params(mc, seed)
    rng = np.random.default_rng([seed, 99])
    for t in p.tensors.values():
        t.data += rng.normal(0.0, std, t.data.shape)
    return p


@pytest.fixture
def desk():
    return ModelConfig.desk()


@pytest.fixture
def params(desk):
    return init_params(desk, 0)


@pytest.fixture
def tiny():
    return ModelConfig.desk(n_layers=1, d_model=16)


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
