"""Run configuration: a flat ``key = value`` text file plus flag overrides."""

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

from .data import CorpusConfig
from .masking import MaskingConfig
from .model import ModelConfig
from .numerics import Schedule


class ConfigError(ValueError):
    pass


TASKS = ("retrieval", "segmentation", "localization", "qa", "caption")
LOSSES = ("vlm", "mfm_mlm")


@dataclass
class RunConfig:
    # model
    preset: str = "desk"
    d_model: typing.Optional[int] = None
    n_layers: typing.Optional[int] = None
    n_heads: typing.Optional[int] = None
    d_ff: typing.Optional[int] = None
    vocab_size: typing.Optional[int] = None
    d_video_feat: typing.Optional[int] = None
    max_len: typing.Optional[int] = None
    max_video_tokens: typing.Optional[int] = None
    # data
    data: str = "synthetic"
    manifest: typing.Optional[str] = None
    n_videos: int = 64
    n_eval_videos: int = 32
    video_seconds: int = 60
    text_rate: float = 2.0
    n_topics: int = 8
    noise: float = 0.3
    min_text_len: int = 4
    max_text_len: int = 12
    videos_per_batch: int = 4
    clips_per_video: int = 4
    queue_capacity: int = 4
    # pretraining objective
    loss: str = "vlm"
    p_mmm: float = 0.5
    p_token: float = 0.15
    # optimizer and schedule
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    clip_norm: float = 2.0
    warmup_steps: int = 100
    steps: int = 1000
    end_lr: float = 0.0
    lr_power: float = 1.0
    checkpoint_every: int = 250
    # fine-tuning
    task: str = "retrieval"
    from_scratch: bool = False
    finetune_steps: int = 300
    finetune_warmup: int = 30
    finetune_lr: float = 1e-3
    finetune_pairs: int = 32
    finetune_batch: int = 16
    eval_pairs: int = 32
    qa_choices: int = 5
    window: int = 8
    window_step: int = 4
    caption_max_len: int = 12
    pool_include_sep: bool = False
    normalize_retrieval: bool = False
    # run
    checkpoint: typing.Optional[str] = None
    out: str = "runs/default"
    dump_attn: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        def need(cond: bool, field: str, msg: str):
            if not cond:
                raise ConfigError(f"{field}: {msg} (got {getattr(self, field)!r})")

        need(self.preset in ("desk", "published"), "preset", "must be 'desk' or 'published'")
        need(self.loss in LOSSES, "loss", f"must be one of {LOSSES}")
        need(self.task in TASKS, "task", f"must be one of {TASKS}")
        for f in ("p_mmm", "p_token"):
            need(0.0 <= getattr(self, f) <= 1.0, f, "must lie in [0, 1]")
        for f in ("n_videos", "n_eval_videos", "video_seconds", "n_topics", "min_text_len",
                  "videos_per_batch", "clips_per_video", "queue_capacity", "warmup_steps", "steps",
                  "checkpoint_every", "finetune_steps", "finetune_warmup", "finetune_pairs",
                  "eval_pairs", "window", "window_step", "caption_max_len"):
            need(getattr(self, f) >= 1, f, "must be >= 1")
        need(self.max_text_len >= self.min_text_len, "max_text_len", "must be >= min_text_len")
        need(self.finetune_batch >= 2, "finetune_batch", "must be >= 2 (in-batch negatives)")
        need(self.qa_choices >= 2, "qa_choices", "must be >= 2")
        need(self.text_rate > 0, "text_rate", "must be > 0")
        need(self.noise >= 0, "noise", "must be >= 0")
        need(self.lr > 0 and self.finetune_lr > 0, "lr", "learning rates must be > 0")
        need(0.0 <= self.beta1 < 1.0, "beta1", "must lie in [0, 1)")
        need(0.0 <= self.beta2 < 1.0, "beta2", "must lie in [0, 1)")
        need(self.adam_eps > 0, "adam_eps", "must be > 0")
        need(self.clip_norm > 0, "clip_norm", "must be > 0")
        need(self.end_lr >= 0, "end_lr", "must be >= 0")
        need(self.lr_power > 0, "lr_power", "must be > 0")
        for f in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "d_video_feat",
                  "max_len", "max_video_tokens"):
            v = getattr(self, f)
            need(v is None or v >= 1, f, "must be >= 1")
        try:
            mc = self.model_config()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        need(self.max_text_len + 3 + 1 <= mc.max_len, "max_text_len",
             f"leaves no room for video inside max_len={mc.max_len}")
        need(self.window <= mc.max_video_tokens, "window", f"must be <= max_video_tokens={mc.max_video_tokens}")
        need(self.window_step <= self.window, "window_step", "must be <= window")

    # -- derived configs --------------------------------------------------
    def model_config(self) -> ModelConfig:
        overrides = {f: getattr(self, f) for f in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size",
                                                   "d_video_feat", "max_len", "max_video_tokens")
                     if getattr(self, f) is not None}
        return ModelConfig.published(**overrides) if self.preset == "published" else ModelConfig.desk(**overrides)

    def corpus_config(self) -> CorpusConfig:
        mc = self.model_config()
        return CorpusConfig(d_video_feat=mc.d_video_feat, vocab_size=mc.vocab_size,
                            first_word_id=mc.first_word_id, seconds=self.video_seconds,
                            text_rate=self.text_rate, n_topics=self.n_topics, noise=self.noise)

    def masking_config(self) -> MaskingConfig:
        return MaskingConfig(p_mmm=self.p_mmm, p_token=self.p_token)

    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.warmup_steps, max(self.steps, self.warmup_steps + 1),
                        self.end_lr, self.lr_power)

    def finetune_schedule(self) -> Schedule:
        return Schedule(self.finetune_lr, self.finetune_warmup,
                        max(self.finetune_steps, self.finetune_warmup + 1), self.end_lr, self.lr_power)

    @property
    def len_range(self) -> tuple[int, int]:
        return self.min_text_len, self.max_text_len

    # -- (de)serialization ------------------------------------------------
    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_strings(values, source)

    @classmethod
    def from_strings(cls, values: dict[str, str], source: str = "<config>",
                     base: typing.Optional["RunConfig"] = None) -> "RunConfig":
        types = typing.get_type_hints(cls)
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}")
        parsed = {k: _parse(k, v, types[k]) for k, v in values.items()}
        if base is None:
            return cls(**parsed)
        return base.replace(**parsed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key: str, raw: str, typ):
    optional = typing.get_origin(typ) is typing.Union
    if optional:
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
        if raw.lower() in ("none", "null", ""):
            return None
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
