"""Run configuration: a flat ``key = value`` text file.

Architecture keys map onto :class:`FusionConfig`; tuple-valued keys take
comma-separated integers. Lines starting with ``#`` are comments.

Keys
----
stage           coarse | fine
strategy        merged_attention | co_attention_ungated | co_attention_gated
fused_layers    fused blocks per backbone (M)
mlm, itm, itm_hard, itc
                coarse objective toggles (true/false); itm and itm_hard exclude each other
steps, batch_size, warmup_steps
lr_backbone, lr_fusion, weight_decay
                AdamW; ``lr_fusion`` covers fusion modules and task heads
seed            master seed for data order, init and masking
train_data, eval_data
                dataset paths (relative to the config file)
n_train, n_eval, data_seed
                sizes and seed for ``gen-data``
caption_variant, beam, rerank_k, eval_every
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import FusionConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


STAGES = ("coarse", "fine")
TASKS = ("classify", "retrieval", "caption", "grounding")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class Config:
    arch: FusionConfig = field(default_factory=FusionConfig)
    stage: str = "coarse"
    mlm: bool = True
    itm: bool = False
    itm_hard: bool = True
    itc: bool = True
    steps: int = 2000
    batch_size: int = 16
    warmup_steps: int = 100
    lr_backbone: float = 5e-4
    lr_fusion: float = 2.5e-3
    lr_fine_text: float = 5e-5
    lr_fine: float = 5e-4
    weight_decay: float = 0.01
    seed: int = 0
    train_data: str | None = None
    eval_data: str | None = None
    n_train: int = 512
    n_eval: int = 64
    data_seed: int = 0
    caption_variant: str = "seq2seq"
    beam: int = 5
    rerank_k: int = 8
    eval_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.itm and self.itm_hard:
            raise ConfigError("itm and itm_hard are alternatives; enable at most one")
        if self.stage == "coarse" and not self.objectives:
            raise ConfigError("coarse stage needs at least one of mlm, itm, itm_hard, itc")
        if self.steps < 0 or self.batch_size < 2:
            raise ConfigError("steps must be >= 0 and batch_size >= 2")
        if self.caption_variant not in ("seq2seq", "ladder"):
            raise ConfigError(f"caption_variant must be seq2seq or ladder, got {self.caption_variant!r}")

    @property
    def objectives(self) -> tuple[str, ...]:
        return tuple(k for k in ("mlm", "itm", "itm_hard", "itc") if getattr(self, k))

    def with_overrides(self, **kw) -> "Config":
        arch_keys = {f.name for f in fields(FusionConfig)}
        arch_kw = {k: kw.pop(k) for k in list(kw) if k in arch_keys}
        try:
            arch = replace(self.arch, **arch_kw) if arch_kw else self.arch
            return replace(self, arch=arch, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        arch = FusionConfig.from_dict(d.pop("arch", {}))
        return cls(arch=arch, **d)

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict()["arch"].items():
            lines.append(f"{k} = {_format(v)}")
        for f in fields(self):
            if f.name != "arch":
                lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return "none" if v is None else str(v)


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "optstr":
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _kinds() -> dict:
    kinds = {}
    for f in fields(FusionConfig):
        kinds[f.name] = "tuple" if f.name.startswith("image_") and f.name != "image_size" else _field_kind(f.type)
    for f in fields(Config):
        if f.name != "arch":
            kinds[f.name] = _field_kind(f.type)
    return kinds


def _field_kind(t):
    t = str(t)
    if t == "bool":
        return bool
    if t == "int":
        return int
    if t == "float":
        return float
    if "None" in t:
        return "optstr"
    return str


def parse_config(text: str, base_dir: Path | None = None) -> Config:
    """Parse ``key = value`` lines into a :class:`Config`; unknown keys are errors."""
    kinds = _kinds()
    values: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, kinds[key])
    if base_dir is not None:
        for key in ("train_data", "eval_data"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str((base_dir / values[key]).resolve())
    return Config().with_overrides(**values)


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
