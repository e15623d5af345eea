"""Run configuration as a flat ``key = value`` text file.

Keys are dotted: ``model.*`` (ModelConfig), ``train.*`` (TrainSchedule),
``data.*`` (split sizes and seed layout), ``gen.*`` (scene generator) plus the
top-level ``seed``, ``out_dir`` and ``data_dir``. Blank lines and ``#`` comments
are ignored. Tuples are written comma-separated; optional integers accept ``none``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .model import ModelConfig
from .synth.scene import GenConfig
from .synth.splits import SplitConfig, atomic_write
from .train import TrainSchedule


class ConfigError(ValueError):
    pass


# TrainSchedule derives these from total_steps when left unset
_OPTIONAL_INT = {"train.freeze_steps", "train.decay_step"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    data: SplitConfig = field(default_factory=SplitConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = ""  # manifests; empty means regenerate from data.* / gen.*

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for section, obj in (("model", self.model), ("train", self.train), ("data", self.data),
                             ("gen", self.data.gen)):
            for f in dataclasses.fields(obj):
                if f.name == "gen":
                    continue
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        out.update(seed=self.seed, out_dir=self.out_dir, data_dir=self.data_dir)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.flat().items()))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def default_keys() -> dict[str, object]:
    """Every accepted key with its default value."""
    flat = RunConfig().flat()
    for k in _OPTIONAL_INT:
        flat[k] = None
    return flat


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _OPTIONAL_INT:
            return None if raw.lower() in ("none", "auto", "") else int(raw)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def build(overrides: dict[str, str] | None = None) -> RunConfig:
    """Apply string ``overrides`` onto the defaults; unknown keys are rejected."""
    known = default_keys()
    values: dict[str, object] = {}
    for key, raw in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, known[key])

    def section(prefix):
        return {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(prefix + ".")}

    try:
        gen = GenConfig(**section("gen"))
        data = SplitConfig(**section("data"), gen=gen)
        data.validate()
        model = ModelConfig(**section("model"))
        train = TrainSchedule(**section("train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    top = {k: v for k, v in values.items() if "." not in k}
    cfg = RunConfig(model=model, train=train, data=data, **top)
    if cfg.data.max_tokens != cfg.model.max_tokens:
        raise ConfigError("data.max_tokens must equal model.max_tokens")
    return cfg


def load(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (if given) and layer command-line ``overrides`` on top."""
    pairs = {}
    if path:
        try:
            with open(path) as f:
                pairs = parse_text(f.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    pairs.update(overrides or {})
    return build(pairs)


def write_effective(cfg: RunConfig, out_dir: str, version: str) -> None:
    """Echo the post-override config and code version into ``out_dir``."""
    atomic_write(f"{out_dir}/effective_config.txt", cfg.dumps())
    atomic_write(f"{out_dir}/version.json",
                 json.dumps({"version": version, "config_hash": cfg.digest()}, sort_keys=True) + "\n")
