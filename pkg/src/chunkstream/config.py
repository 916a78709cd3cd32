"""``key = value`` configuration files with namespaced keys.

Namespaces map onto dataclasses: ``scene.*`` (SceneConfig), ``expert.*``
(ExpertParams), ``executor.*`` (ExecutorConfig) and ``flow.*`` (TrainConfig
plus ``flow.sample_steps``). Blank lines and ``#`` comments are ignored.
Unknown keys are an error.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .expert import ExpertParams
from .flow import TrainConfig
from .sim import SceneConfig
from .streaming import ExecutorMode, LatencyModel

ENV_VAR = "CHUNKSTREAM_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExecutorConfig:
    mode: str = "ci-laas"
    latency_ticks: int = 6
    latency_jitter: int = 0
    chunk_horizon: int = 20
    gap_behavior: str = "hold"
    latency_seed: int = 0

    def latency_model(self) -> LatencyModel:
        if self.latency_jitter == 0:
            return LatencyModel.constant(self.latency_ticks)
        lo = max(0, self.latency_ticks - self.latency_jitter)
        return LatencyModel.uniform(lo, self.latency_ticks + self.latency_jitter, self.latency_seed)


@dataclass(frozen=True)
class FlowConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sample_steps: int = 10


@dataclass(frozen=True)
class CliConfig:
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(motion="driven", drive_duration=(1.0, 4.0)))
    expert: ExpertParams = field(default_factory=ExpertParams)
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def flat(self) -> dict[str, object]:
        out = {}
        for ns in ("scene", "expert", "executor"):
            for k, v in dataclasses.asdict(getattr(self, ns)).items():
                out[f"{ns}.{k}"] = v
        for k, v in dataclasses.asdict(self.flow.train).items():
            out[f"flow.{k}"] = v
        out["flow.sample_steps"] = self.flow.sample_steps
        return out

    def digest(self) -> str:
        # canonical: sorted keys, so file order never matters
        blob = json.dumps(self.flat(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> None:
        self.scene.validate()
        try:
            ExecutorMode(self.executor.mode)
        except ValueError:
            raise ConfigError(f"executor.mode {self.executor.mode!r} not one of {[m.value for m in ExecutorMode]}") from None
        if self.executor.gap_behavior not in ("hold", "repeat-last"):
            raise ConfigError("executor.gap_behavior must be hold or repeat-last")
        if self.executor.latency_ticks < 0 or self.executor.latency_jitter < 0 or self.executor.chunk_horizon < 1:
            raise ConfigError("executor latency must be >= 0 and chunk_horizon >= 1")
        if self.expert.velocity_source not in ("true", "window"):
            raise ConfigError("expert.velocity_source must be true or window")
        if self.flow.sample_steps < 1:
            raise ConfigError("flow.sample_steps must be >= 1")


def _coerce(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, tuple) and default and isinstance(default[0], str):
            return tuple(part.strip() for part in text.split(",") if part.strip())
        if default is None or isinstance(default, tuple):
            if text.lower() == "none":
                return None
            value = ast.literal_eval(text if "," not in text or text.startswith(("(", "[")) else f"({text},)")
            if isinstance(value, (list, tuple)):
                return tuple(value)
            return (value,) if isinstance(default, tuple) else value
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    raise ConfigError(f"{key}: unsupported field type {type(default).__name__}")


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def build_config(pairs, base: CliConfig | None = None) -> CliConfig:
    cfg = base or CliConfig()
    updates: dict[str, dict] = {"scene": {}, "expert": {}, "executor": {}, "flow": {}, "flow.train": {}}
    for key, text in pairs:
        ns, _, name = key.partition(".")
        if ns in ("scene", "expert", "executor"):
            target = getattr(cfg, ns)
            bucket = updates[ns]
        elif ns == "flow" and name == "sample_steps":
            target, bucket = cfg.flow, updates["flow"]
        elif ns == "flow":
            target, bucket = cfg.flow.train, updates["flow.train"]
        else:
            raise ConfigError(f"unknown config key {key!r}")
        names = {f.name for f in dataclasses.fields(target)}
        if name not in names or (target is cfg.flow and name != "sample_steps"):
            raise ConfigError(f"unknown config key {key!r}")
        bucket[name] = _coerce(getattr(target, name), text, key)
    train = dataclasses.replace(cfg.flow.train, **updates["flow.train"])
    cfg = CliConfig(
        scene=dataclasses.replace(cfg.scene, **updates["scene"]),
        expert=dataclasses.replace(cfg.expert, **updates["expert"]),
        executor=dataclasses.replace(cfg.executor, **updates["executor"]),
        flow=dataclasses.replace(cfg.flow, train=train, **updates["flow"]),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None, overrides=()) -> CliConfig:
    """Read ``path`` (or ``$CHUNKSTREAM_CONFIG`` when unset) and apply ``key=value`` overrides."""
    path = path or os.environ.get(ENV_VAR)
    pairs = []
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                pairs += parse_pairs(fh.read(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return build_config(pairs)
