"""Run configuration as nested dataclasses mirroring a TOML file.

A config plus its seeds fully determines a run. Section names map to
dataclasses ([encoder], [pipeline], [adapter], [stream], [baseline],
[run]); every key has a default and unknown keys are rejected rather
than ignored.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoder import AdapterHyper, EncoderConfig
from .tasks import EOS, StreamSpec

ORDER2_8 = (5, 6, 1, 7, 0, 3, 2, 4)


@dataclass(frozen=True)
class PipelineSettings:
    expansion: int = 256
    lam: float = 1.0
    scale_mode: str = "inv_sqrt_d"
    seed: int = 202


@dataclass(frozen=True)
class BaselineSettings:
    """Knobs for the gradient-trained router and shared-adapter baselines."""

    hidden: int = 64
    epochs: int = 200
    learning_rate: float = 0.5
    seed: int = 505


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    adapter: AdapterHyper = field(default_factory=lambda: AdapterHyper(seed=303))
    stream: StreamSpec = field(default_factory=StreamSpec)
    baseline: BaselineSettings = field(default_factory=BaselineSettings)
    stream_seed: int = 404
    order: object = "1"  # "1", "2", or an explicit permutation of task ids
    chunk_size: int = 64
    generalist_route: bool = False
    generalist_samples: int = 24
    per_token_rerouting: bool = False
    max_len: int = 4

    def __post_init__(self):
        if self.encoder.vocab != self.stream.vocab:
            raise ValueError(
                f"encoder vocab {self.encoder.vocab} does not match "
                f"stream vocab {self.stream.vocab}"
            )
        if self.encoder.eos_token != EOS:
            raise ValueError("stream layout fixes the end-of-sequence token to id 0")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        if self.max_len < 2:
            raise ValueError("max_len must leave room for an answer and the stop token")
        if self.generalist_samples < 1:
            raise ValueError("generalist_samples must be positive")
        if self.stream_seed < 0:
            raise ValueError("stream seed must be nonnegative")
        self.task_order()  # validates the order setting

    def task_order(self) -> tuple:
        """Resolve the order key to an explicit task-id permutation."""
        k = self.stream.num_tasks
        if self.order in ("1", 1):
            return tuple(range(k))
        if self.order in ("2", 2):
            return ORDER2_8 if k == 8 else tuple(reversed(range(k)))
        order = tuple(int(t) for t in self.order)
        if sorted(order) != list(range(k)):
            raise ValueError(
                f"order must be '1', '2', or a permutation of 0..{k - 1}, got {self.order!r}"
            )
        return order

    def to_dict(self) -> dict:
        out = {
            "encoder": asdict(self.encoder),
            "pipeline": asdict(self.pipeline),
            "adapter": asdict(self.adapter),
            "baseline": asdict(self.baseline),
            "stream": asdict(self.stream),
            "run": {
                "stream_seed": self.stream_seed,
                "order": self.order if isinstance(self.order, str) else list(self.order),
                "chunk_size": self.chunk_size,
                "generalist_route": self.generalist_route,
                "generalist_samples": self.generalist_samples,
                "per_token_rerouting": self.per_token_rerouting,
                "max_len": self.max_len,
            },
        }
        return out


_RUN_KEYS = (
    "stream_seed",
    "order",
    "chunk_size",
    "generalist_route",
    "generalist_samples",
    "per_token_rerouting",
    "max_len",
)

_SECTIONS = {
    "encoder": EncoderConfig,
    "pipeline": PipelineSettings,
    "adapter": AdapterHyper,
    "baseline": BaselineSettings,
    "stream": StreamSpec,
}


def _build_section(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config key [{where}] {unknown[0]!r}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS) - {"run"})
    if unknown:
        raise ValueError(f"unknown config section {unknown[0]!r}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, dict(data[name]), name)
    run = dict(data.get("run", {}))
    unknown = sorted(set(run) - set(_RUN_KEYS))
    if unknown:
        raise ValueError(f"unknown config key [run] {unknown[0]!r}")
    if "order" in run and isinstance(run["order"], list):
        run["order"] = tuple(run["order"])
    kwargs.update(run)
    return RunConfig(**kwargs)


def config_from_toml(path) -> RunConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data)


def default_config() -> RunConfig:
    return RunConfig()


def with_order(config: RunConfig, order) -> RunConfig:
    return replace(config, order=order)
