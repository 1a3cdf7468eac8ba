"""Run configuration: nested dataclasses, JSON files, CLI overrides.

Precedence is CLI flag > config file > built-in default. Every stochastic
stage derives its stream from the single master seed, so a config file plus
overrides fully determines all outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import AssemblyConfig


class ConfigError(ValueError):
    pass


@dataclass
class FlowNetConfig:
    width: int = 128
    layers: int = 3
    edge_embed_at_t0: bool = False


@dataclass
class FlowConfig:
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 32
    scheme: str = "rk4"
    trace_mode: str = "exact"
    hutchinson_probes: int = 8
    net: FlowNetConfig = field(default_factory=FlowNetConfig)


@dataclass
class EtmNetConfig:
    width: int = 128
    layers: int = 6
    rbf_centers: int = 64
    rbf_d_max: float = 10.0
    rbf_gamma: float | None = None


@dataclass
class SamplerSettings:
    langevin_steps: int = 100
    langevin_step_size: float = 1e-3
    mc_samples: int = 8
    use_etm: bool = True


@dataclass
class TrainFlowSettings:
    batch_size: int = 128
    lr: float = 1e-3
    max_steps: int = 1000
    checkpoint_every: int = 0
    train_trace_mode: str | None = None   # override of flow.trace_mode during training


@dataclass
class TrainEtmSettings:
    batch_size: int = 384
    lr: float = 1e-3
    max_steps: int = 1000
    noise_per_data: int = 1


@dataclass
class EvalSettings:
    delta: float = 0.5
    delta_sweep: tuple[float, ...] = ()
    mmd_bandwidth: str | float = "median_heuristic"
    atom_filter: tuple[str, ...] = ("C", "O")
    mmd_unbiased: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    dataset: str | None = None
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"
    flow: FlowConfig = field(default_factory=FlowConfig)
    etm: EtmNetConfig = field(default_factory=EtmNetConfig)
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    train_flow: TrainFlowSettings = field(default_factory=TrainFlowSettings)
    train_etm: TrainEtmSettings = field(default_factory=TrainEtmSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.default_factory, type) and dataclasses.is_dataclass(f.default_factory)
        ):
            kwargs[name] = _from_dict(f.default_factory, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "config")


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(path: str | Path, cfg: RunConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
