"""JSON run configuration for the mining commands.

Every section maps onto one of the package's config dataclasses. Unknown
keys are rejected with the path to the offending key before any work starts.

Example::

    {
      "synth": {"n_assets": 50, "n_bars": 2000, "seed": 42},
      "mining": {"target_size": 15, "max_batches": 60, "seed": 7},
      "thresholds": {"tau_ic": 0.04, "theta": 0.5},
      "paths": {"out_dir": "run/"}
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .errors import ConfigError
from .generator import ExternalEndpoint, GenConfig
from .library import AdmissionThresholds
from .memory import MemoryPolicy
from .miner import MiningConfig
from .panel import SynthConfig

_MINING_KEYS = (
    "target_size",
    "max_batches",
    "batch_size",
    "fast_assets",
    "full_assets",
    "generator",
    "workers",
    "seed",
    "backend",
)


@dataclass(frozen=True)
class Paths:
    panel: Optional[str] = None
    memory: Optional[str] = "seed"
    out_dir: str = "."
    library: str = "library.tsv"
    memory_out: str = "memory.json"
    run_log: str = "run_log.jsonl"


@dataclass(frozen=True)
class ReportOptions:
    quantiles: int = 5
    costs_bps: tuple[float, ...] = (1.0, 4.0, 7.0, 10.0, 11.0)


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    mining: dict = field(default_factory=dict)
    thresholds: AdmissionThresholds = field(default_factory=AdmissionThresholds)
    memory_policy: MemoryPolicy = field(default_factory=MemoryPolicy)
    external: Optional[ExternalEndpoint] = None
    paths: Paths = field(default_factory=Paths)
    report: ReportOptions = field(default_factory=ReportOptions)

    def mining_config(self, **overrides) -> MiningConfig:
        kw = dict(self.mining)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return MiningConfig(
                thresholds=self.thresholds, gen=self.gen, policy=self.memory_policy, external=self.external, **kw
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"mining: {exc}") from None

    def out_path(self, name: str) -> Path:
        return Path(self.paths.out_dir) / name


def _build(cls, doc: Any, path: str, allowed: tuple[str, ...] | None = None):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    names = allowed if allowed is not None else tuple(f.name for f in dataclasses.fields(cls))
    for k in doc:
        if k not in names:
            raise ConfigError(f"{path}.{k}: unknown key (allowed: {', '.join(names)})")
    if cls is dict:
        return dict(doc)
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


_SECTIONS = {
    "synth": SynthConfig,
    "gen": GenConfig,
    "thresholds": AdmissionThresholds,
    "memory_policy": MemoryPolicy,
    "paths": Paths,
    "report": ReportOptions,
}


def parse_run_config(doc: Any) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("$: expected an object")
    allowed = tuple(f.name for f in dataclasses.fields(RunConfig))
    kw = {}
    for key, value in doc.items():
        if key not in allowed:
            raise ConfigError(f"$.{key}: unknown key (allowed: {', '.join(allowed)})")
        if key == "mining":
            kw[key] = _build(dict, value, "$.mining", _MINING_KEYS)
        elif key == "external":
            kw[key] = None if value is None else _build(ExternalEndpoint, value, "$.external")
        else:
            kw[key] = _build(_SECTIONS[key], value, f"$.{key}")
    cfg = RunConfig(**kw)
    cfg.mining_config()  # validate the combination eagerly
    return cfg


def load_run_config(path: Union[str, Path]) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_run_config(doc)
