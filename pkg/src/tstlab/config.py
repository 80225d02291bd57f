"""Run configuration: dataclasses, YAML round-trip and dotted overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .losses import MCE_VARIANTS, WEIGHTING_KINDS, BagWeighting
from .model import ModelConfig

PHASE_ABLATIONS = ("full", "input_only", "output_only")
PRECISIONS = ("single", "double")


@dataclass
class SuperpositionSpec:
    s: int = 1
    r: float = 0.0
    weighting: BagWeighting = field(default_factory=BagWeighting)
    mce_variant: str = "uniform_simplified"
    ablation: str = "full"

    def boundary(self, total_steps: int) -> int:
        """First recovery step; 0 when the run is a plain baseline."""
        if self.s == 1:
            return 0
        return int(round(self.r * total_steps))

    def validate(self) -> list[str]:
        problems = []
        if self.s < 1:
            problems.append("spec.s must be >= 1")
        if not 0.0 <= self.r <= 1.0:
            problems.append("spec.r must lie in [0, 1]")
        if self.mce_variant not in MCE_VARIANTS:
            problems.append(f"spec.mce_variant must be one of {MCE_VARIANTS}")
        if self.ablation not in PHASE_ABLATIONS:
            problems.append(f"spec.ablation must be one of {PHASE_ABLATIONS}")
        if self.mce_variant == "uniform_corrected" and self.weighting.kind != "uniform":
            problems.append("spec.mce_variant uniform_corrected requires uniform weighting")
        return problems


@dataclass
class TrainPlan:
    total_steps: int = 3000
    batch_rows: int = 16
    base_length: int = 64
    peak_lr: float = 2e-3
    warmup_steps: Optional[int] = None
    decay_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: Optional[float] = 1.0
    seed: int = 0
    precision: str = "single"
    reset_moments: bool = False
    eval_windows: int = 64
    log_every: int = 1

    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return min(2000, int(0.1 * self.total_steps))

    def decay_steps(self) -> int:
        return int(round(self.decay_fraction * self.total_steps))

    def validate(self) -> list[str]:
        problems = []
        if self.total_steps < 1:
            problems.append("plan.total_steps must be >= 1")
        if self.batch_rows < 1 or self.base_length < 1:
            problems.append("plan.batch_rows and plan.base_length must be >= 1")
        if self.peak_lr < 0:
            problems.append("plan.peak_lr must be >= 0")
        if not 0.0 <= self.decay_fraction <= 1.0:
            problems.append("plan.decay_fraction must lie in [0, 1]")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            problems.append("plan.warmup_steps must be >= 0")
        if self.resolved_warmup() + self.decay_steps() > self.total_steps:
            problems.append("plan warmup + decay spans exceed total_steps")
        for b in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, b) < 1.0:
                problems.append(f"plan.{b} must lie in [0, 1)")
        if self.precision not in PRECISIONS:
            problems.append(f"plan.precision must be one of {PRECISIONS}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append("plan.grad_clip must be positive or null")
        return problems


@dataclass
class DataConfig:
    source: str = "markov"
    order: int = 3
    vocab: int = 64
    length: int = 2_000_000
    seed: int = 0
    concentration: float = 0.1
    structure: str = "lagged"
    path: Optional[str] = None
    heldout_fraction: float = 0.02

    def validate(self) -> list[str]:
        problems = []
        if self.source not in ("markov", "tokens", "text"):
            problems.append("data.source must be markov, tokens or text")
        if self.source == "markov":
            if self.order < 1:
                problems.append("data.order must be >= 1")
            if self.vocab < 2:
                problems.append("data.vocab must be >= 2")
            if self.structure not in ("lagged", "dirichlet"):
                problems.append("data.structure must be 'lagged' or 'dirichlet'")
        elif not self.path:
            problems.append(f"data.path is required for source {self.source!r}")
        if not 0.0 < self.heldout_fraction < 1.0:
            problems.append("data.heldout_fraction must lie in (0, 1)")
        return problems

    def as_loader_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    spec: SuperpositionSpec = field(default_factory=SuperpositionSpec)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        problems = self.model.validate() + self.plan.validate() + self.spec.validate() + self.data.validate()
        if self.data.source == "text" and self.model.vocab_size != 256:
            problems.append("model.vocab_size must be 256 for byte-level text corpora")
        if self.data.source == "markov" and self.model.vocab_size != self.data.vocab:
            problems.append("model.vocab_size must equal data.vocab")
        if self.plan.base_length > self.model.max_len:
            problems.append("plan.base_length exceeds model.max_len")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"]["weighting"] = self.spec.weighting.as_dict()
        return d

    def replace(self, **sections) -> "RunConfig":
        new = copy.deepcopy(self)
        for k, v in sections.items():
            setattr(new, k, v)
        return new


_SECTIONS = {"model": ModelConfig, "plan": TrainPlan, "spec": SuperpositionSpec, "data": DataConfig}


def _build(cls, raw: dict, section: str, problems: list):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in (raw or {}).items():
        if k not in known:
            problems.append(f"unknown key {section}.{k}")
            continue
        kwargs[k] = v
    if cls is SuperpositionSpec and isinstance(kwargs.get("weighting"), (dict, str)):
        w = kwargs["weighting"]
        w = {"kind": w} if isinstance(w, str) else w
        if w.get("kind") not in WEIGHTING_KINDS:
            problems.append(f"spec.weighting.kind must be one of {WEIGHTING_KINDS}")
            kwargs.pop("weighting")
        else:
            try:
                kwargs["weighting"] = BagWeighting(w["kind"], tuple(w["params"]) if w.get("params") else None)
            except Exception as exc:  # contract errors from BagWeighting
                problems.append(f"spec.weighting: {exc}")
                kwargs.pop("weighting")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{section}: {exc}")
        return cls()


def from_dict(raw: dict) -> RunConfig:
    problems: list[str] = []
    raw = raw or {}
    for k in raw:
        if k not in _SECTIONS:
            problems.append(f"unknown section {k!r}")
    parts = {name: _build(cls, raw.get(name, {}), name, problems) for name, cls in _SECTIONS.items()}
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**parts)
    cfg.validate()
    return cfg


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings in order; later ones win."""
    raw = copy.deepcopy(raw or {})
    problems = []
    for item in overrides or ():
        if "=" not in item:
            problems.append(f"override {item!r} is not key=value")
            continue
        key, _, text = item.partition("=")
        parts = key.strip().split(".")
        if len(parts) < 2:
            problems.append(f"override key {key!r} needs a section prefix")
            continue
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"override {key!r} descends into a scalar")
                break
        else:
            node[parts[-1]] = yaml.safe_load(text) if text.strip() else None
    if problems:
        raise ConfigError(problems)
    return raw


def load_raw(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    return raw or {}


def load_config(path=None, overrides=()) -> RunConfig:
    raw = load_raw(path) if path else {}
    return from_dict(apply_overrides(raw, overrides))


SNAPSHOT_HEADER = "# tstlab resolved run configuration; replay with: tstlab train --config <this file>\n"


def dump_config(cfg: RunConfig) -> str:
    return SNAPSHOT_HEADER + yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
