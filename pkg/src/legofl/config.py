"""Experiment configuration: schema, total validation, and the shipped presets.

A config is a JSON object::

    {
      "name": "iid",
      "seed": 0,
      "model":       {ModelConfig fields},
      "corpus":      {"domains": [...], "pretrain_per_domain": 300,
                      "finetune_per_domain": 100, "heldout_per_domain": 40},
      "pretrain":    {"enabled": true, "steps": 1200, "batch_size": 32,
                      "lr": 0.003, "checkpoint": null},
      "clients":     [{PruneSpec fields}, ...],          # one entry per client
      "partition":   {"mode": "iid" | "task_dependent", "size_weights": null},
      "federation":  {"rounds": 8, "participation_rate": 0.1, "batch_size": 8,
                      "lr": 0.001, "local_epochs": 1, "aggregator": "heteagg",
                      "adapter_mask_policy": "entrywise_random"},
      "aggregation": {"include_global": true, "zero_count_behavior": "retain_global",
                      "mask_source": "explicit_mask"},
      "exclude_clients": [],
      "output_dir": "runs/iid"
    }

Every key is optional except where noted by validation; unknown keys are errors.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import MASK_POLICIES, AggPolicy
from .data import DOMAIN_NAMES
from .errors import ConfigError, MissingInputError
from .model import ModelConfig
from .pruning import PruneSpec


@dataclass(frozen=True)
class CorpusSpec:
    domains: tuple = DOMAIN_NAMES
    pretrain_per_domain: int = 300
    finetune_per_domain: int = 100
    heldout_per_domain: int = 40

    def problems(self) -> list[str]:
        out = []
        bad = [d for d in self.domains if d not in DOMAIN_NAMES]
        if bad or not self.domains:
            out.append(f"corpus.domains must be a non-empty subset of {list(DOMAIN_NAMES)}")
        for k in ("pretrain_per_domain", "finetune_per_domain", "heldout_per_domain"):
            v = getattr(self, k)
            if not isinstance(v, int) or v < 1:
                out.append(f"corpus.{k} must be a positive integer")
        return out


@dataclass(frozen=True)
class PretrainSpec:
    enabled: bool = True
    steps: int = 1200
    batch_size: int = 32
    lr: float = 3e-3
    checkpoint: str | None = None

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.enabled, bool):
            out.append("pretrain.enabled must be a boolean")
        if not isinstance(self.steps, int) or self.steps < 0:
            out.append("pretrain.steps must be a non-negative integer")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            out.append("pretrain.batch_size must be a positive integer")
        if not isinstance(self.lr, (int, float)) or self.lr <= 0:
            out.append("pretrain.lr must be positive")
        if self.checkpoint is not None and not isinstance(self.checkpoint, str):
            out.append("pretrain.checkpoint must be a path string or null")
        if not self.enabled and self.checkpoint is None:
            out.append("pretrain.checkpoint is required when pretrain.enabled is false")
        return out


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    size_weights: tuple | None = None

    def problems(self) -> list[str]:
        out = []
        if self.mode not in ("iid", "task_dependent"):
            out.append("partition.mode must be iid or task_dependent")
        if self.size_weights is not None:
            if self.mode != "task_dependent":
                out.append("partition.size_weights only applies to task_dependent mode")
            elif not all(isinstance(w, (int, float)) and 0 < w <= 1 for w in self.size_weights):
                out.append("partition.size_weights entries must be in (0, 1]")
        return out


@dataclass(frozen=True)
class FederationSpec:
    rounds: int = 8
    participation_rate: float = 0.1
    batch_size: int = 8
    lr: float = 1e-3
    local_epochs: int = 1
    aggregator: str = "heteagg"
    adapter_mask_policy: str = "entrywise_random"

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.rounds, int) or self.rounds < 1:
            out.append("federation.rounds must be a positive integer")
        r = self.participation_rate
        if not isinstance(r, (int, float)) or not 0 < r <= 1:
            out.append("federation.participation_rate must be in (0, 1]")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            out.append("federation.batch_size must be a positive integer")
        if not isinstance(self.lr, (int, float)) or self.lr <= 0:
            out.append("federation.lr must be positive")
        if not isinstance(self.local_epochs, int) or self.local_epochs < 1:
            out.append("federation.local_epochs must be a positive integer")
        if self.aggregator not in ("heteagg", "fedavg"):
            out.append("federation.aggregator must be heteagg or fedavg")
        if self.adapter_mask_policy not in MASK_POLICIES:
            out.append(f"federation.adapter_mask_policy must be one of {list(MASK_POLICIES)}")
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    clients: tuple = ()
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    federation: FederationSpec = field(default_factory=FederationSpec)
    aggregation: AggPolicy = field(default_factory=AggPolicy)
    exclude_clients: tuple = ()
    output_dir: str = "runs/experiment"

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def cross_problems(self) -> list[str]:
        out = []
        if not isinstance(self.seed, int) or self.seed < 0:
            out.append("seed must be a non-negative integer")
        if not self.clients:
            out.append("clients must list at least one prune spec")
        n = len(self.clients)
        if self.partition.mode == "task_dependent" and n != len(self.corpus.domains):
            out.append(f"task_dependent partition needs one client per domain ({len(self.corpus.domains)}), got {n}")
        if self.partition.size_weights is not None and len(self.partition.size_weights) != len(self.corpus.domains):
            out.append("partition.size_weights needs one weight per domain")
        for c in self.exclude_clients:
            if not isinstance(c, int) or not 0 <= c < n:
                out.append(f"exclude_clients entry {c!r} is not a client id")
        for i, c in enumerate(self.clients):
            if c.strategy == "layer" and any(k >= self.model.n_layers for k in c.keep_layers or ()):
                out.append(f"clients[{i}].keep_layers exceeds model.n_layers")
        if self.partition.mode == "iid" and n > self.corpus.finetune_per_domain:
            out.append("more clients than fine-tuning examples per domain")
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ------------------------------------------------------------------- parsing

_SECTIONS = {
    "model": ModelConfig,
    "corpus": CorpusSpec,
    "pretrain": PretrainSpec,
    "partition": PartitionSpec,
    "federation": FederationSpec,
    "aggregation": AggPolicy,
}
_TUPLE_FIELDS = {"domains", "size_weights", "lora_targets", "keep_layers"}


def _section(cls, data, prefix: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{prefix} must be an object")
        return None
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            problems.append(f"{prefix}.{k}: unknown key")
    kwargs = {k: (tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v) for k, v in data.items() if k in names}
    try:
        obj = cls(**kwargs)
    except ConfigError as e:
        problems.extend(p if p.startswith(prefix) else f"{prefix}: {p}" for p in e.problems)
        return None
    except TypeError as e:
        problems.append(f"{prefix}: {e}")
        return None
    if hasattr(obj, "problems") and cls not in (ModelConfig, AggPolicy, PruneSpec):
        problems.extend(obj.problems())
    return obj


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate; every problem found is reported together."""
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for k in data:
        if k not in top:
            problems.append(f"{k}: unknown key")
    kwargs = {}
    for k in ("name", "seed", "output_dir"):
        if k in data:
            kwargs[k] = data[k]
    if not isinstance(kwargs.get("name", ""), str):
        problems.append("name must be a string")
    if not isinstance(kwargs.get("output_dir", ""), str):
        problems.append("output_dir must be a string")
    for k, cls in _SECTIONS.items():
        if k in data:
            kwargs[k] = _section(cls, data[k], k, problems)
    clients = data.get("clients", [])
    if not isinstance(clients, list):
        problems.append("clients must be a list")
        clients = []
    kwargs["clients"] = tuple(_section(PruneSpec, c, f"clients[{i}]", problems) for i, c in enumerate(clients))
    excl = data.get("exclude_clients", [])
    kwargs["exclude_clients"] = tuple(excl) if isinstance(excl, list) else excl
    if not isinstance(excl, list):
        problems.append("exclude_clients must be a list")
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**kwargs)
    problems.extend(cfg.cross_problems())
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)


# ------------------------------------------------------------------- presets


def _act(s: float) -> dict:
    return {"strategy": "activation_norm", "sparsity_level": s}


# presets run a wider model than the bare defaults: at width 32 a 75%-sparse
# client's adapter gradient is nearly orthogonal to the dense one
_TOY_MODEL = {"d_model": 64, "d_ff": 256}
_TOY_LR = 0.003


def _toy(d: dict) -> dict:
    d = copy.deepcopy(d)
    d["model"] = {**_TOY_MODEL, **d.get("model", {})}
    d["federation"] = {"lr": _TOY_LR, **d.get("federation", {})}
    return d


_IID = {
    "name": "iid",
    "clients": [_act(0.75)] * 4,
    "partition": {"mode": "iid"},
    "federation": {"rounds": 8, "participation_rate": 0.1},
}
_TASK = {
    "name": "task",
    "clients": [_act(0.75)] * 8,
    "partition": {"mode": "task_dependent"},
    "federation": {"rounds": 16, "participation_rate": 0.1},
}
_HETERO = {
    "name": "hetero",
    "clients": [_act(s) for s in (0.0, 0.25, 0.5, 0.75)],
    "partition": {"mode": "iid"},
    "federation": {"rounds": 1, "participation_rate": 1.0, "local_epochs": 3},
}
_FEDIT_IID = {
    "name": "fedit_iid",
    "clients": [_act(0.0)] * 4,
    "partition": {"mode": "iid"},
    "federation": {"rounds": 8, "participation_rate": 0.1, "aggregator": "fedavg", "adapter_mask_policy": "none"},
}
_FEDIT_TASK = {
    "name": "fedit_task",
    "clients": [_act(0.0)] * 8,
    "partition": {"mode": "task_dependent"},
    "federation": {"rounds": 16, "participation_rate": 0.1, "aggregator": "fedavg", "adapter_mask_policy": "none"},
}
_DEEP = {"model": {"n_layers": 4}}
_LAYER_ACT = {
    **_DEEP,
    "name": "layer_compare_activation",
    "clients": [_act(s) for s in (0.0, 0.25, 0.5)],
    "partition": {"mode": "iid"},
    "federation": {"rounds": 3, "participation_rate": 1.0},
}
_LAYER_LAYER = {
    **_LAYER_ACT,
    "name": "layer_compare_layer",
    "clients": [_act(0.0), {"strategy": "layer", "keep_layers": [0, 1, 2], "sparsity_level": None},
                {"strategy": "layer", "keep_layers": [0, 1], "sparsity_level": None}],
}

SINGLE_PRESETS = {
    "iid": _IID,
    "task": _TASK,
    "hetero": _HETERO,
    "fedit_iid": _FEDIT_IID,
    "fedit_task": _FEDIT_TASK,
}

# compound presets: ordered (label, config dict) pairs run against one shared base model
SUITE_PRESETS = {
    "ablation": [("full", _HETERO)] + [(f"exclude_{i}", {**_HETERO, "exclude_clients": [i]}) for i in range(4)],
    "pruning_compare": [
        ("activation_norm", {**_HETERO, "name": "pruning_activation_norm"}),
        ("magnitude", {**_HETERO, "name": "pruning_magnitude",
                       "clients": [{"strategy": "magnitude", "sparsity_level": s} for s in (0.0, 0.25, 0.5, 0.75)]}),
    ],
    "layer_compare": [("activation", _LAYER_ACT), ("layer", _LAYER_LAYER)],
}
PRESETS = tuple(SINGLE_PRESETS) + tuple(SUITE_PRESETS)


def preset_dicts(name: str) -> list[tuple[str, dict]]:
    """``[(label, config dict)]``; single presets yield one pair labelled by name."""
    if name in SINGLE_PRESETS:
        return [(name, _toy(SINGLE_PRESETS[name]))]
    if name in SUITE_PRESETS:
        return [(label, _toy(d)) for label, d in SUITE_PRESETS[name]]
    raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}")


def preset(name: str, seed: int | None = None, **section_overrides) -> list[tuple[str, ExperimentConfig]]:
    """Validated configs for a preset; ``section_overrides`` merge into sections (e.g. ``pretrain={...}``)."""
    out = []
    for label, d in preset_dicts(name):
        if seed is not None:
            d["seed"] = seed
        for k, v in section_overrides.items():
            if isinstance(v, dict):
                d[k] = {**d.get(k, {}), **v}
            else:
                d[k] = v
        d.setdefault("output_dir", f"runs/{name}")
        out.append((label, config_from_dict(d)))
    return out
