"""Experiment configuration: one YAML file, every key optional.

Top-level keys and their defaults are the fields of :class:`ExperimentConfig`;
the nested sections ``victim``, ``policy``, ``agent``, ``topk`` and ``walk``
take the fields of the corresponding library dataclasses.  ``dataset.synth``
takes :class:`SynthSpec` fields and is ignored when ``dataset.path`` is set.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from ..errors import ConfigError
from ..n2v import WalkConfig
from ..policy import PolicyConfig
from ..reinforce import AgentConfig
from ..topk import TopKConfig
from ..victim import VictimHyperParams
from .datasets import AuxSpec, SynthSpec

METHODS = ("random-add", "random-delete", "betweenness-add", "betweenness-delete", "rl", "krl")
BASELINES = METHODS[:4]
DEFAULT_K_RATIOS = (0.0002, 0.001, 0.005, 0.01)


def benchmark_synth() -> SynthSpec:
    """ACM-shaped default: many lightly linked authors, fields that carry no class signal."""
    return SynthSpec(n_classes=3, n_primary=600, primary_type="Paper",
                     aux={"Author": AuxSpec(3000, links=5.0), "Field": AuxSpec(60, links=1.0, homophily=0.34)},
                     homophily=0.9, feature_dim=16, feature_signal=0.6, feature_noise=1.0)


@dataclass
class DatasetConfig:
    path: str | None = None
    synth: SynthSpec = field(default_factory=benchmark_synth)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 0
    budgets: list = field(default_factory=lambda: [1, 3, 5])
    methods: list = field(default_factory=lambda: list(METHODS))
    victim_sample: int = 200          # attacked test victims, capped at the test split size
    k_ratios: list = field(default_factory=lambda: list(DEFAULT_K_RATIOS))
    betweenness_batch: int = 256
    victim: VictimHyperParams = field(default_factory=VictimHyperParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    agent: AgentConfig = field(default_factory=lambda: AgentConfig(epochs=3, optimizer="adam"))
    topk: TopKConfig = field(default_factory=TopKConfig)
    walk: WalkConfig = field(default_factory=lambda: WalkConfig(dim=32, walks_per_node=5, window=3))

    def __post_init__(self):
        if not self.budgets or any(int(b) < 1 for b in self.budgets):
            raise ConfigError("budgets must be a nonempty list of positive integers")
        self.budgets = sorted({int(b) for b in self.budgets})
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if self.victim_sample < 1:
            raise ConfigError("victim_sample must be positive")
        if not self.k_ratios:
            raise ConfigError("k_ratios must be nonempty")
        for r in self.k_ratios:
            TopKConfig(k_ratio=float(r), k_min=self.topk.k_min)

    @property
    def max_budget(self) -> int:
        return max(self.budgets)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy whose stage seeds all follow ``seed``."""
        return replace(self, seed=int(seed), policy=replace(self.policy, seed=int(seed)),
                       agent=replace(self.agent, seed=int(seed)), walk=replace(self.walk, seed=int(seed)))

    def to_dict(self) -> dict:
        return asdict(self)


def _section(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    extra = sorted(set(data) - names)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _synth(data) -> SynthSpec:
    base = asdict(benchmark_synth())
    if data:
        if not isinstance(data, dict):
            raise ConfigError("dataset.synth: expected a mapping")
        extra = sorted(set(data) - set(base))
        if extra:
            raise ConfigError(f"dataset.synth: unknown keys {extra}")
        base.update(data)
    aux = {}
    for name, spec in base["aux"].items():
        aux[name] = _section(AuxSpec, spec, f"dataset.synth.aux.{name}") if isinstance(spec, dict) \
            else AuxSpec(int(spec))
    base["aux"] = aux
    return SynthSpec(**base)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    names = {f.name for f in fields(ExperimentConfig)}
    extra = sorted(set(data) - names)
    if extra:
        raise ConfigError(f"unknown config keys {extra}")
    ds = data.pop("dataset", None) or {}
    if not isinstance(ds, dict) or set(ds) - {"path", "synth"}:
        raise ConfigError("dataset: expected a mapping with 'path' and/or 'synth'")
    kwargs = {"dataset": DatasetConfig(ds.get("path"), _synth(ds.get("synth")))}
    sections = {"victim": VictimHyperParams, "policy": PolicyConfig, "agent": AgentConfig,
                "topk": TopKConfig, "walk": WalkConfig}
    defaults = ExperimentConfig()
    for key, cls in sections.items():
        if key in data:
            merged = asdict(getattr(defaults, key))
            sec = data.pop(key) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"{key}: expected a mapping")
            extra = sorted(set(sec) - set(merged))
            if extra:
                raise ConfigError(f"{key}: unknown keys {extra}")
            merged.update(sec)
            kwargs[key] = _section(cls, merged, key)
    kwargs.update(data)
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.with_seed(cfg.seed)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
