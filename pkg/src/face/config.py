"""Run configuration, serialisable to/from JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 62
    bands: int = 5
    classes: int = 3
    reduction: int = 2
    kernel: int = 5
    conv_filters: int = 32
    heads: int = 2
    bottleneck: int = 64
    cvf: bool = True
    fsa: bool = True
    gcn_bn_axes: str = "feature"
    sigma1: str = "sigmoid"
    sigma2: str = "relu"

    @property
    def graph_dim(self) -> int:
        return self.channels * self.bands

    @property
    def fused_dim(self) -> int:
        return 2 * self.graph_dim if self.cvf else self.graph_dim


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.01
    beta: float = 0.001
    inner_steps: int = 10
    subjects_per_episode: int = 2
    episodes: int = 50
    shots: int = 5
    query: int = 20
    label_smoothing: float = 0.1
    second_order: bool = True
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.001
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("need alpha >= 0 and beta > 0")
        if self.inner_steps < 0 or self.subjects_per_episode < 1:
            raise ValueError("need inner_steps >= 0 and subjects_per_episode >= 1")


@dataclass(frozen=True)
class EvalConfig:
    repeats: int = 20
    shots: int = 5
    query_bn: str = "batch"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.query_bn not in ("batch", "running"):
            raise ValueError(f"query_bn must be 'batch' or 'running', got {self.query_bn!r}")


FULL_RUN_REPEATS = 200


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        parts = {}
        for f, kind in (("model", ModelConfig), ("meta", MetaConfig), ("eval", EvalConfig)):
            sub = dict(doc.get(f, {}))
            known = {x.name for x in fields(kind)}
            unknown = set(sub) - known
            if unknown:
                raise ValueError(f"unknown {f} config keys: {sorted(unknown)}")
            parts[f] = kind(**sub)
        extra = set(doc) - {"model", "meta", "eval"}
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def with_(self, model=None, meta=None, eval=None) -> "RunConfig":
        return RunConfig(
            replace(self.model, **(model or {})),
            replace(self.meta, **(meta or {})),
            replace(self.eval, **(eval or {})),
        )
