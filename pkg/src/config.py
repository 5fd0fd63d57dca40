"""
Configuration for QGCN runs
Model / training / run settings, environment overrides and seed derivation
"""

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

ENV_PREFIX = 'QGCN_'

VARIANTS = ('qgcn', 'qgcn_q', 'qgcn_w', 'lightgcn')
READOUTS = ('max', 'sum', 'concat', 'mean')
REG_SCOPES = ('ego', 'all')
EXPERIMENTS = ('train', 'eval', 'robustness', 'ablation', 'sweep')


class ConfigError(ValueError):
    """Raised for an invalid configuration"""


def env_default(name: str, default, cast=str):
    """Value of QGCN_<NAME> when set, else default"""
    value = os.getenv(ENV_PREFIX + name.upper().replace('-', '_'))
    if value is None:
        return default
    if cast is bool:
        return value.strip().lower() in ('1', 'true', 'yes', 'on')
    return cast(value)


def derive_seed(master: int, tag: str) -> int:
    """Stream seed for one purpose, derived from the master seed"""
    digest = hashlib.sha256(f"{master}:{tag}".encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'big') & 0x7FFFFFFF


def normalize_variant(name: str) -> str:
    """Accept CLI spellings such as qgcn-q"""
    return name.strip().lower().replace('-', '_')


@dataclass
class ModelConfig:
    """Architecture of one QGCN-family or LightGCN model"""
    variant: str = 'qgcn'
    layers: int = 1
    embed_dim: int = 64
    dropout: float = 0.1
    readout: str = 'mean'
    include_layer0: bool = False
    layer_weights: Optional[Tuple[float, ...]] = None
    # diagnostics switch: skip the L2 normalization of propagated layers
    l2_normalize: bool = True

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.layer_weights is not None:
            self.layer_weights = tuple(float(w) for w in self.layer_weights)

    @property
    def quaternion_dim(self) -> int:
        """d, with the real embedding size D = 4d"""
        return self.embed_dim // 4

    @property
    def is_quaternion(self) -> bool:
        return self.variant in ('qgcn', 'qgcn_w')

    def lightgcn_weights(self) -> Tuple[float, ...]:
        if self.layer_weights is not None:
            return self.layer_weights
        return tuple([1.0 / (self.layers + 1)] * (self.layers + 1))

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.layers < 1:
            raise ConfigError(f"layers must be at least 1, got {self.layers}")
        if self.embed_dim < 4 or self.embed_dim % 4 != 0:
            raise ConfigError(f"embed_dim must be a positive multiple of 4, got {self.embed_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.readout not in READOUTS:
            raise ConfigError(f"Unknown readout {self.readout!r}; choose from {READOUTS}")
        if self.layer_weights is not None:
            if len(self.layer_weights) != self.layers + 1:
                raise ConfigError(
                    f"layer_weights needs {self.layers + 1} entries, got {len(self.layer_weights)}"
                )
            if any(w < 0 for w in self.layer_weights):
                raise ConfigError("layer_weights must be non-negative")
        return self

    def to_dict(self):
        data = asdict(self)
        if self.layer_weights is not None:
            data['layer_weights'] = list(self.layer_weights)
        return data

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in names})


@dataclass
class TrainConfig:
    """BPR optimisation settings"""
    lr: float = 1e-4
    batch_size: int = 2048
    reg: float = 1e-4
    reg_scope: str = 'ego'
    epochs: int = 400
    seed: int = 2023
    patience: int = 0

    def validate(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.reg < 0:
            raise ConfigError(f"reg must be non-negative, got {self.reg}")
        if self.reg_scope not in REG_SCOPES:
            raise ConfigError(f"Unknown reg_scope {self.reg_scope!r}; choose from {REG_SCOPES}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be non-negative, got {self.patience}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in names})


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment run"""
    dataset: str = 'data'
    out: str = 'runs/latest'
    experiment: str = 'train'
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    topk: List[int] = field(default_factory=lambda: [20])
    eval_interval: int = 10

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"Unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.topk or any(k < 1 for k in self.topk):
            raise ConfigError(f"topk values must be positive, got {self.topk}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be positive, got {self.eval_interval}")
        self.model.validate()
        self.train.validate()
        return self

    @property
    def primary_k(self) -> int:
        return self.topk[0]

    def seeds(self):
        """The derived stream seeds of this run"""
        master = self.train.seed
        return {tag: derive_seed(master, tag) for tag in ('init', 'sampling', 'dropout')}

    def to_dict(self):
        return {
            'dataset': self.dataset,
            'out': self.out,
            'experiment': self.experiment,
            'model': self.model.to_dict(),
            'train': self.train.to_dict(),
            'topk': list(self.topk),
            'eval_interval': self.eval_interval,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            dataset=data.get('dataset', 'data'),
            out=data.get('out', 'runs/latest'),
            experiment=data.get('experiment', 'train'),
            model=ModelConfig.from_dict(data.get('model', {})),
            train=TrainConfig.from_dict(data.get('train', {})),
            topk=list(data.get('topk', [20])),
            eval_interval=data.get('eval_interval', 10),
        )
