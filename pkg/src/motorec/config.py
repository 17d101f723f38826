"""Training configuration and its flat ``key = value`` text format."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

log = logging.getLogger(__name__)

GRID = {
    "gamma": (0.01, 0.05, 0.1, 0.2),
    "lambda_rq": (0.1, 0.5, 1.0, 2.0),
    "lambda_cl": (0.01, 0.05, 0.1),
    "n_stages": (4, 6, 8),
    "codebook_size": (256, 512, 1024),
    "lr": (1e-3, 5e-4, 1e-4),
}

ABLATIONS = ("no_rqvae", "no_ara", "no_sparsity", "no_cl", "no_hf", "hge")


@dataclass
class TrainConfig:
    dim: int = 64
    layers: int = 2
    threshold: int = 10
    # tokenizer
    n_stages: int = 4
    codebook_size: int = 256
    code_dim: int = 32
    hidden_dim: int = 64
    rho: float = 0.05
    beta: float = 0.25
    gamma: float = 0.05
    codebook_weight: float = 1.0
    temperature: float = 1.0
    reseed_dead: bool = True
    pretrain_epochs: int = 0
    # fusion and contrastive views
    alpha: float = 0.5
    self_loops: bool = True
    tau_cl: float = 0.2
    cl_noise: float = 0.1
    cl_views: str = "noise"
    edge_dropout: float = 0.1
    hge_k: int = 10
    # objective weights
    lambda_cl: float = 0.05
    lambda_rq: float = 0.5
    lambda_reg: float = 1e-4
    # optimisation
    lr: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 100
    patience: int = 20
    eval_every: int = 1
    seed: int = 0
    strict_grid: bool = False
    # ablation switches
    no_rqvae: bool = False
    no_ara: bool = False
    no_sparsity: bool = False
    no_cl: bool = False
    no_hf: bool = False
    hge: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.no_sparsity else self.gamma

    @property
    def effective_lambda_cl(self) -> float:
        return 0.0 if self.no_cl else self.lambda_cl

    def validate(self) -> None:
        if self.dim < 1 or self.layers < 0 or self.threshold < 1:
            raise ConfigError("dim >= 1, layers >= 0 and threshold >= 1 are required")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (0, 1)")
        if min(self.beta, self.gamma, self.lambda_cl, self.lambda_rq, self.lambda_reg) < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.codebook_size < 2 or self.n_stages < 1:
            raise ConfigError("codebook_size >= 2 and n_stages >= 1 are required")
        if self.tau_cl <= 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("tau_cl, lr and batch_size must be positive")
        if self.cl_views not in ("noise", "edge_dropout"):
            raise ConfigError(f"cl_views must be 'noise' or 'edge_dropout', got {self.cl_views!r}")
        if self.patience < 1 or self.eval_every < 1 or self.max_epochs < 0:
            raise ConfigError("patience and eval_every must be >= 1, max_epochs >= 0")
        if self.strict_grid:
            for key, allowed in GRID.items():
                if getattr(self, key) not in allowed:
                    raise ConfigError(f"strict grid: {key}={getattr(self, key)} not in {allowed}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> TrainConfig:
        return cls(**{**parse_config_text(text), **overrides})

    @classmethod
    def from_file(cls, path, **overrides) -> TrainConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out
