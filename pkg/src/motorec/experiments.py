"""Reproducible experiment protocols shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data import SynthConfig, synthesize
from .pipeline import ablation_config, evaluate, train
from .tokenizer import RqVae, RqVaeConfig, encode, residual_quantize, train_tokenizer, usage_entropy

# Shared by every variant in the cold-start benchmark; sized so that 5 seeds x 3
# variants fit a laptop budget of 15 minutes.
BENCHMARK_TRAIN = TrainConfig(
    n_stages=2,
    codebook_size=64,
    batch_size=4096,
    lr=5e-3,
    lambda_reg=1e-5,
    max_epochs=12,
)


@dataclass
class SparsityTrial:
    seed: int
    entropy_plain: float
    entropy_sparse: float

    @property
    def lowered(self) -> bool:
        return self.entropy_sparse < self.entropy_plain


def tokenizer_usage_entropy(features: np.ndarray, gamma: float, seed: int, cfg: TrainConfig, epochs: int) -> float:
    """Train one tokenizer alone and return the mean per-stage entropy of its hard codes."""
    tok_cfg = RqVaeConfig(
        input_dim=features.shape[1],
        code_dim=cfg.code_dim,
        hidden_dim=cfg.hidden_dim,
        n_stages=cfg.n_stages,
        codebook_size=cfg.codebook_size,
        rho=cfg.rho,
        beta=cfg.beta,
        gamma=gamma,
        codebook_weight=cfg.codebook_weight,
        temperature=cfg.temperature,
    )
    tok = RqVae("visual", tok_cfg, np.random.default_rng(seed))
    # dead-codeword reseeding would mask the effect under test, so it stays off
    train_tokenizer(tok, features, epochs=epochs, batch_size=250, lr=3e-3, seed=seed, reseed=False)
    codes = residual_quantize(tok, encode(tok, features), soft=False).codes
    return usage_entropy(codes, tok_cfg.codebook_size)


def sparsity_experiment(
    seeds=(0, 1, 2, 3, 4), gamma: float = 0.2, n_items: int = 1000, epochs: int = 10, cfg: TrainConfig | None = None
) -> list[SparsityTrial]:
    """Usage entropy with gamma vs gamma = 0 on the synthetic visual corpus, per seed."""
    cfg = cfg if cfg is not None else TrainConfig()
    out = []
    for seed in seeds:
        _, visual, _ = synthesize(SynthConfig(n_users=600, n_items=n_items), seed)
        plain = tokenizer_usage_entropy(visual.matrix, 0.0, seed, cfg, epochs)
        sparse = tokenizer_usage_entropy(visual.matrix, gamma, seed, cfg, epochs)
        out.append(SparsityTrial(seed, plain, sparse))
    return out


@dataclass
class BenchmarkRow:
    seed: int
    variant: str
    overall: dict[str, float]
    cold: dict[str, float]
    best_epoch: int
    seconds: float


@dataclass
class BenchmarkResult:
    rows: list[BenchmarkRow] = field(default_factory=list)

    def metric(self, variant: str, metric: str, stratum: str = "cold") -> dict[int, float]:
        return {r.seed: getattr(r, stratum)[metric] for r in self.rows if r.variant == variant}

    def wins(self, variant: str, rival: str, metric: str, stratum: str = "cold") -> int:
        """Seeds where ``variant`` beats ``rival`` by a positive margin."""
        a, b = self.metric(variant, metric, stratum), self.metric(rival, metric, stratum)
        return sum(a[s] > b[s] for s in a if s in b)

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.rows)


def cold_start_benchmark(
    seeds=(0, 1, 2, 3, 4),
    variants=("full", "no_rqvae", "no_ara"),
    synth: SynthConfig | None = None,
    cfg: TrainConfig | None = None,
    log=None,
) -> BenchmarkResult:
    """Train each variant on the benchmark data for every seed; report test metrics."""
    synth = synth if synth is not None else SynthConfig.benchmark()
    cfg = cfg if cfg is not None else BENCHMARK_TRAIN
    result = BenchmarkResult()
    for seed in seeds:
        ds, visual, textual = synthesize(synth, seed)
        data = (ds, {"visual": visual, "textual": textual})
        for variant in variants:
            t0 = time.perf_counter()
            run = train(ablation_config(cfg.replace(seed=seed), variant), data)
            overall, cold = evaluate(run.model)
            row = BenchmarkRow(seed, variant, overall.metrics, cold.metrics, run.best_epoch, time.perf_counter() - t0)
            result.rows.append(row)
            if log is not None:
                log(row)
    return result
