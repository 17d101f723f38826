"""Training orchestration: epoch loop, validation, early stopping, checkpoints and ablations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ABLATIONS, TrainConfig
from .data import InteractionDataset, ItemFeatureTable, load_dataset
from .errors import ConfigError, TrainingError
from .evaluation import MetricReport, rank_topn, recall_at_n, stratified_eval
from .model import MoToRec
from .objective import LossBreakdown, sample_triplets
from .tokenizer import train_tokenizer

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "bpr", "cl", "rq_v", "rq_t", "l2", "total", "valid_R@20")
BEST_FILE = "model.mtc"
LAST_GOOD_FILE = "last_good.mtc"
LOG_FILE = "train_log.tsv"


@dataclass
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    valid_recall: float

    def as_line(self) -> str:
        values = [*self.losses.as_row(), self.valid_recall]
        return f"{self.epoch}\t" + "\t".join(f"{v:.10g}" for v in values) + "\n"


@dataclass
class TrainResult:
    model: MoToRec
    checkpoint: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_valid(self) -> float:
        return self.checkpoint.best_valid


def validation_recall(model: MoToRec, n: int = 20) -> float:
    ds = model.ds
    if len(ds.valid) == 0:
        return float("nan")
    users, items = model.final_embeddings()
    ranking = rank_topn(users, items, ds, n, np.unique(ds.valid[:, 0]))
    return recall_at_n(ranking, ds.valid, n)


def make_checkpoint(model: MoToRec, opt: nx.AdamState, best_valid: float, epoch: int) -> Checkpoint:
    tensors = {f"param/{k}": v for k, v in model.state_arrays().items()}
    for k in model.params:
        if k in opt.m:
            tensors[f"opt/m/{k}"] = opt.m[k].copy()
            tensors[f"opt/v/{k}"] = opt.v[k].copy()
    tensors["meta/step"] = np.array([[float(opt.step)]])
    tensors["meta/best_valid"] = np.array([[best_valid]])
    tensors["meta/epoch"] = np.array([[float(epoch)]])
    return Checkpoint(model.cfg, tensors)


def model_from_checkpoint(ckpt: Checkpoint, ds: InteractionDataset, features: dict[str, ItemFeatureTable]) -> MoToRec:
    model = MoToRec(ckpt.config, ds, features, init=False)
    model.load_arrays(ckpt.params)
    return model


def _mean_breakdown(rows: list[LossBreakdown]) -> LossBreakdown:
    cols = np.array([r.as_row() for r in rows], dtype=np.float64)
    return LossBreakdown(*(float(x) for x in cols.mean(axis=0)))


def _write_log(path: Path, history: list[EpochRecord]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(LOG_COLUMNS) + "\n")
        for rec in history:
            fh.write(rec.as_line())


def pretrain_tokenizers(model: MoToRec, epochs: int) -> None:
    for k, (m, tok) in enumerate(sorted(model.tokenizers.items())):
        train_tokenizer(
            tok,
            model.features[m],
            epochs=epochs,
            lr=model.cfg.lr,
            weights=model.weights,
            seed=model.cfg.seed * 2 + k,
            reseed=model.cfg.reseed_dead,
        )


def train_epoch(model: MoToRec, opt: nx.AdamState) -> LossBreakdown:
    ds, cfg = model.ds, model.cfg
    n_batches = max(1, math.ceil(len(ds.train) / cfg.batch_size))
    rows = []
    for _ in range(n_batches):
        batch = sample_triplets(ds, cfg.batch_size, model.rng, model.train_sets)
        model.zero_grad()
        out = model.loss(batch)
        grads = nx.backward(out.total)
        model.after_backward()
        full = {k: grads.get(k, np.zeros_like(p.value)) for k, p in model.params.items()}
        nx.adam_update(opt, model.params, full)
        model.after_step()
        rows.append(out.breakdown)
    if cfg.reseed_dead and not cfg.no_rqvae:
        model.reseed_dead_codewords()
    return _mean_breakdown(rows)


def train(
    cfg: TrainConfig,
    data,
    out_dir=None,
) -> TrainResult:
    """Fit a model. ``data`` is a dataset directory or a ``(dataset, features)`` pair.

    Writes ``train_log.tsv`` and the best checkpoint to ``out_dir`` when given. On a
    non-finite loss the last good state is saved and ``TrainingError`` is raised.
    """
    ds, features = load_dataset(data) if isinstance(data, (str, Path)) else data
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = MoToRec(cfg, ds, features)
    if cfg.pretrain_epochs > 0 and model.tokenizers:
        pretrain_tokenizers(model, cfg.pretrain_epochs)
    opt = nx.AdamState(lr=cfg.lr)
    best = float("-inf")
    best_ckpt = make_checkpoint(model, opt, float("nan"), 0)
    last_good = best_ckpt
    best_epoch = 0
    history: list[EpochRecord] = []
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        try:
            losses = train_epoch(model, opt)
        except (TrainingError, FloatingPointError) as exc:
            if out is not None:
                save_checkpoint(out / LAST_GOOD_FILE, last_good)
                save_checkpoint(out / BEST_FILE, best_ckpt)
                _write_log(out / LOG_FILE, history)
            raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
        valid = float("nan")
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            valid = validation_recall(model)
        history.append(EpochRecord(epoch, losses, valid))
        log.info("epoch %d total=%.5f valid_R@20=%.5f", epoch, losses.total, valid)
        last_good = make_checkpoint(model, opt, valid, epoch)
        if not math.isnan(valid) and valid > best:
            best, best_epoch, best_ckpt = valid, epoch, last_good
        if best_epoch == 0:
            # no validation signal yet: keep the latest state
            best_ckpt = last_good
        elif epoch - best_epoch >= cfg.patience:
            stopped = True
            break

    if out is not None:
        _write_log(out / LOG_FILE, history)
        save_checkpoint(out / BEST_FILE, best_ckpt)
    final = model_from_checkpoint(best_ckpt, ds, features) if best_ckpt is not last_good else model
    return TrainResult(final, best_ckpt, history, best_epoch, stopped)


def evaluate(
    model: MoToRec, split: str = "test", cold_only_rank: bool = False
) -> tuple[MetricReport, MetricReport]:
    users, items = model.final_embeddings()
    return stratified_eval(users, items, model.ds, model.cfg.threshold, split, cold_only_rank=cold_only_rank)


def ablation_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant == "full":
        return cfg.replace(**{a: False for a in ABLATIONS})
    if variant == "hge-off":
        return cfg.replace(hge=False)
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from full, hge-off, {', '.join(ABLATIONS)}")
    return cfg.replace(**{variant: True})


def run_ablation(cfg: TrainConfig, variant: str, data, out_dir=None) -> tuple[MetricReport, MetricReport]:
    """Train the named variant and report (overall, cold-start) test metrics."""
    result = train(ablation_config(cfg, variant), data, out_dir)
    return evaluate(result.model)


def load_model(path, data, strict_grid: bool | None = None) -> MoToRec:
    ds, features = load_dataset(data) if isinstance(data, (str, Path)) else data
    return model_from_checkpoint(load_checkpoint(path, strict_grid), ds, features)


def tokenizer_from_checkpoint(ckpt: Checkpoint, modality: str):
    """Rebuild one modality's tokenizer from checkpoint tensors alone."""
    from .tokenizer import RqVae, RqVaeConfig

    cfg = ckpt.config
    if cfg.no_rqvae:
        raise ConfigError("checkpoint was trained without the tokenizer (no_rqvae)")
    params = ckpt.params
    w1 = params.get(f"{modality}.enc.w1")
    if w1 is None:
        raise ConfigError(f"checkpoint has no {modality} tokenizer")
    tok_cfg = RqVaeConfig(
        input_dim=w1.shape[0],
        code_dim=cfg.code_dim,
        hidden_dim=cfg.hidden_dim,
        n_stages=cfg.n_stages,
        codebook_size=cfg.codebook_size,
        rho=cfg.rho,
        beta=cfg.beta,
        gamma=cfg.effective_gamma,
        codebook_weight=cfg.codebook_weight,
        temperature=cfg.temperature,
    )
    tok = RqVae(modality, tok_cfg)
    for name, p in tok.params.items():
        p.value[...] = params[name]
    return tok
