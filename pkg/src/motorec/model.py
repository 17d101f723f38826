"""The full recommender: tokenizers, channel embeddings, fusion, and one training step."""
from __future__ import annotations

import math
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .data import MODALITIES, InteractionDataset, ItemFeatureTable, rarity_profile
from .encoder import (
    FusionParams,
    build_adjacency,
    build_item_knn_graph,
    fuse_channels,
    perturbation,
    propagate_channels,
)
from .errors import DataError
from .numerics import SparseMatrix, Tensor
from .objective import LossBreakdown, TripletBatch, bpr_loss, infonce_loss, l2_penalty, score, total_loss
from .tokenizer import (
    RqVae,
    RqVaeConfig,
    encode,
    init_codebooks,
    reseed_dead_codewords,
    residual_quantize,
    rqvae_loss,
)


@dataclass
class StepOutput:
    total: Tensor
    breakdown: LossBreakdown
    sparsity: dict[str, float]
    terms: dict[str, Tensor]  # differentiable components before weighting


class MoToRec:
    def __init__(
        self,
        cfg: TrainConfig,
        ds: InteractionDataset,
        features: dict[str, ItemFeatureTable],
        init: bool = True,
    ):
        missing = [m for m in MODALITIES if m not in features]
        if missing:
            raise DataError(f"missing feature tables: {missing}")
        for m in MODALITIES:
            if features[m].n_items != ds.n_items:
                raise DataError(f"{m} features have {features[m].n_items} rows for {ds.n_items} items")
        self.cfg = cfg
        self.ds = ds
        self.features = {m: features[m].matrix for m in MODALITIES}
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.init_rng = np.random.default_rng(seeds[0])
        self.rng = np.random.default_rng(seeds[1])
        self.noise_rng = np.random.default_rng(seeds[2])
        rng = self.init_rng
        d = cfg.dim

        self.adj = build_adjacency(ds, cfg.self_loops)
        self.item_graph: SparseMatrix | None = None
        if cfg.hge:
            self.item_graph = build_item_knn_graph([self.features[m] for m in MODALITIES], cfg.hge_k)
        self.weights = np.ones(ds.n_items) if cfg.no_ara else rarity_profile(ds, cfg.threshold).weights
        self.train_sets = ds.train_sets()

        self.params: dict[str, Tensor] = {}

        def add(name, value):
            self.params[name] = nx.parameter(value, name)

        def normal(*shape, std=0.1):
            return rng.normal(0.0, std, size=shape)

        self.tokenizers: dict[str, RqVae] = {}
        for m in MODALITIES:
            d_in = self.features[m].shape[1]
            if cfg.no_rqvae:
                add(f"{m}.linear", normal(d_in, d, std=math.sqrt(1.0 / d_in)))
            else:
                tok_cfg = RqVaeConfig(
                    input_dim=d_in,
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
                tok = RqVae(m, tok_cfg, rng)
                self.tokenizers[m] = tok
                self.params.update(tok.params)
                add(f"{m}.item_proj", normal(cfg.code_dim, d, std=math.sqrt(1.0 / cfg.code_dim)))
            add(f"user.{m}", normal(ds.n_users, d))
        add("user.id", normal(ds.n_users, d))
        add("item.id", normal(ds.n_items, d))
        self.user_fusion = FusionParams.init("fuse.user", d, cfg.alpha, rng)
        self.item_fusion = FusionParams.init("fuse.item", d, cfg.alpha, rng)
        for t in self.user_fusion.tensors() + self.item_fusion.tensors():
            self.params[t.name] = t
        if init:
            for m, tok in self.tokenizers.items():
                init_codebooks(tok, encode(tok, self.features[m]).value, rng)

    # -- forward -------------------------------------------------------------

    def item_content(self) -> dict[str, Tensor]:
        """Per-modality initial item embeddings for the content channels."""
        out = {}
        for m in MODALITIES:
            x = nx.constant(self.features[m])
            if self.cfg.no_rqvae:
                out[m] = nx.matmul(x, self.params[f"{m}.linear"])
            else:
                tok = self.tokenizers[m]
                res = residual_quantize(tok, encode(tok, x), soft=False)
                out[m] = nx.matmul(res.z_q, self.params[f"{m}.item_proj"])
        return out

    def initial_embeddings(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        items = self.item_content()
        items["id"] = self.params["item.id"]
        users = {m: self.params[f"user.{m}"] for m in MODALITIES}
        users["id"] = self.params["user.id"]
        return users, items

    def _channels(self, adj=None):
        users, items = self.initial_embeddings()
        return propagate_channels(adj if adj is not None else self.adj, users, items, self.cfg.layers)

    def embeddings(self) -> tuple[Tensor, Tensor]:
        channels = self._channels()
        return fuse_channels(channels, self.user_fusion, self.item_fusion, not self.cfg.no_hf, item_graph=self.item_graph)

    def final_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        users, items = self.embeddings()
        return users.value.copy(), items.value.copy()

    def _dropped_adjacency(self) -> SparseMatrix:
        keep = self.noise_rng.random(len(self.ds.train)) >= self.cfg.edge_dropout
        sub = SimpleNamespace(n_users=self.ds.n_users, n_items=self.ds.n_items, train=self.ds.train[keep])
        return build_adjacency(sub, self.cfg.self_loops)

    def loss(self, batch: TripletBatch, noise: dict | None = None) -> StepOutput:
        """Composite objective on one triplet batch.

        ``noise`` optionally fixes the two contrastive perturbations
        (``{"view1": {channel: array}, "view2": {...}}``); otherwise they are drawn.
        """
        cfg = self.cfg
        hybrid = not cfg.no_hf
        channels = self._channels()
        users, items = fuse_channels(channels, self.user_fusion, self.item_fusion, hybrid, item_graph=self.item_graph)
        pos = score(users, items, np.stack([batch.users, batch.pos], axis=1))
        neg = score(users, items, np.stack([batch.users, batch.neg], axis=1))
        bpr = bpr_loss(pos, neg)

        cl = None
        lam_cl = cfg.effective_lambda_cl
        if lam_cl > 0:
            batch_users = np.unique(batch.users)
            batch_items = np.unique(np.concatenate([batch.pos, batch.neg]))
            views = []
            for v in ("view1", "view2"):
                if cfg.cl_views == "edge_dropout" and noise is None:
                    ch = self._channels(self._dropped_adjacency())
                    views.append(fuse_channels(ch, self.user_fusion, self.item_fusion, hybrid, item_graph=self.item_graph))
                    continue
                if noise is not None:
                    eps = noise[v]
                else:
                    eps = {
                        c: perturbation(emb.layers[0].shape, cfg.cl_noise, self.noise_rng) for c, emb in channels.items()
                    }
                views.append(fuse_channels(channels, self.user_fusion, self.item_fusion, hybrid, eps, self.item_graph))
            (u1, i1), (u2, i2) = views
            cl_u = infonce_loss(nx.gather_rows(u1, batch_users), nx.gather_rows(u2, batch_users), cfg.tau_cl)
            cl_i = infonce_loss(nx.gather_rows(i1, batch_items), nx.gather_rows(i2, batch_items), cfg.tau_cl)
            cl = nx.scale(nx.add(cl_u, cl_i), 0.5)

        rq = {}
        sparsity = {}
        if not cfg.no_rqvae:
            batch_items = np.unique(np.concatenate([batch.pos, batch.neg]))
            for m, tok in self.tokenizers.items():
                out = rqvae_loss(tok, self.features[m][batch_items], self.weights[batch_items])
                rq[m] = out.total
                sparsity[m] = out.sparsity

        l2 = l2_penalty(list(self.params.values()))
        total, breakdown = total_loss(
            bpr, cl, rq.get("visual"), rq.get("textual"), l2, lam_cl, cfg.lambda_rq, cfg.lambda_reg
        )
        terms = {"bpr": bpr, "l2": l2, **{f"rq_{m}": t for m, t in rq.items()}}
        if cl is not None:
            terms["cl"] = cl
        return StepOutput(total, breakdown, sparsity, terms)

    # -- parameter maintenance -----------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def after_backward(self) -> None:
        for tok in self.tokenizers.values():
            tok.pin_zero_codewords()

    def after_step(self) -> None:
        for tok in self.tokenizers.values():
            tok.pin_zero_codewords()

    def reseed_dead_codewords(self) -> int:
        moved = 0
        for m, tok in self.tokenizers.items():
            res = residual_quantize(tok, encode(tok, self.features[m]), soft=False)
            moved += reseed_dead_codewords(tok, res, self.rng)
        return moved

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise DataError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise DataError(f"parameter {name!r}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
            p.value[...] = arrays[name]
