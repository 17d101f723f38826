"""Residual-quantized autoencoder that turns item features into discrete token codes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, TrainingError
from .numerics import Tensor

SPARSITY_EPS = 1e-6


@dataclass
class RqVaeConfig:
    input_dim: int
    code_dim: int = 32
    hidden_dim: int = 64
    n_stages: int = 4
    codebook_size: int = 256
    rho: float = 0.05
    beta: float = 0.25
    gamma: float = 0.05
    codebook_weight: float = 1.0
    temperature: float = 1.0

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ContractError("codebook size K must be >= 2")
        if self.n_stages < 1:
            raise ContractError("need at least one quantization stage")
        if not 0.0 < self.rho < 1.0:
            raise ContractError("sparsity prior rho must lie in (0, 1)")
        if self.beta < 0 or self.gamma < 0 or self.codebook_weight < 0:
            raise ContractError("loss coefficients must be non-negative")
        if self.temperature <= 0:
            raise ContractError("soft-assignment temperature must be positive")


class RqVae:
    """Encoder MLP, decoder MLP and a cascade of codebooks for one modality.

    Parameters are ``Tensor`` leaves named ``<modality>.<part>`` so that several
    tokenizers can share one optimizer and one checkpoint.
    """

    def __init__(self, modality: str, cfg: RqVaeConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.modality = modality
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        d_in, h, d_c = cfg.input_dim, cfg.hidden_dim, cfg.code_dim

        def glorot(n_in, n_out):
            return rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

        p = modality
        self.params: dict[str, Tensor] = {
            f"{p}.enc.w1": nx.parameter(glorot(d_in, h), f"{p}.enc.w1"),
            f"{p}.enc.b1": nx.parameter(np.zeros((1, h)), f"{p}.enc.b1"),
            f"{p}.enc.w2": nx.parameter(glorot(h, d_c), f"{p}.enc.w2"),
            f"{p}.enc.b2": nx.parameter(np.zeros((1, d_c)), f"{p}.enc.b2"),
            f"{p}.dec.w1": nx.parameter(glorot(d_c, h), f"{p}.dec.w1"),
            f"{p}.dec.b1": nx.parameter(np.zeros((1, h)), f"{p}.dec.b1"),
            f"{p}.dec.w2": nx.parameter(glorot(h, d_in), f"{p}.dec.w2"),
            f"{p}.dec.b2": nx.parameter(np.zeros((1, d_in)), f"{p}.dec.b2"),
        }
        for k in range(cfg.n_stages):
            name = f"{p}.codebook.{k}"
            book = rng.normal(0.0, 0.1, size=(cfg.codebook_size, d_c))
            book[0] = 0.0
            self.params[name] = nx.parameter(book, name)

    def p(self, part: str) -> Tensor:
        return self.params[f"{self.modality}.{part}"]

    @property
    def codebooks(self) -> list[Tensor]:
        return [self.p(f"codebook.{k}") for k in range(self.cfg.n_stages)]

    def pin_zero_codewords(self) -> None:
        """Keep codeword 0 of every stage at the origin (and its gradient at zero)."""
        for book in self.codebooks:
            book.value[0] = 0.0
            if book.grad is not None:
                book.grad[0] = 0.0


@dataclass
class QuantizationResult:
    codes: np.ndarray  # (n, N_q) token index per stage
    z_q: Tensor  # forward value = sum of selected codewords; gradient passes straight through to z_e
    residual_norms: np.ndarray  # (n, N_q) norm of the residual after each stage
    soft: list[Tensor] | None  # N_q tensors of shape (n, K), rows sum to 1
    stage_inputs: list[np.ndarray]  # residual entering each stage (values only)
    selected: list[Tensor]  # per-stage gathered codewords, differentiable w.r.t. the codebooks
    z_e: Tensor = field(repr=False, default=None)
    stage_residuals: list[Tensor] = field(repr=False, default_factory=list)  # differentiable stage inputs

    @property
    def quantized(self) -> np.ndarray:
        return self.z_q.value


@dataclass(frozen=True)
class SemanticCode:
    item: int
    tokens: dict[str, tuple[int, ...]]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else nx.constant(x)


def _mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return nx.add(nx.matmul(nx.tanh(nx.add(nx.matmul(x, w1), b1)), w2), b2)


def encode(state: RqVae, features) -> Tensor:
    x = _as_tensor(features)
    if x.shape[1] != state.cfg.input_dim:
        raise DimensionError(f"{state.modality}: feature dim {x.shape[1]} != encoder input {state.cfg.input_dim}")
    return _mlp(x, state.p("enc.w1"), state.p("enc.b1"), state.p("enc.w2"), state.p("enc.b2"))


def decode(state: RqVae, z: Tensor) -> Tensor:
    if z.shape[1] != state.cfg.code_dim:
        raise DimensionError(f"{state.modality}: latent dim {z.shape[1]} != decoder input {state.cfg.code_dim}")
    return _mlp(z, state.p("dec.w1"), state.p("dec.b1"), state.p("dec.w2"), state.p("dec.b2"))


def _nearest(r: np.ndarray, book: np.ndarray) -> np.ndarray:
    rr = np.einsum("ij,ij->i", r, r)[:, None]
    cc = np.einsum("ij,ij->i", book, book)[None, :]
    dist = rr - 2.0 * (r @ book.T) + cc
    return np.argmin(dist, axis=1)


def residual_quantize(state: RqVae, z_e, soft: bool = True) -> QuantizationResult:
    """Greedy cascade: each stage picks the codeword nearest to the running residual."""
    z_e = _as_tensor(z_e)
    if z_e.shape[1] != state.cfg.code_dim:
        raise DimensionError(f"latent dim {z_e.shape[1]} != codebook dim {state.cfg.code_dim}")
    n = z_e.shape[0]
    residual = z_e
    r_val = z_e.value.copy()
    codes = np.zeros((n, state.cfg.n_stages), dtype=np.int64)
    norms = np.zeros((n, state.cfg.n_stages))
    softs: list[Tensor] = []
    inputs: list[np.ndarray] = []
    selected: list[Tensor] = []
    residuals: list[Tensor] = []
    for k, book in enumerate(state.codebooks):
        inputs.append(r_val)
        residuals.append(residual)
        idx = _nearest(r_val, book.value)
        new_r = r_val - book.value[idx]
        old_sq = np.einsum("ij,ij->i", r_val, r_val)
        new_sq = np.einsum("ij,ij->i", new_r, new_r)
        # roundoff guard: never do worse than an exact zero codeword
        zeros = np.flatnonzero(~book.value.any(axis=1))
        if len(zeros):
            worse = new_sq > old_sq
            if worse.any():
                idx[worse] = zeros[0]
                new_r[worse] = r_val[worse]
        codes[:, k] = idx
        if soft:
            logits = nx.scale(nx.squared_distances(residual, book), -1.0 / state.cfg.temperature)
            softs.append(nx.softmax_rows(logits))
        q = nx.gather_rows(book, idx)
        selected.append(q)
        residual = nx.sub(residual, q)
        r_val = new_r
        norms[:, k] = np.sqrt(np.einsum("ij,ij->i", r_val, r_val))
    z_sum = selected[0]
    for q in selected[1:]:
        z_sum = nx.add(z_sum, q)
    z_q = nx.straight_through(z_e, z_sum)
    return QuantizationResult(codes, z_q, norms, softs if soft else None, inputs, selected, z_e, residuals)


def sparsity_loss(soft, rho: float, eps: float = SPARSITY_EPS) -> Tensor:
    """Bernoulli KL between the prior ``rho`` and each codeword's batch-mean activation.

    ``soft`` is an (n, J) tensor of assignment probabilities, or a list of them
    (one per stage) which are pooled side by side into one set of codewords.
    """
    if isinstance(soft, (list, tuple)):
        if not soft:
            raise ContractError("sparsity loss needs at least one assignment matrix")
        soft = nx.concat_cols(list(soft)) if len(soft) > 1 else soft[0]
    soft = _as_tensor(soft)
    if soft.shape[0] == 0:
        raise ContractError("sparsity loss over an empty batch")
    rho_hat = nx.clip(nx.scale(nx.sum_cols(soft), 1.0 / soft.shape[0]), eps, 1.0 - eps)
    first = nx.scale(nx.log(nx.div(rho, rho_hat)), rho)
    second = nx.scale(nx.log(nx.div(1.0 - rho, nx.sub(1.0, rho_hat))), 1.0 - rho)
    return nx.total_sum(nx.add(first, second))


@dataclass
class RqVaeLoss:
    total: Tensor
    result: QuantizationResult
    reconstruction: float
    commitment: float
    codebook: float
    sparsity: float


def rqvae_loss(state: RqVae, features, weights=None) -> RqVaeLoss:
    """Rarity-weighted batch loss for one modality.

    Per item: reconstruction + beta * commitment + codebook_weight * codebook pull,
    multiplied by the item weight, then averaged; gamma * sparsity is added once.
    """
    x = _as_tensor(features)
    n = x.shape[0]
    if n == 0:
        raise ContractError("tokenizer loss over an empty batch")
    cfg = state.cfg
    w = np.ones((n, 1)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n, 1)

    z_e = encode(state, x)
    res = residual_quantize(state, z_e, soft=cfg.gamma > 0)
    recon = nx.sum_rows(nx.square(nx.sub(x, decode(state, res.z_q))))
    commit = nx.sum_rows(nx.square(nx.sub(z_e, nx.stop_gradient(res.z_q))))
    pull = None
    for r_in, q in zip(res.stage_residuals, res.selected):
        term = nx.sum_rows(nx.square(nx.sub(nx.stop_gradient(r_in), q)))
        pull = term if pull is None else nx.add(pull, term)

    per_item = nx.add(nx.add(recon, nx.scale(commit, cfg.beta)), nx.scale(pull, cfg.codebook_weight))
    total = nx.scale(nx.total_sum(nx.mul(per_item, w)), 1.0 / n)
    sparse_val = 0.0
    if cfg.gamma > 0:
        sparse = sparsity_loss(res.soft, cfg.rho)
        sparse_val = sparse.item()
        total = nx.add(total, nx.scale(sparse, cfg.gamma))
    if not np.isfinite(total.item()):
        raise TrainingError(f"{state.modality} tokenizer loss is not finite")
    return RqVaeLoss(
        total,
        res,
        float((recon.value * w).sum() / n),
        float((commit.value * w).sum() / n),
        float((pull.value * w).sum() / n),
        sparse_val,
    )


def tokenize_corpus(state: RqVae, features) -> tuple[list[SemanticCode], np.ndarray]:
    matrix = features.matrix if hasattr(features, "matrix") else np.asarray(features, dtype=np.float64)
    z_e = encode(state, nx.constant(matrix))
    res = residual_quantize(state, z_e, soft=False)
    codes = [SemanticCode(i, {state.modality: tuple(int(t) for t in row)}) for i, row in enumerate(res.codes)]
    return codes, res.quantized.copy()


# -- codebook maintenance ---------------------------------------------------


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        pick = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[c] = points[pick]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _dejitter(book: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    while True:
        _, first = np.unique(book, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(len(book)), first)
        dup = dup[dup != 0]
        if not len(dup):
            return book
        book[dup] += rng.normal(0.0, scale, size=(len(dup), book.shape[1]))


def init_codebooks(state: RqVae, z_e: np.ndarray, rng: np.random.Generator) -> None:
    """k-means++ seeding stage by stage on the running residuals; codeword 0 is the origin."""
    r = np.asarray(z_e, dtype=np.float64).copy()
    scale = 1e-3 * max(float(r.std()), 1e-6)
    for book in state.codebooks:
        centers = np.zeros_like(book.value)
        centers[1:] = _kmeans_pp(r, len(centers) - 1, rng)
        centers = _dejitter(centers, scale, rng)
        book.value[...] = centers
        r = r - centers[_nearest(r, centers)]


def reseed_dead_codewords(state: RqVae, result: QuantizationResult, rng: np.random.Generator) -> int:
    """Move every codeword unused in ``result`` onto a random residual of its stage."""
    moved = 0
    for k, book in enumerate(state.codebooks):
        used = np.bincount(result.codes[:, k], minlength=len(book.value))
        dead = np.flatnonzero(used == 0)
        dead = dead[dead != 0]
        if len(dead):
            src = result.stage_inputs[k][rng.integers(len(result.stage_inputs[k]), size=len(dead))]
            book.value[dead] = src + rng.normal(0.0, 1e-3 * max(float(src.std()), 1e-6), size=src.shape)
            moved += len(dead)
    return moved


def usage_entropy(codes: np.ndarray, codebook_size: int) -> float:
    """Mean over stages of the Shannon entropy (nats) of the hard-code histogram."""
    ents = []
    for k in range(codes.shape[1]):
        p = np.bincount(codes[:, k], minlength=codebook_size) / len(codes)
        p = p[p > 0]
        ents.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(ents))


def train_tokenizer(
    state: RqVae,
    features: np.ndarray,
    epochs: int = 20,
    batch_size: int = 256,
    lr: float = 1e-3,
    weights=None,
    seed: int = 0,
    reseed: bool = True,
) -> list[float]:
    """Fit one tokenizer alone on a feature matrix; returns per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    init_codebooks(state, encode(state, features).value, rng)
    opt = nx.AdamState(lr=lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            for p in state.params.values():
                p.zero_grad()
            out = rqvae_loss(state, features[idx], w[idx])
            grads = nx.backward(out.total)
            state.pin_zero_codewords()
            nx.adam_update(opt, state.params, {k: grads.get(k, np.zeros_like(v.value)) for k, v in state.params.items()})
            state.pin_zero_codewords()
            losses.append(out.total.item())
        if reseed:
            full = residual_quantize(state, encode(state, features), soft=False)
            reseed_dead_codewords(state, full, rng)
        history.append(float(np.mean(losses)))
    return history
