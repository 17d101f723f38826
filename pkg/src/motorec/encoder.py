"""Three-channel LightGCN propagation, hybrid modality fusion and the gated ID residual."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .errors import ConfigError, DataError, DimensionError
from .numerics import SparseMatrix, Tensor

EMBEDDING_MAGIC = b"MTE1"
CHANNELS = ("visual", "textual", "id")


def build_adjacency(ds, self_loops: bool = True) -> SparseMatrix:
    """Symmetrically normalised bipartite adjacency over users then items, from train edges."""
    n_u, n_i = ds.n_users, ds.n_items
    n = n_u + n_i
    edges = np.asarray(ds.train, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1] + n_u])
    cols = np.concatenate([edges[:, 1] + n_u, edges[:, 0]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # collapse duplicate edges
    if self_loops:
        a = a + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    return SparseMatrix.from_scipy(inv_sqrt @ a @ inv_sqrt)


@dataclass
class ChannelEmbeddings:
    channel: str
    layers: list[Tensor]  # stacked [users; items] snapshots E^(0..L)
    n_users: int

    @property
    def aggregate(self) -> Tensor:
        out = self.layers[0]
        for layer in self.layers[1:]:
            out = nx.add(out, layer)
        return nx.scale(out, 1.0 / len(self.layers))

    def split(self, stacked: Tensor | None = None) -> tuple[Tensor, Tensor]:
        stacked = self.aggregate if stacked is None else stacked
        n = stacked.shape[0]
        return nx.slice_rows(stacked, 0, self.n_users), nx.slice_rows(stacked, self.n_users, n)


def propagate(adj: SparseMatrix, e0: Tensor, n_layers: int, channel: str = "id", n_users: int = 0) -> ChannelEmbeddings:
    if e0.shape[0] != adj.cols:
        raise DimensionError(f"{channel}: {e0.shape[0]} embedding rows for a {adj.shape} adjacency")
    layers = [e0]
    for _ in range(n_layers):
        layers.append(nx.spmm(adj, layers[-1]))
    return ChannelEmbeddings(channel, layers, n_users)


@dataclass
class FusionParams:
    """Parameters for one side (users or items) of the fusion block."""

    alpha: float
    query: Tensor  # (d, 1)
    key_visual: Tensor  # (d, d)
    key_textual: Tensor  # (d, d)
    proj: Tensor  # (2d, d)
    proj_bias: Tensor  # (1, d)
    gate: Tensor  # (2d, d)
    gate_bias: Tensor  # (1, d)

    @classmethod
    def init(cls, prefix: str, d: int, alpha: float, rng: np.random.Generator) -> FusionParams:
        def glorot(n_in, n_out):
            return rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

        proj = np.vstack([np.eye(d), np.eye(d)]) * 0.5 + glorot(2 * d, d) * 0.1
        return cls(
            alpha=alpha,
            query=nx.parameter(glorot(d, 1), f"{prefix}.query"),
            key_visual=nx.parameter(glorot(d, d), f"{prefix}.key_visual"),
            key_textual=nx.parameter(glorot(d, d), f"{prefix}.key_textual"),
            proj=nx.parameter(proj, f"{prefix}.proj"),
            proj_bias=nx.parameter(np.zeros((1, d)), f"{prefix}.proj_bias"),
            gate=nx.parameter(glorot(2 * d, d), f"{prefix}.gate"),
            gate_bias=nx.parameter(np.zeros((1, d)), f"{prefix}.gate_bias"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.query, self.key_visual, self.key_textual, self.proj, self.proj_bias, self.gate, self.gate_bias]


def attention_weights(x_v: Tensor, x_t: Tensor, params: FusionParams) -> Tensor:
    """Per-row two-way softmax over modality scores, shape (n, 2)."""
    s_v = nx.matmul(nx.matmul(x_v, params.key_visual), params.query)
    s_t = nx.matmul(nx.matmul(x_t, params.key_textual), params.query)
    return nx.softmax_rows(nx.concat_cols([s_v, s_t]))


def hybrid_fuse(x_v: Tensor, x_t: Tensor, params: FusionParams) -> Tensor:
    """alpha * [x_v | x_t] + (1 - alpha) * [2 a_v x_v | 2 a_t x_t], projected 2d -> d.

    The attention branch is scaled by the number of modalities so that uniform
    attention reproduces the concatenation exactly.
    """
    if not 0.0 <= params.alpha <= 1.0:
        raise ConfigError(f"fusion alpha must lie in [0, 1], got {params.alpha}")
    if x_v.shape != x_t.shape:
        raise DimensionError(f"fusion inputs differ in shape: {x_v.shape} vs {x_t.shape}")
    concat = nx.concat_cols([x_v, x_t])
    if params.alpha == 1.0:
        mixed = concat
    else:
        a = attention_weights(x_v, x_t, params)
        att = nx.concat_cols(
            [nx.mul(x_v, nx.scale(nx.slice_cols(a, 0, 1), 2.0)), nx.mul(x_t, nx.scale(nx.slice_cols(a, 1, 2), 2.0))]
        )
        mixed = nx.add(nx.scale(concat, params.alpha), nx.scale(att, 1.0 - params.alpha))
    return nx.add(nx.matmul(mixed, params.proj), params.proj_bias)


def mean_fuse(x_v: Tensor, x_t: Tensor) -> Tensor:
    return nx.scale(nx.add(x_v, x_t), 0.5)


def gated_residual(content: Tensor, collab: Tensor, params: FusionParams) -> Tensor:
    """g * content + (1 - g) * collab with g = sigmoid([content | collab] W + b)."""
    if content.shape != collab.shape:
        raise DimensionError(f"gated residual inputs differ: {content.shape} vs {collab.shape}")
    g = nx.sigmoid(nx.add(nx.matmul(nx.concat_cols([content, collab]), params.gate), params.gate_bias))
    return nx.add(nx.mul(g, content), nx.mul(nx.sub(1.0, g), collab))


def fuse_side(x_v: Tensor, x_t: Tensor, x_id: Tensor, params: FusionParams, hybrid: bool = True) -> Tensor:
    content = hybrid_fuse(x_v, x_t, params) if hybrid else mean_fuse(x_v, x_t)
    return gated_residual(content, x_id, params)


# -- optional item-item semantic graph --------------------------------------


def build_item_knn_graph(features: list[np.ndarray], k: int = 10) -> SparseMatrix:
    """Symmetric, degree-normalised k-nearest-neighbour graph over items (cosine
    similarity averaged across modalities)."""
    sims = None
    for f in features:
        f = np.asarray(f, dtype=np.float64)
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        unit = f / norms
        s = unit @ unit.T
        sims = s if sims is None else sims + s
    sims = sims / len(features)
    n = len(sims)
    np.fill_diagonal(sims, -np.inf)
    k = min(k, n - 1)
    nbrs = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    a = sp.csr_matrix((np.ones(n * k), (rows, nbrs.ravel())), shape=(n, n))
    a = ((a + a.T) > 0).astype(np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    inv = sp.diags(1.0 / np.sqrt(deg))
    return SparseMatrix.from_scipy(inv @ a @ inv)


# -- embedding export --------------------------------------------------------


def write_embeddings(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != EMBEDDING_MAGIC or len(raw) < 12:
        raise DataError(f"{path}: not an MTE1 embedding file")
    n, d = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * n * d:
        raise DataError(f"{path}: truncated embedding payload")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)


# -- full encoding -----------------------------------------------------------


def propagate_channels(
    adj: SparseMatrix, user_init: dict[str, Tensor], item_init: dict[str, Tensor], n_layers: int
) -> dict[str, ChannelEmbeddings]:
    out = {}
    for ch in CHANNELS:
        if ch not in item_init:
            continue
        u0, i0 = user_init[ch], item_init[ch]
        if u0.shape[1] != i0.shape[1]:
            raise DimensionError(f"{ch}: user dim {u0.shape[1]} != item dim {i0.shape[1]}")
        out[ch] = propagate(adj, nx.concat_rows([u0, i0]), n_layers, ch, u0.shape[0])
    return out


def perturbation(shape: tuple[int, int], magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise rescaled to a fixed per-row norm."""
    noise = rng.uniform(0.0, 1.0, size=shape)
    return magnitude * noise / np.linalg.norm(noise, axis=1, keepdims=True)


def fuse_channels(
    channels: dict[str, ChannelEmbeddings],
    user_params: FusionParams,
    item_params: FusionParams,
    hybrid: bool = True,
    noise: dict[str, np.ndarray] | None = None,
    item_graph: SparseMatrix | None = None,
) -> tuple[Tensor, Tensor]:
    """Fuse aggregated channel outputs into final (users, items).

    ``noise`` maps channel -> stacked noise magnitudes; each entry is added with the
    sign of the embedding it perturbs. ``item_graph`` adds one hop of item-item
    smoothing to the fused item content.
    """
    sides = {}
    for ch, emb in channels.items():
        agg = emb.aggregate
        if noise is not None and ch in noise:
            # the sign is piecewise constant: route it through stop_gradient
            agg = nx.add(agg, np.sign(nx.stop_gradient(agg).value) * noise[ch])
        sides[ch] = emb.split(agg)
    u_id, i_id = sides["id"]
    if "visual" not in sides:  # ID-only model
        return u_id, i_id
    (u_v, i_v), (u_t, i_t) = sides["visual"], sides["textual"]
    users = fuse_side(u_v, u_t, u_id, user_params, hybrid)
    content = hybrid_fuse(i_v, i_t, item_params) if hybrid else mean_fuse(i_v, i_t)
    if item_graph is not None:
        content = nx.add(content, nx.spmm(item_graph, content))
    items = gated_residual(content, i_id, item_params)
    return users, items


def encode_all(
    adj: SparseMatrix,
    user_init: dict[str, Tensor],
    item_init: dict[str, Tensor],
    user_params: FusionParams,
    item_params: FusionParams,
    n_layers: int = 2,
    hybrid: bool = True,
    item_graph: SparseMatrix | None = None,
) -> tuple[Tensor, Tensor]:
    channels = propagate_channels(adj, user_init, item_init, n_layers)
    return fuse_channels(channels, user_params, item_params, hybrid, item_graph=item_graph)
