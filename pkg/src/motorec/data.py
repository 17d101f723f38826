"""Interaction and feature ingestion, rarity weighting, and a synthetic generator.

Dataset directory layout (written by ``save_dataset``, read by ``load_dataset``)::

    train.tsv, valid.tsv, test.tsv   user<TAB>item, remapped indices, with header
    user_map.tsv, item_map.tsv       original_id<TAB>index
    visual.mtf, textual.mtf          feature matrices in the MTF1 binary format
"""
from __future__ import annotations

import csv
import dataclasses
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigError, DataError, ParseError

FEATURE_MAGIC = b"MTF1"
MODALITIES = ("visual", "textual")
DEFAULT_SPLIT = (0.8, 0.1, 0.1)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    n_users: int
    n_items: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            edges = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            if len(edges):
                if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.n_users:
                    raise DataError(f"{name}: user index out of range")
                if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.n_items:
                    raise DataError(f"{name}: item index out of range")
            edges.setflags(write=False)
            object.__setattr__(self, name, edges)
        keys = [set(map(tuple, getattr(self, n).tolist())) for n in ("train", "valid", "test")]
        if keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2]:
            raise DataError("train/valid/test splits overlap")
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(u) for u in range(self.n_users)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(self.n_items)))

    @property
    def item_degree(self) -> np.ndarray:
        """Training-set degree of every item."""
        return np.bincount(self.train[:, 1], minlength=self.n_items)

    @property
    def user_degree(self) -> np.ndarray:
        return np.bincount(self.train[:, 0], minlength=self.n_users)

    def train_sets(self) -> list[set[int]]:
        return _group(self.train, self.n_users)

    def test_sets(self) -> list[set[int]]:
        return _group(self.test, self.n_users)

    def valid_sets(self) -> list[set[int]]:
        return _group(self.valid, self.n_users)


def _group(edges: np.ndarray, n_users: int) -> list[set[int]]:
    out: list[set[int]] = [set() for _ in range(n_users)]
    for u, i in edges.tolist():
        out[u].add(i)
    return out


@dataclass(frozen=True, eq=False)
class ItemFeatureTable:
    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DataError("feature matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            bad = int(np.argwhere(~np.isfinite(m))[0, 0])
            raise DataError(f"{self.modality} features: non-finite entry in row {bad}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True, eq=False)
class RarityProfile:
    threshold: int
    cold: np.ndarray
    weights: np.ndarray


def rarity_profile(ds_or_degree, threshold: int = 10) -> RarityProfile:
    """Cold mask ``d_i < threshold`` and inverse-log2 weights for cold items seen at least once."""
    if threshold < 1:
        raise ConfigError("cold-start threshold must be >= 1")
    degree = ds_or_degree.item_degree if isinstance(ds_or_degree, InteractionDataset) else np.asarray(ds_or_degree)
    degree = degree.astype(np.int64)
    cold = degree < threshold
    weights = np.ones(len(degree), dtype=np.float64)
    amplified = cold & (degree > 0)
    weights[amplified] = 1.0 / np.log2(degree[amplified] + 2.0)
    return RarityProfile(threshold, cold, weights)


# -- interactions -----------------------------------------------------------


def _id_key(x: str):
    # numeric IDs sort numerically, everything else lexically
    return (0, int(x), "") if x.isdigit() else (1, 0, x)


def read_interaction_pairs(path) -> list[tuple[str, str]]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split("\t")
    if header != ["user_id", "item_id"]:
        raise ParseError("expected header 'user_id<TAB>item_id'", 1)
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ParseError(f"expected two tab-separated fields, got {line!r}", lineno)
        pairs.append((parts[0], parts[1]))
    if not pairs:
        raise DataError(f"{path}: no interactions")
    return pairs


def split_per_user(
    user_items: list[list[int]], ratios=DEFAULT_SPLIT, seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random per-user split. Users with fewer than three interactions stay in train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    out: tuple[list, list, list] = ([], [], [])
    for u, items in enumerate(user_items):
        items = np.array(sorted(items), dtype=np.int64)
        n = len(items)
        if n == 0:
            continue
        if n < 3:
            out[0].extend((u, i) for i in items.tolist())
            continue
        items = items[rng.permutation(n)]
        n_valid = max(1, math.floor(n * ratios[1] + 0.5)) if ratios[1] > 0 else 0
        n_test = max(1, math.floor(n * ratios[2] + 0.5)) if ratios[2] > 0 else 0
        n_train = n - n_valid - n_test
        if n_train < 1:
            n_valid, n_train = n_valid - 1, n_train + 1
        parts = np.split(items, [n_train, n_train + n_valid])
        for bucket, part in zip(out, parts):
            bucket.extend((u, i) for i in sorted(part.tolist()))
    return tuple(np.array(b, dtype=np.int64).reshape(-1, 2) for b in out)


def load_interactions(path, ratios=DEFAULT_SPLIT, seed: int = 0) -> InteractionDataset:
    pairs = read_interaction_pairs(path)
    users = sorted({u for u, _ in pairs}, key=_id_key)
    items = sorted({i for _, i in pairs}, key=_id_key)
    uidx = {u: k for k, u in enumerate(users)}
    iidx = {i: k for k, i in enumerate(items)}
    user_items: list[set[int]] = [set() for _ in users]
    for u, i in pairs:
        user_items[uidx[u]].add(iidx[i])
    train, valid, test = split_per_user([list(s) for s in user_items], ratios, seed)
    return InteractionDataset(len(users), len(items), train, valid, test, tuple(users), tuple(items))


# -- features ---------------------------------------------------------------


def write_features(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m).tobytes())


def read_feature_matrix(path, item_index: dict[str, int] | None = None) -> np.ndarray:
    """Read a feature file (MTF1 binary or CSV). CSV rows are placed by ``item_index``
    when given, otherwise their ``item_id`` must already be the row index."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == FEATURE_MAGIC:
        if len(raw) < 12:
            raise DataError(f"{path}: truncated header")
        n, d = struct.unpack("<II", raw[4:12])
        if len(raw) != 12 + 4 * n * d:
            raise DataError(f"{path}: expected {n}x{d} float32 payload, got {len(raw) - 12} bytes")
        return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)
    text = raw.decode("utf-8").splitlines()
    rows = list(csv.reader(text))
    if not rows:
        raise DataError(f"{path}: empty feature file")
    header = rows[0]
    d = len(header) - 1
    if header[0] != "item_id" or header[1:] != [f"f{k}" for k in range(d)]:
        raise ParseError("expected CSV header item_id,f0,...,f{d-1}", 1)
    body = rows[1:]
    out = np.full((len(body), d), np.nan)
    seen = set()
    for lineno, row in enumerate(body, start=2):
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields", lineno)
        key = row[0]
        if item_index is not None:
            if key not in item_index:
                raise AlignmentError(f"line {lineno}: item {key!r} not in the item map")
            idx = item_index[key]
        else:
            try:
                idx = int(key)
            except ValueError:
                raise ParseError(f"item_id {key!r} is not an index and no item map was given", lineno) from None
        if not 0 <= idx < len(body) or idx in seen:
            raise AlignmentError(f"line {lineno}: item index {idx} out of range or duplicated")
        seen.add(idx)
        try:
            out[idx] = [float(x) for x in row[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    return out


def load_features(path, expected_items: int, modality: str = "visual", item_index=None) -> ItemFeatureTable:
    matrix = read_feature_matrix(path, item_index)
    if matrix.shape[0] != expected_items:
        raise AlignmentError(f"{path}: {matrix.shape[0]} feature rows for {expected_items} items")
    return ItemFeatureTable(modality, matrix)


# -- dataset directories ----------------------------------------------------


def _write_edges(path: Path, edges: np.ndarray) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("user\titem\n")
        for u, i in edges.tolist():
            fh.write(f"{u}\t{i}\n")


def _read_edges(path: Path) -> np.ndarray:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "user\titem":
        raise ParseError(f"{path}: expected header 'user<TAB>item'", 1)
    edges = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            u, i = line.split("\t")
            edges.append((int(u), int(i)))
        except ValueError:
            raise ParseError(f"{path}: bad edge {line!r}", lineno) from None
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def write_id_map(path, ids) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("original_id\tindex\n")
        for k, x in enumerate(ids):
            fh.write(f"{x}\t{k}\n")


def read_id_map(path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "original_id\tindex":
        raise ParseError(f"{path}: expected header 'original_id<TAB>index'", 1)
    ids: dict[int, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].isdigit():
            raise ParseError(f"{path}: bad map line {line!r}", lineno)
        ids[int(parts[1])] = parts[0]
    if sorted(ids) != list(range(len(ids))):
        raise DataError(f"{path}: indices are not contiguous")
    return tuple(ids[k] for k in range(len(ids)))


def save_dataset(out_dir, ds: InteractionDataset, features: dict[str, ItemFeatureTable]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        _write_edges(out / f"{name}.tsv", getattr(ds, name))
    write_id_map(out / "user_map.tsv", ds.user_ids)
    write_id_map(out / "item_map.tsv", ds.item_ids)
    for modality, table in features.items():
        write_features(out / f"{modality}.mtf", table.matrix)
    return out


def load_dataset(data_dir) -> tuple[InteractionDataset, dict[str, ItemFeatureTable]]:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"{d}: not a dataset directory")
    user_ids = read_id_map(d / "user_map.tsv")
    item_ids = read_id_map(d / "item_map.tsv")
    splits = [_read_edges(d / f"{n}.tsv") for n in ("train", "valid", "test")]
    ds = InteractionDataset(len(user_ids), len(item_ids), *splits, user_ids, item_ids)
    features = {}
    for modality in MODALITIES:
        path = d / f"{modality}.mtf"
        if path.exists():
            features[modality] = load_features(path, ds.n_items, modality)
    return ds, features


def ingest(interactions, visual, textual, out_dir, seed: int = 0, ratios=DEFAULT_SPLIT) -> Path:
    ds = load_interactions(interactions, ratios, seed)
    index = {x: k for k, x in enumerate(ds.item_ids)}
    features = {}
    for modality, path in (("visual", visual), ("textual", textual)):
        if path is None:
            continue
        raw = Path(path).read_bytes()[:4]
        # binary rows are positional in original-id order, CSV rows are keyed by item_id
        features[modality] = load_features(path, ds.n_items, modality, None if raw == FEATURE_MAGIC else index)
    return save_dataset(out_dir, ds, features)


# -- synthetic generator ----------------------------------------------------


@dataclass
class SynthConfig:
    """Latent-factor generator with compositional item factors.

    Each item's latent vector is a sum of ``n_attributes`` prototypes, one drawn
    from each attribute vocabulary, plus a small item-specific jitter. Features are
    noisy linear views of the latent vectors, or with ``feature_gain > 0`` noisy
    views of ``tanh(gain * latent @ H) @ P`` for random ``H`` and ``P``.
    """

    n_users: int = 500
    n_items: int = 300
    latent_dim: int = 16
    n_attributes: int = 3
    vocab_size: int = 8
    item_jitter: float = 0.1
    popularity_skew: float = 0.5
    affinity: float = 2.0
    interactions_per_user: int = 20
    cold_fraction: float = 0.2
    threshold: int = 10
    visual_dim: int = 48
    textual_dim: int = 32
    feature_noise: float = 0.5
    feature_gain: float = 0.0
    feature_hidden: int = 64
    unit_scale: bool = False
    warm_floor: bool = True
    split: tuple[float, float, float] = DEFAULT_SPLIT

    @classmethod
    def benchmark(cls) -> SynthConfig:
        """The cold-start benchmark: 2,000 users, 1,200 items, 20% cold items.

        Items come from one 64-word attribute vocabulary and the feature views are
        a saturating nonlinear map of the latent factors, so item content carries
        discrete, clustered signal rather than a plain linear projection.
        """
        return cls(
            n_users=2000,
            n_items=1200,
            cold_fraction=0.2,
            n_attributes=1,
            vocab_size=64,
            feature_gain=5.0,
            unit_scale=True,
        )

    def replace(self, **changes) -> SynthConfig:
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        if self.n_users < 1 or self.n_items < 2:
            raise ConfigError("need at least one user and two items")
        if not 0.0 <= self.cold_fraction < 1.0:
            raise ConfigError("cold fraction must be in [0, 1): at least one warm item is required")
        n_cold = int(round(self.cold_fraction * self.n_items))
        if n_cold >= self.n_items:
            raise ConfigError("more cold items than items")
        if self.interactions_per_user < 1 or self.interactions_per_user > self.n_items - n_cold:
            raise ConfigError("interactions per user must fit within the warm catalogue")
        if n_cold and self.threshold < 2:
            raise ConfigError("cold items need threshold >= 2 to receive any interaction")
        if n_cold and self.n_users < self.threshold - 1:
            raise ConfigError("not enough users to populate cold items")
        if self.feature_noise < 0 or self.popularity_skew < 0 or self.feature_gain < 0:
            raise ConfigError("noise level and skew exponent must be non-negative")


def _gumbel_top(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample k distinct indices without replacement from softmax(logits)."""
    keys = logits + rng.gumbel(size=logits.shape)
    return np.argsort(-keys, kind="stable")[:k]


def synthesize(cfg: SynthConfig, seed: int = 0) -> tuple[InteractionDataset, ItemFeatureTable, ItemFeatureTable]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    k = cfg.latent_dim
    protos = rng.normal(0.0, 1.0 / math.sqrt(k), size=(cfg.n_attributes, cfg.vocab_size, k))
    attrs = rng.integers(0, cfg.vocab_size, size=(cfg.n_items, cfg.n_attributes))
    item_f = protos[np.arange(cfg.n_attributes), attrs].sum(axis=1)
    item_f += rng.normal(0.0, cfg.item_jitter / math.sqrt(k), size=item_f.shape)
    user_f = rng.normal(0.0, 1.0, size=(cfg.n_users, k)) / math.sqrt(k)

    log_pop = -cfg.popularity_skew * np.log(rng.permutation(cfg.n_items) + 1.0)
    affinity = cfg.affinity * (user_f @ item_f.T) * math.sqrt(k)

    n_cold = int(round(cfg.cold_fraction * cfg.n_items))
    cold_items = np.sort(rng.choice(cfg.n_items, size=n_cold, replace=False)) if n_cold else np.array([], dtype=np.int64)
    warm_mask = np.ones(cfg.n_items, dtype=bool)
    warm_mask[cold_items] = False
    warm_items = np.flatnonzero(warm_mask)

    user_items: list[list[int]] = []
    for u in range(cfg.n_users):
        logits = log_pop[warm_items] + affinity[u, warm_items]
        user_items.append(warm_items[_gumbel_top(logits, cfg.interactions_per_user, rng)].tolist())
    if cfg.warm_floor and n_cold:
        # top up rarely drawn warm items so they stay warm after the split
        floor = math.ceil(cfg.threshold / max(cfg.split[0], 1e-9)) + 2
        degree = np.bincount(np.concatenate([np.asarray(x) for x in user_items]), minlength=cfg.n_items)
        for i in warm_items[degree[warm_items] < floor].tolist():
            have = np.array([i in set(x) for x in user_items])
            logits = np.where(have, -np.inf, affinity[:, i])
            need = min(floor - int(degree[i]), int((~have).sum()))
            for u in _gumbel_top(logits, need, rng).tolist():
                user_items[u].append(i)
    # cold items: total degree in [1, threshold - 1], so train degree is always below threshold
    for i in cold_items.tolist():
        target = int(rng.integers(1, cfg.threshold))
        for u in _gumbel_top(affinity[:, i], target, rng).tolist():
            user_items[u].append(i)

    train, valid, test = split_per_user(user_items, cfg.split, seed)
    ds = InteractionDataset(cfg.n_users, cfg.n_items, train, valid, test)

    views = []
    for modality, dim in (("visual", cfg.visual_dim), ("textual", cfg.textual_dim)):
        if cfg.feature_gain > 0:
            # random tanh feature map: informative about the item, but not linearly
            hidden = rng.normal(0.0, 1.0, size=(k, cfg.feature_hidden))
            proj = rng.normal(0.0, 1.0 / math.sqrt(cfg.feature_hidden), size=(cfg.feature_hidden, dim))
            clean = np.tanh(cfg.feature_gain * (item_f @ hidden)) @ proj
        else:
            proj = rng.normal(0.0, 1.0, size=(k, dim))
            clean = item_f @ proj
        noisy = clean + cfg.feature_noise * rng.normal(0.0, 1.0, size=clean.shape)
        if cfg.unit_scale:
            noisy = noisy / np.linalg.norm(noisy, axis=1).mean()
        views.append(ItemFeatureTable(modality, noisy))
    return ds, views[0], views[1]
