"""Full-catalogue top-N ranking, Recall@N / NDCG@N, and overall vs cold-start reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionDataset, rarity_profile

CUTOFFS = (10, 20)


@dataclass
class RankingResult:
    n: int
    lists: dict[int, np.ndarray]  # user -> recommended item indices, best first


def rank_topn(
    users: np.ndarray,
    items: np.ndarray,
    ds: InteractionDataset,
    n: int = 20,
    user_subset=None,
    candidate_mask: np.ndarray | None = None,
    chunk: int = 512,
) -> RankingResult:
    """Exact top-n by dot product with the user's train items masked out.

    Ties go to the lower item index. ``candidate_mask`` (bool per item) restricts
    the catalogue, e.g. to cold items only.
    """
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    if user_subset is None:
        user_subset = np.unique(np.concatenate([ds.test[:, 0], ds.valid[:, 0]]))
    user_subset = np.asarray(user_subset, dtype=np.int64)
    train = ds.train
    order = np.argsort(train[:, 0], kind="stable")
    tu, ti = train[order, 0], train[order, 1]
    starts = np.searchsorted(tu, np.arange(ds.n_users + 1))
    lists: dict[int, np.ndarray] = {}
    for lo in range(0, len(user_subset), chunk):
        block = user_subset[lo : lo + chunk]
        scores = users[block] @ items.T
        for row, u in enumerate(block.tolist()):
            s = scores[row]
            allowed = np.ones(ds.n_items, dtype=bool)
            allowed[ti[starts[u] : starts[u + 1]]] = False
            if candidate_mask is not None:
                allowed &= candidate_mask
            cand = np.flatnonzero(allowed)
            k = min(n, len(cand))
            if k == 0:
                lists[u] = np.zeros(0, dtype=np.int64)
                continue
            # lexsort: primary key descending score, secondary ascending index
            cs = s[cand]
            if k < len(cand):
                kth = np.partition(-cs, k - 1)[k - 1]
                keep = -cs <= kth
                cand, cs = cand[keep], cs[keep]
            top = np.lexsort((cand, -cs))[:k]
            lists[u] = cand[top]
    return RankingResult(n, lists)


def _relevant(edges: np.ndarray, keep_item=None) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for u, i in edges.tolist():
        if keep_item is None or keep_item[i]:
            out.setdefault(u, set()).add(i)
    return out


def recall_per_user(result: RankingResult, relevant: dict[int, set[int]], n: int) -> dict[int, float]:
    out = {}
    for u, rel in relevant.items():
        if not rel:
            continue
        top = result.lists.get(u, np.zeros(0, dtype=np.int64))[:n]
        hits = sum(1 for i in top.tolist() if i in rel)
        out[u] = hits / len(rel)
    return out


def ndcg_per_user(result: RankingResult, relevant: dict[int, set[int]], n: int) -> dict[int, float]:
    # plain Python floats, summed in rank order, so results are reproducible bit for bit
    discounts = [1.0 / math.log2(r + 2) for r in range(n)]
    out = {}
    for u, rel in relevant.items():
        if not rel:
            continue
        top = result.lists.get(u, np.zeros(0, dtype=np.int64))[:n]
        dcg = sum(discounts[r] for r, i in enumerate(top.tolist()) if i in rel)
        idcg = sum(discounts[: min(n, len(rel))])
        out[u] = dcg / idcg
    return out


def _mean(values: dict[int, float]) -> float:
    if not values:
        return float("nan")
    return float(np.mean([values[u] for u in sorted(values)]))


def recall_at_n(result: RankingResult, test_edges, n: int | None = None) -> float:
    n = result.n if n is None else n
    return _mean(recall_per_user(result, _relevant(np.asarray(test_edges).reshape(-1, 2)), n))


def ndcg_at_n(result: RankingResult, test_edges, n: int | None = None) -> float:
    n = result.n if n is None else n
    return _mean(ndcg_per_user(result, _relevant(np.asarray(test_edges).reshape(-1, 2)), n))


@dataclass
class MetricReport:
    scenario: str
    metrics: dict[str, float] = field(default_factory=dict)
    n_users: int = 0

    @property
    def empty(self) -> bool:
        return self.n_users == 0

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]


def _report(scenario: str, result: RankingResult, relevant: dict[int, set[int]], cutoffs) -> MetricReport:
    rel = {u: s for u, s in relevant.items() if s}
    metrics = {}
    for n in cutoffs:
        metrics[f"R@{n}"] = _mean(recall_per_user(result, rel, n))
        metrics[f"N@{n}"] = _mean(ndcg_per_user(result, rel, n))
    return MetricReport(scenario, metrics, len(rel))


def stratified_eval(
    users: np.ndarray,
    items: np.ndarray,
    ds: InteractionDataset,
    threshold: int = 10,
    split: str = "test",
    cutoffs=CUTOFFS,
    cold_only_rank: bool = False,
) -> tuple[MetricReport, MetricReport]:
    """Overall and cold-start reports. Cold items are those with train degree below
    ``threshold``; the cold report keeps only cold items in each user's relevant set."""
    edges = getattr(ds, split)
    cold = rarity_profile(ds, threshold).cold
    n_max = max(cutoffs)
    eval_users = np.unique(edges[:, 0])
    ranking = rank_topn(users, items, ds, n_max, eval_users)
    overall = _report("overall", ranking, _relevant(edges), cutoffs)
    cold_rel = _relevant(edges, cold)
    cold_rank = ranking
    if cold_only_rank and cold_rel:
        cold_rank = rank_topn(users, items, ds, n_max, np.array(sorted(cold_rel)), candidate_mask=cold)
    return overall, _report("cold-start", cold_rank, cold_rel, cutoffs)


def write_reports(out_dir, reports) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("scenario\tmetric\tN\tvalue\n")
        for rep in reports:
            for key, value in rep.metrics.items():
                metric, n = key.split("@")
                fh.write(f"{rep.scenario}\t{'recall' if metric == 'R' else 'ndcg'}\t{n}\t{value:.6f}\n")
    with (out / "cold_vs_overall.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        keys = list(reports[0].metrics)
        fh.write("metric\t" + "\t".join(r.scenario for r in reports) + "\n")
        for key in keys:
            fh.write(key + "\t" + "\t".join(f"{r.metrics.get(key, float('nan')):.6f}" for r in reports) + "\n")
