import numpy as np
import pytest

from motorec import numerics as nx
from motorec.data import InteractionDataset, ItemFeatureTable


def rel_error(a, b, floor=1e-10) -> float:
    """Norm-wise relative error between two arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build, params: dict, h=1e-5) -> dict[str, float]:
    """Compare autodiff gradients of ``build()`` (a 1x1 Tensor) with central
    differences for every tensor in ``params``; returns name -> relative error.

    Stop-gradient values are frozen at the evaluation point, so straight-through
    paths are checked against the surrogate they differentiate exactly.
    """
    for p in params.values():
        p.zero_grad()
    with nx.frozen_stop_gradients() as tape:
        grads = nx.backward(build())
        analytic = {k: grads.get(k, np.zeros_like(p.value)).copy() for k, p in params.items()}

        def f():
            tape.replay()
            return build().item()

        errors = {}
        for name, p in params.items():
            numeric = nx.finite_difference_grad(f, p.value, h)
            errors[name] = rel_error(analytic[name], numeric)
    return errors


def gradcheck_terms(build_terms, params: dict, h=1e-5) -> dict[str, dict[str, float]]:
    """Like ``gradcheck`` for several scalar terms of one forward pass.

    ``build_terms()`` returns ``{term: 1x1 Tensor}``; every term is differentiated
    analytically on its own, while finite differences share one sweep over the
    parameters. Returns term -> parameter -> relative error.
    """
    with nx.frozen_stop_gradients() as tape:
        names = list(build_terms())
        analytic = {}
        for term in names:
            for p in params.values():
                p.zero_grad()
            tape.replay()
            grads = nx.backward(build_terms()[term])
            analytic[term] = {k: grads.get(k, np.zeros_like(p.value)).copy() for k, p in params.items()}

        def values():
            tape.replay()
            out = build_terms()
            return np.array([out[t].item() for t in names])

        numeric = {t: {} for t in names}
        for pname, p in params.items():
            arr = p.value
            cols = np.zeros((len(names),) + arr.shape)
            for idx in np.ndindex(*arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                fp = values()
                arr[idx] = orig - h
                fm = values()
                arr[idx] = orig
                cols[(slice(None),) + idx] = (fp - fm) / (2.0 * h)
            for k, t in enumerate(names):
                numeric[t][pname] = cols[k]
    return {t: {k: rel_error(analytic[t][k], numeric[t][k]) for k in params} for t in names}


def tiny_problem(n_users=6, n_items=8, seed=0, dims=(5, 3)):
    """Small random interaction graph with both feature views. Every user has at
    least one train edge and item 0 is left without any."""
    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for u in range(n_users):
        items = rng.permutation(np.arange(1, n_items))[:4]
        train += [(u, int(i)) for i in items[:2]]
        valid.append((u, int(items[2])))
        test.append((u, int(items[3])))
    arr = lambda e: np.array(e, dtype=np.int64).reshape(-1, 2)  # noqa: E731
    ds = InteractionDataset(n_users, n_items, arr(train), arr(valid), arr(test))
    features = {
        "visual": ItemFeatureTable("visual", rng.normal(size=(n_items, dims[0]))),
        "textual": ItemFeatureTable("textual", rng.normal(size=(n_items, dims[1]))),
    }
    return ds, features


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
