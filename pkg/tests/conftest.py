import numpy as np
import pytest

from higmae import tensor as T
from higmae.config import ModelConfig
from higmae.datasets import erdos_renyi, path
from higmae.graph import Graph, symmetric_adjacency
from higmae.hierarchy import build_hierarchy
from higmae.model import FiCoModel


def central_difference(f, values: np.ndarray, h: float) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``values`` (perturbed in place)."""
    grad = np.zeros_like(values, dtype=np.float64)
    flat = values.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f()
        flat[k] = orig - h
        down = f()
        flat[k] = orig
        grad.reshape(-1)[k] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def float64():
    with T.precision("float64"):
        yield


def six_node_graph(d0: int = 4, seed: int = 3) -> Graph:
    """A fixed 6-node graph: a triangle joined to a 3-path, random features."""
    rng = np.random.default_rng(seed)
    edges = [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5)]
    return Graph(symmetric_adjacency(6, edges), rng.normal(size=(6, d0)), label=0)


@pytest.fixture
def six_node():
    return six_node_graph()


def small_model(d0, depth=2, dtype=np.float64, seed=0, **overrides):
    cfg = ModelConfig(d=8, **overrides)
    return FiCoModel(d0, depth, cfg, seed=seed, dtype=dtype)


def random_graph(rng, n_low=8, n_high=64, p=None):
    n = int(rng.integers(n_low, n_high + 1))
    p = p if p is not None else min(1.0, 3.0 / n)
    return erdos_renyi(n, p, rng)


@pytest.fixture
def p4_hierarchy():
    return build_hierarchy(path(4), 2, 0.5, seed=0)


# criterion number -> (verdict, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}: {title}" + (f" ({detail})" if detail else ""))
