import numpy as np
import pytest

from gnneval.graphio import Graph, generate_sbm, random_split, rng_from_seed
from gnneval.zoo import ModelConfig, train_classifier

# acceptance outcomes, printed in the terminal summary
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {text}")


def small_graph(n=6, d=3, c=2, p=0.5, seed=0, labeled=True) -> Graph:
    """Random undirected graph with every node on at least one edge."""
    rng = rng_from_seed(seed, 99)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    edges = {(int(a), int(b)) for a, b in zip(iu[keep], ju[keep])}
    for u in range(n - 1):
        if not any(u in e for e in edges):
            edges.add((u, u + 1))
    labels = rng.integers(c, size=n) if labeled else np.full(n, -1)
    return Graph(rng.standard_normal((n, d)), labels, sorted(edges), c)


def sbm(seed=0, sizes=(100, 100), d=8, p_in=0.1, p_out=0.01, noise=1.0, means_seed=5) -> Graph:
    means = rng_from_seed(means_seed).standard_normal((len(sizes), d))
    return generate_sbm(seed, [(s, c) for c, s in enumerate(sizes)], p_in, p_out, means, noise)


@pytest.fixture(scope="session")
def sbm3():
    """300-node, 3-class SBM with a split and a GCN trained on it."""
    g = sbm(seed=3, sizes=(100, 100, 100), d=8, p_in=0.06, p_out=0.01, noise=1.2)
    split = random_split(g.num_nodes, 0.4, 0.1, 0)
    m = train_classifier(g, split, ModelConfig.for_arch("GCN", g.feature_dim, 3, seed=0))
    return g, split, m


def synthetic_discs(count=50, width=40, seed=0, model="m0", graph="g0", label=None):
    """Random labeled DiscGraphs with distinct labels spread over (0, 1)."""
    from gnneval.discrepancy import DiscGraph

    rng = rng_from_seed(seed, 42)
    labels = rng.permutation(np.linspace(0.05, 0.95, count))
    out = []
    for i in range(count):
        m = int(rng.integers(6, 16))
        iu, ju = np.triu_indices(m, 1)
        keep = rng.random(iu.size) < 0.3
        y = float(labels[i]) if label is None else label
        out.append(DiscGraph(rng.uniform(-1, 1, (m, width)), np.stack([iu[keep], ju[keep]], 1),
                             y, model, graph, f"synthetic:{i}"))
    return out


def permuted(d, seed):
    from gnneval.discrepancy import DiscGraph

    perm = rng_from_seed(seed, 5).permutation(d.num_nodes)
    inv = np.argsort(perm)
    return DiscGraph(d.attrs[perm], inv[d.edges], d.label, d.model_id, d.train_graph_id, d.provenance)


class criterion:
    """Context manager that records PASS/FAIL for an acceptance criterion."""

    def __init__(self, n: int, text: str):
        self.n, self.text = n, text

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        ACCEPTANCE[self.n] = (status, self.text if exc is None else f"{self.text} ({exc})")
        print(f"criterion {self.n}: {status}  {self.text}")
        return False
