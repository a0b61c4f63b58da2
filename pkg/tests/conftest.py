import logging

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from supplybp.data import fixture_path
from supplybp.network import LinkRecord, Network, NetworkKind, VertexRecord, load_network


@pytest.fixture(autouse=True)
def _quiet_flow_drop_warning(caplog):
    # Ff on SE problems always drops the angle factors; the warning is expected.
    caplog.set_level(logging.ERROR, logger="supplybp.factor_graph")


def random_parents(rng, n):
    return [int(rng.integers(0, k)) for k in range(1, n)]


def tree_diameter(n, parents):
    if n < 2:
        return 0
    adj = sp.coo_matrix((np.ones(n - 1), (np.arange(1, n), parents)), shape=(n, n)).tocsr()
    return int(shortest_path(adj, directed=False, unweighted=True).max())


def random_power_tree(rng, n, shuffle_ids=True):
    """Tree power network with truth angles; ids shuffled so index order differs from tree order."""
    parents = random_parents(rng, n)
    perm = rng.permutation(n) if shuffle_ids else np.arange(n)
    ids = [f"b{perm[i]:03d}" for i in range(n)]
    theta = rng.normal(0.0, 0.1, n)
    net = Network.create(
        [VertexRecord(ids[i], None, float(theta[i])) for i in range(n)],
        [LinkRecord(ids[i], ids[parents[i - 1]], float(rng.uniform(1.0, 20.0))) for i in range(1, n)],
        NetworkKind.POWER_DC,
    )
    return net, tree_diameter(n, parents)


def random_gas_tree(rng, n, anchor_value=3600.0, coeff_range=(50.0, 500.0)):
    """Tree gas network: vertex 0 is the anchor (unknown injection), all others consume."""
    parents = random_parents(rng, n)
    ids = [f"n{i:03d}" for i in range(n)]
    g = -rng.uniform(0.5, 5.0, n)
    vertices = [VertexRecord(ids[0], None, anchor_value)]
    vertices += [VertexRecord(ids[i], float(g[i]), None) for i in range(1, n)]
    links = [LinkRecord(ids[i], ids[parents[i - 1]], float(rng.uniform(*coeff_range))) for i in range(1, n)]
    return Network.create(vertices, links, NetworkKind.GAS)


@pytest.fixture(scope="session")
def ieee300():
    return load_network(fixture_path("ieee300"))


@pytest.fixture(scope="session")
def gaslib40():
    return load_network(fixture_path("gaslib40"))


@pytest.fixture(scope="session")
def gaslib134():
    return load_network(fixture_path("gaslib134"))


@pytest.fixture(scope="session")
def path3():
    return load_network(fixture_path("path3"))


@pytest.fixture(scope="session")
def star4():
    return load_network(fixture_path("star4"))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
