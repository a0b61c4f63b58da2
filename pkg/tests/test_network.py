import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supplybp.data import FIXTURES, fixture_path
from supplybp.errors import ParseError, ValidationError
from supplybp.network import (
    LinkRecord,
    Network,
    NetworkKind,
    VertexRecord,
    dump_network,
    load_network,
    network_from_dict,
    network_loop_count,
    network_to_dict,
)


def _write(tmp_path, doc):
    p = tmp_path / "net.json"
    p.write_text(json.dumps(doc))
    return p


def _path_doc():
    return {
        "kind": "power_dc",
        "vertices": [{"id": "1"}, {"id": "2"}, {"id": "3"}],
        "links": [{"from": "1", "to": "2", "coeff": 1.0}, {"from": "2", "to": "3", "coeff": 2.0}],
    }


def test_path_fixture(path3):
    assert (path3.n_vertices, path3.n_links) == (3, 2)
    assert network_loop_count(path3) == 0


def test_ieee300_fixture(ieee300):
    assert (ieee300.n_vertices, ieee300.n_links) == (300, 411)
    assert network_loop_count(ieee300) == 112
    assert ieee300.kind is NetworkKind.POWER_DC
    # parallel circuits are distinct links
    assert sum(ln.circuit != "1" for ln in ieee300.links) == 2


def test_gas_fixtures(gaslib40, gaslib134):
    assert (gaslib40.n_vertices, gaslib40.n_links) == (40, 45)
    assert network_loop_count(gaslib40) == 6
    assert network_loop_count(gaslib134) == 0
    assert [gaslib134.vertices[i].id for i in gaslib134.anchors] == ["node_1", "node_20", "node_80"]
    assert [gaslib40.vertices[i].id for i in gaslib40.anchors] == ["source_1"]
    assert set(gaslib40.coeffs) == {500.0}
    assert set(gaslib134.coeffs) == {50.0}


@pytest.mark.parametrize("name", FIXTURES)
def test_load_is_deterministic(name):
    assert load_network(fixture_path(name)) == load_network(fixture_path(name))


def test_round_trip(tmp_path, ieee300):
    p = tmp_path / "copy.json"
    dump_network(ieee300, p)
    assert load_network(p) == ieee300
    assert network_from_dict(network_to_dict(ieee300)) == ieee300


def test_endpoints_are_ordered_by_index():
    net = network_from_dict({
        "kind": "power_dc",
        "vertices": [{"id": "z"}, {"id": "a"}],
        "links": [{"from": "a", "to": "z", "coeff": 1.0}],
    })
    np.testing.assert_array_equal(net.endpoints, [[0, 1]])
    assert net.incident == (((0, 1),), ((0, 0),))


@pytest.mark.parametrize("mutate, error", [
    (lambda d: d["links"].append({"from": "1", "to": "2", "coeff": 3.0}), ValidationError),
    (lambda d: d["links"].append({"from": "2", "to": "1", "coeff": 3.0}), ValidationError),
    (lambda d: d["links"].append({"from": "1", "to": "1", "coeff": 3.0}), ValidationError),
    (lambda d: d["links"].append({"from": "1", "to": "9", "coeff": 3.0}), ValidationError),
    (lambda d: d["links"][0].update(coeff=0.0), ValidationError),
    (lambda d: d["links"][0].update(coeff=-1.0), ValidationError),
    (lambda d: d["vertices"].append({"id": "1"}), ValidationError),
    (lambda d: d["vertices"].append({"id": "4"}), ValidationError),  # disconnected
    (lambda d: d.update(kind="water"), ParseError),
    (lambda d: d.update(extra=1), ParseError),
    (lambda d: d["links"][0].update(weight=1), ParseError),
    (lambda d: d["links"][0].update(coeff="x"), ParseError),
    (lambda d: d["vertices"][0].update(injection="x"), ParseError),
    (lambda d: d.pop("links"), ParseError),
])
def test_invalid_files(tmp_path, mutate, error):
    doc = _path_doc()
    mutate(doc)
    with pytest.raises(error):
        load_network(_write(tmp_path, doc))


def test_parallel_circuits_are_allowed(tmp_path):
    doc = _path_doc()
    doc["links"].append({"from": "1", "to": "2", "coeff": 3.0, "circuit": "2"})
    net = load_network(_write(tmp_path, doc))
    assert net.n_links == 3
    assert network_loop_count(net) == 1


def test_unreadable_files(tmp_path):
    with pytest.raises(ParseError):
        load_network(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_network(p)


def test_gas_network_needs_anchor():
    vs = [VertexRecord("a", 1.0), VertexRecord("b", -1.0)]
    with pytest.raises(ValidationError):
        Network.create(vs, [LinkRecord("a", "b", 50.0)], NetworkKind.GAS)


def _cycle_rank_by_spanning_tree(net):
    # independent count: links not used by a BFS spanning tree
    seen = {0}
    frontier = [0]
    tree_links = set()
    while frontier:
        nxt = []
        for i in frontier:
            for l, j in net.incident[i]:
                if j not in seen:
                    seen.add(j)
                    tree_links.add(l)
                    nxt.append(j)
        frontier = nxt
    return net.n_links - len(tree_links)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(0, 40), st.randoms(use_true_random=False))
def test_loop_count_matches_cycle_rank(n, extra, rnd):
    ids = [str(i) for i in range(n)]
    links = {}
    for i in range(1, n):
        links[(rnd.randrange(i), i)] = 1.0
    for _ in range(extra):
        a, b = rnd.randrange(n), rnd.randrange(n)
        if a != b:
            links[(min(a, b), max(a, b))] = 1.0
    net = Network.create([VertexRecord(x) for x in ids],
                         [LinkRecord(ids[a], ids[b], c) for (a, b), c in links.items()], NetworkKind.POWER_DC)
    assert network_loop_count(net) == _cycle_rank_by_spanning_tree(net)
