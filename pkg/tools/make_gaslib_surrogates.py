"""Generate the GasLib-40 / GasLib-134 surrogate fixtures.

Offline helper, not part of the library.  The original GasLib XML files are
not redistributed here; these surrogates reproduce the structural statistics
the experiments depend on and are fully deterministic (fixed seeds)::

    GasLib-40 surrogate : 40 vertices, 45 pipes, 6 loops, a_ij = 500,
                          pressure anchor 'source_1'
    GasLib-134 surrogate: 134 vertices, 133 pipes (tree), longest path 55,
                          a_ij = 50, anchors 'node_1', 'node_20', 'node_80'

Units: vertex_value is the squared pressure v = p^2 in bar^2; injections are
in the flow unit implied by Q = a sgn(dv) |dv|^0.5 with a as given (positive =
gas fed into the network).  Ground-truth pressures lie in 40..60 bar and every
non-anchor injection is the exact continuity balance of that state, so the
fixtures have a known solution.

    python tools/make_gaslib_surrogates.py src/supplybp/data
"""

import json
import sys
from collections import deque
from pathlib import Path

import numpy as np


def _flow(a, vi, vj):
    d = vi - vj
    return a * np.sign(d) * np.sqrt(abs(d))


def _distances(n, edges, root):
    adj = [[] for _ in range(n)]
    for u, w in edges:
        adj[u].append(w)
        adj[w].append(u)
    dist = [-1] * n
    dist[root] = 0
    q = deque([root])
    while q:
        u = q.popleft()
        for w in adj[u]:
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                q.append(w)
    return dist


def _document(ids, edges, a, v_true, anchors):
    inj = np.zeros(len(ids))
    for u, w in edges:
        q = _flow(a, v_true[u], v_true[w])
        inj[u] += q
        inj[w] -= q
    vertices = []
    for k, name in enumerate(ids):
        if k in anchors:
            vertices.append({"id": name, "injection": None, "vertex_value": float(v_true[k])})
        else:
            vertices.append({"id": name, "injection": float(inj[k]), "vertex_value": None})
    links = [{"from": ids[u], "to": ids[w], "coeff": float(a)} for u, w in edges]
    return {"kind": "gas", "vertices": vertices, "links": links}


def gaslib40(seed=40):
    rng = np.random.default_rng(seed)
    ids = ([f"source_{k}" for k in range(1, 4)]
           + [f"sink_{k}" for k in range(1, 30)]
           + [f"node_{k}" for k in range(1, 9)])
    n = len(ids)
    edges = set()
    for k in range(1, n):
        edges.add((int(rng.integers(max(0, k - 6), k)), k))
    while len(edges) < 45:
        u, w = sorted(rng.choice(n, size=2, replace=False).tolist())
        if (u, w) not in edges and (w, u) not in edges:
            edges.add((u, w))
    edges = sorted(edges)
    dist = _distances(n, edges, 0)
    while True:
        p = 60.0 - 1.6 * np.asarray(dist, float) + rng.uniform(-0.6, 0.6, n)
        p[0] = 60.0
        v = p ** 2
        if min(abs(v[u] - v[w]) for u, w in edges) > 10.0 and p.min() > 40.0:
            break
    return _document(ids, edges, 500.0, v, {0})


def gaslib134(seed=134):
    rng = np.random.default_rng(seed)
    n, spine = 134, 56
    parent = {k: k - 1 for k in range(1, spine)}
    depth_room = {k: min(k, spine - 1 - k) for k in range(spine)}
    nxt = spine
    while nxt < n:
        base = int(rng.integers(1, spine - 1))
        room = depth_room[base]
        length = int(min(room, rng.integers(1, 4), n - nxt))
        if length <= 0:
            continue
        prev = base
        for _ in range(length):
            parent[nxt] = prev
            prev = nxt
            nxt += 1
    edges = sorted((parent[k], k) for k in range(1, n))
    # demand pattern: roughly half the vertices are exits, the rest junctions
    demand = np.where(rng.random(n) < 0.45, rng.uniform(0.5, 1.5, n), 0.0)
    demand[0] = 0.0
    children = [[] for _ in range(n)]
    for u, w in edges:
        children[u].append(w)
    order = _distances(n, edges, 0)
    by_depth = sorted(range(n), key=lambda k: -order[k])
    q_sub = demand.copy()
    for k in by_depth:
        for c in children[k]:
            q_sub[k] += q_sub[c]
    a = 50.0
    # scale demands so that the lowest pressure lands near 42 bar
    drop = np.zeros(n)
    for k in sorted(range(n), key=lambda k: order[k]):
        for c in children[k]:
            drop[c] = drop[k] + (q_sub[c] / a) ** 2
    scale = np.sqrt((60.0 ** 2 - 42.0 ** 2) / drop.max())
    v = 60.0 ** 2 - drop * scale ** 2
    ids = [f"node_{k + 1}" for k in range(n)]
    anchors = {ids.index("node_1"), ids.index("node_20"), ids.index("node_80")}
    return _document(ids, edges, a, v, anchors)


if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else ".")
    for name, doc in (("gaslib40.json", gaslib40()), ("gaslib134.json", gaslib134())):
        with open(out / name, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
