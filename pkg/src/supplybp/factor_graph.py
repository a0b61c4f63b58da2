"""Linear-Gaussian problems on supply networks and their three factor graphs.

A :class:`ProblemSpec` attaches Gaussian factors to a network: per vertex an
injection-type factor over the vertex and its neighbours plus any number of
single-vertex ("vertex value") factors, and per link one factor over the two
endpoints.  From it we build

* ``Fv`` -- one variable node per vertex (the naive assignment),
* ``Fc`` -- one variable node per link holding copies of both endpoint
  variables, with the equality constraints folded into the vertex factors,
* ``Ff`` -- one flow variable per link, vertex factors over the incident flows.

Fc and Ff share the topology of the network plus one leaf factor per link.
Every builder also compiles the payload into flat arrays indexed by link
*incidences*: incidence ``2*l`` is link ``l`` seen from its lower endpoint,
``2*l + 1`` from its higher endpoint, so ``e ^ 1`` is the opposite end.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType

import numpy as np

from .errors import ValidationError
from .network import Network

log = logging.getLogger(__name__)

UNINFORMATIVE_VARIANCE = 1e8

__all__ = [
    "GraphKind",
    "LinearGaussianFactor",
    "ProblemSpec",
    "CompiledProblem",
    "FactorGraph",
    "build_fv",
    "build_fc",
    "build_ff",
    "build_graph",
    "fg_loop_count",
]


class GraphKind(enum.Enum):
    FV = "fv"
    FC = "fc"
    FF = "ff"


@dataclass(frozen=True)
class LinearGaussianFactor:
    """exp(-(z - sum_k c_k x_k)^2 / (2 sigma2)), coefficients keyed by vertex id."""

    z: float
    sigma2: float
    coeffs: MappingProxyType

    def __init__(self, z, sigma2, coeffs):
        if not (np.isfinite(sigma2) and sigma2 > 0):
            raise ValidationError(f"factor variance must be positive, got {sigma2}")
        if not coeffs:
            raise ValidationError("factor needs at least one coefficient")
        object.__setattr__(self, "z", float(z))
        object.__setattr__(self, "sigma2", float(sigma2))
        object.__setattr__(self, "coeffs", MappingProxyType({str(k): float(v) for k, v in coeffs.items()}))


@dataclass(frozen=True)
class CompiledProblem:
    """Flat-array form of a ProblemSpec (see module docstring for indexing)."""

    n: int
    ends: np.ndarray          # (L, 2) lower/higher vertex index
    inc_vertex: np.ndarray    # (E,) vertex owning incidence e
    inc_other: np.ndarray     # (E,) opposite vertex
    inc_link: np.ndarray      # (E,) link index
    value_prec: np.ndarray    # (n,) summed precision of vertex-value factors
    value_info: np.ndarray    # (n,) summed information of vertex-value factors
    inj_z: np.ndarray         # (n,)
    inj_s2: np.ndarray        # (n,)
    inj_cself: np.ndarray     # (n,) injection coefficient on the vertex itself
    inj_cinc: np.ndarray      # (E,) injection coefficient of inc_vertex on the far end, per link
    link_z: np.ndarray        # (L,)
    link_s2: np.ndarray       # (L,)
    link_c: np.ndarray        # (L, 2) coefficients on (lower, higher)
    flow_scale: np.ndarray    # (L,) B_l in f_l = B_l (x_lower - x_higher)

    @property
    def n_links(self) -> int:
        return len(self.ends)


@dataclass(frozen=True)
class ProblemSpec:
    """Gaussian factors over the vertex variables of a network.

    ``vertex_factors[i]`` lists the factors owned by vertex ``i``: at most one
    may reach beyond the vertex itself (the injection factor); the others
    must be single-vertex factors.  ``link_factors[l]`` is the factor of link
    ``l``.  ``flow_scale`` defaults to the link coefficients and defines the
    flow variable used by the flow-only graph.
    """

    net: Network
    vertex_factors: tuple
    link_factors: tuple
    flow_scale: tuple | None = None

    def __post_init__(self):
        net = self.net
        object.__setattr__(self, "vertex_factors", tuple(tuple(fs) for fs in self.vertex_factors))
        object.__setattr__(self, "link_factors", tuple(self.link_factors))
        if len(self.vertex_factors) != net.n_vertices:
            raise ValidationError("need one factor list per vertex")
        if len(self.link_factors) != net.n_links:
            raise ValidationError("need one factor per link")
        for i, factors in enumerate(self.vertex_factors):
            vid = net.vertices[i].id
            allowed = {vid} | {net.vertices[j].id for _, j in net.incident[i]}
            n_inj = 0
            for f in factors:
                keys = set(f.coeffs)
                if not keys <= allowed:
                    raise ValidationError(f"vertex factor of {vid!r} touches non-neighbours {sorted(keys - allowed)}")
                if keys != {vid}:
                    n_inj += 1
            if n_inj > 1:
                raise ValidationError(f"vertex {vid!r} has more than one injection factor")
        for l, f in enumerate(self.link_factors):
            a, b = net.endpoints[l]
            allowed = {net.vertices[a].id, net.vertices[b].id}
            if not set(f.coeffs) <= allowed:
                raise ValidationError(f"link factor {l} touches non-endpoints")

    @cached_property
    def compiled(self) -> CompiledProblem:
        net = self.net
        n, L = net.n_vertices, net.n_links
        ends = net.endpoints
        ids = [v.id for v in net.vertices]
        inc_vertex = ends.reshape(-1).copy()
        inc_other = ends[:, ::-1].reshape(-1).copy()
        inc_link = np.repeat(np.arange(L), 2)

        value_prec = np.zeros(n)
        value_info = np.zeros(n)
        inj_z = np.zeros(n)
        inj_s2 = np.full(n, np.inf)
        inj_cself = np.zeros(n)
        inj_cinc = np.zeros(2 * L)
        coeffs = net.coeffs
        for i, factors in enumerate(self.vertex_factors):
            vid = ids[i]
            for f in factors:
                if set(f.coeffs) == {vid}:
                    c = f.coeffs[vid]
                    value_prec[i] += c * c / f.sigma2
                    value_info[i] += c * f.z / f.sigma2
                    continue
                inj_z[i] = f.z
                inj_s2[i] = f.sigma2
                inj_cself[i] = f.coeffs.get(vid, 0.0)
                # split a neighbour's coefficient over parallel links by link coefficient
                share = {}
                for l, j in net.incident[i]:
                    share[j] = share.get(j, 0.0) + coeffs[l]
                for l, j in net.incident[i]:
                    e = 2 * l + (0 if ends[l, 0] == i else 1)
                    inj_cinc[e] = f.coeffs.get(ids[j], 0.0) * coeffs[l] / share[j]
        missing = ~np.isfinite(inj_s2)
        if missing.any():
            raise ValidationError(
                f"vertices without injection factor: {[ids[k] for k in np.flatnonzero(missing)][:5]}")
        link_z = np.empty(L)
        link_s2 = np.empty(L)
        link_c = np.zeros((L, 2))
        for l, f in enumerate(self.link_factors):
            a, b = ends[l]
            link_z[l] = f.z
            link_s2[l] = f.sigma2
            link_c[l, 0] = f.coeffs.get(ids[a], 0.0)
            link_c[l, 1] = f.coeffs.get(ids[b], 0.0)
        scale = coeffs.copy() if self.flow_scale is None else np.asarray(self.flow_scale, float)
        return CompiledProblem(n, ends, inc_vertex, inc_other, inc_link, value_prec, value_info,
                               inj_z, inj_s2, inj_cself, inj_cinc, link_z, link_s2, link_c, scale)


@dataclass(frozen=True)
class FlowProblem:
    """Flow-only payload: per vertex an observation of sum_j f_ij, per link of f_l."""

    inj_z: np.ndarray
    inj_s2: np.ndarray
    link_z: np.ndarray
    link_s2: np.ndarray


@dataclass(frozen=True)
class FactorGraph:
    """Bipartite factor graph plus the compiled payload the engine needs."""

    kind: GraphKind
    variable_nodes: tuple
    factor_nodes: tuple
    edges: tuple                       # (variable index, factor index)
    problem: CompiledProblem = field(repr=False)
    flow: FlowProblem | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.variable_nodes) + len(self.factor_nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_links(self) -> int:
        return self.problem.n_links

    def stats(self) -> dict:
        return {
            "variables": len(self.variable_nodes),
            "factors": len(self.factor_nodes),
            "edges": self.n_edges,
            "loops": fg_loop_count(self),
        }


def _link_labels(net):
    return tuple((net.vertices[a].id, net.vertices[b].id) for a, b in net.endpoints)


def _tree_like_edges(p: CompiledProblem):
    # variable node l for link l; factor nodes: vertex i -> i, leaf of link l -> n + l
    edges = [(int(p.inc_link[e]), int(p.inc_vertex[e])) for e in range(2 * p.n_links)]
    edges += [(l, p.n + l) for l in range(p.n_links)]
    return tuple(edges)


def build_fv(spec: ProblemSpec) -> FactorGraph:
    """Naive graph: variables per vertex, factors H_i and H_(ij).

    H_i is joined to its own variable and once per incident link to the far
    endpoint, so parallel links give parallel edges.
    """
    p = spec.compiled
    net = spec.net
    ids = tuple(v.id for v in net.vertices)
    factors = tuple(("H", i) for i in ids) + tuple(("Hl",) + lab for lab in _link_labels(net))
    edges = [(i, i) for i in range(p.n)]
    edges += [(int(p.inc_other[e]), int(p.inc_vertex[e])) for e in range(2 * p.n_links)]
    edges += [(int(p.inc_vertex[e]), p.n + int(p.inc_link[e])) for e in range(2 * p.n_links)]
    return FactorGraph(GraphKind.FV, ids, factors, tuple(edges), p)


def build_fc(spec: ProblemSpec) -> FactorGraph:
    """Clustered graph: one (copy_lower, copy_higher) pair variable per link."""
    p = spec.compiled
    net = spec.net
    ids = tuple(v.id for v in net.vertices)
    factors = tuple(("Hdelta", i) for i in ids) + tuple(("Hl",) + lab for lab in _link_labels(net))
    return FactorGraph(GraphKind.FC, _link_labels(net), factors, _tree_like_edges(p), p)


def flow_problem_from_spec(spec: ProblemSpec) -> FlowProblem:
    """Re-express the factors of ``spec`` over link flows.

    The injection observation at vertex i is read as an observation of
    sum_j f_ij.  A link factor with coefficients (k, -k) observes
    (k / B) f_l and is rescaled accordingly.  Single-vertex factors have no
    flow form and are dropped.
    """
    p = spec.compiled
    informative = p.value_prec > 1.0 / UNINFORMATIVE_VARIANCE * (1 + 1e-9)
    if informative.any():
        log.warning("flow-only graph drops %d informative vertex-value factors", int(informative.sum()))
    elif p.value_prec.any():
        log.debug("flow-only graph drops uninformative vertex-value factors")
    k = p.link_c[:, 0]
    if np.any(k == 0):
        raise ValidationError("link factor without coefficient on its lower endpoint")
    ratio = p.flow_scale / k
    return FlowProblem(p.inj_z.copy(), p.inj_s2.copy(), p.link_z * ratio, p.link_s2 * ratio ** 2)


def build_ff(spec: ProblemSpec) -> FactorGraph:
    """Flow-only graph: one flow variable f_l (lower -> higher) per link."""
    p = spec.compiled
    net = spec.net
    ids = tuple(v.id for v in net.vertices)
    factors = tuple(("H", i) for i in ids) + tuple(("Hf",) + lab for lab in _link_labels(net))
    return FactorGraph(GraphKind.FF, _link_labels(net), factors, _tree_like_edges(p), p,
                       flow_problem_from_spec(spec))


def build_graph(spec: ProblemSpec, kind) -> FactorGraph:
    kind = GraphKind(kind)
    return {GraphKind.FV: build_fv, GraphKind.FC: build_fc, GraphKind.FF: build_ff}[kind](spec)


def fg_loop_count(fg: FactorGraph) -> int:
    """components + edges - nodes of the bipartite graph."""
    nv = len(fg.variable_nodes)
    n = fg.n_nodes
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    comps = n
    for v, f in fg.edges:
        a, b = find(v), find(nv + f)
        if a != b:
            parent[a] = b
            comps -= 1
    return comps + fg.n_edges - n
