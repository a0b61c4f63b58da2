"""Supply-network representation, validation and file ingestion.

A network is a connected multigraph of vertices and links.  Each link carries
a strictly positive coefficient: the susceptance ``B_ij`` of a DC power line
(per unit on the system base) or the pipe coefficient ``a_ij`` of the gas
flow law.  Vertices may carry a known injection and/or a known vertex value
(phase angle in rad, or squared pressure in bar^2).

Vertex order in the file is significant: it defines the vertex index used
throughout the library, and "lower" endpoint always means lower index.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "NetworkKind",
    "VertexRecord",
    "LinkRecord",
    "Network",
    "load_network",
    "dump_network",
    "network_loop_count",
]


class NetworkKind(enum.Enum):
    POWER_DC = "power_dc"
    GAS = "gas"


@dataclass(frozen=True)
class VertexRecord:
    id: str
    injection: float | None = None
    vertex_value: float | None = None


@dataclass(frozen=True)
class LinkRecord:
    source: str
    target: str
    coeff: float
    circuit: str = "1"


@dataclass(frozen=True)
class Network:
    """Validated supply network.  Construct through :meth:`create`."""

    vertices: tuple[VertexRecord, ...]
    links: tuple[LinkRecord, ...]
    kind: NetworkKind
    _index: dict = field(repr=False, compare=False, hash=False, default_factory=dict)

    @classmethod
    def create(cls, vertices, links, kind) -> "Network":
        kind = NetworkKind(kind)
        vertices = tuple(vertices)
        links = tuple(links)
        index = {}
        for k, v in enumerate(vertices):
            if v.id in index:
                raise ValidationError(f"duplicate vertex id {v.id!r}")
            index[v.id] = k
        net = cls(vertices, links, kind, index)
        net._validate()
        return net

    # -- structure -------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def index_of(self, vertex_id: str) -> int:
        return self._index[vertex_id]

    @cached_property
    def endpoints(self) -> np.ndarray:
        """(L, 2) int array of (lower, higher) vertex indices per link."""
        out = np.empty((self.n_links, 2), dtype=np.intp)
        for k, ln in enumerate(self.links):
            a, b = self._index[ln.source], self._index[ln.target]
            out[k] = (min(a, b), max(a, b))
        return out

    @cached_property
    def coeffs(self) -> np.ndarray:
        return np.array([ln.coeff for ln in self.links], dtype=float)

    @cached_property
    def incident(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per vertex: tuple of (link index, neighbour index), link order."""
        inc = [[] for _ in self.vertices]
        for k, (a, b) in enumerate(self.endpoints):
            inc[a].append((k, int(b)))
            inc[b].append((k, int(a)))
        return tuple(tuple(x) for x in inc)

    def degree(self, i: int) -> int:
        return len(self.incident[i])

    @cached_property
    def anchors(self) -> tuple[int, ...]:
        """Indices of vertices with a known vertex value."""
        return tuple(k for k, v in enumerate(self.vertices) if v.vertex_value is not None)

    # -- validation ------------------------------------------------------
    def _validate(self) -> None:
        if not self.vertices:
            raise ValidationError("network has no vertices")
        seen = set()
        for ln in self.links:
            for end in (ln.source, ln.target):
                if end not in self._index:
                    raise ValidationError(f"link endpoint {end!r} is not a vertex")
            if ln.source == ln.target:
                raise ValidationError(f"self-loop at vertex {ln.source!r}")
            if not (np.isfinite(ln.coeff) and ln.coeff > 0):
                raise ValidationError(
                    f"link {ln.source}-{ln.target} has non-positive coefficient {ln.coeff}")
            key = (frozenset((ln.source, ln.target)), ln.circuit)
            if key in seen:
                raise ValidationError(
                    f"duplicate link {ln.source}-{ln.target} (circuit {ln.circuit})")
            seen.add(key)
        if _count_components(self.n_vertices, self.endpoints) != 1:
            raise ValidationError("network is not connected")
        if self.kind is NetworkKind.GAS:
            if not self.anchors:
                raise ValidationError("gas network needs at least one pressure anchor")
            for v in self.vertices:
                if v.vertex_value is None and v.injection is None:
                    raise ValidationError(
                        f"gas vertex {v.id!r} has neither injection nor pressure")


def _count_components(n: int, edges: np.ndarray) -> int:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    comps = n
    for a, b in edges:
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[ra] = rb
            comps -= 1
    return comps


def network_loop_count(net: Network) -> int:
    """Number of independent loops: components + links - vertices."""
    return 1 + net.n_links - net.n_vertices


# -- file format -----------------------------------------------------------

_TOP_KEYS = {"kind", "vertices", "links"}
_VERTEX_KEYS = {"id", "injection", "vertex_value"}
_LINK_KEYS = {"from", "to", "coeff", "circuit"}


def _optional_number(value, where):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: expected number or null, got {value!r}")
    return float(value)


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ParseError(f"{where}: missing keys {sorted(missing)}")


def network_from_dict(doc) -> Network:
    _check_keys(doc, _TOP_KEYS, _TOP_KEYS, "network")
    try:
        kind = NetworkKind(doc["kind"])
    except ValueError:
        raise ParseError(f"unknown network kind {doc['kind']!r}") from None
    if not isinstance(doc["vertices"], list) or not isinstance(doc["links"], list):
        raise ParseError("'vertices' and 'links' must be arrays")
    vertices = []
    for k, v in enumerate(doc["vertices"]):
        where = f"vertices[{k}]"
        _check_keys(v, _VERTEX_KEYS, {"id"}, where)
        if not isinstance(v["id"], str):
            raise ParseError(f"{where}: id must be a string")
        vertices.append(VertexRecord(
            v["id"],
            _optional_number(v.get("injection"), where),
            _optional_number(v.get("vertex_value"), where),
        ))
    links = []
    for k, ln in enumerate(doc["links"]):
        where = f"links[{k}]"
        _check_keys(ln, _LINK_KEYS, {"from", "to", "coeff"}, where)
        coeff = _optional_number(ln["coeff"], where)
        if coeff is None:
            raise ParseError(f"{where}: coeff must be a number")
        if not isinstance(ln["from"], str) or not isinstance(ln["to"], str):
            raise ParseError(f"{where}: endpoints must be strings")
        links.append(LinkRecord(ln["from"], ln["to"], coeff, str(ln.get("circuit", "1"))))
    return Network.create(vertices, links, kind)


def network_to_dict(net: Network) -> dict:
    links = []
    for ln in net.links:
        rec = {"from": ln.source, "to": ln.target, "coeff": ln.coeff}
        if ln.circuit != "1":
            rec["circuit"] = ln.circuit
        links.append(rec)
    return {
        "kind": net.kind.value,
        "vertices": [
            {"id": v.id, "injection": v.injection, "vertex_value": v.vertex_value}
            for v in net.vertices
        ],
        "links": links,
    }


def load_network(path) -> Network:
    """Load and validate a canonical JSON network file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    return network_from_dict(doc)


def dump_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n", encoding="utf-8")
