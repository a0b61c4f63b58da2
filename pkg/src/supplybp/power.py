"""DC power-grid state estimation.

Measurements of line flows ``f_ij = B_ij (theta_i - theta_j)``, bus injections
``g_i = sum_j f_ij`` and (optionally, from PMUs) bus angles are combined with a
uniform prior into a Gaussian posterior over the angles.  Missing
measurements are encoded as ``z = 0`` with variance 1e8, which also fixes the
global angle gauge when no PMUs are present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import KeyMismatch, MissingTruth, ParseError, ValidationError
from .factor_graph import UNINFORMATIVE_VARIANCE, LinearGaussianFactor, ProblemSpec
from .network import Network

__all__ = [
    "MeasurementSet",
    "Scenario",
    "truth_angles",
    "dc_flows",
    "dc_injections",
    "synthesize_measurements",
    "build_se_problem",
    "delta_mu",
    "delta_sigma",
    "load_measurements",
    "dump_measurements",
]


@dataclass(frozen=True)
class MeasurementSet:
    """Per-vertex injection and angle, per-link flow measurements.

    Flows are oriented from the lower- to the higher-index endpoint.
    """

    inj_z: np.ndarray
    inj_s2: np.ndarray
    flow_z: np.ndarray
    flow_s2: np.ndarray
    angle_z: np.ndarray
    angle_s2: np.ndarray

    def __post_init__(self):
        for name in ("inj_z", "inj_s2", "flow_z", "flow_s2", "angle_z", "angle_s2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if len(self.inj_z) != len(self.inj_s2) or len(self.angle_z) != len(self.angle_s2) \
                or len(self.inj_z) != len(self.angle_z) or len(self.flow_z) != len(self.flow_s2):
            raise ValidationError("measurement arrays have inconsistent lengths")
        for name in ("inj_s2", "flow_s2", "angle_s2"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr) & (arr > 0)):
                raise ValidationError(f"{name}: measurement variances must be positive")


@dataclass(frozen=True)
class Scenario:
    with_pmu: bool = True
    flow_injection_sigma2: float = 1e-3
    angle_sigma2: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not (self.flow_injection_sigma2 > 0 and self.angle_sigma2 > 0):
            raise ValidationError("scenario variances must be positive")


def truth_angles(net: Network) -> np.ndarray:
    vals = [v.vertex_value for v in net.vertices]
    if any(x is None for x in vals):
        raise MissingTruth("every vertex needs a ground-truth angle (vertex_value)")
    return np.asarray(vals, dtype=float)


def dc_flows(net: Network, theta) -> np.ndarray:
    ends = net.endpoints
    theta = np.asarray(theta, float)
    return net.coeffs * (theta[ends[:, 0]] - theta[ends[:, 1]])


def dc_injections(net: Network, theta) -> np.ndarray:
    f = dc_flows(net, theta)
    ends = net.endpoints
    n = net.n_vertices
    return np.bincount(ends[:, 0], f, n) - np.bincount(ends[:, 1], f, n)


def synthesize_measurements(net: Network, theta, sc: Scenario) -> MeasurementSet:
    """Noisy measurements of the exact DC quantities of ``theta``.

    Noise is drawn from ``numpy.random.default_rng(sc.seed)`` in the order
    flows, injections, angles.
    """
    if theta is None:
        theta = truth_angles(net)
    theta = np.asarray(theta, float)
    if theta.shape != (net.n_vertices,) or not np.all(np.isfinite(theta)):
        raise MissingTruth("truth angles must be finite, one per vertex")
    rng = np.random.default_rng(sc.seed)
    s = np.sqrt(sc.flow_injection_sigma2)
    n, L = net.n_vertices, net.n_links
    flow_z = dc_flows(net, theta) + s * rng.standard_normal(L)
    inj_z = dc_injections(net, theta) + s * rng.standard_normal(n)
    if sc.with_pmu:
        angle_z = theta + np.sqrt(sc.angle_sigma2) * rng.standard_normal(n)
        angle_s2 = np.full(n, sc.angle_sigma2)
    else:
        angle_z = np.zeros(n)
        angle_s2 = np.full(n, UNINFORMATIVE_VARIANCE)
    return MeasurementSet(inj_z, np.full(n, sc.flow_injection_sigma2),
                          flow_z, np.full(L, sc.flow_injection_sigma2), angle_z, angle_s2)


def build_se_problem(net: Network, m: MeasurementSet) -> ProblemSpec:
    """Posterior over bus angles as a ProblemSpec.

    Coefficients: c_{fij|i} = B_ij, c_{fij|j} = -B_ij, c_{gi|i} = sum_j B_ij,
    c_{gi|j} = -B_ij (summed over parallel lines).
    """
    n, L = net.n_vertices, net.n_links
    if len(m.inj_z) != n or len(m.flow_z) != L:
        raise ValidationError("measurement set does not match the network")
    ids = [v.id for v in net.vertices]
    B = net.coeffs
    ends = net.endpoints
    vertex_factors = []
    for i in range(n):
        coeffs = {ids[i]: 0.0}
        for l, j in net.incident[i]:
            coeffs[ids[i]] += B[l]
            coeffs[ids[j]] = coeffs.get(ids[j], 0.0) - B[l]
        vertex_factors.append((
            LinearGaussianFactor(m.inj_z[i], m.inj_s2[i], coeffs),
            LinearGaussianFactor(m.angle_z[i], m.angle_s2[i], {ids[i]: 1.0}),
        ))
    link_factors = [
        LinearGaussianFactor(m.flow_z[l], m.flow_s2[l], {ids[ends[l, 0]]: B[l], ids[ends[l, 1]]: -B[l]})
        for l in range(L)
    ]
    return ProblemSpec(net, vertex_factors, link_factors)


def _check_same(est, ref):
    est_m, est_s = (np.asarray(x, float) for x in est)
    ref_m, ref_s = (np.asarray(x, float) for x in ref)
    if est_m.shape != ref_m.shape or est_s.shape != ref_s.shape:
        raise KeyMismatch(f"link sets differ: {est_m.shape} vs {ref_m.shape}")
    return est_m, est_s, ref_m, ref_s


def delta_mu(est, oracle) -> float:
    """Mean squared error of flow means; arguments are (means, variances) pairs."""
    em, _, om, _ = _check_same(est, oracle)
    return float(np.mean((em - om) ** 2))


def delta_sigma(est, oracle) -> float:
    """Mean squared error of flow standard deviations."""
    _, ev, _, ov = _check_same(est, oracle)
    return float(np.mean((np.sqrt(ev) - np.sqrt(ov)) ** 2))


# -- measurement files ------------------------------------------------------------

def dump_measurements(net: Network, m: MeasurementSet, path) -> None:
    ids = [v.id for v in net.vertices]
    ends = net.endpoints

    def link_target(l):
        t = [ids[ends[l, 0]], ids[ends[l, 1]]]
        circ = net.links[l].circuit
        return t + [circ] if circ != "1" else t

    doc = {
        "injections": [{"target": ids[i], "z": m.inj_z[i], "sigma2": m.inj_s2[i]} for i in range(len(ids))],
        "flows": [{"target": link_target(l), "z": m.flow_z[l], "sigma2": m.flow_s2[l]} for l in range(len(ends))],
        "angles": [{"target": ids[i], "z": m.angle_z[i], "sigma2": m.angle_s2[i]}
                   for i in range(len(ids)) if m.angle_s2[i] < UNINFORMATIVE_VARIANCE],
    }
    Path(path).write_text(json.dumps(doc, indent=1, default=float) + "\n", encoding="utf-8")


def load_measurements(net: Network, path) -> MeasurementSet:
    """Read a measurement file; entries not listed become (0, 1e8)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read measurements {path}: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) - {"injections", "flows", "angles"}:
        raise ParseError("measurement file must be an object with injections/flows/angles")
    n, L = net.n_vertices, net.n_links
    inj = [np.zeros(n), np.full(n, UNINFORMATIVE_VARIANCE)]
    ang = [np.zeros(n), np.full(n, UNINFORMATIVE_VARIANCE)]
    flo = [np.zeros(L), np.full(L, UNINFORMATIVE_VARIANCE)]
    link_index = {}
    for l, ln in enumerate(net.links):
        a, b = net.endpoints[l]
        key = (net.vertices[a].id, net.vertices[b].id, ln.circuit)
        link_index[key] = l

    def entries(name):
        for rec in doc.get(name, []):
            if not isinstance(rec, dict) or set(rec) != {"target", "z", "sigma2"}:
                raise ParseError(f"{name}: each entry needs exactly target, z, sigma2")
            yield rec

    try:
        for name, store in (("injections", inj), ("angles", ang)):
            for rec in entries(name):
                k = net.index_of(str(rec["target"]))
                store[0][k], store[1][k] = float(rec["z"]), float(rec["sigma2"])
        for rec in entries("flows"):
            t = [str(x) for x in rec["target"]]
            circ = t[2] if len(t) > 2 else "1"
            ia, ib = net.index_of(t[0]), net.index_of(t[1])
            sign = 1.0 if ia < ib else -1.0
            lo, hi = (t[0], t[1]) if ia < ib else (t[1], t[0])
            l = link_index[(lo, hi, circ)]
            flo[0][l], flo[1][l] = sign * float(rec["z"]), float(rec["sigma2"])
    except KeyError as exc:
        raise ParseError(f"measurement refers to unknown vertex or link: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(f"malformed measurement entry: {exc}") from exc
    return MeasurementSet(inj[0], inj[1], flo[0], flo[1], ang[0], ang[1])
