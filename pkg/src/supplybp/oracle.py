"""Dense reference solvers.

``exact_marginals`` solves a linear-Gaussian ProblemSpec by whitened least
squares: each factor contributes the row ``c_a / sigma_a`` with right-hand
side ``z_a / sigma_a``.  The rows are reduced with a Householder QR
factorisation (LAPACK ``geqrf`` through scipy); the mean is the triangular
solve and the covariance is ``R^-1 R^-T``.  This avoids forming the normal
matrix, whose condition number squares that of R (about 1e18 for the
gauge-fixing 1e8 pseudo-measurements against 1e-6 angle measurements).

``solve_gas_exact`` solves the nonlinear gas equations with a damped Newton
iteration on the full residual system.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NoAnchor, NoConvergence, SingularSystem, ValidationError
from .factor_graph import ProblemSpec
from .network import Network, NetworkKind

__all__ = [
    "DenseGaussianSolution",
    "FlowSolution",
    "exact_marginals",
    "exact_flow_marginals",
    "solve_gas_exact",
    "gas_residual",
]

RCOND = 1e-14


@dataclass(frozen=True)
class DenseGaussianSolution:
    mean: np.ndarray
    cov: np.ndarray
    flow_mean: np.ndarray
    flow_var: np.ndarray

    @property
    def flow_std(self) -> np.ndarray:
        return np.sqrt(self.flow_var)

    def pair(self, i: int, j: int):
        """(mean, cov) of the joint marginal of variables i and j."""
        idx = [i, j]
        return self.mean[idx], self.cov[np.ix_(idx, idx)]


@dataclass(frozen=True)
class FlowSolution:
    flow_mean: np.ndarray
    flow_var: np.ndarray

    @property
    def flow_std(self) -> np.ndarray:
        return np.sqrt(self.flow_var)


def _solve_whitened(A, b, W=None):
    """Least-squares mean and covariance of rows A x ~ b (unit noise).

    If ``W`` is given, also returns the variances of the linear forms
    ``W @ x`` as squared norms of ``R^-T w``, which avoids the cancellation
    in ``w^T C w`` when the covariance is dominated by a direction w
    is orthogonal to.
    """
    if A.shape[0] < A.shape[1]:
        raise SingularSystem("fewer observations than unknowns")
    Q, R = sla.qr(A, mode="economic")
    d = np.abs(np.diag(R))
    if d.min() <= RCOND * d.max():
        raise SingularSystem(f"information matrix is numerically singular (R diag ratio {d.min() / d.max():.2e})")
    mean = sla.solve_triangular(R, Q.T @ b)
    Rinv = sla.solve_triangular(R, np.eye(R.shape[0]))
    cov = Rinv @ Rinv.T
    cov = 0.5 * (cov + cov.T)
    if W is None:
        return mean, cov
    U = sla.solve_triangular(R, W.T, trans="T")
    return mean, cov, np.sum(U * U, axis=0)


def exact_marginals(spec: ProblemSpec) -> DenseGaussianSolution:
    """Exact posterior over all vertex variables and the derived link flows.

    Flow marginals are those of f_l = B_l (x_lower - x_higher) under the
    joint posterior, i.e. including the correlation of the endpoints.
    """
    net = spec.net
    n = net.n_vertices
    rows, rhs = [], []

    def add(f):
        row = np.zeros(n)
        for vid, c in f.coeffs.items():
            row[net.index_of(vid)] += c
        s = np.sqrt(f.sigma2)
        rows.append(row / s)
        rhs.append(f.z / s)

    for factors in spec.vertex_factors:
        for f in factors:
            add(f)
    for f in spec.link_factors:
        add(f)
    ends = net.endpoints
    scale = net.coeffs if spec.flow_scale is None else np.asarray(spec.flow_scale, float)
    a, b = ends[:, 0], ends[:, 1]
    W = np.zeros((net.n_links, n))
    W[np.arange(net.n_links), a] = scale
    W[np.arange(net.n_links), b] = -scale
    mean, cov, fv = _solve_whitened(np.array(rows), np.array(rhs), W)
    fm = scale * (mean[a] - mean[b])
    if not np.all(fv > 0):
        raise SingularSystem("non-positive flow variance in oracle")
    return DenseGaussianSolution(mean, cov, fm, fv)


def exact_flow_marginals(spec: ProblemSpec) -> FlowSolution:
    """Exact posterior of the flow-only model (what Ff approximates).

    Unknowns are the link flows f_l (lower -> higher).  The injection factor
    of vertex i observes sum_l sign f_l; a link factor with coefficient k on
    the lower endpoint observes (k / B_l) f_l.  Single-vertex factors have no
    flow form and are ignored.
    """
    net = spec.net
    n, L = net.n_vertices, net.n_links
    ends = net.endpoints
    scale = net.coeffs if spec.flow_scale is None else np.asarray(spec.flow_scale, float)
    rows, rhs = [], []
    for i, factors in enumerate(spec.vertex_factors):
        vid = net.vertices[i].id
        for f in factors:
            if set(f.coeffs) == {vid}:
                continue
            row = np.zeros(L)
            for l, _ in net.incident[i]:
                row[l] = 1.0 if ends[l, 0] == i else -1.0
            s = np.sqrt(f.sigma2)
            rows.append(row / s)
            rhs.append(f.z / s)
    for l, f in enumerate(spec.link_factors):
        k = f.coeffs.get(net.vertices[ends[l, 0]].id, 0.0)
        if k == 0:
            raise ValidationError(f"link factor {l} has no coefficient on its lower endpoint")
        row = np.zeros(L)
        row[l] = k / scale[l]
        s = np.sqrt(f.sigma2)
        rows.append(row / s)
        rhs.append(f.z / s)
    mean, cov = _solve_whitened(np.array(rows), np.array(rhs))
    return FlowSolution(mean, np.diag(cov).copy())


# -- gas ------------------------------------------------------------------------

def _gas_q(a, dv):
    return a * np.sign(dv) * np.sqrt(np.abs(dv))


def gas_residual(net: Network, v) -> np.ndarray:
    """g_i - sum_j Q_ij(v) at every vertex with a known injection (NaN elsewhere)."""
    v = np.asarray(v, float)
    ends = net.endpoints
    q = _gas_q(net.coeffs, v[ends[:, 0]] - v[ends[:, 1]])
    n = net.n_vertices
    out_flow = np.bincount(ends[:, 0], q, n) - np.bincount(ends[:, 1], q, n)
    g = np.array([np.nan if x.injection is None else x.injection for x in net.vertices])
    return g - out_flow


def _initial_pressures(net: Network):
    # minimum-norm conservative flows, then walk outwards from the anchors
    n, L = net.n_vertices, net.n_links
    ends = net.endpoints
    known = [i for i, x in enumerate(net.vertices) if x.injection is not None]
    M = np.zeros((len(known), L))
    for r, i in enumerate(known):
        for l, _ in net.incident[i]:
            M[r, l] = 1.0 if ends[l, 0] == i else -1.0
    g = np.array([net.vertices[i].injection for i in known])
    q = np.linalg.lstsq(M, g, rcond=None)[0] if known else np.zeros(L)
    v = np.full(n, np.nan)
    queue = deque()
    for i in net.anchors:
        v[i] = net.vertices[i].vertex_value
        queue.append(i)
    while queue:
        i = queue.popleft()
        for l, j in net.incident[i]:
            if np.isnan(v[j]):
                qi = q[l] if ends[l, 0] == i else -q[l]
                v[j] = v[i] - np.sign(qi) * (qi / net.coeffs[l]) ** 2
                queue.append(j)
    return v


def solve_gas_exact(net: Network, tol: float = 1e-12, max_iter: int = 200):
    """Dense Newton solve of the gas steady state.

    Unknowns are the squared pressures of non-anchor vertices; equations are
    continuity at every vertex with a known injection.  Newton steps come
    from a least-squares solve and are halved until the residual norm
    decreases.  Converged when ``max|r| <= tol * scale`` with ``scale`` the
    largest injection or flow magnitude (at least 1); a plateau at round-off
    level is also accepted.

    Returns ``(q, v)``: flows lower -> higher and squared pressures.
    """
    if net.kind is not NetworkKind.GAS:
        raise ValidationError("solve_gas_exact needs a gas network")
    if not net.anchors:
        raise NoAnchor("gas network has no pressure anchor")
    n = net.n_vertices
    ends = net.endpoints
    a = net.coeffs
    free = np.array([i for i in range(n) if i not in set(net.anchors)], dtype=int)
    rows = np.array([i for i, x in enumerate(net.vertices) if x.injection is not None], dtype=int)
    col = -np.ones(n, dtype=int)
    col[free] = np.arange(len(free))
    v = _initial_pressures(net)

    def resid(v):
        return gas_residual(net, v)[rows]

    def jac(v):
        dv = v[ends[:, 0]] - v[ends[:, 1]]
        s = a / (2.0 * np.sqrt(np.maximum(np.abs(dv), 1e-9)))
        J = np.zeros((n, len(free)))
        for l, (i, j) in enumerate(ends):
            # residual = g - out-flow; dQ_l/dv_i = s, dQ_l/dv_j = -s
            if col[i] >= 0:
                J[i, col[i]] -= s[l]
                J[j, col[i]] += s[l]
            if col[j] >= 0:
                J[i, col[j]] += s[l]
                J[j, col[j]] -= s[l]
        return J[rows]

    r = resid(v)
    best = np.inf
    stall = 0
    for _ in range(max_iter):
        dv = v[ends[:, 0]] - v[ends[:, 1]]
        scale = max(1.0, np.max(np.abs(_gas_q(a, dv)), initial=0.0),
                    np.max(np.abs([x.injection for x in net.vertices if x.injection is not None]), initial=0.0))
        rmax = np.max(np.abs(r), initial=0.0)
        if rmax <= tol * scale:
            break
        if rmax >= best * (1 - 1e-3):
            stall += 1
            if stall >= 5 and rmax <= 1e-9 * scale:
                break
        else:
            stall = 0
        best = min(best, rmax)
        step = np.linalg.lstsq(jac(v), -r, rcond=None)[0]
        norm0 = np.linalg.norm(r)
        t = 1.0
        while t > 1e-12:
            trial = v.copy()
            trial[free] += t * step
            rt = resid(trial)
            if np.linalg.norm(rt) < norm0:
                v, r = trial, rt
                break
            t *= 0.5
        else:
            if rmax <= 1e-9 * scale:
                break
            raise NoConvergence(f"Newton line search failed at residual {rmax:.3e}")
    else:
        raise NoConvergence(f"no convergence in {max_iter} Newton steps (residual {np.max(np.abs(r)):.3e})")
    q = _gas_q(a, v[ends[:, 0]] - v[ends[:, 1]])
    return q, v
