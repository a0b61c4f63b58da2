"""Synchronous Gaussian belief propagation on Fv, Fc and Ff.

Every sweep first recomputes all variable-to-factor messages from the
previous factor-to-variable messages, then all factor-to-variable messages
from the fresh variable-to-factor ones.  Messages live in flat arrays (see
:mod:`supplybp.factor_graph` for the incidence indexing) and each phase is a
handful of vectorised numpy operations, so the result does not depend on any
processing order.

Orientation conventions
-----------------------
* Ff: messages at incidence ``e`` are over the flow *out of* ``inc_vertex[e]``.
* Fc: messages at incidence ``e`` are over ``(s, d) = (x_own, x_own - x_far)``
  with ``own = inc_vertex[e]`` (see "pair coordinates" below).
* Fv: ``hv``/``vh`` index ``i < n`` is the edge H_i -- x_i, index ``n + e``
  the edge H_{inc_vertex[e]} -- x_{inc_other[e]}; ``lv``/``vl`` index ``e``
  is the edge between link factor ``inc_link[e]`` and x_{inc_vertex[e]}.

Leaf factors (link factors of Fc/Ff) are constant and enter updates directly;
no message is stored for them.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonPositiveVariance, SingularMatrix, ValidationError
from .factor_graph import FactorGraph, GraphKind
from .gaussian import (
    Gaussian1,
    Gaussian2,
    check_var_batch,
)

INIT_VARIANCE = 1e6
DIVERGENCE_MEAN = 1e12

__all__ = [
    "Damping",
    "StopRule",
    "Status",
    "BpOptions",
    "MessageStore",
    "BeliefSet",
    "ConvergenceTrace",
    "init_messages",
    "sweep",
    "run",
    "collect_link_beliefs",
    "flow_belief_from_pair",
    "damp",
    "coin_flips",
]


class Damping(enum.Enum):
    OFF = "off"
    COIN = "coin"


class StopRule(enum.Enum):
    SWEEP_DELTA = "sweep"
    HALVING_DELTA = "halving"


class Status(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    DIVERGED = "diverged"


@dataclass(frozen=True)
class BpOptions:
    max_iters: int = 1000
    tolerance: float = 1e-9
    damping: Damping = Damping.OFF
    seed: int = 0
    stop_rule: StopRule = StopRule.SWEEP_DELTA

    def __post_init__(self):
        object.__setattr__(self, "damping", Damping(self.damping))
        object.__setattr__(self, "stop_rule", StopRule(self.stop_rule))
        if self.max_iters < 1:
            raise ValidationError("max_iters must be positive")
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")


@dataclass
class MessageStore:
    """All messages of one factor graph, keyed by message family name.

    Each family maps to ``(mean, var)`` arrays; Fc families hold (E, 2) means
    and (E, 2, 2) covariances.  Fv additionally caches the variable beliefs
    (``belief``) of the latest sweep.
    """

    kind: GraphKind
    families: dict
    belief: tuple | None = None

    def copy(self) -> "MessageStore":
        fam = {k: (m.copy(), v.copy()) for k, (m, v) in self.families.items()}
        bel = None if self.belief is None else (self.belief[0].copy(), self.belief[1].copy())
        return MessageStore(self.kind, fam, bel)

    def n_messages(self) -> int:
        return sum(len(m) for m, _ in self.families.values())


@dataclass(frozen=True)
class BeliefSet:
    """One belief per network link, lower -> higher orientation.

    ``mean``/``cov`` are (L,) arrays for Ff (flow beliefs) and (L, 2)/(L, 2, 2)
    for Fc/Fv (joint beliefs over the endpoint variables).  ``flow_mean`` and
    ``flow_var`` give the marginal of f_l = B_l (x_lower - x_higher); for pair
    beliefs they are computed from the difference coordinate directly, which
    keeps full precision when the endpoint variables are strongly correlated.
    """

    kind: GraphKind
    mean: np.ndarray
    cov: np.ndarray
    flow_mean: np.ndarray
    flow_var: np.ndarray

    @property
    def is_pair(self) -> bool:
        return self.mean.ndim == 2

    def link(self, l: int):
        if self.is_pair:
            return Gaussian2(self.mean[l], self.cov[l])
        return Gaussian1(float(self.mean[l]), float(self.cov[l]))

    def flow(self, l: int) -> Gaussian1:
        return Gaussian1(float(self.flow_mean[l]), float(self.flow_var[l]))

    def flow_marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.flow_mean.copy(), self.flow_var.copy()


@dataclass
class ConvergenceTrace:
    belief_delta: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    status: Status = Status.MAX_ITERS
    iterations: int = 0
    error: str | None = None

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    @property
    def diverged(self) -> bool:
        return self.status is Status.DIVERGED

    def to_csv(self, extra_columns: tuple = ()) -> str:
        cols = list(extra_columns)
        if not cols and self.metrics:
            seen = {}
            for m in self.metrics:
                for k in m or {}:
                    seen.setdefault(k, None)
            cols = list(seen)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "belief_delta", "status"] + cols)
        for t, d in enumerate(self.belief_delta, start=1):
            status = self.status.value if t == len(self.belief_delta) else "running"
            m = self.metrics[t - 1] if t - 1 < len(self.metrics) and self.metrics[t - 1] else {}
            w.writerow([t, repr(float(d)), status] + [repr(float(m[c])) if c in m else "" for c in cols])
        return buf.getvalue()


# -- damping -----------------------------------------------------------------

def coin_flips(seed: int, iteration: int, n: int) -> np.ndarray:
    """Deterministic fair coins for message indices 0..n-1 at one iteration.

    Bit ``k`` of the Philox-4x64 stream keyed by ``seed`` with counter
    ``(0, iteration, 0, 0)``; distinct iterations use disjoint counter ranges.
    """
    words = -(-n // 64) if n else 0
    bg = np.random.Philox(key=int(seed), counter=[0, int(iteration), 0, 0])
    raw = bg.random_raw(words).astype(np.uint64) if words else np.zeros(0, np.uint64)
    bits = np.unpackbits(raw.view(np.uint8), bitorder="little")[:n]
    return bits.astype(bool)


def damp(new, old, keep):
    """Half-way blend of new and old wherever ``keep`` is False.

    ``keep`` is the coin (delta = 1 keeps the undamped value).
    """
    keep = np.asarray(keep, dtype=bool)
    shape = keep.shape + (1,) * (np.ndim(new) - keep.ndim)
    return np.where(keep.reshape(shape), new, 0.5 * (new + old))


# -- pair coordinates -----------------------------------------------------------
#
# Fc messages and all pair beliefs are held internally over (s, d) with
# s = x_own and d = x_own - x_far.  Without angle measurements the two copies
# are almost perfectly correlated (only the 1e8 pseudo-measurements fix the
# common level); in (x_own, x_far) coordinates the covariance is then
# ill-conditioned and the flow variance B^2 (K00 + K11 - 2 K01) cancels
# catastrophically.  In (s, d) the common level and the difference decouple.

def _sd_to_xy(mean, cov):
    """(s, d) -> (x_own, x_far)."""
    m = np.stack([mean[..., 0], mean[..., 0] - mean[..., 1]], axis=-1)
    kss, ksd, kdd = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    out = np.empty_like(cov)
    out[..., 0, 0] = kss
    out[..., 0, 1] = out[..., 1, 0] = kss - ksd
    out[..., 1, 1] = kss - 2.0 * ksd + kdd
    return m, out


_xy_to_sd = _sd_to_xy  # the map (a, b) -> (a, a - b) is its own inverse


def pair_message(store: "MessageStore", family: str, e: int) -> Gaussian2:
    """Fc message at incidence ``e`` over (x_own, x_far)."""
    m, c = store.families[family]
    mx, cx = _sd_to_xy(m[e], c[e])
    return Gaussian2(mx, cx)


# -- grouped exclusive sums -----------------------------------------------------

class _Groups:
    """Leave-one-out sums within groups, without subtracting from totals.

    Members are laid out in an (n_groups, width) table; multiplying by the
    all-ones-minus-identity matrix sums every row over the other slots.
    """

    def __init__(self, group: np.ndarray, n_groups: int):
        group = np.asarray(group, dtype=np.intp)
        counts = np.bincount(group, minlength=n_groups)
        order = np.argsort(group, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.empty(len(group), dtype=np.intp)
        slot[order] = np.arange(len(group)) - starts[group[order]]
        width = max(int(counts.max(initial=0)), 1)
        self.group = group
        self.slot = slot
        self.flat = group * width + slot
        self.n_groups = n_groups
        self.width = width
        self.mask = 1.0 - np.eye(width)

    def total(self, x) -> np.ndarray:
        return np.bincount(self.group, weights=x, minlength=self.n_groups)

    def others(self, *xs) -> np.ndarray:
        """Sum over the other members of the group, for each array in ``xs``.

        Returns an array of shape (len(xs), n_members).
        """
        k = len(xs)
        t = np.zeros((k, self.n_groups * self.width))
        t[:, self.flat] = xs
        out = t.reshape(-1, self.width) @ self.mask
        return out.reshape(k, -1)[:, self.flat]


# -- per-graph constant data ----------------------------------------------------

class _Geometry:
    """Index arrays and leaf payloads derived once per factor graph."""

    def __init__(self, fg: FactorGraph):
        p = fg.problem
        self.n = n = p.n
        self.L = L = p.n_links
        self.E = E = 2 * L
        e = np.arange(E)
        self.opp = e ^ 1
        self.parity = e & 1
        self.vtx = p.inc_vertex
        self.link = p.inc_link
        self.at_vertex = _Groups(self.vtx, n)
        c0, c1 = p.link_c[:, 0], p.link_c[:, 1]
        # link factor over (s, d) of the lower endpoint: c0 x_lo + c1 x_hi = (c0 + c1) s - c1 d
        h = np.stack([c0 + c1, -c1], axis=1)
        w = 1.0 / p.link_s2
        lo = (h[:, 0] ** 2 * w, h[:, 0] * h[:, 1] * w, h[:, 1] ** 2 * w,
              h[:, 0] * p.link_z * w, h[:, 1] * p.link_z * w)
        # the same factor over (s, d) of the higher endpoint: (s - d, -d) substitution
        hi = (lo[0], -lo[0] - lo[1], lo[0] + 2.0 * lo[1] + lo[2], lo[3], -lo[3] - lo[4])
        self.belief_leaf = (lo, hi)
        if fg.kind is GraphKind.FF:
            fl = fg.flow
            sign = np.where(self.parity == 0, 1.0, -1.0)
            self.leaf_prec = 1.0 / fl.link_s2[self.link]
            self.leaf_info = sign * fl.link_z[self.link] / fl.link_s2[self.link]
            self.inj_z, self.inj_s2 = fl.inj_z, fl.inj_s2
            self.flow_prec = 1.0 / fl.link_s2
            self.flow_info = fl.link_z / fl.link_s2
        elif fg.kind is GraphKind.FC:
            c_own = p.link_c[self.link, self.parity]
            c_far = p.link_c[self.link, 1 - self.parity]
            hl = np.stack([c_own + c_far, -c_far], axis=1)
            s2 = p.link_s2[self.link]
            self.leaf_lam = hl[:, :, None] * hl[:, None, :] / s2[:, None, None]
            self.leaf_eta = hl * (p.link_z[self.link] / s2)[:, None]
            if np.any(p.inj_cinc == 0):
                raise NonPositiveVariance("Fc needs a nonzero injection coefficient on every neighbour copy")
            self.c_total = p.inj_cself + self.at_vertex.total(p.inj_cinc)
        else:
            self.fac = np.concatenate([np.arange(n), self.vtx])
            self.var = np.concatenate([np.arange(n), p.inc_other])
            self.coef = np.concatenate([p.inj_cself, p.inj_cinc])
            if np.any(self.coef == 0):
                raise NonPositiveVariance("Fv needs nonzero injection coefficients")
            self.c_own = p.link_c[self.link, self.parity]
            self.c_far = p.link_c[self.link, 1 - self.parity]
            if np.any(self.c_own == 0):
                raise NonPositiveVariance("Fv needs nonzero link-factor coefficients")
            self.at_factor = _Groups(self.fac, n)
            # messages into variables: H -> x (n + E of them), then link -> x (E)
            self.at_variable = _Groups(np.concatenate([self.var, self.vtx]), n)


def _geometry(fg: FactorGraph) -> _Geometry:
    geo = fg.__dict__.get("_bp_geometry")
    if geo is None:
        geo = _Geometry(fg)
        fg.__dict__["_bp_geometry"] = geo
    return geo


# -- initialisation -------------------------------------------------------------

def init_messages(fg: FactorGraph) -> MessageStore:
    """Zero-mean messages of variance 1e6 (diag(1e6, 1e6) for pair messages)."""
    p = fg.problem
    E, n = 2 * p.n_links, p.n
    if fg.kind is GraphKind.FC:
        def pair():
            cov = np.zeros((E, 2, 2))
            cov[:, 0, 0] = cov[:, 1, 1] = INIT_VARIANCE
            return _xy_to_sd(np.zeros((E, 2)), cov)
        return MessageStore(fg.kind, {"v2f": pair(), "f2v": pair()})

    def scalar(m):
        return np.zeros(m), np.full(m, INIT_VARIANCE)

    if fg.kind is GraphKind.FF:
        return MessageStore(fg.kind, {"v2f": scalar(E), "f2v": scalar(E)})
    return MessageStore(fg.kind, {"vh": scalar(n + E), "hv": scalar(n + E),
                                  "vl": scalar(E), "lv": scalar(E)},
                        belief=(np.zeros(n), np.full(n, INIT_VARIANCE)))


# -- sweeps ---------------------------------------------------------------------

def _damped(store, name, mean, var, coins, offset):
    if coins is None:
        return mean, var, offset + len(mean)
    old_m, old_v = store.families[name]
    k = coins[offset:offset + len(mean)]
    return damp(mean, old_m, k), damp(var, old_v, k), offset + len(mean)


def _sweep_ff(fg, geo, store, coins):
    """Flow-only graph (closed-form updates over scalar flows)."""
    f2v_m, f2v_v = store.families["f2v"]
    o = geo.opp
    # flow variable -> vertex factor: leaf times the far factor's message, sign-flipped
    prec = geo.leaf_prec + 1.0 / f2v_v[o]
    v2f_v = 1.0 / prec
    v2f_m = v2f_v * (geo.leaf_info - f2v_m[o] / f2v_v[o])
    v2f_m, v2f_v, off = _damped(store, "v2f", v2f_m, v2f_v, coins, 0)
    # vertex factor -> flow variable: outflow = injection minus the other outflows
    v = geo.vtx
    other_v, other_m = geo.at_vertex.others(v2f_v, v2f_m)
    out_v = geo.inj_s2[v] + other_v
    out_m = geo.inj_z[v] - other_m
    out_m, out_v, off = _damped(store, "f2v", out_m, out_v, coins, off)
    check_var_batch(v2f_v)
    check_var_batch(out_v)
    return MessageStore(fg.kind, {"v2f": (v2f_m, v2f_v), "f2v": (out_m, out_v)})


def _pack(ms, md, kss, ksd, kdd):
    mean = np.empty((len(ms), 2))
    mean[:, 0], mean[:, 1] = ms, md
    cov = np.empty((len(ms), 2, 2))
    cov[:, 0, 0], cov[:, 1, 1] = kss, kdd
    cov[:, 0, 1] = cov[:, 1, 0] = ksd
    return mean, cov


def _check_pd(kss, ksd, kdd):
    ok = (kss > 0) & (kdd > 0) & (kss * kdd - ksd * ksd > 0) & np.isfinite(kss + ksd + kdd)
    if not np.all(ok):
        raise NonPositiveVariance("pair covariance lost positive definiteness")


def _sweep_fc(fg, geo, store, coins):
    """Clustered graph, messages over (s, d) of the owning endpoint.

    The vertex factor H_i with its copy constraints is integrated in closed
    form: every other incident pair message is marginalised onto the own
    copy s (precision P, information H), and its far-copy dependence is
    folded into an effective injection observation z' = beta s - c_e d + noise
    of variance V.  The outgoing message is then
    Var(s) = 1/P, Cov(s, d) = beta / (c_e P), Var(d) = V/c_e^2 + beta^2/(c_e^2 P),
    mean_s = H/P, mean_d = (beta mean_s - z') / c_e.
    """
    p = fg.problem
    f2v_m, f2v_c = store.families["f2v"]
    o = geo.opp
    # far factor's message, flipped to (s, d) of this end: (s' - d', -d')
    ms_, md_ = f2v_m[o, 0], f2v_m[o, 1]
    kss_, ksd_, kdd_ = f2v_c[o, 0, 0], f2v_c[o, 0, 1], f2v_c[o, 1, 1]
    ms, md = ms_ - md_, -md_
    kss, ksd, kdd = kss_ - 2.0 * ksd_ + kdd_, kdd_ - ksd_, kdd_
    det = kss * kdd - ksd * ksd
    lss, lsd, ldd = kdd / det, -ksd / det, kss / det
    # times the leaf factor of the link
    hs = lss * ms + lsd * md + geo.leaf_eta[:, 0]
    hd = lsd * ms + ldd * md + geo.leaf_eta[:, 1]
    lss = lss + geo.leaf_lam[:, 0, 0]
    lsd = lsd + geo.leaf_lam[:, 0, 1]
    ldd = ldd + geo.leaf_lam[:, 1, 1]
    det = lss * ldd - lsd * lsd
    if not np.all(det > 0):
        raise NonPositiveVariance("pair message lost positive definiteness")
    vss, vsd, vdd = ldd / det, -lsd / det, lss / det
    vms = vss * hs + vsd * hd
    vmd = vsd * hs + vdd * hd
    v2f_m, v2f_c = _pack(vms, vmd, vss, vsd, vdd)
    if coins is not None:
        v2f_m, v2f_c, off = _damped(store, "v2f", v2f_m, v2f_c, coins, 0)
        vss, vsd, vdd = v2f_c[:, 0, 0], v2f_c[:, 0, 1], v2f_c[:, 1, 1]
        det = vss * vdd - vsd * vsd
        lss, lsd, ldd = vdd / det, -vsd / det, vss / det
        hs = lss * v2f_m[:, 0] + lsd * v2f_m[:, 1]
        hd = lsd * v2f_m[:, 0] + ldd * v2f_m[:, 1]
    else:
        off = len(vms)

    c = p.inj_cinc
    v = geo.vtx
    rD, hD = lsd / ldd, hd / ldd
    o_p, o_h, o_b, o_z, o_v = geo.at_vertex.others(
        lss - lsd * rD, hs - lsd * hD, c * rD, c * hD, c * c / ldd)
    P = p.value_prec[v] + o_p
    H = p.value_info[v] + o_h
    beta = geo.c_total[v] + o_b
    z_eff = p.inj_z[v] + o_z
    V = p.inj_s2[v] + o_v
    # P > 0 and V > 0 make the outgoing covariance positive definite
    if not (np.all(P > 0) and np.all(V > 0) and np.isfinite(H.sum() + z_eff.sum() + beta.sum())):
        raise NonPositiveVariance("vertex-factor message lost positive precision")
    ms = H / P
    bcP = beta / (c * P)
    out_m, out_c = _pack(ms, (beta * ms - z_eff) / c, 1.0 / P, bcP, V / (c * c) + bcP * bcP * P)
    out_m, out_c, off = _damped(store, "f2v", out_m, out_c, coins, off)
    return MessageStore(fg.kind, {"v2f": (v2f_m, v2f_c), "f2v": (out_m, out_c)})


def _sweep_fv(fg, geo, store, coins):
    """Naive graph: scalar messages between vertex variables and H_i, H_(ij)."""
    p = fg.problem
    hv_m, hv_v = store.families["hv"]
    lv_m, lv_v = store.families["lv"]
    # variable side: belief and exclusive products of incoming factor messages
    in_prec = np.concatenate([1.0 / hv_v, 1.0 / lv_v])
    in_info = np.concatenate([hv_m / hv_v, lv_m / lv_v])
    gv = geo.at_variable
    prec = p.value_prec + gv.total(in_prec)
    info = p.value_info + gv.total(in_info)
    if not np.all(prec > 0):
        raise NonPositiveVariance("variable belief lost positive precision")
    K = 1.0 / prec
    mu = K * info
    owner = gv.group
    o_prec, o_info = gv.others(in_prec, in_info)
    q = p.value_prec[owner] + o_prec
    if not np.all(q > 0):
        raise NonPositiveVariance("variable-to-factor message has non-positive precision")
    out_v = 1.0 / q
    out_m = out_v * (p.value_info[owner] + o_info)
    k = len(hv_v)
    vh_m, vh_v, off = _damped(store, "vh", out_m[:k], out_v[:k], coins, 0)
    # H_i -> variable: solve the injection observation for that variable
    c = geo.coef
    gf = geo.at_factor
    o_var, o_mean = gf.others(c * c * vh_v, c * vh_m)
    hv_new_v = (p.inj_s2[geo.fac] + o_var) / (c * c)
    hv_new_m = (p.inj_z[geo.fac] - o_mean) / c
    hv_new_m, hv_new_v, off = _damped(store, "hv", hv_new_m, hv_new_v, coins, off)
    vl_m, vl_v, off = _damped(store, "vl", out_m[k:], out_v[k:], coins, off)
    # H_(ij) -> variable
    o = geo.opp
    lz = p.link_z[geo.link]
    ls2 = p.link_s2[geo.link]
    lv_new_v = (ls2 + geo.c_far ** 2 * vl_v[o]) / geo.c_own ** 2
    lv_new_m = (lz - geo.c_far * vl_m[o]) / geo.c_own
    lv_new_m, lv_new_v, off = _damped(store, "lv", lv_new_m, lv_new_v, coins, off)
    for arr in (vh_v, hv_new_v, vl_v, lv_new_v):
        check_var_batch(arr)
    return MessageStore(fg.kind, {"vh": (vh_m, vh_v), "hv": (hv_new_m, hv_new_v),
                                  "vl": (vl_m, vl_v), "lv": (lv_new_m, lv_new_v)},
                        belief=(mu, K))


_SWEEPS = {GraphKind.FF: _sweep_ff, GraphKind.FC: _sweep_fc, GraphKind.FV: _sweep_fv}


def sweep(fg: FactorGraph, store: MessageStore, opts: BpOptions | None = None,
          iteration: int = 1) -> MessageStore:
    """One synchronous update of every message; returns a new store.

    With coin damping every updated message is, with probability 1/2,
    replaced by the mean of its new and previous value (mean and variance
    alike).  Raises NonPositiveVariance / SingularMatrix on breakdown.
    """
    opts = opts or BpOptions()
    if store.kind is not fg.kind:
        raise ValueError("message store belongs to a different graph kind")
    geo = _geometry(fg)
    coins = None
    if opts.damping is Damping.COIN:
        coins = coin_flips(opts.seed, iteration, store.n_messages())
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _SWEEPS[fg.kind](fg, geo, store, coins)


# -- beliefs --------------------------------------------------------------------

def _inv_sym(a, b, d):
    det = a * d - b * b
    return d / det, -b / det, a / det


def _pair_beliefs(fg, lss, lsd, ldd, hs, hd, from_higher=False) -> BeliefSet:
    # information form over (s, d) of the lower (if from_higher: higher) endpoint
    kss, ksd, kdd = _inv_sym(lss, lsd, ldd)
    _check_pd(kss, ksd, kdd)
    ms = kss * hs + ksd * hd
    md = ksd * hs + kdd * hd
    if from_higher:
        ms, md = ms - md, -md
        kss, ksd, kdd = kss - 2.0 * ksd + kdd, kdd - ksd, kdd
    scale = fg.problem.flow_scale
    mx, cx = _pack(ms, ms - md, kss, kss - ksd, kss - 2.0 * ksd + kdd)
    return BeliefSet(fg.kind, mx, cx, scale * md, scale * scale * kdd)


def collect_link_beliefs(fg: FactorGraph, store: MessageStore, from_higher: bool = False) -> BeliefSet:
    """Per-link beliefs in (lower, higher) orientation, link factor included.

    For Fc, ``from_higher`` assembles the belief in the higher endpoint's
    coordinates and flips the result back (both must agree).
    """
    geo = _geometry(fg)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if fg.kind is GraphKind.FF:
            m, v = store.families["f2v"]
            prec = geo.flow_prec + 1.0 / v[0::2] + 1.0 / v[1::2]
            var = 1.0 / prec
            mean = var * (geo.flow_info + m[0::2] / v[0::2] - m[1::2] / v[1::2])
            check_var_batch(var)
            return BeliefSet(fg.kind, mean, var, mean, var)
        if fg.kind is GraphKind.FC:
            m, c = store.families["f2v"]
            own, far = (1, 0) if from_higher else (0, 1)
            # own end's message
            ass, asd, add = _inv_sym(c[own::2, 0, 0], c[own::2, 0, 1], c[own::2, 1, 1])
            ams, amd = m[own::2, 0], m[own::2, 1]
            # far end's message flipped into the own end's coordinates
            fss, fsd, fdd = c[far::2, 0, 0], c[far::2, 0, 1], c[far::2, 1, 1]
            bss, bsd, bdd = _inv_sym(fss - 2.0 * fsd + fdd, fdd - fsd, fdd)
            bms, bmd = m[far::2, 0] - m[far::2, 1], -m[far::2, 1]
            k = 1 if from_higher else 0
            lss = geo.belief_leaf[k][0] + ass + bss
            lsd = geo.belief_leaf[k][1] + asd + bsd
            ldd = geo.belief_leaf[k][2] + add + bdd
            hs = geo.belief_leaf[k][3] + ass * ams + asd * amd + bss * bms + bsd * bmd
            hd = geo.belief_leaf[k][4] + asd * ams + add * amd + bsd * bms + bdd * bmd
            return _pair_beliefs(fg, lss, lsd, ldd, hs, hd, from_higher)
        # Fv: joint belief of H_(ij) from the two incoming variable messages
        m, v = store.families["vl"]
        p1, p2 = 1.0 / v[0::2], 1.0 / v[1::2]
        e1, e2 = m[0::2] * p1, m[1::2] * p2
        L = geo.belief_leaf[0]
        return _pair_beliefs(fg, L[0] + p1 + p2, L[1] - p2, L[2] + p2, L[3] + e1 + e2, L[4] - e2)


def flow_belief_from_pair(belief: Gaussian2, B: float) -> Gaussian1:
    """Marginal of f = B (x_0 - x_1) under a joint 2-D belief."""
    K = belief.cov
    var = B * B * (K[0, 0] + K[1, 1] - 2.0 * K[0, 1])
    if not var > 0:
        raise NonPositiveVariance(f"flow variance {var} is not positive")
    return Gaussian1(float(B * (belief.mean[0] - belief.mean[1])), float(var))


# -- driver ---------------------------------------------------------------------

def _belief_delta(cur: BeliefSet, prev: BeliefSet) -> float:
    return float(max(np.max(np.abs(cur.mean - prev.mean), initial=0.0),
                     np.max(np.abs(cur.cov - prev.cov), initial=0.0)))


def run(fg: FactorGraph, opts: BpOptions | None = None,
        observer: Callable[[int, BeliefSet], dict | None] | None = None,
        store: MessageStore | None = None):
    """Iterate sweeps until the stop rule fires, max_iters, or breakdown.

    Returns ``(beliefs, trace, store)``; ``beliefs`` are the last valid
    beliefs (None if breakdown happened in the first sweep).  Breakdown (an
    invalid Gaussian or a belief mean beyond 1e12 in magnitude) is reported
    as ``Status.DIVERGED``, not raised.  ``observer(t, beliefs)`` may return a
    dict of metrics that is recorded for iteration ``t``.
    """
    opts = opts or BpOptions()
    store = init_messages(fg) if store is None else store
    trace = ConvergenceTrace()
    beliefs = None
    try:
        prev = collect_link_beliefs(fg, store)
    except (NonPositiveVariance, SingularMatrix):
        prev = None
    halving = opts.stop_rule is StopRule.HALVING_DELTA
    history = [None if prev is None else prev.mean]
    for t in range(1, opts.max_iters + 1):
        try:
            store = sweep(fg, store, opts, iteration=t)
            cur = collect_link_beliefs(fg, store)
            if not np.all(np.abs(cur.mean) < DIVERGENCE_MEAN):
                raise NonPositiveVariance("belief mean exceeded the divergence bound")
        except (NonPositiveVariance, SingularMatrix) as exc:
            trace.status = Status.DIVERGED
            trace.error = str(exc)
            trace.iterations = t
            trace.belief_delta.append(float("inf"))
            if observer is not None:
                trace.metrics.append(None)
            return beliefs, trace, store
        beliefs = cur
        delta = float("inf") if prev is None else _belief_delta(cur, prev)
        trace.belief_delta.append(delta)
        trace.iterations = t
        if observer is not None:
            trace.metrics.append(observer(t, cur))
        if halving:
            history.append(cur.mean)
            ref = history[t // 2]
            done = t >= 2 and ref is not None and float(np.mean((cur.mean - ref) ** 2)) < opts.tolerance
        else:
            done = delta < opts.tolerance
        prev = cur
        if done:
            trace.status = Status.CONVERGED
            return beliefs, trace, store
    trace.status = Status.MAX_ITERS
    return beliefs, trace, store
