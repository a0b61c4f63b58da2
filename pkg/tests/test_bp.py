import numpy as np
import pytest

from conftest import random_power_tree
from supplybp.bp import (
    INIT_VARIANCE,
    BpOptions,
    Damping,
    Status,
    StopRule,
    coin_flips,
    collect_link_beliefs,
    damp,
    init_messages,
    pair_message,
    run,
    sweep,
)
from supplybp.errors import ValidationError
from supplybp.factor_graph import GraphKind, build_graph
from supplybp.gaussian import Gaussian1, Gaussian2, product1
from supplybp.network import LinkRecord, Network, NetworkKind, VertexRecord
from supplybp.oracle import exact_flow_marginals, exact_marginals
from supplybp.power import Scenario, build_se_problem, synthesize_measurements


def se_spec(net, seed=0, pmu=True):
    return build_se_problem(net, synthesize_measurements(net, None, Scenario(with_pmu=pmu, seed=seed)))


def assert_rel(x, y, rtol):
    x, y = np.asarray(x), np.asarray(y)
    assert np.all(np.abs(x - y) <= rtol * np.maximum(np.abs(y), np.abs(y).max() * 1e-6)), \
        f"max rel err {np.max(np.abs(x - y) / np.abs(y)):.3e}"


# -- damping and coins ---------------------------------------------------------------

def test_damping_spot_values():
    assert damp(np.array([4.0]), np.array([2.0]), np.array([False]))[0] == 3.0
    assert damp(np.array([4.0]), np.array([2.0]), np.array([True]))[0] == 4.0
    new = np.arange(8.0).reshape(2, 2, 2)
    old = np.zeros_like(new)
    out = damp(new, old, np.array([True, False]))
    np.testing.assert_array_equal(out[0], new[0])
    np.testing.assert_array_equal(out[1], new[1] / 2)


def test_coins_are_reproducible_and_fair():
    a = coin_flips(7, 3, 10_000)
    np.testing.assert_array_equal(a, coin_flips(7, 3, 10_000))
    assert not np.array_equal(a, coin_flips(7, 4, 10_000))
    assert not np.array_equal(a, coin_flips(8, 3, 10_000))
    assert abs(a.mean() - 0.5) < 0.02
    np.testing.assert_array_equal(coin_flips(7, 3, 100), a[:100])
    assert coin_flips(0, 1, 0).shape == (0,)


def test_options_validation():
    with pytest.raises(ValidationError):
        BpOptions(max_iters=0)
    with pytest.raises(ValidationError):
        BpOptions(tolerance=0.0)
    assert BpOptions(damping="coin", stop_rule="halving").damping is Damping.COIN


# -- initialisation ----------------------------------------------------------------

def test_init_messages(path3):
    spec = se_spec(path3)
    ff = init_messages(build_graph(spec, GraphKind.FF))
    for m, v in ff.families.values():
        assert np.all(m == 0) and np.all(v == INIT_VARIANCE)
    fc = init_messages(build_graph(spec, GraphKind.FC))
    for name in fc.families:
        for e in range(4):
            g = pair_message(fc, name, e)
            np.testing.assert_array_equal(g.mean, [0.0, 0.0])
            np.testing.assert_allclose(g.cov, np.diag([INIT_VARIANCE] * 2))
    fv = init_messages(build_graph(spec, GraphKind.FV))
    assert fv.n_messages() == 2 * (3 + 4) + 2 * 4


# -- single link: the belief is the product of the factor Gaussians -------------------

def test_single_link_ff_one_sweep():
    net = Network.create([VertexRecord("a", None, 0.1), VertexRecord("b", None, 0.0)],
                         [LinkRecord("a", "b", 4.0)], NetworkKind.POWER_DC)
    spec = se_spec(net, seed=3)
    fg = build_graph(spec, GraphKind.FF)
    beliefs = collect_link_beliefs(fg, sweep(fg, init_messages(fg)))
    p = spec.compiled
    # factors over f: injection at a observes f, at b observes -f, the flow measurement observes f
    expected = product1(product1(Gaussian1(p.inj_z[0], p.inj_s2[0]), Gaussian1(-p.inj_z[1], p.inj_s2[1])),
                        Gaussian1(p.link_z[0] * 4.0 / p.link_c[0, 0], p.link_s2[0] * (4.0 / p.link_c[0, 0]) ** 2))
    assert beliefs.flow_mean[0] == pytest.approx(expected.mean, rel=1e-12)
    assert beliefs.flow_var[0] == pytest.approx(expected.variance, rel=1e-12)
    of = exact_flow_marginals(spec)
    assert beliefs.flow_mean[0] == pytest.approx(of.flow_mean[0], rel=1e-10)


# -- tree exactness --------------------------------------------------------------------

@pytest.mark.parametrize("pmu", [True, False])
@pytest.mark.parametrize("seed", range(8))
def test_tree_exact_after_diameter_sweeps(seed, pmu):
    rng = np.random.default_rng(100 + seed)
    net, diam = random_power_tree(rng, int(rng.integers(2, 40)))
    spec = se_spec(net, seed, pmu)
    oracle = exact_marginals(spec)
    flow_oracle = exact_flow_marginals(spec)
    tight = BpOptions(max_iters=diam, tolerance=1e-300)
    for kind, ref in ((GraphKind.FC, oracle), (GraphKind.FF, flow_oracle)):
        fg = build_graph(spec, kind)
        b, trace, store = run(fg, tight)
        assert_rel(b.flow_mean, ref.flow_mean, 1e-8)
        assert_rel(b.flow_var, ref.flow_var, 1e-8)
        # stationary: one more sweep changes nothing beyond round-off
        nxt = collect_link_beliefs(fg, sweep(fg, store))
        assert_rel(nxt.flow_mean, b.flow_mean, 1e-12)
    fc = build_graph(spec, GraphKind.FC)
    b, _, _ = run(fc, BpOptions(max_iters=diam, tolerance=1e-300))
    ref = oracle.mean[net.endpoints]
    # differences are what the measurements pin down; the absolute level may only see a weak prior
    assert_rel(b.mean[:, 0] - b.mean[:, 1], ref[:, 0] - ref[:, 1], 1e-8)
    sd = np.sqrt(b.cov[:, 0, 0].max())
    np.testing.assert_allclose(b.mean, ref, rtol=0, atol=1e-8 * max(sd, 1.0))
    # the sweep-delta rule needs one extra sweep to observe that nothing changes
    _, trace, _ = run(fc, BpOptions(max_iters=1000, tolerance=1e-12))
    assert trace.converged and trace.iterations <= diam + 1


def test_fv_on_tree_mean_is_exact_at_convergence(star4):
    spec = se_spec(star4, seed=2)
    b, trace, _ = run(build_graph(spec, GraphKind.FV), BpOptions(max_iters=5000, tolerance=1e-13))
    assert trace.converged
    np.testing.assert_allclose(b.flow_mean, exact_marginals(spec).flow_mean, rtol=1e-8)


# -- symmetry ------------------------------------------------------------------------

def test_fc_flip_symmetry(ieee300):
    spec = se_spec(ieee300, seed=4)
    fg = build_graph(spec, GraphKind.FC)
    _, _, store = run(fg, BpOptions(max_iters=40))
    lo = collect_link_beliefs(fg, store)
    hi = collect_link_beliefs(fg, store, from_higher=True)
    np.testing.assert_allclose(hi.mean, lo.mean, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(hi.cov, lo.cov, rtol=1e-6, atol=1e-15)
    np.testing.assert_allclose(hi.flow_mean, lo.flow_mean, rtol=1e-7, atol=1e-12)
    for l in (0, 17, 410):
        g = lo.link(l)
        assert g.flip().flip() == g


def _reversed_ids(net):
    # same network with vertex order reversed: every link changes orientation
    vs = list(reversed(net.vertices))
    return Network.create(vs, net.links, net.kind)


@pytest.mark.parametrize("kind", [GraphKind.FF, GraphKind.FC])
def test_flow_antisymmetry(path3, star4, kind):
    for net in (path3, star4):
        spec = se_spec(net, seed=5)
        rev = _reversed_ids(net)
        rspec = build_se_problem(rev, synthesize_measurements(rev, None, Scenario(seed=5)))
        # align measurement noise: reuse the forward measurements with flipped flow signs
        m = synthesize_measurements(net, None, Scenario(seed=5))
        perm = [net.index_of(v.id) for v in rev.vertices]
        from supplybp.power import MeasurementSet
        rm = MeasurementSet(m.inj_z[perm], m.inj_s2[perm], -m.flow_z, m.flow_s2, m.angle_z[perm], m.angle_s2[perm])
        rspec = build_se_problem(rev, rm)
        a, _, _ = run(build_graph(spec, kind), BpOptions())
        b, _, _ = run(build_graph(rspec, kind), BpOptions())
        np.testing.assert_allclose(b.flow_mean, -a.flow_mean, rtol=1e-9, atol=1e-14)
        np.testing.assert_allclose(b.flow_var, a.flow_var, rtol=1e-9)


# -- determinism and purity ------------------------------------------------------------

def test_seeded_runs_are_bit_identical(ieee300):
    fg = build_graph(se_spec(ieee300, seed=1), GraphKind.FV)
    opts = BpOptions(max_iters=60, damping=Damping.COIN, seed=9)
    a, ta, _ = run(fg, opts)
    b, tb, _ = run(fg, opts)
    assert ta.to_csv() == tb.to_csv()
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.cov, b.cov)
    c, _, _ = run(fg, BpOptions(max_iters=60, damping=Damping.COIN, seed=10))
    assert not np.array_equal(a.mean, c.mean)


@pytest.mark.parametrize("kind", list(GraphKind))
def test_link_order_does_not_matter(ieee300, kind):
    # synchronous updates: processing links in another order gives the same result
    rng = np.random.default_rng(0)
    order = rng.permutation(ieee300.n_links)
    shuffled = Network.create(ieee300.vertices, [ieee300.links[k] for k in order], ieee300.kind)
    m = synthesize_measurements(ieee300, None, Scenario(seed=2))
    from supplybp.power import MeasurementSet
    sm = MeasurementSet(m.inj_z, m.inj_s2, m.flow_z[order], m.flow_s2[order], m.angle_z, m.angle_s2)
    opts = BpOptions(max_iters=25)
    a, _, _ = run(build_graph(build_se_problem(ieee300, m), kind), opts)
    b, _, _ = run(build_graph(build_se_problem(shuffled, sm), kind), opts)
    # only the summation order inside vertex products changes, so agreement is to round-off
    np.testing.assert_allclose(b.flow_mean, a.flow_mean[order], rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(b.flow_var, a.flow_var[order], rtol=1e-10)


# -- stop rules and traces ------------------------------------------------------------

def test_halving_rule_and_trace_csv(ieee300):
    fg = build_graph(se_spec(ieee300), GraphKind.FC)
    b, trace, _ = run(fg, BpOptions(max_iters=2000, tolerance=1e-20, stop_rule=StopRule.HALVING_DELTA),
                      observer=lambda t, bel: {"t2": float(t * t)})
    assert trace.converged
    rows = trace.to_csv().splitlines()
    assert rows[0] == "iter,belief_delta,status,t2"
    assert len(rows) == trace.iterations + 1
    assert rows[-1].split(",")[2] == "converged"
    assert rows[3].split(",")[3] == "9.0"


def test_max_iters_status(ieee300):
    _, trace, _ = run(build_graph(se_spec(ieee300), GraphKind.FC), BpOptions(max_iters=3))
    assert trace.status is Status.MAX_ITERS and trace.iterations == 3


def test_divergence_is_reported_not_raised(ieee300):
    beliefs, trace, _ = run(build_graph(se_spec(ieee300), GraphKind.FV), BpOptions(max_iters=2000))
    assert trace.diverged
    assert trace.belief_delta[-1] == float("inf")
    assert beliefs is not None  # last valid beliefs are kept
    assert isinstance(beliefs.link(0), Gaussian2)
