import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from monodomain_uq.errors import ArgumentError
from monodomain_uq.fem import IonicParams, assemble_mass, assemble_stiffness
from monodomain_uq.qoi import (NOT_ACTIVATED, ActionPotential, ActivationTime, ErrorNorm, ErrorReport,
                               QoISet, QoIValue, TransmembraneField, activation_times, extract,
                               norm_spacetime, norm_time_series, parse_kind, rmse)
from monodomain_uq.mesh import BoxDomain, build_nested_hierarchy, evaluate_p1

FIELD = TransmembraneField()


def test_parse_kind_and_labels():
    assert parse_kind("field") == FIELD
    ap = parse_kind("action_potential@0.25,0,-0.5")
    assert ap == ActionPotential((0.25, 0.0, -0.5)) and ap.label == "action_potential@0.25,0,-0.5"
    assert parse_kind(" activation_time@0,0,0 ") == ActivationTime((0.0, 0.0, 0.0))
    for bad in ("velocity", "field@1,2,3", "activation_time@1,2", "action_potential@a,b,c"):
        with pytest.raises(ArgumentError):
            parse_kind(bad)


def test_activation_time_interpolates():
    t = activation_times([0.0, 20.0, 40.0], [0.0, 0.1, 0.2], 28.0)
    assert t[0] == pytest.approx(0.14)
    assert activation_times([[5.0, 27.9, 10.0]], [0, 1, 2], 28.0)[0] == NOT_ACTIVATED
    assert activation_times([[30.0, 40.0]], [0.0, 1.0], 28.0)[0] == 0.0


@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-20, 120)))
def test_activation_time_matches_scan(series):
    times = np.linspace(0, 1, len(series))
    got = activation_times(series, times, 28.0)[0]
    k = next((i for i, v in enumerate(series) if v >= 28.0), None)
    if k is None:
        assert got == NOT_ACTIVATED
    elif k == 0:
        assert got == 0.0
    else:
        lo, hi = series[k - 1], series[k]
        assert got == pytest.approx(times[k - 1] + (28.0 - lo) / (hi - lo) * (times[k] - times[k - 1]))
        assert times[k - 1] <= got <= times[k]


def test_extract_examples(hierarchy3, rng):
    lvl = hierarchy3[1]
    u = rng.uniform(0, 20, (lvl.n, lvl.m))
    assert np.array_equal(extract(FIELD, u, lvl).data, u)
    x0 = tuple(lvl.vertices[40])
    assert np.allclose(extract(ActionPotential(x0), u, lvl).data, u[40], atol=1e-12)
    assert extract(ActivationTime(x0), u, lvl, IonicParams()).data == NOT_ACTIVATED
    with pytest.raises(ArgumentError):
        extract(ActionPotential((0.0, 0.0, 0.9)), u, lvl)
    with pytest.raises(ArgumentError):
        extract(FIELD, u[:, :-1], lvl)


def test_activation_extract_uses_interpolated_series(hierarchy3):
    lvl = hierarchy3[1]
    u = np.outer(np.linspace(0, 1, lvl.n) * 0 + 1, np.linspace(0, 60, lvl.m))
    u = u * (1 + lvl.vertices[:, :1])
    x0 = (0.1, -0.2, 0.3)
    series = evaluate_p1(lvl, u, x0)
    expected = activation_times(series, lvl.times, 28.0)[0]
    assert extract(ActivationTime(x0), u, lvl).data == pytest.approx(expected)


def test_value_arithmetic_and_checks(hierarchy3):
    a = QoIValue(FIELD, np.ones((hierarchy3[0].n, hierarchy3[0].m)), hierarchy3[0])
    b = (a + a * 2.0) / 3.0 - a
    assert np.all(b.data == 0)
    with pytest.raises(ArgumentError):
        QoIValue(FIELD, np.ones(3), hierarchy3[0])
    other = QoIValue(FIELD, np.ones((hierarchy3[1].n, hierarchy3[1].m)), hierarchy3[1])
    with pytest.raises(ArgumentError):
        a + other
    s = QoIValue(ActivationTime((0, 0, 0)), 1.0, hierarchy3[0])
    with pytest.raises(ArgumentError):
        s + QoIValue(ActivationTime((0.1, 0, 0)), 1.0, hierarchy3[0])
    lifted = a.to_level(hierarchy3, 2)
    assert lifted.level is hierarchy3[2] and np.allclose(lifted.data, 1.0)
    series = QoIValue(ActionPotential((0, 0, 0)), hierarchy3[0].times, hierarchy3[0]).to_level(hierarchy3, 2)
    assert np.allclose(series.data, hierarchy3[2].times)
    assert s.to_level(hierarchy3, 2).data == 1.0
    with pytest.raises(ArgumentError):
        a.prolong(hierarchy3.transfer(1, 2), hierarchy3[2])


def test_norm_spacetime_examples(hierarchy3):
    lvl = hierarchy3[1]
    mass = assemble_mass(lvl)
    c = 3.0
    assert norm_spacetime(np.full((lvl.n, lvl.m), c), mass, dt=lvl.dt) == pytest.approx(c * np.sqrt(lvl.T))
    assert norm_spacetime(np.zeros((lvl.n, lvl.m)), mass, dt=lvl.dt) == 0
    with pytest.raises(ArgumentError):
        norm_spacetime(np.zeros((lvl.n, lvl.m)), mass, q=1, dt=lvl.dt)
    with pytest.raises(ArgumentError):
        norm_spacetime(np.zeros((lvl.n, lvl.m)), mass)


def test_norm_spacetime_converges_on_cosine():
    box = BoxDomain((0, 0, 0), (1, 1, 1))
    h = build_nested_hierarchy(box, 4, 0.5, 0.16, 0.32)
    exact0 = np.sqrt(0.5 * 0.32)
    exact1 = np.sqrt((0.5 + 0.5 * np.pi**2) * 0.32)
    errs0, errs1 = [], []
    for lvl in h.levels:
        u = np.repeat(np.cos(np.pi * lvl.vertices[:, 0])[:, None], lvl.m, axis=1)
        M, K = assemble_mass(lvl), assemble_stiffness(lvl)
        errs0.append(abs(norm_spacetime(u, M, dt=lvl.dt) - exact0))
        errs1.append(abs(norm_spacetime(u, M, K, q=1, dt=lvl.dt) - exact1))
    assert np.all(np.diff(errs0) < 0) and np.all(np.diff(errs1) < 0)
    assert np.log2(errs0[-2] / errs0[-1]) == pytest.approx(2.0, abs=0.3)
    assert np.log2(errs1[-2] / errs1[-1]) == pytest.approx(2.0, abs=0.3)


def test_norm_time_series_examples():
    t = np.linspace(0, 2.0, 21)
    assert norm_time_series(np.full(21, 1.5), 0.1) == pytest.approx(1.5 * np.sqrt(2.0))
    full = norm_time_series(t, 0.1, q=1) ** 2
    assert full - norm_time_series(t, 0.1) ** 2 == pytest.approx(2.0)
    with pytest.raises(ArgumentError):
        norm_time_series(t, 0.1, q=2)


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-100, 100)), st.floats(1e-3, 1.0))
def test_norm_time_series_matches_1d_matrices(s, dt):
    m = len(s)
    lumped = np.full(m, dt)
    lumped[[0, -1]] = dt / 2
    K = (np.diag(np.r_[1, np.full(m - 2, 2), 1]) - np.eye(m, k=1) - np.eye(m, k=-1)) / dt
    assert norm_time_series(s, dt, 0) ** 2 == pytest.approx(s @ (lumped * s), rel=1e-12, abs=1e-12)
    assert norm_time_series(s, dt, 1) ** 2 == pytest.approx(s @ (lumped * s) + s @ K @ s, rel=1e-12,
                                                           abs=1e-12 * (s @ s) / dt)


@given(st.floats(-10, 10), st.integers(0, 2**31))
def test_norms_are_homogeneous(c, seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(9)
    for q in (0, 1):
        assert norm_time_series(c * s, 0.1, q) == pytest.approx(abs(c) * norm_time_series(s, 0.1, q),
                                                                 rel=1e-12, abs=1e-12)


def test_error_norm_dispatch(hierarchy3, rng):
    lvl = hierarchy3[0]
    u = rng.standard_normal((lvl.n, lvl.m))
    M, K = assemble_mass(lvl), assemble_stiffness(lvl)
    for q in (0, 1):
        norm = ErrorNorm(lvl, q)
        assert norm(QoIValue(FIELD, u, lvl)) == pytest.approx(norm_spacetime(u, M, K, q, lvl.dt))
        assert norm(QoIValue(ActionPotential((0, 0, 0)), u[0], lvl)) == pytest.approx(
            norm_time_series(u[0], lvl.dt, q))
        assert norm(QoIValue(ActivationTime((0, 0, 0)), -2.5, lvl)) == 2.5
    with pytest.raises(ArgumentError):
        ErrorNorm(lvl, 2)
    with pytest.raises(ArgumentError):
        ErrorNorm(hierarchy3[1])(QoIValue(FIELD, u, lvl))


def test_rmse_examples(hierarchy3):
    lvl = hierarchy3[0]
    kind = ActivationTime((0, 0, 0))
    ref = QoIValue(kind, 4.0, lvl)
    assert rmse([QoIValue(kind, 3.0, lvl), QoIValue(kind, 5.0, lvl)], ref) == pytest.approx(1.0)
    assert rmse([ref, ref], ref) == 0.0
    field = QoIValue(FIELD, np.ones((lvl.n, lvl.m)), lvl)
    zero = QoIValue(FIELD, np.zeros((lvl.n, lvl.m)), lvl)
    assert rmse([field], zero) == pytest.approx(ErrorNorm(lvl)(field))
    with pytest.raises(ArgumentError):
        rmse([ref], zero)
    with pytest.raises(ArgumentError):
        rmse([], ref)


def test_rmse_sentinel_rules(hierarchy3):
    lvl = hierarchy3[0]
    kind = ActivationTime((0, 0, 0))
    never = QoIValue(kind, NOT_ACTIVATED, lvl)
    assert rmse([never, never], never) == 0.0
    mixed = rmse([never, QoIValue(kind, 1.0, lvl)], QoIValue(kind, 1.0, lvl))
    assert mixed == pytest.approx(np.sqrt(4.0 / 2))
    assert rmse([never, QoIValue(kind, 2.0, lvl)], never) == pytest.approx(3.0)


def test_rmse_prolongs_to_reference_level(hierarchy3, rng):
    coarse, fine = hierarchy3[0], hierarchy3[2]
    op = hierarchy3.transfer(0, 2)
    vals = [QoIValue(FIELD, rng.standard_normal((coarse.n, coarse.m)), coarse) for _ in range(3)]
    ref = QoIValue(FIELD, rng.standard_normal((fine.n, fine.m)), fine)
    norm = ErrorNorm(fine)
    expected = np.sqrt(np.mean([norm(v.prolong(op, fine) - ref) ** 2 for v in vals]))
    assert rmse(vals, ref, op) == pytest.approx(expected)
    assert rmse(vals[::-1], ref, op, norm=norm) == pytest.approx(expected, rel=1e-14)


@given(st.permutations(range(5)))
def test_rmse_permutation_invariant(perm):
    box = BoxDomain((0, 0, 0), (1, 1, 1))
    lvl = build_nested_hierarchy(box, 1, 1.0, 0.16, 0.32)[0]
    kind = ActionPotential((0.5, 0.5, 0.5))
    rng = np.random.default_rng(11)
    vals = [QoIValue(kind, rng.standard_normal(lvl.m), lvl) for _ in range(5)]
    ref = QoIValue(kind, np.zeros(lvl.m), lvl)
    assert rmse([vals[i] for i in perm], ref, q=1) == pytest.approx(rmse(vals, ref, q=1), rel=1e-14)


def test_qoiset_elementwise(hierarchy3):
    lvl = hierarchy3[0]
    a = QoISet([QoIValue(FIELD, np.ones((lvl.n, lvl.m)), lvl), QoIValue(ActivationTime((0, 0, 0)), 2.0, lvl)])
    b = (a + a) * 0.25 - a / 2
    assert len(b) == 2 and np.all(b[0].data == 0) and b[1].data == 0
    assert a.to_level(hierarchy3, 1)[0].level is hierarchy3[1]
    with pytest.raises(ArgumentError):
        a + QoISet([a[0]])


def test_error_report_rejects_negative():
    assert ErrorReport([0.1, 0.0], 0, 5).repetitions == 5
    with pytest.raises(ArgumentError):
        ErrorReport([-1e-3], 0, 1)
