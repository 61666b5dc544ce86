import dataclasses

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from raepinn.network import Jet, NetworkArch, input_jet, multi_indices
from raepinn.problems import (
    PROBLEMS, ProblemSpec, ac_residual_int, biharmonic, boundary_laplacian_residuals,
    ch_residual_int_coupled, ch_residual_int_decoupled, get_problem, interior_residual,
    laplacian, laplacian_of_f, residual_sb, residual_tb,
)

from conftest import random_params

X, Y, T = sp.symbols("x y t")


def sym_jet(expr, point, order=4, variables=(X, T)):
    """Exact partials of a sympy expression, packed like a network jet."""
    subs = dict(zip(variables, point))
    partials = {}
    for alpha in multi_indices(len(variables), order):
        d = expr
        for v, k in zip(variables, alpha):
            if k:
                d = sp.diff(d, v, k)
        partials[alpha] = float(d.subs(subs).evalf(30))
    return Jet(tuple(float(p) for p in point), partials, order)


def const_jet(value, dim=2, order=4, point=None):
    return Jet(point or (0.0,) * dim, {a: (value if not any(a) else 0.0) for a in multi_indices(dim, order)}, order)


def ac_spec(**kw):
    return dataclasses.replace(get_problem("ac1d_i1"), **kw)


def test_presets_build():
    for name in PROBLEMS:
        spec = get_problem(name)
        assert spec.name == name
        assert ProblemSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(KeyError):
        get_problem("heat")


@pytest.mark.parametrize("bad", [dict(kind="wave"), dict(horizon=0.0), dict(domain=((1.0, -1.0),)),
                                 dict(f_coeffs=(-1.0, 0, 1, 0)), dict(ic="nope")])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ac_spec(**bad)


def test_ac_equilibrium_and_hand_value():
    spec = ac_spec()
    assert ac_residual_int(const_jet(1.0), spec) == 0.0
    assert ac_residual_int(const_jet(2.0), spec) == 18.0


@pytest.mark.parametrize("name", ["ac1d_i1", "ac2d", "ch1d", "ch2d"])
@pytest.mark.parametrize("u", [-1.0, 0.0, 1.0])
def test_constant_equilibria_annihilate(name, u):
    spec = get_problem(name)
    assert interior_residual(const_jet(u, spec.input_dim), spec) == 0.0


def test_ac_residual_against_symbolic_oracle():
    spec = ac_spec()
    expr = X ** 2 * sp.sin(2 * sp.pi * X) * sp.exp(-T)
    c1 = sp.Rational(1, 1000)
    oracle = sp.diff(expr, T) - c1 * sp.diff(expr, X, 2) + 3 * expr ** 3 - 3 * expr
    for x in (-0.7, 0.13, 0.5001):
        jet = sym_jet(expr, (x, 0.0), order=2)
        exact = float(oracle.subs({X: x, T: 0}).evalf(30))
        assert ac_residual_int(jet, spec) == pytest.approx(exact, rel=1e-10)


def test_ch_coupled_against_symbolic_oracle():
    spec = get_problem("ch1d")
    expr = sp.sin(sp.pi * X)
    fu = expr ** 3 - expr
    oracle = sp.Rational(2, 100) * sp.diff(expr, X, 4) - sp.diff(fu, X, 2)
    for x in (-0.3, 0.21, 0.77):
        jet = sym_jet(expr, (x, 0.0))
        exact = float(oracle.subs(X, x).evalf(30))
        assert ch_residual_int_coupled(jet, spec) == pytest.approx(exact, rel=1e-10)


def test_ch_2d_biharmonic_and_laplacian_of_f():
    spec = get_problem("ch2d")
    v = (X, Y, T)
    expr = sp.cos(2 * X) * sp.sin(Y + T) + X * Y
    jet = sym_jet(expr, (0.3, -0.4, 0.1), variables=v)
    subs = {X: 0.3, Y: -0.4, T: 0.1}
    bih = sp.diff(expr, X, 4) + 2 * sp.diff(expr, X, 2, Y, 2) + sp.diff(expr, Y, 4)
    assert biharmonic(jet, spec) == pytest.approx(float(bih.subs(subs)), rel=1e-12)
    fu = expr ** 3 - expr
    lapf = sp.diff(fu, X, 2) + sp.diff(fu, Y, 2)
    assert laplacian_of_f(jet, spec) == pytest.approx(float(lapf.subs(subs)), rel=1e-12)


def test_ch_kappa_zero_is_time_derivative():
    spec = dataclasses.replace(get_problem("ch1d"), kappa=0.0)
    jet = sym_jet(sp.sin(3 * X) * sp.exp(2 * T), (0.4, 0.2))
    assert ch_residual_int_coupled(jet, spec) == jet[(0, 1)]


@given(st.floats(0.1, 10.0))
def test_coefficient_linearity(s):
    base = get_problem("ch1d")
    scaled = dataclasses.replace(base, kappa=base.kappa * s, alpha=base.alpha)
    jet = sym_jet(sp.sin(sp.pi * X) + sp.Rational(1, 3) * X * T, (0.31, 0.2))
    ut = jet[(0, 1)]
    lhs = ch_residual_int_coupled(jet, scaled) - ut
    rhs = s * (base.alpha_kappa * biharmonic(jet, base) - base.kappa * laplacian_of_f(jet, base))
    assert lhs == pytest.approx(rhs, rel=1e-14, abs=1e-14)


def test_decoupled_examples():
    spec = get_problem("ch1d")
    assert ch_residual_int_decoupled(const_jet(0.7), const_jet(0.0), spec) == (0.0, 0.0)
    u = sym_jet(X ** 2, (0.3, 0.0), order=2)
    r1, _ = ch_residual_int_decoupled(u, const_jet(2.0, order=2, point=(0.3, 0.0)), spec)
    assert r1 == 0.0
    with pytest.raises(ValueError):
        ch_residual_int_decoupled(u, sym_jet(X, (0.5, 0.0), order=2), spec)


@pytest.mark.parametrize("name", ["ch1d", "ch2d"])
def test_decoupled_matches_coupled_when_mu_is_exact_laplacian(name):
    spec = get_problem(name)
    v = (X, T) if spec.space_dim == 1 else (X, Y, T)
    expr = sp.sin(sp.pi * X) * sp.exp(-T) + (sp.cos(2 * Y) * X if spec.space_dim == 2 else 0)
    lap = sum(sp.diff(expr, s, 2) for s in v[:-1])
    point = (0.37, 0.12) if spec.space_dim == 1 else (0.37, -0.2, 0.12)
    ju = sym_jet(expr, point, variables=v)
    jmu = sym_jet(lap, point, order=2, variables=v)
    _, r2 = ch_residual_int_decoupled(ju, jmu, spec)
    assert r2 == pytest.approx(ch_residual_int_coupled(ju, spec), rel=1e-12, abs=1e-12)


def test_linearisation_matches_finite_differences_in_partials():
    spec = get_problem("ch1d")
    jet = sym_jet(sp.sin(2 * X) * sp.cos(T) + X ** 3 / 5, (0.4, 0.3))
    r, lin = ch_residual_int_coupled(jet, spec, linearize=True)
    for alpha, dr in lin.items():
        h = 1e-6
        up = dict(jet.partials)
        dn = dict(jet.partials)
        up[alpha] += h
        dn[alpha] -= h
        fd = (ch_residual_int_coupled(Jet(jet.point, up, 4), spec)
              - ch_residual_int_coupled(Jet(jet.point, dn, 4), spec)) / (2 * h)
        assert dr == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_insufficient_order_rejected():
    spec = get_problem("ch1d")
    with pytest.raises(ValueError):
        ch_residual_int_coupled(sym_jet(X, (0.1, 0.0), order=2), spec)


def test_initial_residual_examples():
    i1, i2 = get_problem("ac1d_i1"), get_problem("ac1d_i2")
    assert abs(i1.initial([[0.5]])[0]) < 1e-15
    assert i2.initial([[0.0]])[0] == 0.0
    x = np.linspace(-1, 1, 9)[:, None]
    assert np.all(residual_tb(i1.initial(x), i1, x) == 0.0)
    pts = np.hstack([x, np.zeros_like(x)])
    assert np.all(residual_tb(i1.initial(x), i1, pts) == 0.0)
    with pytest.raises(ValueError):
        residual_tb(0.0, i1, [[0.0, 0.5]])


def _net_jets(arch, p, pts, order):
    return [input_jet(arch, p, q, order) for q in pts]


def test_boundary_pair_antisymmetry_and_identity(rng):
    spec = get_problem("ac2d")
    arch = NetworkArch(3, (8, 8), 1)
    p = random_params(arch, rng)
    a = input_jet(arch, p, [0.0, 0.3, 0.5], 3)
    b = input_jet(arch, p, [1.0, 0.3, 0.5], 3)
    r1, r2 = residual_sb(a, b, spec)
    s1, s2 = residual_sb(b, a, spec)
    assert r1 == -s1 and np.array_equal(r2, -s2)
    z1, z2 = residual_sb(a, a, spec)
    assert z1 == 0.0 and np.all(z2 == 0.0)
    l1, l2 = boundary_laplacian_residuals(a, a, spec)
    assert l1 == 0.0 and np.all(l2 == 0.0)
    with pytest.raises(ValueError):
        residual_sb(a, input_jet(arch, p, [1.0, 0.3, 0.6], 1), spec)


def test_periodic_feature_function_has_zero_pair_residuals():
    spec = get_problem("ch1d")  # period 2
    expr = sp.tanh(0.7 * sp.sin(sp.pi * X) - 1.3 * sp.cos(sp.pi * X) + 0.4 * T) ** 2
    for t in (0.0, 0.17, 0.5):
        a, b = sym_jet(expr, (-1.0, t)), sym_jet(expr, (1.0, t))
        r1, r2 = residual_sb(a, b, spec)
        l1, l2 = boundary_laplacian_residuals(a, b, spec)
        assert max(abs(r1), abs(r2).max(), abs(l1), abs(l2).max()) < 1e-12


def test_constant_field_boundary_laplacian_is_zero():
    spec = get_problem("ch1d")
    l1, l2 = boundary_laplacian_residuals(const_jet(0.3), const_jet(0.3), spec)
    assert l1 == 0.0 and np.all(l2 == 0.0)


def test_boundary_laplacian_vs_finite_differences(rng):
    spec = get_problem("ch1d")
    arch = NetworkArch(2, (10, 10), 1)
    p = random_params(arch, rng, 1.0)
    t, h = 0.2, 1e-3

    def r_sb1(shift):
        a = input_jet(arch, p, [-1.0 + shift, t], 1)
        b = input_jet(arch, p, [1.0 + shift, t], 1)
        return residual_sb(a, b, spec)[0]

    fd = (r_sb1(h) - 2 * r_sb1(0.0) + r_sb1(-h)) / h ** 2
    lap1, _ = boundary_laplacian_residuals(input_jet(arch, p, [-1.0, t], 3),
                                           input_jet(arch, p, [1.0, t], 3), spec)
    assert abs(lap1 - fd) / abs(fd) < 1e-4


def test_laplacian_works_on_batches(rng):
    spec = get_problem("ac2d")
    jets = {a: rng.normal(size=5) for a in multi_indices(3, 2)}
    assert np.array_equal(laplacian(jets, spec), jets[(2, 0, 0)] + jets[(0, 2, 0)])
