import dataclasses

import numpy as np
import pytest

from raepinn.problems import get_problem
from raepinn.spectral import (
    BlowUpError, SolutionGrid, evaluate_reference, export_snapshots_csv, free_energy, load_solution,
    mass, node_axes, save_solution, spectral_gradient, spectral_solve, spectral_time_derivative,
)


def ac(**kw):
    return dataclasses.replace(get_problem("ac1d_i1"), **kw)


def test_equilibrium_stays_put():
    g = spectral_solve(ac(ic="one"), 64, 1e-3, np.linspace(0, 1, 6))
    assert np.abs(g.values - 1.0).max() < 1e-12


def test_pure_diffusion_matches_heat_kernel():
    spec = ac(ic="sine", f_coeffs=(0.0, 0.0, 0.0, 0.0), c1_sq=0.01)
    times = np.linspace(0, 1, 11)
    g = spectral_solve(spec, 32, 1e-2, times)
    x = np.asarray(g.axes[0])
    L = 2.0
    exact = np.exp(-0.01 * (2 * np.pi / L) ** 2 * times)[:, None] * np.sin(2 * np.pi * (x + 1) / L)
    assert np.abs(g.values - exact).max() < 1e-8


def test_grid_layout():
    g = spectral_solve(ac(), 16, 1e-3, [0.0, 0.01])
    x = g.axes[0]
    assert x[0] == -1.0 and len(x) == 16 and x[-1] < 1.0
    assert np.allclose(np.diff(x), 2 / 16, rtol=0, atol=1e-15)
    assert g.meta["scheme"] == "ETDRK4" and g.meta["n"] == 16
    assert np.abs(g.values[0] - get_problem("ac1d_i1").initial(x[:, None])).max() < 1e-14


@pytest.mark.parametrize("name,n,dt,T", [("ch1d", 128, 1e-4, 0.05), ("ch2d", 32, 1e-6, 2e-4)])
def test_cahn_hilliard_conserves_mass(name, n, dt, T):
    g = spectral_solve(get_problem(name), n, dt, np.linspace(0, T, 6))
    m = mass(g)
    assert np.abs(m - m[0]).max() < 1e-12


def test_allen_cahn_energy_non_increasing():
    g = spectral_solve(get_problem("ac1d_i1"), 128, 1e-3, np.linspace(0, 1, 21))
    e = free_energy(g)
    assert np.all(np.diff(e) <= 1e-8)
    assert e[-1] < e[0]


def test_time_derivative_is_consistent_with_snapshots():
    g = spectral_solve(get_problem("ac1d_i2"), 64, 1e-4, np.linspace(0, 0.02, 3))
    fine = spectral_solve(get_problem("ac1d_i2"), 64, 1e-4, [0.0, 1e-4])
    ut = spectral_time_derivative(g)[0]
    fd = (fine.values[1] - fine.values[0]) / 1e-4
    assert np.abs(ut - fd).max() < 1e-2 * np.abs(ut).max()


def test_spectral_gradient_of_sine():
    spec = ac(ic="sine")
    x = np.asarray(node_axes(spec, 32)[0])
    vals = np.sin(np.pi * (x + 1))[None, :]
    grid = SolutionGrid([x], np.array([0.0]), vals, spec)
    gx = spectral_gradient(grid)[0, 0]
    assert np.abs(gx - np.pi * np.cos(np.pi * (x + 1))).max() < 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_is_detected():
    with pytest.raises(BlowUpError):
        spectral_solve(get_problem("ch1d"), 64, 5.0, [0.0, 500.0])


@pytest.fixture(scope="module")
def band_limited_2d():
    spec = get_problem("ac2d")
    axes = node_axes(spec, 16)
    X, Y = np.meshgrid(*axes, indexing="ij")

    def field(x, y, t):
        return (1 + t) * np.sin(2 * np.pi * 3 * x) * np.cos(2 * np.pi * 2 * y) + 0.3 * np.cos(2 * np.pi * 5 * y)

    times = np.linspace(0, 1, 5)
    vals = np.stack([field(X, Y, t) for t in times])
    return SolutionGrid(list(axes), times, vals, spec), field


def test_interpolation_hits_nodes_exactly(band_limited_2d):
    g, _ = band_limited_2d
    q = np.array([[g.axes[0][3], g.axes[1][7], g.times[2]], [g.axes[0][0], g.axes[1][15], 1.0]])
    v = evaluate_reference(g, q)
    assert v[0] == g.values[2, 3, 7] and v[1] == g.values[4, 0, 15]


def test_interpolation_exact_for_band_limited_fields(band_limited_2d):
    g, field = band_limited_2d
    rng = np.random.default_rng(0)
    q = np.column_stack([rng.random(200), rng.random(200), rng.random(200)])
    assert np.abs(evaluate_reference(g, q) - field(q[:, 0], q[:, 1], q[:, 2])).max() < 1e-12


def test_interpolation_of_constant_and_hull_checks():
    spec = ac()
    x = np.asarray(node_axes(spec, 8)[0])
    g = SolutionGrid([x], np.array([0.0, 0.5, 1.0]), np.full((3, 8), 0.7), spec)
    q = np.column_stack([np.linspace(-1, 1, 13), np.linspace(0, 1, 13)])
    assert np.allclose(evaluate_reference(g, q), 0.7, rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        evaluate_reference(g, [[0.0, 1.5]])
    with pytest.raises(ValueError):
        evaluate_reference(g, [[1.2, 0.5]])


def test_save_load_and_csv(tmp_path):
    g = spectral_solve(get_problem("ch1d"), 16, 1e-3, [0.0, 0.01, 0.02])
    save_solution(tmp_path / "r.npz", g, "abc")
    h = load_solution(tmp_path / "r.npz")
    assert np.array_equal(h.values, g.values) and np.array_equal(h.times, g.times)
    assert h.spec == g.spec and h.meta["config_hash"] == "abc"
    export_snapshots_csv(g, tmp_path / "s.csv", times=[0.01])
    body = [l for l in (tmp_path / "s.csv").read_text().splitlines() if not l.startswith("#")]
    assert body[0] == "t,x,u" and len(body) == 17


def test_invalid_arguments():
    with pytest.raises(ValueError):
        spectral_solve(ac(), 48, 1e-3, [0.0, 0.1])
    with pytest.raises(ValueError):
        spectral_solve(ac(), 16, 1e-3, [0.0, 0.10005])
    with pytest.raises(ValueError):
        spectral_solve(ac(), 16, 0.0, [0.0, 0.1])
