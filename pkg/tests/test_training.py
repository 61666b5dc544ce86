import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from raepinn.config import build_config
from raepinn.network import NetworkArch, forward, init_xavier, input_jet, load_checkpoint
from raepinn.problems import ac_residual_int, get_problem, residual_sb
from raepinn.sampling import PointSet, sample_problem_points
from raepinn.spectral import spectral_solve
from raepinn.training import (
    LossBreakdown, LossModel, TrainingAborted, assemble_loss, read_trainlog, train,
)

from conftest import random_params

GAMMA = {"int": 1.0, "tb": 100.0, "sb": 1.0}


def tiny_points(spec, x0=0.0):
    return PointSet(interior=np.array([[0.3, 0.5]]), sb_p=np.array([[-1.0, 0.5]]),
                    sb_q=np.array([[1.0, 0.5]]), sb_axis=np.array([0]),
                    initial=np.array([[x0]]), seed=0)


@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3),
       st.floats(0, 200), st.floats(0, 200), st.floats(0, 200))
def test_compose_total(li, lt, ls, gi, gt, gs):
    g = {"int": gi, "tb": gt, "sb": gs}
    b = LossBreakdown.compose(li, lt, ls, g)
    assert b.total == pytest.approx(gi * li + gt * lt + gs * ls, rel=1e-14, abs=0)
    assert min(b.l_int, b.l_tb, b.l_sb) >= 0


def test_zero_network_zero_residuals():
    spec = get_problem("ac1d_i1")
    arch = NetworkArch(2, (6, 6), 1)
    loss = assemble_loss(spec, arch, np.zeros(arch.n_params), tiny_points(spec), [1.0], GAMMA)
    assert (loss.l_int, loss.l_tb, loss.l_sb, loss.total) == (0.0, 0.0, 0.0, 0.0)


def test_single_interior_point_hand_value():
    # f(0) = 2, so the zero network has R = 2 at every interior point
    spec = dataclasses.replace(get_problem("ac1d_i1"), f_coeffs=(3.0, 0.0, -3.0, 2.0))
    arch = NetworkArch(2, (4,), 1)
    loss = assemble_loss(spec, arch, np.zeros(arch.n_params), tiny_points(spec), [1.0],
                         {"int": 1.0, "tb": 0.0, "sb": 0.0})
    assert loss.l_int == 4.0 and loss.total == 4.0


def test_unit_weights_match_independent_mse(rng):
    spec = get_problem("ac1d_i1")
    arch = NetworkArch(2, (8, 8), 1)
    p = random_params(arch, rng, 1.0)
    ps = sample_problem_points(spec, (37, 5, 9), 3)
    loss = assemble_loss(spec, arch, p, ps, np.ones(37), GAMMA)
    r_int = [ac_residual_int(input_jet(arch, p, q, 2), spec) for q in ps.interior]
    r_tb = forward(arch, p, ps.initial_st) - spec.initial(ps.initial)
    pairs = [residual_sb(input_jet(arch, p, a, 1), input_jet(arch, p, b, 1), spec)
             for a, b in zip(ps.sb_p, ps.sb_q)]
    l_sb = np.mean([r1 ** 2 + np.sum(r2 ** 2) for r1, r2 in pairs])
    assert loss.l_int == pytest.approx(np.mean(np.square(r_int)), rel=1e-12)
    assert loss.l_tb == pytest.approx(np.mean(r_tb ** 2), rel=1e-12)
    assert loss.l_sb == pytest.approx(l_sb, rel=1e-12)


def test_loss_invariant_to_interior_order(rng):
    spec = get_problem("ac1d_i1")
    arch = NetworkArch(2, (8, 8), 1)
    p = random_params(arch, rng, 1.0)
    ps = sample_problem_points(spec, (300, 8, 16), 1)
    lam = rng.random(300)
    perm = rng.permutation(300)
    shuffled = dataclasses.replace(ps, interior=ps.interior[perm])
    a = assemble_loss(spec, arch, p, ps, lam, GAMMA)
    b = assemble_loss(spec, arch, p, shuffled, lam[perm], GAMMA)
    assert a.total == b.total


@pytest.mark.parametrize("name", ["ac1d_i1", "ch1d", "ac2d"])
def test_gradient_matches_finite_differences_and_chunking(name, rng):
    spec = get_problem(name)
    arch = NetworkArch(spec.input_dim, (6, 5), 1)
    p = random_params(arch, rng, 0.5)
    ps = sample_problem_points(spec, (40, 6, 8), 2)
    lam = 0.5 + rng.random(40)
    whole = LossModel(spec, arch, ps, GAMMA)
    small = LossModel(spec, arch, ps, GAMMA, chunk_rows=64)
    la, ga, _, _ = whole.evaluate(p, lam)
    lb, gb, _, _ = small.evaluate(p, lam)
    assert la.total == lb.total
    assert np.allclose(ga, gb, rtol=1e-12, atol=1e-14)
    for k in rng.choice(arch.n_params, 8, replace=False):
        e = np.zeros(arch.n_params)
        e[k] = 1e-6
        fp = whole.evaluate(p + e, lam, need_grad=False)[0].total
        fm = whole.evaluate(p - e, lam, need_grad=False)[0].total
        assert ga[k] == pytest.approx((fp - fm) / 2e-6, rel=1e-5, abs=1e-8)


def test_decoupled_loss_gradient(rng):
    spec = dataclasses.replace(get_problem("ch1d"), kind="ch_decoupled")
    arch = NetworkArch(2, (6,), 2)
    p = random_params(arch, rng, 0.5)
    ps = sample_problem_points(spec, (30, 4, 6), 0)
    model = LossModel(spec, arch, ps, GAMMA, chunk_rows=40)
    lam = np.ones(30)
    loss, g, _, mag = model.evaluate(p, lam)
    assert mag.shape == (30,) and np.all(mag >= 0)
    for k in rng.choice(arch.n_params, 6, replace=False):
        e = np.zeros(arch.n_params)
        e[k] = 1e-6
        fd = (model.evaluate(p + e, lam, False)[0].total - model.evaluate(p - e, lam, False)[0].total) / 2e-6
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)


# ----------------------------------------------------------- short runs


@pytest.fixture(scope="module")
def tiny_reference():
    spec = get_problem("ac1d_i1")
    return spectral_solve(spec, 32, 1e-3, np.linspace(0, 1, 11))


def tiny_config(**over):
    tree = {
        "preset": "ac1d_i1", "seed": 0,
        "counts": {"N_int": 64, "N_sb": 8, "N_tb": 16},
        "network": {"hidden": [8, 8]},
        "weighting": {"k_int": 5},
        "optimizer": {"adam_iters": 30, "lbfgs_iters": 5},
        "reference": {"n": 32, "dt": 1e-3, "snapshots": 11},
        "logging": {"log_every": 10, "checkpoint_every": 20},
    }
    for k, v in over.items():
        tree.setdefault(k, {})
        if isinstance(v, dict):
            tree[k].update(v)
        else:
            tree[k] = v
    return build_config(tree)


def test_short_run_writes_artifacts(tmp_path, tiny_reference):
    cfg = tiny_config()
    res = train(cfg, tiny_reference, out_dir=tmp_path)
    for name in ("trainlog.csv", "summary.json", "config.json", "checkpoint_final.bin",
                 "checkpoint_adam.bin", "checkpoint_last.bin", "points.csv", "rae_weights.csv"):
        assert (tmp_path / name).exists(), name
    meta, cols = read_trainlog(tmp_path / "trainlog.csv")
    assert meta["config_hash"] == cfg.hash
    assert list(cols) == ["iteration", "l_int", "l_tb", "l_sb", "total", "rel_l2_u", "rel_l2_ux",
                          "rel_l2_ut", "lr", "wall_ms"]
    it = cols["iteration"]
    assert np.all(np.diff(it) > 0) and it[0] == 0
    assert np.all(np.isfinite(np.column_stack(list(cols.values()))))
    assert cols["total"][-1] < cols["total"][0]
    arch, params, h = load_checkpoint(tmp_path / "checkpoint_final.bin")
    assert h == cfg.hash and np.array_equal(params, res.params)
    assert res.summary["adam_iterations"] == 30


def test_repeat_runs_are_bit_identical(tmp_path, tiny_reference):
    cfg = tiny_config()
    a = train(cfg, tiny_reference, out_dir=tmp_path / "a")
    b = train(cfg, tiny_reference, out_dir=tmp_path / "b")
    strip = lambda rows: [r[:-1] for r in rows]
    assert strip(a.log_rows) == strip(b.log_rows)
    assert np.array_equal(a.params, b.params)
    _, ca = read_trainlog(tmp_path / "a" / "trainlog.csv")
    _, cb = read_trainlog(tmp_path / "b" / "trainlog.csv")
    for k in ca:
        if k != "wall_ms":
            assert np.array_equal(ca[k], cb[k]), k


def test_vanilla_keeps_unit_weights(tiny_reference):
    res = train(tiny_config(weighting={"mode": "vanilla"}, optimizer={"lbfgs_iters": 0}),
                tiny_reference)
    assert np.all(res.weights.lam == 1.0)


def test_rae_weights_move(tiny_reference):
    res = train(tiny_config(optimizer={"lbfgs_iters": 0}), tiny_reference)
    lam = res.weights.lam
    assert not np.all(lam == 1.0) and np.all(lam >= 0)
    assert res.weights.iteration == 30


def test_learning_rate_schedule_logged(tiny_reference):
    res = train(tiny_config(optimizer={"lbfgs_iters": 0, "decay_rate": 0.5, "decay_every": 10}),
                tiny_reference)
    lr = {int(r[0]): r[-2] for r in res.log_rows}
    assert lr[0] == 1e-3 and lr[10] == 5e-4 and lr[20] == 2.5e-4


def test_early_stop_in_adam_when_enabled():
    res = train(tiny_config(optimizer={"early_stop_tol": 1e9, "early_stop_phase": "all"}))
    assert res.stop_reason == "early_stop" and res.summary["adam_iterations"] == 2


def test_early_stop_not_applied_to_adam_by_default():
    res = train(tiny_config(optimizer={"early_stop_tol": 1e9, "lbfgs_iters": 0}))
    assert res.stop_reason == "budget" and res.summary["adam_iterations"] == 30


def test_nan_aborts_with_last_good_checkpoint(tmp_path):
    cfg = tiny_config(optimizer={"lr": 1e200, "lbfgs_iters": 0})
    with pytest.raises(TrainingAborted) as info:
        train(cfg, out_dir=tmp_path)
    path = info.value.checkpoint
    assert path and path.endswith("checkpoint_lastgood.bin")
    _, params, _ = load_checkpoint(path)
    assert np.all(np.isfinite(params))
    assert (tmp_path / "trainlog.csv").exists()
