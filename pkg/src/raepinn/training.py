"""Composite PINN loss, its exact gradient, and the Adam -> L-BFGS training driver."""

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import problems as pm
from .io_utils import provenance, read_csv, source_hash, write_csv, write_json
from .metrics import relative_l2
from .network import (NetworkArch, NonFiniteError, backward, check_finite, forward_jets,
                      get_plan, init_xavier, save_checkpoint)
from .optim import AdamState, adam_step, lbfgs_minimize, lr_schedule
from .runtime import tune_allocator
from .rae import WeightState, build_neighbor_index, rae_update
from .sampling import sample_problem_points


@dataclass
class LossBreakdown:
    l_int: float
    l_tb: float
    l_sb: float
    gamma: dict
    total: float

    @classmethod
    def compose(cls, l_int, l_tb, l_sb, gamma):
        total = gamma["int"] * l_int + gamma["tb"] * l_tb + gamma["sb"] * l_sb
        return cls(float(l_int), float(l_tb), float(l_sb), dict(gamma), float(total))


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ----------------------------------------------------------------- loss


class _Out:
    """Scalar view of output ``k`` of a JetBatch."""

    def __init__(self, jets, k=0):
        self.jets, self.k, self.points = jets, k, jets.points

    def __getitem__(self, alpha):
        return self.jets.output(alpha, self.k)


def _scatter(cot, plan, lin, scale, k=0):
    """Add ``scale * lin[alpha]`` into the cotangent slot of each partial."""
    for alpha, coef in lin.items():
        cot[plan.index[alpha], :, k] += scale * coef


# rows (points x jet components) per interior block; keeps one block's
# activations in cache, where single-core BLAS and the jet kernels run fastest
CHUNK_ROWS = 2048


class LossModel:
    """Holds the frozen point sets and jet plans for one problem/network pair."""

    def __init__(self, spec, arch, point_set, gamma, chunk_rows=CHUNK_ROWS):
        self.spec, self.arch, self.ps = spec, arch, point_set
        self.gamma = dict(gamma)
        d = arch.input_dim
        self.int_plan = get_plan(d, spec.interior_alphas())
        self.chunk = max(1, chunk_rows // len(self.int_plan))
        self.tb_plan = get_plan(d, [spec.idx()])
        self.sb_plan = get_plan(d, spec.boundary_alphas(1))
        self.tb_points = point_set.initial_st
        self.sb_points = np.vstack([point_set.sb_p, point_set.sb_q])

    def _int_res(self, jets, linearize):
        spec = self.spec
        if spec.kind == "ch_decoupled":
            return pm.ch_residual_int_decoupled(_Out(jets, 0), _Out(jets, 1), spec, linearize)
        return pm.interior_residual(_Out(jets, 0), spec, linearize)

    def residual_magnitude(self, res):
        """Per-point residual size that drives the RAE weights."""
        if self.spec.kind == "ch_decoupled":
            r1, r2 = res
            return np.sqrt(r1 ** 2 + r2 ** 2)
        return np.abs(res)

    def evaluate(self, params, lam, need_grad=True, on_residual=None):
        """Loss breakdown and gradient.

        ``on_residual(abs_r)`` may return replacement weights; it runs after the
        interior residual is known and before the weighted loss is formed.
        """
        arch, spec, g = self.arch, self.spec, self.gamma
        ps = self.ps
        keep = need_grad

        # interior, in cache-sized chunks; tapes are kept until the weights are known
        n_int = len(ps.interior)
        step = self.chunk
        chunks, res_parts, lin_parts = [], [], []
        for a in range(0, n_int, step):
            ji = forward_jets(arch, params, ps.interior[a:a + step], self.int_plan, keep_tape=keep)
            check_finite(ji.values, "interior jets", point_axis=1)
            out = self._int_res(ji, linearize=need_grad)
            r, ln = (out if need_grad else (out, None))
            chunks.append(ji if keep else None)
            res_parts.append(r)
            lin_parts.append(ln)
        if spec.kind == "ch_decoupled":
            res = tuple(np.concatenate([r[j] for r in res_parts]) for j in range(2))
        else:
            res = np.concatenate(res_parts)
        mag = self.residual_magnitude(res)
        bad = np.flatnonzero(~np.isfinite(mag))
        if bad.size:
            raise NonFiniteError(f"non-finite interior residual at point {bad[0]} "
                                 f"{tuple(ps.interior[bad[0]])}", int(bad[0]))
        if on_residual is not None:
            new = on_residual(mag)
            if new is not None:
                lam = new
        # exactly rounded sums: the loss does not depend on point order
        if spec.kind == "ch_decoupled":
            r1, r2 = res
            l_int = math.fsum(lam * (r1 * r1 + r2 * r2)) / n_int
        else:
            l_int = math.fsum(lam * (res * res)) / n_int

        # initial
        jt = forward_jets(arch, params, self.tb_points, self.tb_plan, keep_tape=keep)
        rtb = pm.residual_tb(jt.output(spec.idx(), 0), spec, ps.initial)
        check_finite(rtb, "initial residual")
        l_tb = math.fsum(rtb * rtb) / len(rtb)

        # periodic pairs, both faces in one batch
        js = forward_jets(arch, params, self.sb_points, self.sb_plan, keep_tape=keep)
        n_sb = len(ps.sb_p)
        jp = _Split(js, slice(0, n_sb))
        jq = _Split(js, slice(n_sb, 2 * n_sb))
        r1, r2 = pm.residual_sb(jp, jq, spec)
        check_finite(r1, "boundary residual")
        l_sb = math.fsum(np.concatenate([r1 * r1, (r2 * r2).ravel()])) / n_sb

        loss = LossBreakdown.compose(l_int, l_tb, l_sb, g)
        if not need_grad:
            return loss, None, lam, mag

        # cotangents
        grad = None
        for j, ji in enumerate(chunks):
            sl = slice(j * step, j * step + len(ji))
            ci = np.zeros_like(ji.values)
            lin = lin_parts[j]
            if spec.kind == "ch_decoupled":
                (l1u, l1m), (l2u, l2m) = lin
                sa = 2 * g["int"] * lam[sl] * res[0][sl] / n_int
                sb = 2 * g["int"] * lam[sl] * res[1][sl] / n_int
                _scatter(ci, self.int_plan, l1u, sa, 0)
                _scatter(ci, self.int_plan, l1m, sa, 1)
                _scatter(ci, self.int_plan, l2u, sb, 0)
                _scatter(ci, self.int_plan, l2m, sb, 1)
            else:
                _scatter(ci, self.int_plan, lin, 2 * g["int"] * lam[sl] * res[sl] / n_int)
            gj = backward(arch, params, ji, ci)
            grad = gj if grad is None else grad + gj
            chunks[j] = None
        ct = np.zeros_like(jt.values)
        ct[0, :, 0] = 2 * g["tb"] * rtb / len(rtb)
        cs = np.zeros_like(js.values)
        z = self.sb_plan.index[spec.idx()]
        s1 = 2 * g["sb"] * r1 / n_sb
        cs[z, :n_sb, 0] = s1
        cs[z, n_sb:, 0] = -s1
        for i in range(spec.space_dim):
            a = self.sb_plan.index[spec.unit(i)]
            s2 = 2 * g["sb"] * r2[i] / n_sb
            cs[a, :n_sb, 0] = s2
            cs[a, n_sb:, 0] = -s2
        grad += backward(arch, params, jt, ct)
        grad += backward(arch, params, js, cs)
        return loss, grad, lam, mag


class _Split:
    def __init__(self, jets, sl):
        self.jets, self.sl = jets, sl
        self.points = jets.points[sl]

    def __getitem__(self, alpha):
        return self.jets.output(alpha, 0)[self.sl]


def assemble_loss(spec, arch, params, point_set, lam, gamma):
    """Loss breakdown for fixed interior weights ``lam`` (no gradient)."""
    model = LossModel(spec, arch, point_set, gamma)
    loss, _, _, _ = model.evaluate(params, np.asarray(lam, dtype=np.float64), need_grad=False)
    return loss


# ------------------------------------------------------------- evaluator


class Evaluator:
    """Relative L2 errors of u and its first partials on reference nodes."""

    def __init__(self, arch, reference, stride=1, time_stride=1):
        from .spectral import spectral_gradient, spectral_time_derivative

        spec = reference.spec
        self.arch, self.spec = arch, spec
        sl = (slice(None, None, time_stride),) + (slice(None, None, stride),) * spec.space_dim
        pts, _ = reference.mesh_points(stride, time_stride)
        self.points = pts
        grads = spectral_gradient(reference)
        ut = spectral_time_derivative(reference)

        def flat(field):
            return np.moveaxis(field[sl], 0, -1).ravel()

        self.columns = {"u": (spec.idx(), flat(reference.values))}
        names = ["ux", "uy"][: spec.space_dim]
        for i, nm in enumerate(names):
            self.columns[nm] = (spec.unit(i), flat(grads[i]))
        self.columns["ut"] = (spec.idx(t=1), flat(ut))
        self.plan = get_plan(arch.input_dim, [a for a, _ in self.columns.values()])

    @property
    def names(self):
        return list(self.columns)

    def predict(self, params):
        """Network values for each column, on ``self.points``."""
        jets = forward_jets(self.arch, params, self.points, self.plan, keep_tape=False)
        return {nm: jets.output(a, 0) for nm, (a, _) in self.columns.items()}

    def errors(self, params):
        pred = self.predict(params)
        return {nm: relative_l2(pred[nm], ref) for nm, (_, ref) in self.columns.items()}


# ---------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: np.ndarray
    log_header: list
    log_rows: list
    weights: WeightState = None
    stop_reason: str = ""
    summary: dict = field(default_factory=dict)


def _phase_early_stop(cfg_phase, phase):
    return cfg_phase == "all" or cfg_phase == phase


def train(cfg, reference=None, out_dir=None, verbose=False):
    """Run the configured training and write artifacts into ``out_dir`` (if given).

    ``cfg`` is an :class:`~raepinn.config.ExperimentConfig`.
    """
    tune_allocator()
    spec = cfg.problem
    c = cfg.tree
    seed = c["seed"]
    chash = cfg.hash
    out_dim = 2 if spec.kind == "ch_decoupled" else 1
    arch = NetworkArch(spec.input_dim, tuple(c["network"]["hidden"]), out_dim)
    params = init_xavier(arch, seed)
    ps = sample_problem_points(spec, c["counts"], seed)
    model = LossModel(spec, arch, ps, c["gammas"])

    w = c["weighting"]
    rae_on = w["mode"] == "rae"
    state = WeightState.initial(len(ps.interior), w["beta"], w["k_int"])
    index = build_neighbor_index(ps.interior, w["k_int"]) if rae_on else None

    lg = c["logging"]
    evaluator = None
    if reference is not None:
        evaluator = Evaluator(arch, reference, lg["eval_stride"], lg["eval_time_stride"])
    err_names = evaluator.names if evaluator else []
    header = ["iteration", "l_int", "l_tb", "l_sb", "total"] + [f"rel_l2_{n}" for n in err_names] + ["lr", "wall_ms"]
    rows = []
    comments = provenance(chash) + [f"problem: {spec.name}", f"weighting: {w['mode']}", f"seed: {seed}"]

    o = c["optimizer"]
    A, B = o["adam_iters"], o["lbfgs_iters"]
    tol, es_phase = o["early_stop_tol"], o["early_stop_phase"]
    t0 = time.perf_counter()
    c0 = time.process_time()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "config.json"),
                   {"config_hash": chash, "config": cfg.to_dict(), "provenance": cfg.provenance})

    def ckpt(name, p):
        if out_dir:
            path = os.path.join(out_dir, name)
            save_checkpoint(path, arch, p, chash)
            return path
        return None

    def record(it, loss, p, lr):
        errs = evaluator.errors(p) if evaluator else {}
        row = [it, loss.l_int, loss.l_tb, loss.l_sb, loss.total] + [errs[n] for n in err_names]
        row += [float(lr), int(round((time.perf_counter() - t0) * 1000))]
        rows.append(row)
        if verbose:
            extra = " ".join(f"{n}={errs[n]:.3e}" for n in err_names)
            print(f"[{spec.name}] it={it} loss={loss.total:.4e} {extra}", flush=True)

    def dump_weights(it):
        if out_dir and lg["weight_dump_every"] and rae_on and it % lg["weight_dump_every"] == 0:
            wr = state.w_raw if state.w_raw is not None else np.ones(len(state.lam))
            write_csv(os.path.join(out_dir, f"weights_{it:06d}.csv"), ["index", "w_raw", "lambda"],
                      [[i, float(a), float(b)] for i, (a, b) in enumerate(zip(wr, state.lam))],
                      provenance(chash))

    adam = AdamState.zeros(arch.n_params, beta1=o["adam_beta1"], beta2=o["adam_beta2"], eps=o["adam_eps"])
    last_good = params.copy()
    prev_total = None
    stop = "budget"
    lr = o["lr"]

    def abort(exc, it):
        path = ckpt("checkpoint_lastgood.bin", last_good)
        _finish(out_dir, header, rows, comments)
        raise TrainingAborted(f"training aborted at iteration {it}: {exc}", path) from exc

    it = 0
    try:
        for it in range(A):
            lr = lr_schedule(o["lr"], it, o["decay_rate"], o["decay_every"])

            def on_residual(mag, it=it):
                nonlocal state
                if rae_on and it % w["stride"] == 0:
                    state = rae_update(state, mag, index)
                return state.lam

            loss, grad, _, _ = model.evaluate(params, state.lam, True, on_residual)
            if not np.isfinite(loss.total):
                raise NonFiniteError("loss is not finite")
            if it % lg["log_every"] == 0:
                record(it, loss, params, lr)
            dump_weights(it)
            if _phase_early_stop(es_phase, "adam") and prev_total is not None and abs(loss.total - prev_total) < tol:
                stop = "early_stop"
                break
            prev_total = loss.total
            last_good = params
            adam, params = adam_step(adam, params, grad, lr)
            if lg["checkpoint_every"] and (it + 1) % lg["checkpoint_every"] == 0:
                ckpt("checkpoint_last.bin", params)
    except (NonFiniteError, FloatingPointError) as exc:
        abort(exc, it)
    n_adam = it + 1 if A else 0
    ckpt("checkpoint_adam.bin", params)

    lam_frozen = state.lam.copy()
    n_lbfgs = 0
    if stop == "budget" and B > 0:
        def fun(p):
            loss, grad, _, _ = model.evaluate(p, lam_frozen, True)
            fun.cache = (p.copy(), loss)
            return loss.total, grad

        prev = {"total": None}
        good = {"p": params.copy()}

        def callback(k, x, f, g):
            nonlocal n_lbfgs
            n_lbfgs = k
            good["p"] = x.copy()
            xc, loss = fun.cache
            if not np.array_equal(xc, x):
                loss, _, _, _ = model.evaluate(x, lam_frozen, False)
            itg = A + k
            if k % lg["log_every"] == 0 or k == B:
                record(itg, loss, x, 0.0)
            if lg["checkpoint_every"] and itg % lg["checkpoint_every"] == 0:
                ckpt("checkpoint_last.bin", x)
            stop_now = (_phase_early_stop(es_phase, "lbfgs") and prev["total"] is not None
                        and abs(f - prev["total"]) < tol)
            prev["total"] = f
            return stop_now

        try:
            f0, _ = fun(params)
            prev["total"] = f0
            res = lbfgs_minimize(fun, params, B, memory=o["lbfgs_memory"], callback=callback)
        except (NonFiniteError, FloatingPointError) as exc:
            last_good = good["p"]
            abort(exc, A + n_lbfgs)
        params = res.x
        stop = {"callback": "early_stop", "max_iters": "budget"}.get(res.reason, res.reason)

    final_it = n_adam + n_lbfgs
    loss, _, _, _ = model.evaluate(params, state.lam if B == 0 else lam_frozen, False)
    if not rows or rows[-1][0] != final_it:
        record(final_it, loss, params, lr if n_lbfgs == 0 else 0.0)
    ckpt("checkpoint_final.bin", params)
    _finish(out_dir, header, rows, comments)
    summary = {
        "config_hash": chash, "problem": spec.name, "seed": seed, "weighting": w["mode"],
        "adam_iterations": n_adam, "lbfgs_iterations": n_lbfgs, "stop_reason": stop,
        "final_loss": loss.total, "wall_seconds": time.perf_counter() - t0,
        "cpu_seconds": time.process_time() - c0, "source_hash": source_hash(),
    }
    for k, name in enumerate(header):
        if name.startswith("rel_l2_"):
            summary[f"final_{name}"] = rows[-1][k]
    if out_dir:
        write_json(os.path.join(out_dir, "summary.json"), summary)
        ps.export_csv(os.path.join(out_dir, "points.csv"), provenance(chash))
        write_csv(os.path.join(out_dir, "rae_weights.csv"), ["index", "lambda"],
                  [[i, float(v)] for i, v in enumerate(state.lam)], provenance(chash))
    return TrainResult(params, header, rows, state, stop, summary)


def _finish(out_dir, header, rows, comments):
    if out_dir:
        write_csv(os.path.join(out_dir, "trainlog.csv"), header, rows, comments)


def read_trainlog(path):
    """Returns ``(meta, columns)`` with ``columns[name]`` a float array."""
    comments, header, rows = read_csv(path)
    meta = dict(line.split(": ", 1) for line in comments if ": " in line)
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return meta, {h: arr[:, i] for i, h in enumerate(header)}
