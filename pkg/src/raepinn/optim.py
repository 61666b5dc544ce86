"""Adam, L-BFGS with a strong-Wolfe line search, and the step learning-rate schedule."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np


def lr_schedule(base_lr, iteration, decay_rate=1.0, decay_every=1):
    if decay_every < 1:
        raise ValueError("decay_every must be >= 1")
    return base_lr * decay_rate ** (iteration // decay_every)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state, params, grad, lr):
    """One bias-corrected Adam update. Returns ``(state', params')``."""
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("Adam: parameter, gradient and moment sizes differ")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, b1, b2, state.eps), new_params


# ------------------------------------------------------------------ L-BFGS


@dataclass
class LBFGSState:
    memory: int = 10
    pairs: deque = field(default_factory=deque)
    last_grad: np.ndarray = None
    skipped: int = 0

    def push(self, s, y, threshold=1e-10):
        """Store a curvature pair unless ``s.y <= threshold * |s| |y|``. Returns whether stored.

        The test is on the cosine so it does not start rejecting every pair
        once steps become small near a minimum.
        """
        sy = float(np.dot(s, y))
        if not sy > threshold * np.linalg.norm(s) * np.linalg.norm(y):
            self.skipped += 1
            return False
        self.pairs.append((s, y, 1.0 / sy))
        while len(self.pairs) > self.memory:
            self.pairs.popleft()
        return True


def two_loop_direction(grad, pairs):
    """``-H grad`` from the stored pairs (two-loop recursion)."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic interpolating (f, f') at a and b, or None."""
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = gb - ga + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


class LineSearchFailure(RuntimeError):
    pass


def strong_wolfe(phi, f0, g0, step=1.0, c1=1e-4, c2=0.9, max_evals=25, step_max=1e10):
    """Find a step satisfying the strong Wolfe conditions.

    ``phi(a)`` returns ``(f, dphi, payload)``.  Returns ``(a, f, payload, evals)``.
    """
    if g0 >= 0:
        raise LineSearchFailure("not a descent direction")
    a_prev, f_prev, g_prev = 0.0, f0, g0
    evals = 0
    a = step
    first = True
    while evals < max_evals:
        f, g, pay = phi(a)
        evals += 1
        if not np.isfinite(f):
            # shrink into the finite region and keep bracketing
            a = 0.5 * (a_prev + a)
            continue
        if f > f0 + c1 * a * g0 or (not first and f >= f_prev):
            return _zoom(phi, f0, g0, a_prev, f_prev, g_prev, a, f, g, c1, c2, max_evals - evals, evals)
        if abs(g) <= -c2 * g0:
            return a, f, pay, evals
        if g >= 0:
            return _zoom(phi, f0, g0, a, f, g, a_prev, f_prev, g_prev, c1, c2, max_evals - evals, evals)
        a_prev, f_prev, g_prev = a, f, g
        a = min(2.0 * a, step_max)
        first = False
    raise LineSearchFailure("line search exceeded its evaluation budget")


def _zoom(phi, f0, g0, lo, flo, glo, hi, fhi, ghi, c1, c2, budget, evals):
    for _ in range(budget):
        a = _cubic_min(lo, flo, glo, hi, fhi, ghi)
        left, right = min(lo, hi), max(lo, hi)
        margin = 0.1 * (right - left)
        if a is None or not (left + margin <= a <= right - margin):
            a = 0.5 * (lo + hi)
        f, g, pay = phi(a)
        evals += 1
        if not np.isfinite(f) or f > f0 + c1 * a * g0 or f >= flo:
            hi, fhi, ghi = a, f, g
            if not np.isfinite(f):
                ghi = glo
        else:
            if abs(g) <= -c2 * g0:
                return a, f, pay, evals
            if g * (hi - lo) >= 0:
                hi, fhi, ghi = lo, flo, glo
            lo, flo, glo = a, f, g
        if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
            break
    raise LineSearchFailure("zoom phase did not find a strong-Wolfe step")


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    reason: str


def lbfgs_minimize(fun, x0, max_iters, memory=10, gtol=1e-9, c1=1e-4, c2=0.9,
                   max_ls=25, callback=None):
    """Minimise ``fun(x) -> (f, grad)``.

    ``callback(it, x, f, grad)`` runs after every accepted step; returning a
    truthy value stops the loop (reason ``"callback"``).  Stop reasons:
    ``max_iters``, ``gtol``, ``line_search``, ``callback``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    evals = 1
    state = LBFGSState(memory)
    if np.linalg.norm(g) < gtol:
        return LBFGSResult(x, f, g, 0, evals, "gtol")
    it = 0
    reason = "max_iters"
    while it < max_iters:
        d = two_loop_direction(g, list(state.pairs))
        gd = float(np.dot(g, d))
        if gd >= 0:
            # stale curvature; restart from steepest descent
            state.pairs.clear()
            d = -g
            gd = -float(np.dot(g, g))
        step = 1.0 if state.pairs else min(1.0, 1.0 / max(np.abs(g).sum(), 1e-300))

        def phi(a, d=d):
            xa = x + a * d
            fa, ga = fun(xa)
            return fa, float(np.dot(ga, d)), (xa, ga)

        try:
            a, f_new, (x_new, g_new), n = strong_wolfe(phi, f, gd, step, c1, c2, max_ls)
        except LineSearchFailure:
            reason = "line_search"
            break
        evals += n
        state.push(x_new - x, g_new - g)
        x, f, g = x_new, f_new, g_new
        state.last_grad = g
        it += 1
        if callback is not None and callback(it, x, f, g):
            reason = "callback"
            break
        if np.linalg.norm(g) < gtol:
            reason = "gtol"
            break
    return LBFGSResult(x, f, g, it, evals, reason)
