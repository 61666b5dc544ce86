"""Fourier pseudo-spectral reference solver (ETDRK4) for periodic AC/CH problems.

The state is kept as ``rfftn`` coefficients on an ``n``-per-axis grid that
excludes the duplicate periodic endpoint.  The cubic nonlinearity is
evaluated on a grid padded to ``2n`` per axis, which removes aliasing from
the product exactly.  The Nyquist mode is held at zero.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .io_utils import atomic_write_bytes, write_csv
from .problems import ProblemSpec

BLOWUP_LIMIT = 1e3
CONTOUR_POINTS = 32


class BlowUpError(FloatingPointError):
    pass


@dataclass
class SolutionGrid:
    axes: list                 # per-axis node coordinates, length n each
    times: np.ndarray          # (n_t,) sorted, times[0] == 0
    values: np.ndarray         # (n_t, n[, n]) row-major, axis order (x[, y])
    spec: ProblemSpec
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.axes[0])

    @property
    def dim(self):
        return len(self.axes)

    def mesh_points(self, stride=1, time_stride=1):
        """All (node, snapshot) combinations as (M, d+1) rows plus matching values."""
        axes = [a[::stride] for a in self.axes]
        times = self.times[::time_stride]
        grids = np.meshgrid(*axes, times, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        vals = self.values[::time_stride]
        sl = (slice(None),) + (slice(None, None, stride),) * self.dim
        vals = np.moveaxis(vals[sl], 0, -1).ravel()
        return pts, vals


# ------------------------------------------------------------ operators


def _wavenumbers(spec, n):
    """Angular wavenumbers for an rfftn layout, Nyquist entries included."""
    ks = []
    d = spec.space_dim
    for i, (a, b) in enumerate(spec.domain):
        L = b - a
        if i == d - 1:
            k = 2 * np.pi / L * np.arange(n // 2 + 1)
        else:
            k = 2 * np.pi / L * np.fft.fftfreq(n, 1.0 / n)
        ks.append(k)
    return np.meshgrid(*ks, indexing="ij")


def _nyquist_mask(n, d):
    shape = [n] * (d - 1) + [n // 2 + 1]
    mask = np.ones(shape, dtype=bool)
    for i in range(d):
        idx = [slice(None)] * d
        idx[i] = n // 2
        mask[tuple(idx)] = False
    return mask


def linear_symbol(spec, n):
    K = _wavenumbers(spec, n)
    k2 = sum(k * k for k in K)
    if spec.kind == "ac":
        return -spec.c1_sq * k2, k2
    return -spec.alpha_kappa * k2 * k2, k2


def _pad(v, n, d):
    """Zero-pad rfftn coefficients from n to 2n per axis."""
    m = 2 * n
    out = np.zeros([m] * (d - 1) + [m // 2 + 1], dtype=complex)
    h = n // 2
    if d == 1:
        out[: h + 1] = v
    else:
        out[:h, : h + 1] = v[:h]
        out[m - h:, : h + 1] = v[h:]
    return out * (m / n) ** d


def _unpad(w, n, d):
    m = 2 * n
    h = n // 2
    if d == 1:
        v = w[: h + 1].copy()
    else:
        v = np.concatenate([w[:h, : h + 1], w[m - h:, : h + 1]], axis=0)
    return v * (n / m) ** d


class _Rhs:
    def __init__(self, spec, n):
        self.spec, self.n, self.d = spec, n, spec.space_dim
        self.L, self.k2 = linear_symbol(spec, n)
        self.mask = _nyquist_mask(n, self.d)
        self.shape = (n,) * self.d
        self.pshape = (2 * n,) * self.d
        self.axes = tuple(range(self.d))

    def fhat(self, v):
        u = np.fft.irfftn(_pad(v, self.n, self.d), s=self.pshape, axes=self.axes)
        return _unpad(np.fft.rfftn(self.spec.f(u)), self.n, self.d) * self.mask

    def nonlinear(self, v):
        fh = self.fhat(v)
        if self.spec.kind == "ac":
            return -fh
        return -self.spec.kappa * self.k2 * fh

    def full(self, v):
        return self.L * v + self.nonlinear(v)


def etdrk4_coefficients(L, h, m=CONTOUR_POINTS):
    """E, E2, Q, f1, f2, f3 by contour averaging around each ``h*L``."""
    r = np.exp(1j * np.pi * (np.arange(1, m + 1) - 0.5) / m)
    hL = h * L
    E = np.exp(hL)
    E2 = np.exp(hL / 2)
    LR = hL[..., None] + r
    eLR = np.exp(LR)
    Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=-1))
    f1 = h * np.real(np.mean((-4 - LR + eLR * (4 - 3 * LR + LR ** 2)) / LR ** 3, axis=-1))
    f2 = h * np.real(np.mean((2 + LR + eLR * (-2 + LR)) / LR ** 3, axis=-1))
    f3 = h * np.real(np.mean((-4 - 3 * LR - LR ** 2 + eLR * (4 - LR)) / LR ** 3, axis=-1))
    return E, E2, Q, f1, f2, f3


def node_axes(spec, n):
    return [a + (b - a) * np.arange(n) / n for a, b in spec.domain]


def initial_field(spec, n):
    axes = node_axes(spec, n)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return spec.initial(pts).reshape((n,) * spec.space_dim)


def _snapshot_steps(times, dt):
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("snapshot times must be sorted, distinct and start at 0")
    steps = np.rint(times / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(1.0, times)):
        raise ValueError("snapshot times must be integer multiples of dt")
    return steps


def spectral_solve(spec, n_modes, dt, snapshot_times, progress=None):
    """Integrate ``spec`` from its initial condition; returns a :class:`SolutionGrid`."""
    if n_modes < 4 or n_modes & (n_modes - 1):
        raise ValueError("n_modes must be a power of two >= 4")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if spec.kind == "ch_decoupled":
        spec = ProblemSpec(**{**spec.to_dict(), "kind": "ch"})
    steps = _snapshot_steps(snapshot_times, dt)
    d, n = spec.space_dim, n_modes
    rhs = _Rhs(spec, n)
    E, E2, Q, f1, f2, f3 = etdrk4_coefficients(rhs.L, dt)
    u0 = initial_field(spec, n)
    v = np.fft.rfftn(u0) * rhs.mask
    out = np.empty((len(steps),) + (n,) * d)
    start = time.perf_counter()
    k_snap = 0
    for step in range(int(steps[-1]) + 1):
        if step == steps[k_snap]:
            u = np.fft.irfftn(v, s=rhs.shape, axes=rhs.axes)
            peak = np.abs(u).max()
            if not np.isfinite(peak) or peak > BLOWUP_LIMIT:
                raise BlowUpError(f"|u| = {peak:.3e} at t = {step * dt:.6g} (step {step})")
            out[k_snap] = u
            k_snap += 1
            if k_snap == len(steps):
                break
            if progress:
                progress(step * dt)
        Nv = rhs.nonlinear(v)
        a = E2 * v + Q * Nv
        Na = rhs.nonlinear(a)
        b = E2 * v + Q * Na
        Nb = rhs.nonlinear(b)
        c = E2 * a + Q * (2 * Nb - Nv)
        Nc = rhs.nonlinear(c)
        v = E * v + Nv * f1 + 2 * (Na + Nb) * f2 + Nc * f3
        if step % 64 == 0:
            peak = np.abs(v).max() / n ** d
            if not np.isfinite(peak) or peak > BLOWUP_LIMIT:
                raise BlowUpError(f"spectral amplitude {peak:.3e} near t = {step * dt:.6g}")
    meta = {
        "n": n, "dt": dt, "scheme": "ETDRK4", "dealias": "pad-2x", "contour_points": CONTOUR_POINTS,
        "solve_seconds": time.perf_counter() - start, "raepinn_version": __version__,
    }
    return SolutionGrid(node_axes(spec, n), np.asarray(snapshot_times, dtype=np.float64), out, spec, meta)


# --------------------------------------------------------- derived fields


def spectral_gradient(grid, field_values=None):
    """Spatial gradient of every snapshot: array (d, n_t, n[, n])."""
    spec, n, d = grid.spec, grid.n, grid.dim
    vals = grid.values if field_values is None else field_values
    K = _wavenumbers(spec, n)
    mask = _nyquist_mask(n, d)
    axes = tuple(range(1, d + 1))
    vh = np.fft.rfftn(vals, axes=axes)
    return np.stack([np.fft.irfftn(1j * k * mask * vh, s=(n,) * d, axes=axes) for k in K])


def spectral_partial(grid, orders, field_values=None):
    """Spatial partial ``d^orders`` of every snapshot (``orders`` one int per axis)."""
    spec, n, d = grid.spec, grid.n, grid.dim
    vals = grid.values if field_values is None else field_values
    if not any(orders):
        return vals
    K = _wavenumbers(spec, n)
    sym = _nyquist_mask(n, d).astype(complex)
    for k, m in zip(K, orders):
        sym = sym * (1j * k) ** m
    axes = tuple(range(1, d + 1))
    return np.fft.irfftn(sym * np.fft.rfftn(vals, axes=axes), s=(n,) * d, axes=axes)


def spectral_time_derivative(grid):
    """u_t at each snapshot from the PDE right-hand side."""
    rhs = _Rhs(grid.spec, grid.n)
    out = np.empty_like(grid.values)
    for i, u in enumerate(grid.values):
        v = np.fft.rfftn(u) * rhs.mask
        out[i] = np.fft.irfftn(rhs.full(v), s=rhs.shape, axes=rhs.axes)
    return out


def free_energy(grid):
    """Discrete AC energy per snapshot: sum (c1^2/2 |grad u|^2 + F(u)) dx."""
    spec = grid.spec
    g = spectral_gradient(grid)
    dx = np.prod([(b - a) / grid.n for a, b in spec.domain])
    dens = 0.5 * spec.c1_sq * (g ** 2).sum(axis=0) + spec.F(grid.values)
    return dens.reshape(len(grid.times), -1).sum(axis=1) * dx


def mass(grid):
    return grid.values.reshape(len(grid.times), -1).mean(axis=1)


def self_convergence_gap(grid):
    """Sup-norm change of the final snapshot when n doubles and dt halves.

    Compared on the nodes of ``grid``, which are every other fine node.
    """
    n, dt = grid.meta["n"], grid.meta["dt"]
    fine = spectral_solve(grid.spec, 2 * n, dt / 2, [0.0, float(grid.times[-1])])
    sub = fine.values[-1][(slice(None, None, 2),) * grid.dim]
    return float(np.abs(sub - grid.values[-1]).max())

# ------------------------------------------------------------ evaluation


def _cardinal(x, nodes, a, L):
    """Periodic cardinal (Dirichlet) functions for even n at queries ``x``: (Q, n)."""
    n = len(nodes)
    xi = ((x[:, None] - nodes[None, :]) / L) % 1.0 * n
    arg = np.pi * xi / n
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.sin(np.pi * xi) / (n * np.tan(arg))
    hit = x[:, None] == nodes[None, :]
    near = (np.abs(np.sin(arg)) < 1e-14) & ~hit
    S[near] = 1.0
    rows = hit.any(axis=1)
    S[rows] = hit[rows].astype(float)
    return S


def _time_weights(t, times):
    """Four-point Lagrange weights and the snapshot indices they apply to."""
    nt = len(times)
    i = np.clip(np.searchsorted(times, t, side="right") - 1, 0, nt - 2)
    lo = np.clip(i - 1, 0, max(nt - 4, 0))
    m = min(4, nt)
    idx = lo[:, None] + np.arange(m)[None, :]
    tt = times[idx]
    w = np.ones((len(t), m))
    for j in range(m):
        for k in range(m):
            if j != k:
                w[:, j] *= (t - tt[:, k]) / (tt[:, j] - tt[:, k])
    return idx, w


def interpolate_field(grid, field_values, query, chunk=512):
    """Trig interpolation in space and cubic Lagrange interpolation in time."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    d = grid.dim
    if q.shape[1] != d + 1:
        raise ValueError(f"query points need {d + 1} coordinates")
    t = q[:, -1]
    if np.any(t < grid.times[0]) or np.any(t > grid.times[-1]):
        raise ValueError("query time outside the stored snapshot range")
    for i, (a, b) in enumerate(grid.spec.domain):
        if np.any(q[:, i] < a) or np.any(q[:, i] > b):
            raise ValueError(f"query coordinate {i} outside the domain box")
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        sl = slice(s, s + chunk)
        idx, w = _time_weights(t[sl], grid.times)
        Ss = [_cardinal(q[sl, i], grid.axes[i], a, b - a) for i, (a, b) in enumerate(grid.spec.domain)]
        acc = np.zeros(idx.shape[0])
        for j in range(idx.shape[1]):
            snap = field_values[idx[:, j]]
            if d == 1:
                v = np.einsum("qa,qa->q", Ss[0], snap)
            else:
                v = np.einsum("qa,qab,qb->q", Ss[0], snap, Ss[1], optimize=True)
            acc += w[:, j] * v
        out[sl] = acc
    return out


def evaluate_reference(grid, query_points):
    return interpolate_field(grid, grid.values, query_points)


# ---------------------------------------------------------------- storage


def save_solution(path, grid, config_hash=""):
    import io

    meta = dict(grid.meta)
    meta.update({"problem": grid.spec.to_dict(), "config_hash": config_hash,
                 "format": "raepinn-solution-grid/1"})
    buf = io.BytesIO()
    np.savez(buf, times=grid.times, values=grid.values,
             **{f"axis{i}": a for i, a in enumerate(grid.axes)},
             meta=np.array(json.dumps(meta, sort_keys=True)))
    atomic_write_bytes(path, buf.getvalue())


def load_solution(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        spec = ProblemSpec.from_dict(meta["problem"])
        axes = [z[f"axis{i}"] for i in range(spec.space_dim)]
        return SolutionGrid(axes, z["times"], z["values"], spec, meta)


def export_snapshots_csv(grid, path, times=None, comments=()):
    """Long-format CSV (t, x[, y], u) for the requested snapshot times."""
    sel = range(len(grid.times)) if times is None else [
        int(np.argmin(np.abs(grid.times - t))) for t in times]
    names = ["t", "x", "y"][: grid.dim + 1]
    rows = []
    mesh = np.meshgrid(*grid.axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    for i in sel:
        for c, u in zip(coords, grid.values[i].ravel()):
            rows.append([float(grid.times[i]), *map(float, c), float(u)])
    write_csv(path, names + ["u"], rows, comments)


