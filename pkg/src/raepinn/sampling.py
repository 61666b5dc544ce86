"""Collocation sets (Latin hypercube) and the midpoint quadrature rule."""

from dataclasses import dataclass

import numpy as np

from .io_utils import write_csv


def lhs_sample(box, N, seed, open_low=None):
    """Stratified-permutation Latin hypercube sample of ``N`` points in ``box``.

    ``box`` is a sequence of ``(a, b)`` intervals.  Axis ``i`` gets exactly one
    coordinate in each of ``N`` equal strata; strata are ``[a, b)`` unless
    ``open_low[i]`` is true, in which case they are ``(a, b]``.
    """
    if N < 1:
        raise ValueError("lhs_sample needs N >= 1")
    box = [(float(a), float(b)) for a, b in box]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    open_low = open_low or [False] * len(box)
    pts = np.empty((N, len(box)))
    for i, (a, b) in enumerate(box):
        perm = rng.permutation(N)
        r = rng.random(N)
        if open_low[i]:
            r = 1.0 - r
        pts[:, i] = a + (b - a) * (perm + r) / N
    if any(open_low):
        for i, (a, b) in enumerate(box):
            if open_low[i]:
                pts[:, i] = np.clip(pts[:, i], np.nextafter(a, b), b)
    return pts


@dataclass
class PointSet:
    interior: np.ndarray        # (N_int, d+1)
    sb_p: np.ndarray            # (N_sb, d+1) point on the lower face
    sb_q: np.ndarray            # (N_sb, d+1) matched point on the upper face
    sb_axis: np.ndarray         # (N_sb,) periodic axis of each pair
    initial: np.ndarray         # (N_tb, d) spatial coordinates, t = 0
    seed: int

    @property
    def initial_st(self):
        """Initial points with the t = 0 column appended."""
        return np.hstack([self.initial, np.zeros((len(self.initial), 1))])

    def export_csv(self, path, comments=()):
        d = self.initial.shape[1]
        names = ["x", "y"][:d] + ["t"]
        rows = []
        for i, p in enumerate(self.interior):
            rows.append(["interior", i, -1, *map(float, p)])
        for i, (p, q) in enumerate(zip(self.sb_p, self.sb_q)):
            rows.append(["sb_lower", i, int(self.sb_axis[i]), *map(float, p)])
            rows.append(["sb_upper", i, int(self.sb_axis[i]), *map(float, q)])
        for i, p in enumerate(self.initial_st):
            rows.append(["initial", i, -1, *map(float, p)])
        write_csv(path, ["role", "index", "axis", *names], rows, comments)


def sample_problem_points(spec, counts, seed):
    """Interior, periodic boundary pairs and initial points for ``spec``.

    ``counts`` is ``(N_int, N_sb, N_tb)`` or a dict with those keys.
    """
    if isinstance(counts, dict):
        counts = (counts["N_int"], counts["N_sb"], counts["N_tb"])
    n_int, n_sb, n_tb = (int(c) for c in counts)
    if min(n_int, n_sb, n_tb) < 1:
        raise ValueError("all point counts must be positive")
    d = spec.space_dim
    T = spec.horizon
    ss = np.random.SeedSequence(seed)
    r_int, r_sb, r_tb = (np.random.default_rng(s) for s in ss.spawn(3))

    interior = lhs_sample(list(spec.domain) + [(0.0, T)], n_int, r_int,
                          open_low=[False] * d + [True])

    # split pairs across periodic axes, remainder to the first ones
    per_axis = [n_sb // d + (1 if i < n_sb % d else 0) for i in range(d)]
    ps, qs, axes = [], [], []
    for i, n in enumerate(per_axis):
        if n == 0:
            continue
        others = [spec.domain[j] for j in range(d) if j != i]
        face = lhs_sample(others + [(0.0, T)], n, r_sb, open_low=[False] * (d - 1) + [True])
        p = np.insert(face, i, spec.domain[i][0], axis=1)
        q = np.insert(face, i, spec.domain[i][1], axis=1)
        ps.append(p)
        qs.append(q)
        axes.append(np.full(n, i))
    initial = lhs_sample(spec.domain, n_tb, r_tb)
    return PointSet(interior, np.vstack(ps), np.vstack(qs), np.concatenate(axes), initial, seed)


@dataclass
class QuadratureGrid:
    nodes: np.ndarray
    weights: np.ndarray
    cells_per_axis: int

    @property
    def measure(self):
        return float(self.weights.sum())


def midpoint_grid(box, cells_per_axis):
    if cells_per_axis < 1:
        raise ValueError("cells_per_axis must be >= 1")
    box = [(float(a), float(b)) for a, b in box]
    axes = [a + (b - a) * (np.arange(cells_per_axis) + 0.5) / cells_per_axis for a, b in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    vol = float(np.prod([b - a for a, b in box]))
    M = nodes.shape[0]
    return QuadratureGrid(nodes, np.full(M, vol / M), cells_per_axis)


def midpoint_quadrature(f, grid):
    """``sum_n w_n f(x_n)``; ``f`` maps an (M, d) node array to M values."""
    vals = np.asarray(f(grid.nodes), dtype=np.float64).reshape(-1)
    return float(np.dot(grid.weights, vals))
