"""Two-hidden-layer tanh network with exact input jets and parameter gradients.

Input derivatives are propagated forward as truncated multivariate Taylor
stacks (one array per multi-index); parameter gradients come from a
hand-written reverse sweep over that same computation.  Coordinates are
ordered ``(x, [y,] t)`` and multi-indices are tuples of the same length.
"""

import hashlib
import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .io_utils import atomic_write_bytes

MAX_JET_ORDER = 4


class UnsupportedOrderError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a jet, residual or gradient contribution is not finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def check_finite(values, what, point_axis=0):
    values = np.asarray(values)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.argwhere(bad)[0][point_axis]) if values.ndim else 0
        raise NonFiniteError(f"non-finite {what} at index {idx}", index=idx)


@dataclass(frozen=True)
class NetworkArch:
    input_dim: int
    hidden_widths: tuple = (128, 128)
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2 (space + time)")
        if any(w < 1 for w in self.hidden_widths) or self.output_dim < 1:
            raise ValueError("layer widths must be >= 1")

    @property
    def dims(self):
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)

    @property
    def n_params(self):
        d = self.dims
        return sum(d[k] * d[k + 1] + d[k + 1] for k in range(len(d) - 1))

    def layout(self):
        """Per layer ``(rows, cols, weight_offset, bias_offset)``; W is row-major (out, in)."""
        d = self.dims
        off = 0
        entries = []
        for k in range(len(d) - 1):
            rows, cols = d[k + 1], d[k]
            entries.append((rows, cols, off, off + rows * cols))
            off += rows * cols + rows
        return entries


def unpack(arch, values):
    """Views ``[(W, b), ...]`` into the flat parameter vector (no copies)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (arch.n_params,):
        raise ValueError(f"expected {arch.n_params} parameters, got {values.shape}")
    layers = []
    for rows, cols, w_off, b_off in arch.layout():
        W = values[w_off:w_off + rows * cols].reshape(rows, cols)
        b = values[b_off:b_off + rows]
        layers.append((W, b))
    return layers


def pack(arch, layers):
    out = np.empty(arch.n_params)
    for (rows, cols, w_off, b_off), (W, b) in zip(arch.layout(), layers):
        out[w_off:w_off + rows * cols] = np.asarray(W, dtype=np.float64).reshape(-1)
        out[b_off:b_off + rows] = b
    return out


def init_xavier(arch, seed):
    """Xavier-normal weights (variance 2/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for rows, cols, _, _ in arch.layout():
        std = np.sqrt(2.0 / (rows + cols))
        layers.append((rng.normal(0.0, std, size=(rows, cols)), np.zeros(rows)))
    return pack(arch, layers)


# ----------------------------------------------------------------- jet plans


def multi_indices(dim, max_order):
    """All multi-indices with ``|alpha| <= max_order``, graded then lexicographic (descending)."""
    out = []
    for order in range(max_order + 1):
        level = [a for a in itertools.product(range(order + 1), repeat=dim) if sum(a) == order]
        out.extend(sorted(level, reverse=True))
    return out


def _downward_closure(alphas, dim):
    closed = set()
    for a in alphas:
        if len(a) != dim:
            raise ValueError(f"multi-index {a} does not match input dimension {dim}")
        for b in itertools.product(*(range(ai + 1) for ai in a)):
            closed.add(tuple(b))
    return sorted(closed, key=lambda a: (sum(a), tuple(-x for x in a)))


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def _faa_di_bruno(alpha):
    """Merged terms ``{(b1, ..., bk) sorted: multiplicity}`` of d^alpha (g o z)."""
    slots = [i for i, a in enumerate(alpha) for _ in range(a)]
    dim = len(alpha)
    terms = {}
    for part in _set_partitions(list(range(len(slots)))):
        betas = []
        for block in part:
            beta = [0] * dim
            for s in block:
                beta[slots[s]] += 1
            betas.append(tuple(beta))
        key = tuple(sorted(betas, reverse=True))
        terms[key] = terms.get(key, 0) + 1
    return terms


class JetPlan:
    """Downward-closed set of multi-indices plus the tanh composition tables."""

    def __init__(self, input_dim, alphas):
        self.input_dim = input_dim
        self.alphas = _downward_closure(alphas, input_dim)
        self.max_order = max(sum(a) for a in self.alphas)
        if self.max_order > MAX_JET_ORDER:
            raise UnsupportedOrderError(
                f"jet order {self.max_order} exceeds supported maximum {MAX_JET_ORDER}")
        self.index = {a: i for i, a in enumerate(self.alphas)}
        rows = []
        for a in self.alphas[1:]:
            for betas, mult in sorted(_faa_di_bruno(a).items()):
                rows.append((self.index[a], float(mult), [self.index[b] for b in betas]))
        self.tables = self._tables(rows)
        # first-layer pre-activations are affine in the inputs: only
        # first-order blocks survive
        first = [r for r in rows if all(sum(self.alphas[b]) == 1 for b in r[2])]
        self.first_layer_tables = self._tables(first)
        self.unit_slots = []
        for i in range(input_dim):
            e = tuple(int(j == i) for j in range(input_dim))
            if e in self.index:
                self.unit_slots.append((i, self.index[e]))

    @staticmethod
    def _tables(rows):
        T = len(rows)
        out = np.zeros(T, dtype=np.int64)
        coef = np.zeros(T)
        order = np.zeros(T, dtype=np.int64)
        blocks = np.full((T, MAX_JET_ORDER), -1, dtype=np.int64)
        for t, (o, c, bl) in enumerate(rows):
            out[t], coef[t], order[t] = o, c, len(bl)
            blocks[t, :len(bl)] = bl
        return out, coef, order, blocks

    def __len__(self):
        return len(self.alphas)

    @classmethod
    def full(cls, input_dim, max_order):
        if not 0 <= max_order <= MAX_JET_ORDER:
            raise UnsupportedOrderError(f"max_order must be in 0..{MAX_JET_ORDER}, got {max_order}")
        return cls(input_dim, multi_indices(input_dim, max_order))

    def input_stack(self, points):
        """Taylor stack of the identity map at ``points``: shape (C, N, input_dim)."""
        N = points.shape[0]
        X = np.zeros((len(self), N, self.input_dim))
        X[0] = points
        for i in range(self.input_dim):
            e = tuple(int(j == i) for j in range(self.input_dim))
            if e in self.index:
                X[self.index[e], :, i] = 1.0
        return X


_PLAN_CACHE = {}


def get_plan(input_dim, alphas):
    key = (input_dim, tuple(sorted(set(map(tuple, alphas)))))
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        plan = _PLAN_CACHE[key] = JetPlan(input_dim, alphas)
    return plan


# ----------------------------------------------------------- forward / VJP


@dataclass
class JetBatch:
    """Partials of the network output at N points: ``values[c, n, out]``."""

    plan: JetPlan
    points: np.ndarray
    values: np.ndarray
    tape: list = field(default=None, repr=False)

    def __getitem__(self, alpha):
        v = self.values[self.plan.index[tuple(alpha)]]
        return v[:, 0] if v.shape[-1] == 1 else v

    def output(self, alpha, k):
        return self.values[self.plan.index[tuple(alpha)], :, k]

    def __len__(self):
        return self.points.shape[0]


def _first_layer(plan, points, W, b):
    """Pre-activation jet of an affine layer fed by the input stack.

    The input stack is ``points`` in slot 0, a constant unit vector in each
    first-order slot and zero elsewhere.
    """
    C, N = len(plan), points.shape[0]
    z = np.empty((C, N, W.shape[0]))
    np.matmul(points, W.T, out=z[0])
    z[0] += b
    units = dict((c, i) for i, c in plan.unit_slots)
    for c in range(1, C):
        if c in units:
            z[c] = W[:, units[c]]
        else:
            z[c] = 0.0
    return z


def forward_jets(arch, params, points, alphas, keep_tape=True):
    """Propagate the Taylor stack for ``alphas`` (closed downward) through the net."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != arch.input_dim:
        raise ValueError(f"points have dimension {points.shape[1]}, network expects {arch.input_dim}")
    plan = alphas if isinstance(alphas, JetPlan) else get_plan(arch.input_dim, alphas)
    layers = unpack(arch, params)
    C, N = len(plan), points.shape[0]
    tape = []
    h = None
    for k, (W, b) in enumerate(layers[:-1]):
        if k == 0:
            z = _first_layer(plan, points, W, b)
        else:
            z = (h.reshape(C * N, -1) @ np.ascontiguousarray(W.T)).reshape(C, N, -1)
            z[0] += b
        tables = plan.first_layer_tables if k == 0 else plan.tables
        h_next = kernels.tanh_jet_forward(z, *tables)
        if keep_tape:
            tape.append((h, z, h_next, tables))
        h = h_next
    W, b = layers[-1]
    if len(layers) == 1:
        u = _first_layer(plan, points, W, b)
    else:
        u = (h.reshape(C * N, -1) @ np.ascontiguousarray(W.T)).reshape(C, N, -1)
        u[0] += b
    if keep_tape:
        tape.append((h, None, None, None))
    return JetBatch(plan, points, u, tape if keep_tape else None)


def _first_layer_grad(plan, points, dz):
    """``sum_c dz_c^T X_c`` for the structured first-layer input stack."""
    gW = dz[0].T @ points
    for i, c in plan.unit_slots:
        gW[:, i] += dz[c].sum(axis=0)
    return gW


def backward(arch, params, jets, cotangent):
    """Vector-Jacobian product: ``d/dtheta sum(cotangent * jets.values)``.

    ``cotangent`` has the shape of ``jets.values`` (C, N, output_dim).  The
    reduction over points is a fixed-order BLAS contraction so repeated calls
    with the same inputs are bitwise identical.
    """
    if jets.tape is None:
        raise ValueError("jets were computed without a tape")
    cotangent = np.asarray(cotangent, dtype=np.float64).reshape(jets.values.shape)
    check_finite(cotangent, "loss cotangent", point_axis=1)
    layers = unpack(arch, params)
    plan = jets.plan
    C, N = jets.values.shape[:2]
    grads = [None] * len(layers)

    def weight_grad(k, dz, h_in):
        if k == 0:
            return _first_layer_grad(plan, jets.points, dz)
        return dz.reshape(C * N, -1).T @ h_in.reshape(C * N, -1)

    def input_cot(dz, W):
        dz2 = dz.reshape(C * N, -1)
        if W.shape[0] == 1:
            return (dz2 * W[0]).reshape(C, N, -1)
        return (dz2 @ W).reshape(C, N, -1)

    h, _, _, _ = jets.tape[-1]
    last = len(layers) - 1
    W, _ = layers[-1]
    grads[-1] = (weight_grad(last, cotangent, h), cotangent[0].sum(axis=0))
    if last > 0:
        dh = input_cot(cotangent, W)
    for k in range(last - 1, -1, -1):
        h_in, z, h_out, tables = jets.tape[k]
        dz = kernels.tanh_jet_backward(z, h_out[0], dh, *tables)
        W, _ = layers[k]
        grads[k] = (weight_grad(k, dz, h_in), dz[0].sum(axis=0))
        if k > 0:
            dh = input_cot(dz, W)
    grad = pack(arch, grads)
    check_finite(grad, "parameter gradient")
    return grad


def forward(arch, params, points):
    """Plain network evaluation; returns shape (N,) for scalar nets or (N, out).

    Routed through the order-0 jet path so it agrees bitwise with
    ``input_jet(..., max_order=0)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != arch.input_dim:
        raise ValueError(f"point dimension {pts.shape[1]} != input_dim {arch.input_dim}")
    zero = (0,) * arch.input_dim
    u = forward_jets(arch, params, pts, [zero], keep_tape=False).values[0]
    if arch.output_dim == 1:
        u = u[:, 0]
    return u[0] if single else u


@dataclass
class Jet:
    """All partials up to ``max_order`` of a scalar network output at one point."""

    point: tuple
    partials: dict
    max_order: int

    def __getitem__(self, alpha):
        return self.partials[tuple(alpha)]


def input_jet(arch, params, point, max_order, output=0):
    if not 0 <= max_order <= MAX_JET_ORDER:
        raise UnsupportedOrderError(f"max_order must be in 0..{MAX_JET_ORDER}, got {max_order}")
    plan = get_plan(arch.input_dim, multi_indices(arch.input_dim, max_order))
    jets = forward_jets(arch, params, np.asarray(point, dtype=np.float64)[None, :], plan,
                        keep_tape=False)
    partials = {a: float(jets.values[i, 0, output]) for i, a in enumerate(plan.alphas)}
    return Jet(tuple(float(p) for p in point), partials, max_order)


def param_gradient(arch, params, groups, functional):
    """Exact gradient of a scalar built from jets at several point groups.

    ``groups`` maps a name to ``(points, alphas)``.  ``functional`` receives a
    dict of :class:`JetBatch` and returns ``(value, cotangents)`` where
    ``cotangents[name]`` has the shape of that batch's ``values``.  Group
    contributions are summed in the insertion order of ``groups``.
    """
    jets = {name: forward_jets(arch, params, pts, al) for name, (pts, al) in groups.items()}
    for name, jb in jets.items():
        check_finite(jb.values, f"jet in group '{name}'", point_axis=1)
    value, cot = functional(jets)
    grad = np.zeros(arch.n_params)
    for name in groups:
        if name in cot:
            grad += backward(arch, params, jets[name], cot[name])
    return value, grad


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"RAEPINN\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arch, params, config_hash=""):
    """Write a checkpoint; layout documented in README ("Checkpoint format")."""
    dims = arch.dims
    digest = config_hash.encode("ascii")[:64].ljust(64, b"\x00")
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) + digest
    header += struct.pack("<Q", arch.n_params)
    body = np.asarray(params, dtype="<f8").tobytes()
    atomic_write_bytes(path, header + body)


def load_checkpoint(path):
    """Returns ``(arch, params, config_hash_hex)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a raepinn checkpoint")
    version, ndims = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    dims = struct.unpack_from(f"<{ndims}I", blob, off)
    off += 4 * ndims
    digest = blob[off:off + 64]
    off += 64
    (n_params,) = struct.unpack_from("<Q", blob, off)
    off += 8
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    arch = NetworkArch(dims[0], tuple(dims[1:-1]), dims[-1])
    if arch.n_params != n_params:
        raise ValueError(f"{path}: parameter count does not match architecture")
    return arch, params, digest.rstrip(b"\x00").decode("ascii")


def params_digest(params):
    return hashlib.sha256(np.asarray(params, dtype="<f8").tobytes()).hexdigest()
