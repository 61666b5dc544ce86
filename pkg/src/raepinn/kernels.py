"""Elementwise tanh-jet kernels.

The hidden layers of the network push a stack of Taylor components
``z[c, n, w]`` (component ``c`` = one multi-index, ``n`` = point, ``w`` = unit)
through ``tanh``.  Both the forward composition (Faa di Bruno) and its
vector-Jacobian product are written twice: a fused numba loop and a
vectorised numpy fallback.  Set ``RAEPINN_DISABLE_NUMBA=1`` to force the
numpy path; the two agree to rounding.

Term tables (shared by both paths), one row per term ``t``::

    out[t]     component receiving the term
    coef[t]    integer multiplicity from merging equal set partitions
    order[t]   number of blocks k, i.e. which tanh derivative multiplies it
    blocks[t]  component indices of the k blocks, padded with -1
"""

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

MAX_SIGMA_ORDER = 6


def _tanh_derivative_polys(kmax):
    """Coefficients (ascending powers of s = tanh z) of d^k tanh / dz^k."""
    polys = np.zeros((kmax + 1, kmax + 2))
    polys[0, 1] = 1.0
    one_minus_s2 = np.polynomial.Polynomial([1.0, 0.0, -1.0])
    for k in range(kmax):
        p = np.polynomial.Polynomial(polys[k]).deriv() * one_minus_s2
        c = p.coef
        polys[k + 1, : len(c)] = c
    return polys


SIGMA_POLYS = _tanh_derivative_polys(MAX_SIGMA_ORDER)


def use_numba():
    if njit is None:
        return False
    return os.environ.get("RAEPINN_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


# ---------------------------------------------------------------- numpy path


def sigma(s, k):
    """``d^k tanh / dz^k`` as a polynomial in ``s = tanh z`` (Horner)."""
    coeffs = SIGMA_POLYS[k]
    acc = np.full(np.shape(s), coeffs[k + 1])
    for j in range(k, -1, -1):
        acc *= s
        acc += coeffs[j]
    return acc


def _sigma_stack_np(s, kmax):
    out = np.empty((kmax + 1,) + s.shape)
    out[0] = s
    for k in range(1, kmax + 1):
        out[k] = sigma(s, k)
    return out


def tanh_jet_forward_np(z, out, coef, order, blocks):
    C = z.shape[0]
    kmax = int(order.max()) if len(order) else 1
    s = np.tanh(z[0])
    sig = _sigma_stack_np(s, max(kmax, 1))
    h = np.zeros_like(z)
    h[0] = s
    for t in range(len(out)):
        k = order[t]
        p = coef[t] * sig[k]
        for j in range(k):
            p = p * z[blocks[t, j]]
        h[out[t]] += p
    assert h.shape[0] == C
    return h


def tanh_jet_backward_np(z, s, dh, out, coef, order, blocks):
    kmax = int(order.max()) if len(order) else 1
    sig = _sigma_stack_np(s, kmax + 1)
    dz = np.zeros_like(z)
    dz[0] = dh[0] * sig[1]
    for t in range(len(out)):
        k = order[t]
        g = coef[t] * dh[out[t]]
        prod = np.ones_like(s)
        for j in range(k):
            prod = prod * z[blocks[t, j]]
        dz[0] += g * sig[k + 1] * prod
        for j in range(k):
            others = np.ones_like(s)
            for i in range(k):
                if i != j:
                    others = others * z[blocks[t, i]]
            dz[blocks[t, j]] += g * sig[k] * others
    return dz


# ---------------------------------------------------------------- numba path
#
# A generic loop over the term table does not vectorise: the row indices are
# only known at run time.  Instead each distinct table is turned into a
# straight-line kernel (one pass over the flattened (C, N*W) stack, every term
# written out) and compiled once per process.


def _poly_source(k):
    c = SIGMA_POLYS[k]
    e = repr(float(c[k + 1]))
    for j in range(k, -1, -1):
        e = f"({e}) * s + {float(c[j])!r}"
    return e


def _product(factors):
    return " * ".join(factors)


def forward_source(C, out, coef, order, blocks):
    kmax = max(int(order.max()) if len(order) else 1, 1)
    acc = {c: [] for c in range(1, C)}
    for t in range(len(out)):
        k = int(order[t])
        acc[int(out[t])].append(_product([repr(float(coef[t])), f"g{k}"]
                                         + [f"v{int(b)}" for b in blocks[t, :k]]))
    used = sorted({int(b) for t in range(len(out)) for b in blocks[t, : order[t]]} - {0})
    L = ["def kern(z, s_, h):", "    M = z.shape[1]"]
    L += [f"    z{c} = z[{c}]" for c in used]
    L += [f"    h{c} = h[{c}]" for c in range(C)]
    L += ["    for i in range(M):", "        s = s_[i]"]
    L += [f"        g{k} = {_poly_source(k)}" for k in range(1, kmax + 1)]
    L += [f"        v{c} = z{c}[i]" for c in used]
    L.append("        h0[i] = s")
    L += [f"        h{c}[i] = " + (" + ".join(acc[c]) or "0.0") for c in range(1, C)]
    return "\n".join(L)


def backward_source(C, out, coef, order, blocks):
    kmax = max(int(order.max()) if len(order) else 1, 1)
    acc = {c: [] for c in range(C)}
    acc[0].append("d0 * g1")
    for t in range(len(out)):
        k = int(order[t])
        b = [int(x) for x in blocks[t, :k]]
        head = [repr(float(coef[t])), f"d{int(out[t])}"]
        acc[0].append(_product(head + [f"g{k + 1}"] + [f"v{x}" for x in b]))
        for j in range(k):
            acc[b[j]].append(_product(head + [f"g{k}"] + [f"v{x}" for i, x in enumerate(b) if i != j]))
    used = sorted({int(b) for t in range(len(out)) for b in blocks[t, : order[t]]} - {0})
    outs = sorted({int(o) for o in out} | {0})
    L = ["def kern(z, s_, dh, dz):", "    M = z.shape[1]"]
    L += [f"    z{c} = z[{c}]" for c in used]
    L += [f"    dh{c} = dh[{c}]" for c in outs]
    L += [f"    dz{c} = dz[{c}]" for c in range(C)]
    L += ["    for i in range(M):", "        s = s_[i]"]
    L += [f"        g{k} = {_poly_source(k)}" for k in range(1, kmax + 2)]
    L += [f"        v{c} = z{c}[i]" for c in used]
    L += [f"        d{o} = dh{o}[i]" for o in outs]
    L += [f"        dz{c}[i] = " + (" + ".join(acc[c]) or "0.0") for c in range(C)]
    return "\n".join(L)


_COMPILED = {}


def _compiled(kind, C, tables):
    key = (kind, C) + tuple(np.ascontiguousarray(a).tobytes() for a in tables)
    fn = _COMPILED.get(key)
    if fn is None:
        src = (forward_source if kind == "fwd" else backward_source)(C, *tables)
        ns = {}
        exec(compile(src, f"<raepinn-{kind}-kernel>", "exec"), ns)
        fn = _COMPILED[key] = njit(fastmath=True)(ns["kern"])
    return fn


def tanh_jet_forward(z, out, coef, order, blocks):
    """Return ``h`` with ``h[alpha] = d^alpha tanh(z)`` given the jet ``z``."""
    if not use_numba():
        return tanh_jet_forward_np(z, out, coef, order, blocks)
    C = z.shape[0]
    z = np.ascontiguousarray(z)
    h = np.empty_like(z)
    flat = z.reshape(C, -1)
    s = np.tanh(flat[0])
    _compiled("fwd", C, (out, coef, order, blocks))(flat, s, h.reshape(C, -1))
    return h


def tanh_jet_backward(z, s, dh, out, coef, order, blocks):
    """Pull the cotangent ``dh`` of :func:`tanh_jet_forward` back to ``dz``.

    ``s`` is ``tanh(z[0])`` as returned in ``h[0]`` by the forward call.
    """
    if not use_numba():
        return tanh_jet_backward_np(z, s, dh, out, coef, order, blocks)
    C = z.shape[0]
    dz = np.empty(z.shape)
    _compiled("bwd", C, (out, coef, order, blocks))(
        np.ascontiguousarray(z).reshape(C, -1), np.ascontiguousarray(s).reshape(-1),
        np.ascontiguousarray(dh).reshape(C, -1), dz.reshape(C, -1),
    )
    return dz
