"""Error metrics, theory-side training-error functionals and the error-vs-loss fit."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import problems as pm
from .network import forward, forward_jets, multi_indices


class DegenerateInputError(ValueError):
    pass


def relative_l2(pred, exact):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    if pred.shape != exact.shape:
        raise ValueError("prediction and reference lengths differ")
    den = np.linalg.norm(exact)
    if den == 0.0:
        raise DegenerateInputError("reference field is identically zero")
    return float(np.linalg.norm(pred - exact) / den)


def pointwise_error_field(arch, params, points, reference_values):
    return np.abs(forward(arch, params, points) - np.asarray(reference_values))


# ------------------------------------------------------------ scaling fit


@dataclass
class ScalingFit:
    log_loss: np.ndarray
    log_error: np.ndarray
    slope: float
    intercept: float
    loss_range: tuple

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept,
                "loss_range": list(self.loss_range), "n_points": int(len(self.log_loss))}


def scaling_fit(loss, error, iterations=None, loss_range=None, skip_fraction=0.1, decades=2.0):
    """OLS of log10(error) on log10(loss).

    Without ``loss_range`` the fit uses records after the first ``skip_fraction``
    of iterations whose loss lies within ``decades`` of the smallest loss seen.
    """
    loss = np.asarray(loss, dtype=np.float64)
    error = np.asarray(error, dtype=np.float64)
    it = np.arange(len(loss)) if iterations is None else np.asarray(iterations, dtype=np.float64)
    ok = np.isfinite(loss) & np.isfinite(error) & (loss > 0) & (error > 0)
    if loss_range is None:
        ok &= it >= it.min() + skip_fraction * (it.max() - it.min())
        if not ok.any():
            raise ValueError("no usable records for the scaling fit")
        lo = loss[ok].min()
        loss_range = (lo, lo * 10 ** decades)
    ok &= (loss >= loss_range[0]) & (loss <= loss_range[1])
    n = int(ok.sum())
    if n < 10:
        raise ValueError(f"scaling fit needs at least 10 records in range, found {n}")
    x, y = np.log10(loss[ok]), np.log10(error[ok])
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    return ScalingFit(x, y, float(slope), float(intercept), (float(loss_range[0]), float(loss_range[1])))


# ------------------------------------------------ theory training error


@dataclass
class TheoryErrorReport:
    kind: str
    terms: dict                 # weighted sums, before square roots / constants
    constants: dict             # sampled sup-norms and the resulting factor
    e_t_sq: float
    constants_lower_bound: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def compose_training_error(kind, terms, c1_sq=0.0, alpha_kappa=0.0, C_tilde=0.0, M_hat=0.0, T=1.0):
    """Combine weighted residual sums into the squared training error.

    ``terms`` holds ``tb``, ``int`` (and ``int1`` for the decoupled form),
    ``sb1``, ``sb2`` and for CH ``lap_sb1``, ``lap_sb2``.
    """
    if kind == "ac":
        bnd = c1_sq * C_tilde * np.sqrt(T) * (np.sqrt(terms["sb1"]) + np.sqrt(terms["sb2"]))
        return terms["tb"] + terms["int"] + bnd
    bnd = 2 * alpha_kappa * M_hat * (np.sqrt(terms["sb1"]) + np.sqrt(terms["lap_sb1"])
                                     + np.sqrt(terms["sb2"]) + np.sqrt(terms["lap_sb2"]))
    val = terms["tb"] + terms["int"] + bnd
    if kind == "ch_decoupled":
        val += alpha_kappa * terms["int1"]
    return val


def boundary_measure(spec):
    """Measure of the spatial boundary (counting measure in 1D)."""
    if spec.space_dim == 1:
        return 2.0
    (a, b), (c, d) = spec.domain
    return 2.0 * ((b - a) + (d - c))


def _boundary_grid(spec, n_pairs):
    """Uniform face x time grid of matched pairs, about ``n_pairs`` in total."""
    T = spec.horizon
    d = spec.space_dim
    if d == 1:
        nt = max(n_pairs, 2)
        t = T * (np.arange(nt) + 0.5) / nt
        a, b = spec.domain[0]
        return np.stack([np.full(nt, a), t], 1), np.stack([np.full(nt, b), t], 1)
    per_axis = max(n_pairs // 2, 4)
    m = max(int(np.sqrt(per_axis)), 2)
    ps, qs = [], []
    for i in range(2):
        j = 1 - i
        cj = spec.domain[j][0] + (spec.domain[j][1] - spec.domain[j][0]) * (np.arange(m) + 0.5) / m
        t = T * (np.arange(m) + 0.5) / m
        CJ, TT = np.meshgrid(cj, t, indexing="ij")
        base = np.zeros((CJ.size, 3))
        base[:, j], base[:, 2] = CJ.ravel(), TT.ravel()
        p, q = base.copy(), base.copy()
        p[:, i], q[:, i] = spec.domain[i]
        ps.append(p)
        qs.append(q)
    return np.vstack(ps), np.vstack(qs)


def _spatial_alphas(spec, k):
    return [a for a in multi_indices(spec.input_dim, k) if a[-1] == 0]


def network_sup_norm(arch, params, spec, points, k, output=0):
    """max over spatial partials of order <= k of sup |d^a u_theta| on ``points``."""
    al = _spatial_alphas(spec, k)
    jets = forward_jets(arch, params, points, al, keep_tape=False)
    return float(max(np.abs(jets.output(a, output)).max() for a in al))


def reference_sup_norm(grid, spec, points, k, field_values=None):
    """Same norm for the spectral reference via spectral derivatives + interpolation."""
    from .spectral import interpolate_field, spectral_partial

    best = 0.0
    for a in _spatial_alphas(spec, k):
        vals = spectral_partial(grid, a[:-1], field_values)
        best = max(best, float(np.abs(interpolate_field(grid, vals, points)).max()))
    return best


def theory_training_error(spec, arch, params, point_set, rae_lambda=None, reference=None,
                          boundary_density=4):
    """Weighted residual sums of the training-error functional plus its constants.

    Quadrature weights: ``|D x (0,T]| / N_int`` times the RAE weights in the
    interior, ``|D| / N_tb`` on the initial set and ``|boundary| T / N_sb`` on
    the periodic pairs.
    """
    d = spec.space_dim
    T = spec.horizon
    vol = float(np.prod(spec.lengths))
    ps = point_set
    n_int, n_tb, n_sb = len(ps.interior), len(ps.initial), len(ps.sb_p)
    lam = np.ones(n_int) if rae_lambda is None else np.asarray(rae_lambda, dtype=np.float64)
    w_int = lam * vol * T / n_int
    w_tb = vol / n_tb
    w_sb = boundary_measure(spec) * T / n_sb
    kind = spec.kind
    terms = {}

    if kind == "ch_decoupled":
        jets = forward_jets(arch, params, ps.interior, spec.interior_alphas(), keep_tape=False)
        ju = _OutputView(jets, 0)
        jm = _OutputView(jets, 1)
        r1, r2 = pm.ch_residual_int_decoupled(ju, jm, spec)
        terms["int"] = float(np.dot(w_int, r2 ** 2))
        terms["int1"] = float(np.dot(w_int, r1 ** 2))
    else:
        jets = forward_jets(arch, params, ps.interior, spec.interior_alphas(), keep_tape=False)
        r = pm.interior_residual(_OutputView(jets, 0), spec)
        terms["int"] = float(np.dot(w_int, r ** 2))

    u0 = forward_jets(arch, params, ps.initial_st, [spec.idx()], keep_tape=False).output(spec.idx(), 0)
    rtb = pm.residual_tb(u0, spec, ps.initial)
    terms["tb"] = float(w_tb * np.sum(rtb ** 2))

    order = 1 if kind == "ac" else 3
    al = spec.boundary_alphas(order)
    jp = _OutputView(forward_jets(arch, params, ps.sb_p, al, keep_tape=False), 0)
    jq = _OutputView(forward_jets(arch, params, ps.sb_q, al, keep_tape=False), 0)
    r1, r2 = pm.residual_sb(jp, jq, spec)
    terms["sb1"] = float(w_sb * np.sum(r1 ** 2))
    terms["sb2"] = float(w_sb * np.sum(r2 ** 2))
    if kind != "ac":
        l1, l2 = pm.boundary_laplacian_residuals(jp, jq, spec)
        terms["lap_sb1"] = float(w_sb * np.sum(l1 ** 2))
        terms["lap_sb2"] = float(w_sb * np.sum(l2 ** 2))

    # sup-norm constants on a boundary grid denser than the training pairs
    bp, bq = _boundary_grid(spec, boundary_density * n_sb)
    bpts = np.vstack([bp, bq])
    k = 1 if kind in ("ac", "ch_decoupled") else 3
    sq_meas = np.sqrt(boundary_measure(spec))
    constants = {"boundary_points": int(len(bpts)), "norm_order": k}
    nn = network_sup_norm(arch, params, spec, bpts, k)
    constants["sup_u_theta"] = nn
    lower = reference is None
    ref = 0.0 if lower else reference_sup_norm(reference, spec, bpts, k)
    constants["sup_u_ref"] = ref
    if kind == "ch_decoupled":
        mu_nn = network_sup_norm(arch, params, spec, bpts, 1, output=1)
        mu_ref = 0.0
        if not lower:
            from .spectral import spectral_partial

            lap = sum(spectral_partial(reference, spec.unit(i, 2)[:-1]) for i in range(d))
            mu_ref = reference_sup_norm(reference, spec, bpts, 1, field_values=lap)
        constants["sup_mu_theta"], constants["sup_mu_ref"] = mu_nn, mu_ref
        M_u = sq_meas * (nn + ref)
        M_mu = sq_meas * (mu_nn + mu_ref)
        constants["M_hat"] = max(M_u, M_mu)
    elif kind == "ch":
        constants["M_hat"] = sq_meas * (nn + ref)
    else:
        constants["C_tilde"] = sq_meas * (nn + ref)

    e = compose_training_error(kind, terms, spec.c1_sq, spec.alpha_kappa,
                               constants.get("C_tilde", 0.0), constants.get("M_hat", 0.0), T)
    notes = []
    if lower:
        notes.append("no reference supplied: constants use the network norm only (lower bounds)")
    return TheoryErrorReport(kind, terms, constants, float(e), lower, notes)


class _OutputView:
    """Index a multi-output JetBatch as if it were the scalar output ``k``."""

    def __init__(self, jets, k):
        self.jets, self.k = jets, k
        self.points = jets.points

    def __getitem__(self, alpha):
        return self.jets.output(alpha, self.k)
