"""Allen-Cahn / Cahn-Hilliard problem definitions and pointwise PINN residuals.

Residual functions accept any jet-like object indexable by multi-index
(``Jet`` for one point, ``JetBatch`` for many) and return plain values.  With
``linearize=True`` they also return ``{alpha: dR/d(partial_alpha)}``, which is
what the training loss needs to pull gradients back through the network.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

KINDS = ("ac", "ch", "ch_decoupled")


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    kind: str
    space_dim: int
    domain: tuple
    horizon: float
    f_coeffs: tuple  # (c3, c2, c1, c0): f(u) = c3 u^3 + c2 u^2 + c1 u + c0
    ic: str
    c1_sq: float = 0.0
    kappa: float = 0.0
    alpha: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(tuple(float(v) for v in ab) for ab in self.domain))
        object.__setattr__(self, "f_coeffs", tuple(float(c) for c in self.f_coeffs))
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.space_dim not in (1, 2) or len(self.domain) != self.space_dim:
            raise ValueError("space_dim must be 1 or 2 and match the domain box")
        if any(b <= a for a, b in self.domain):
            raise ValueError("domain intervals must have b > a")
        if not self.horizon > 0:
            raise ValueError("horizon T must be positive")
        if self.kappa < 0 or self.alpha < 0:
            raise ValueError("kappa and alpha must be non-negative")
        if self.f_coeffs[0] < 0:
            raise ValueError("cubic nonlinearity needs a non-negative leading coefficient")
        if self.ic not in INITIAL_CONDITIONS:
            raise ValueError(f"unknown initial condition {self.ic!r}")

    @property
    def input_dim(self):
        return self.space_dim + 1

    @property
    def lengths(self):
        return tuple(b - a for a, b in self.domain)

    @property
    def alpha_kappa(self):
        return self.alpha * self.kappa

    def to_dict(self):
        d = asdict(self)
        d["domain"] = [list(ab) for ab in self.domain]
        d["f_coeffs"] = list(self.f_coeffs)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    # cubic nonlinearity and its derivatives
    def f(self, u):
        c3, c2, c1, c0 = self.f_coeffs
        return ((c3 * u + c2) * u + c1) * u + c0

    def df(self, u):
        c3, c2, c1, _ = self.f_coeffs
        return (3 * c3 * u + 2 * c2) * u + c1

    def d2f(self, u):
        c3, c2, _, _ = self.f_coeffs
        return 6 * c3 * u + 2 * c2

    def d3f(self, u):
        return 6 * self.f_coeffs[0] + 0 * u

    def F(self, u):
        """Antiderivative of f with F(0) = 0 (free-energy density)."""
        c3, c2, c1, c0 = self.f_coeffs
        return (((c3 / 4 * u + c2 / 3) * u + c1 / 2) * u + c0) * u

    def initial(self, x):
        """Initial field at spatial points ``x`` of shape (N, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return INITIAL_CONDITIONS[self.ic](x, self)

    # multi-index helpers, coordinate order (x, [y,] t)
    def idx(self, *spatial, t=0):
        spatial = tuple(spatial) + (0,) * (self.space_dim - len(spatial))
        return spatial + (t,)

    def unit(self, i, k=1):
        s = [0] * self.space_dim
        s[i] = k
        return self.idx(*s)

    def interior_alphas(self):
        d = self.space_dim
        al = {self.idx(), self.idx(t=1)}
        al |= {self.unit(i, 2) for i in range(d)}
        if self.kind == "ch":
            al |= {self.unit(i, 1) for i in range(d)}
            al |= {self.unit(i, 4) for i in range(d)}
            if d == 2:
                al.add(self.idx(2, 2))
        elif self.kind == "ch_decoupled":
            al |= {self.unit(i, 1) for i in range(d)}
        return sorted(al)

    def boundary_alphas(self, order=1):
        """Partials for the periodic-pair residuals; ``order=3`` adds Laplacian terms."""
        d = self.space_dim
        al = {self.idx()} | {self.unit(i) for i in range(d)}
        if order >= 2:
            al |= {self.unit(i, 2) for i in range(d)}
        if order >= 3:
            for i in range(d):
                for j in range(d):
                    s = [0] * d
                    s[i] += 1
                    s[j] += 2
                    al.add(self.idx(*s))
        return sorted(al)


# ------------------------------------------------------------ initial data


def _ic_ac_i1(x, spec):
    return x[:, 0] ** 2 * np.sin(2 * np.pi * x[:, 0])


def _ic_ac_i2(x, spec):
    return np.cos(np.pi * x[:, 0]) - np.exp(-4 * (np.pi * x[:, 0]) ** 2)


def _ic_ac2d(x, spec):
    eps = spec.extra.get("epsilon", 0.025)
    r = np.sqrt((x[:, 0] - 0.5) ** 2 + (x[:, 1] - 0.5) ** 2)
    return np.tanh((0.35 - r) / (2 * eps))


def _ic_ch1d(x, spec):
    return -np.cos(2 * np.pi * x[:, 0])


def _ic_ch2d(x, spec):
    return 0.4 * np.cos(3 * np.pi * x[:, 0]) * np.cos(3 * np.pi * x[:, 1])


def _ic_sine(x, spec):
    """One full period along every axis (product in 2D)."""
    out = np.ones(len(x))
    for i, (a, b) in enumerate(spec.domain):
        out *= np.sin(2 * np.pi * (x[:, i] - a) / (b - a))
    return out


def _ic_one(x, spec):
    return np.ones(len(x))


INITIAL_CONDITIONS = {
    "ac_i1": _ic_ac_i1,
    "ac_i2": _ic_ac_i2,
    "ac2d_tanh_disc": _ic_ac2d,
    "ch1d_cos": _ic_ch1d,
    "ch2d_cos3": _ic_ch2d,
    "sine": _ic_sine,
    "one": _ic_one,
}


# ---------------------------------------------------------------- presets


def _ac1d(name, ic):
    return ProblemSpec(name=name, kind="ac", space_dim=1, domain=((-1.0, 1.0),), horizon=1.0,
                       f_coeffs=(3.0, 0.0, -3.0, 0.0), ic=ic, c1_sq=0.001)


def _ac2d():
    lam, eps = 10.0, 0.025
    return ProblemSpec(name="ac2d", kind="ac", space_dim=2, domain=((0.0, 1.0), (0.0, 1.0)),
                       horizon=5.0, f_coeffs=(lam, 0.0, -lam, 0.0), ic="ac2d_tanh_disc",
                       c1_sq=lam * eps ** 2, extra={"lambda": lam, "epsilon": eps})


def _ch1d():
    return ProblemSpec(name="ch1d", kind="ch", space_dim=1, domain=((-1.0, 1.0),), horizon=0.5,
                       f_coeffs=(1.0, 0.0, -1.0, 0.0), ic="ch1d_cos", kappa=1.0, alpha=0.02)


def _ch2d():
    # the 2D equation carries alpha^2 (alpha = 0.02) in front of the biharmonic
    return ProblemSpec(name="ch2d", kind="ch", space_dim=2, domain=((-1.0, 1.0), (-1.0, 1.0)),
                       horizon=0.003, f_coeffs=(1.0, 0.0, -1.0, 0.0), ic="ch2d_cos3",
                       kappa=1.0, alpha=0.02 ** 2)


PROBLEMS = {
    "ac1d_i1": lambda: _ac1d("ac1d_i1", "ac_i1"),
    "ac1d_i2": lambda: _ac1d("ac1d_i2", "ac_i2"),
    "ac2d": _ac2d,
    "ch1d": _ch1d,
    "ch2d": _ch2d,
}


def get_problem(name):
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise KeyError(f"unknown problem preset {name!r}; choose from {sorted(PROBLEMS)}") from None


# --------------------------------------------------------------- residuals


def _require(jet, alphas, what):
    for a in alphas:
        try:
            jet[a]
        except (KeyError, IndexError):
            raise ValueError(f"{what}: jet lacks partial {a}; evaluate it to a higher order") from None


def laplacian(jet, spec):
    al = [spec.unit(i, 2) for i in range(spec.space_dim)]
    _require(jet, al, "laplacian")
    return sum(jet[a] for a in al)


def biharmonic(jet, spec):
    if spec.space_dim == 1:
        al = [spec.unit(0, 4)]
        _require(jet, al, "biharmonic")
        return jet[al[0]]
    al = [spec.idx(4, 0), spec.idx(2, 2), spec.idx(0, 4)]
    _require(jet, al, "biharmonic")
    return jet[al[0]] + 2 * jet[al[1]] + jet[al[2]]


def grad_sq(jet, spec):
    return sum(jet[spec.unit(i)] ** 2 for i in range(spec.space_dim))


def laplacian_of_f(jet, spec):
    """Chain rule: Lap f(u) = f''(u) |grad u|^2 + f'(u) Lap u."""
    u = jet[spec.idx()]
    return spec.d2f(u) * grad_sq(jet, spec) + spec.df(u) * laplacian(jet, spec)


def ac_residual_int(jet, spec, linearize=False):
    """``u_t - c1^2 Lap u + f(u)``."""
    _require(jet, [spec.idx(t=1)], "ac_residual_int")
    u = jet[spec.idx()]
    r = jet[spec.idx(t=1)] - spec.c1_sq * laplacian(jet, spec) + spec.f(u)
    if not linearize:
        return r
    lin = {spec.idx(): spec.df(u), spec.idx(t=1): 1.0}
    for i in range(spec.space_dim):
        lin[spec.unit(i, 2)] = -spec.c1_sq
    return r, lin


def ch_residual_int_coupled(jet, spec, linearize=False):
    """``u_t + (alpha kappa) Lap^2 u - kappa Lap f(u)``."""
    _require(jet, [spec.idx(t=1)], "ch_residual_int_coupled")
    ak, k = spec.alpha_kappa, spec.kappa
    u = jet[spec.idx()]
    r = jet[spec.idx(t=1)] + ak * biharmonic(jet, spec) - k * laplacian_of_f(jet, spec)
    if not linearize:
        return r
    g2 = grad_sq(jet, spec)
    lap = laplacian(jet, spec)
    lin = {
        spec.idx(): -k * (spec.d3f(u) * g2 + spec.d2f(u) * lap),
        spec.idx(t=1): 1.0,
    }
    for i in range(spec.space_dim):
        lin[spec.unit(i)] = -2 * k * spec.d2f(u) * jet[spec.unit(i)]
        lin[spec.unit(i, 2)] = -k * spec.df(u)
    if spec.space_dim == 1:
        lin[spec.unit(0, 4)] = ak
    else:
        lin[spec.idx(4, 0)] = ak
        lin[spec.idx(2, 2)] = 2 * ak
        lin[spec.idx(0, 4)] = ak
    return r, lin


def ch_residual_int_decoupled(jet_u, jet_mu, spec, linearize=False):
    """``(mu - Lap u, u_t + (alpha kappa) Lap mu - kappa Lap f(u))``."""
    pu = getattr(jet_u, "point", None)
    pm = getattr(jet_mu, "point", None)
    if pu is not None and pm is not None and not np.array_equal(np.asarray(pu), np.asarray(pm)):
        raise ValueError("u and mu jets must be evaluated at the same points")
    ak, k = spec.alpha_kappa, spec.kappa
    u = jet_u[spec.idx()]
    mu = jet_mu[spec.idx()]
    r1 = mu - laplacian(jet_u, spec)
    r2 = jet_u[spec.idx(t=1)] + ak * laplacian(jet_mu, spec) - k * laplacian_of_f(jet_u, spec)
    if not linearize:
        return r1, r2
    d = spec.space_dim
    lin1_u = {spec.unit(i, 2): -1.0 for i in range(d)}
    lin1_mu = {spec.idx(): 1.0}
    lap = laplacian(jet_u, spec)
    lin2_u = {spec.idx(): -k * (spec.d3f(u) * grad_sq(jet_u, spec) + spec.d2f(u) * lap),
              spec.idx(t=1): 1.0}
    for i in range(d):
        lin2_u[spec.unit(i)] = -2 * k * spec.d2f(u) * jet_u[spec.unit(i)]
        lin2_u[spec.unit(i, 2)] = -k * spec.df(u)
    lin2_mu = {spec.unit(i, 2): ak for i in range(d)}
    return (r1, r2), ((lin1_u, lin1_mu), (lin2_u, lin2_mu))


def interior_residual(jet, spec, linearize=False):
    if spec.kind == "ac":
        return ac_residual_int(jet, spec, linearize)
    if spec.kind == "ch":
        return ch_residual_int_coupled(jet, spec, linearize)
    raise ValueError("decoupled CH needs two jets; call ch_residual_int_decoupled")


def residual_tb(values, spec, points):
    """``u(x, 0) - psi(x)``; ``points`` are spatial coordinates or (x, t=0) rows."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] == spec.input_dim:
        if np.any(pts[:, -1] != 0.0):
            raise ValueError("initial residual requested away from t = 0")
        pts = pts[:, :-1]
    r = np.asarray(values) - spec.initial(pts)
    return r if np.ndim(values) else float(r[0])


def _check_pairs(jet_p, jet_q, spec):
    pp = getattr(jet_p, "points", getattr(jet_p, "point", None))
    qq = getattr(jet_q, "points", getattr(jet_q, "point", None))
    if pp is None or qq is None:
        return
    pp = np.atleast_2d(np.asarray(pp, dtype=np.float64))
    qq = np.atleast_2d(np.asarray(qq, dtype=np.float64))
    if pp.shape != qq.shape:
        raise ValueError("boundary pair jets have different point counts")
    if np.any(pp[:, -1] != qq[:, -1]):
        raise ValueError("boundary pairs must share the same time coordinate")
    diff = pp[:, :-1] != qq[:, :-1]
    if np.any(diff.sum(axis=1) > 1):
        raise ValueError("boundary pairs may differ in one spatial coordinate only")


def residual_sb(jet_p, jet_q, spec):
    """Periodic-pair residuals: value difference and per-direction gradient differences."""
    _check_pairs(jet_p, jet_q, spec)
    r1 = jet_p[spec.idx()] - jet_q[spec.idx()]
    r2 = [jet_p[spec.unit(i)] - jet_q[spec.unit(i)] for i in range(spec.space_dim)]
    return r1, np.array(r2)


def boundary_laplacian_residuals(jet_p, jet_q, spec):
    """Laplacians of the pair residuals: ``Lap r_sb1`` and ``Lap r_sb2`` per direction."""
    _check_pairs(jet_p, jet_q, spec)
    d = spec.space_dim
    needed = []
    for i in range(d):
        for j in range(d):
            s = [0] * d
            s[i] += 1
            s[j] += 2
            needed.append(spec.idx(*s))
    _require(jet_p, needed, "boundary_laplacian_residuals")
    lap1 = laplacian(jet_p, spec) - laplacian(jet_q, spec)
    lap2 = []
    for i in range(d):
        acc = 0.0
        for j in range(d):
            s = [0] * d
            s[i] += 1
            s[j] += 2
            a = spec.idx(*s)
            acc = acc + (jet_p[a] - jet_q[a])
        lap2.append(acc)
    return lap1, np.array(lap2)
