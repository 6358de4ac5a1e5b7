"""Four-variable coefficient fields, grid functions and mixed norms.

A coefficient ``A(x, t; y, tau)`` is a trigonometric polynomial in the
micro variables ``(y, tau)`` with integer frequencies, so it is exactly
1-periodic there.  An optional scalar envelope modulates the whole matrix
in the macro variables ``(x, t)``.
"""

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import linear_weights, periodic_weights, strict_kwargs, trapezoid_weights
from .errors import ConfigError, EllipticityViolation, GridMismatch, InvalidExponent, OutOfDomain

TWO_PI = 2.0 * np.pi

_TRIG = {"sin": np.sin, "cos": np.cos}


@dataclass(frozen=True)
class TrigTerm:
    """``amplitude * kind(2 pi (macro_k.x + macro_omega t + micro_k.y + micro_omega tau) + phase)``
    added to matrix entry ``entry`` (zero-based)."""

    entry: tuple = (0, 0)
    amplitude: float = 1.0
    kind: str = "sin"
    micro_k: tuple = ()
    micro_omega: int = 0
    macro_k: tuple = ()
    macro_omega: float = 0.0
    phase: float = 0.0

    @classmethod
    def from_dict(cls, table, d):
        kw = strict_kwargs(cls, table, "coefficient.terms")
        kw.setdefault("micro_k", [0] * d)
        kw.setdefault("macro_k", [0.0] * d)
        term = cls(
            entry=tuple(int(i) for i in kw.pop("entry", (0, 0))),
            micro_k=tuple(int(k) for k in kw.pop("micro_k")),
            macro_k=tuple(float(k) for k in kw.pop("macro_k")),
            **kw,
        )
        term.check(d)
        return term

    def check(self, d):
        if self.kind not in _TRIG:
            raise ConfigError(f"term kind must be 'sin' or 'cos', got {self.kind!r}")
        if len(self.micro_k) != d or len(self.macro_k) != d or len(self.entry) != 2:
            raise ConfigError(f"term {self} does not match dimension {d}")
        if not all(0 <= i < d for i in self.entry):
            raise ConfigError(f"term entry {self.entry} out of range for d={d}")
        if int(self.micro_omega) != self.micro_omega:
            raise ConfigError("micro frequencies must be integers")


@dataclass(frozen=True)
class EnvelopeFactor:
    """Scalar macro factor ``offset + slope*s + amplitude*kind(2 pi frequency s + phase)``
    where ``s`` is the macro coordinate named by ``axis`` (``"t"``, ``"x1"``, ``"x2"``)."""

    axis: str = "t"
    offset: float = 1.0
    slope: float = 0.0
    amplitude: float = 0.0
    kind: str = "sin"
    frequency: float = 0.0
    phase: float = 0.0

    @classmethod
    def from_dict(cls, table, d):
        fac = cls(**strict_kwargs(cls, table, "coefficient.envelope"))
        allowed = ["t"] + [f"x{k + 1}" for k in range(d)]
        if fac.axis not in allowed or fac.kind not in _TRIG:
            raise ConfigError(f"bad envelope factor {fac}")
        return fac

    def __call__(self, x, t):
        s = t if self.axis == "t" else x[..., int(self.axis[1:]) - 1]
        return self.offset + self.slope * s + self.amplitude * _TRIG[self.kind](TWO_PI * self.frequency * s + self.phase)


@dataclass(frozen=True)
class CoefficientSpec:
    d: int
    mu: float
    base: tuple
    terms: tuple = ()
    envelope: tuple = ()

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ConfigError(f"dimension must be 1 or 2, got {self.d}")
        if not self.mu > 0:
            raise ConfigError("mu must be positive")
        base = np.asarray(self.base, dtype=float).reshape(self.d, self.d)
        object.__setattr__(self, "base", tuple(map(tuple, base)))
        terms = tuple(
            replace(t, micro_k=t.micro_k or (0,) * self.d, macro_k=t.macro_k or (0.0,) * self.d) for t in self.terms
        )
        object.__setattr__(self, "terms", terms)
        for term in self.terms:
            term.check(self.d)

    @classmethod
    def from_dict(cls, table):
        kw = strict_kwargs(cls, table, "coefficient")
        d = int(kw.get("d", 1))
        base = kw.get("base", np.eye(d))
        return cls(
            d=d,
            mu=float(kw.get("mu", 0.1)),
            base=np.atleast_2d(np.asarray(base, dtype=float)),
            terms=tuple(TrigTerm.from_dict(t, d) for t in kw.get("terms", [])),
            envelope=tuple(EnvelopeFactor.from_dict(e, d) for e in kw.get("envelope", [])),
        )

    @classmethod
    def constant(cls, matrix, mu=None):
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        if mu is None:
            mu = min(np.linalg.eigvalsh(0.5 * (m + m.T)).min(), 1.0 / np.abs(m).max())
        return cls(d=m.shape[0], mu=float(mu), base=m)

    def to_dict(self):
        return {
            "d": self.d,
            "mu": self.mu,
            "base": [list(r) for r in self.base],
            "terms": [
                {**t.__dict__, "entry": list(t.entry), "micro_k": list(t.micro_k), "macro_k": list(t.macro_k)}
                for t in self.terms
            ],
            "envelope": [dict(e.__dict__) for e in self.envelope],
        }

    @property
    def micro_dependent(self):
        return any(any(t.micro_k) or t.micro_omega for t in self.terms if t.amplitude)

    @property
    def tau_dependent(self):
        return any(t.micro_omega for t in self.terms if t.amplitude)

    @property
    def time_dependent(self):
        """True if A changes along t or tau (so a fine-scale operator changes every step)."""
        macro_t = any(t.macro_omega for t in self.terms if t.amplitude)
        env_t = any(e.axis == "t" and (e.slope or (e.amplitude and e.frequency)) for e in self.envelope)
        return self.tau_dependent or macro_t or env_t

    @property
    def symmetric(self):
        base = np.asarray(self.base)
        if not np.allclose(base, base.T):
            return False
        key = lambda t: (t.amplitude, t.kind, t.micro_k, t.micro_omega, t.macro_k, t.macro_omega, t.phase)
        off = {}
        for t in self.terms:
            i, j = t.entry
            if i != j:
                off.setdefault((min(i, j), max(i, j)), [[], []])[int(i > j)].append(key(t))
        return all(sorted(a) == sorted(b) for a, b in off.values())

    def transpose(self):
        """Spec of the adjoint coefficient ``A^*`` (real scalar case: the transpose)."""
        terms = tuple(
            TrigTerm(**{**t.__dict__, "entry": (t.entry[1], t.entry[0])}) for t in self.terms
        )
        return CoefficientSpec(self.d, self.mu, np.asarray(self.base).T, terms, self.envelope)

    def matrix(self, x, t, y, tau):
        """Vectorised evaluation; ``x``, ``y`` carry a trailing axis of length d."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        tau = np.asarray(tau, dtype=float)
        if x.shape[-1:] != (self.d,) or y.shape[-1:] != (self.d,):
            raise GridMismatch(f"x and y need a trailing axis of length {self.d}")
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], t.shape, tau.shape)
        out = np.empty(batch + (self.d, self.d))
        out[...] = np.asarray(self.base)
        for term in self.terms:
            arg = (
                x @ np.asarray(term.macro_k, dtype=float)
                + term.macro_omega * t
                + y @ np.asarray(term.micro_k, dtype=float)
                + term.micro_omega * tau
            )
            out[..., term.entry[0], term.entry[1]] += term.amplitude * _TRIG[term.kind](TWO_PI * arg + term.phase)
        if self.envelope:
            env = np.ones(np.broadcast_shapes(x.shape[:-1], t.shape))
            for fac in self.envelope:
                env = env * fac(x, t)
            out *= env[..., None, None]
        return out


def eval_coefficient(spec, x, t, y, tau):
    """``A(x, t; y, tau)`` as a d x d matrix (or a batch of them)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if spec.d == 1 and x.shape[-1:] != (1,):
        x = x[..., None]
    if spec.d == 1 and y.shape[-1:] != (1,):
        y = y[..., None]
    return spec.matrix(x, t, y, tau)


def torus_coords(d, ny, ntau):
    """Node coordinates of the uniform periodic grid, shaped ``(*[ny]*d, ntau)``."""
    y1 = np.arange(ny) / ny
    tau = np.arange(ntau) / ntau
    mesh = np.meshgrid(*([y1] * d), tau, indexing="ij")
    return np.stack(mesh[:d], axis=-1), mesh[d]


def check_ellipticity(spec, cellA, where=""):
    sym = 0.5 * (cellA + np.swapaxes(cellA, -1, -2))
    lam = np.linalg.eigvalsh(sym).min()
    big = np.abs(cellA).max()
    tol = 1e-12
    if lam < spec.mu - tol or big > 1.0 / spec.mu + tol:
        raise EllipticityViolation(
            f"coefficient violates ellipticity{where}: min eig {lam:.4g}, max |A| {big:.4g}, mu {spec.mu}"
        )
    return lam


def sample_cell(spec, x, t, ny, ntau):
    """Coefficient at every torus node for the macro point ``(x, t)``.

    Returns an array shaped ``(*[ny]*d, ntau, d, d)``.
    """
    y, tau = torus_coords(spec.d, ny, ntau)
    xx = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=float)), y.shape)
    cellA = spec.matrix(xx, float(t), y, tau)
    check_ellipticity(spec, cellA, f" at (x, t) = ({x}, {t})")
    return cellA


@dataclass
class TorusGridFn:
    """Scalar grid function on the unit torus; ``values`` shaped ``(*[ny]*d, ntau)``."""

    values: np.ndarray
    d: int

    @property
    def ny(self):
        return self.values.shape[0]

    @property
    def ntau(self):
        return self.values.shape[self.d]

    def mean(self):
        return float(self.values.mean())

    def interp(self, y, tau):
        return torus_interp(self.values[None], self.d, np.zeros(np.shape(tau), dtype=np.intp), y, tau)


def torus_interp(values, d, lead, y, tau):
    """Periodic multilinear interpolation.

    ``values`` is shaped ``(L, *[ny]*d, ntau)``; ``lead`` selects the leading
    slot per point, ``y`` is ``(P, d)`` and ``tau`` is ``(P,)``.
    """
    ny, ntau = values.shape[1], values.shape[-1]
    y = np.asarray(y, dtype=float).reshape(-1, d)
    idx = [periodic_weights(y[:, k], ny) for k in range(d)] + [periodic_weights(tau, ntau)]
    out = np.zeros(len(y))
    for corner in itertools.product((0, 1), repeat=d + 1):
        w = np.ones(len(y))
        sel = [lead]
        for c, (i0, i1, lam) in zip(corner, idx):
            sel.append(i1 if c else i0)
            w = w * (lam if c else 1.0 - lam)
        out += w * values[tuple(sel)]
    return out


@dataclass(frozen=True)
class MacroGrid:
    """Uniform grid on ``[0, 1]^d x [t0, T]`` with ``n`` cells per spatial axis and ``nt`` steps."""

    d: int
    n: int
    nt: int
    T: float
    t0: float = 0.0

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def dt(self):
        return (self.T - self.t0) / self.nt

    @property
    def x(self):
        return np.linspace(0.0, 1.0, self.n + 1)

    @property
    def t(self):
        return self.t0 + self.dt * np.arange(self.nt + 1)

    @property
    def spatial_shape(self):
        return (self.n + 1,) * self.d

    @property
    def shape(self):
        return (self.nt + 1,) + self.spatial_shape

    def points(self):
        """Spatial node coordinates shaped ``(*spatial_shape, d)``."""
        return np.stack(np.meshgrid(*([self.x] * self.d), indexing="ij"), axis=-1)

    def boundary_mask(self):
        mask = np.zeros(self.spatial_shape, dtype=bool)
        for k in range(self.d):
            sl = [slice(None)] * self.d
            sl[k] = 0
            mask[tuple(sl)] = True
            sl[k] = -1
            mask[tuple(sl)] = True
        return mask


@dataclass
class MacroGridFn:
    """Values on a MacroGrid shaped ``(nt+1, *spatial, *components)``."""

    grid: MacroGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[: self.grid.d + 1] != self.grid.shape:
            raise GridMismatch(f"values {self.values.shape} do not fit grid {self.grid.shape}")


@dataclass
class FourVarGridFn:
    """A torus grid function attached to every node of a macro grid.

    ``values`` is shaped ``(nt+1, *[n+1]*d, *[ny]*d, ntau)``.
    """

    grid: MacroGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.grid.d
        if self.values.ndim != 2 * d + 2 or self.values.shape[: d + 1] != self.grid.shape:
            raise GridMismatch(f"values {self.values.shape} do not fit grid {self.grid.shape}")

    @property
    def ny(self):
        return self.values.shape[self.grid.d + 1]

    @property
    def ntau(self):
        return self.values.shape[-1]

    def macro_corners(self, x, t):
        """Yield (flat macro index, weight) pairs of the multilinear macro interpolant."""
        g = self.grid
        x = np.asarray(x, dtype=float).reshape(-1, g.d)
        t = np.asarray(t, dtype=float).reshape(-1)
        tol = 1e-12
        if np.any(x < -tol) or np.any(x > 1 + tol) or np.any(t < g.t0 - tol) or np.any(t > g.T + tol):
            raise OutOfDomain("macro point outside the closed space-time cylinder")
        axes = [linear_weights(t, g.t0, g.dt, g.nt + 1)] + [
            linear_weights(x[:, k], 0.0, g.h, g.n + 1) for k in range(g.d)
        ]
        for corner in itertools.product((0, 1), repeat=g.d + 1):
            w = np.ones(len(t))
            idx = []
            for c, (i0, lam) in zip(corner, axes):
                idx.append(np.minimum(i0 + c, (g.nt if not idx else g.n)))
                w = w * (lam if c else 1.0 - lam)
            yield np.ravel_multi_index(idx, g.shape), w

    def eval(self, x, t, y, tau):
        """Macro-multilinear and torus-periodic-multilinear interpolation at ``(x, t; y, tau)``."""
        g = self.grid
        flat = self.values.reshape((-1,) + self.values.shape[g.d + 1 :])
        y = np.asarray(y, dtype=float).reshape(-1, g.d)
        tau = np.asarray(tau, dtype=float).reshape(-1)
        out = 0.0
        for lead, w in self.macro_corners(x, t):
            out = out + w * torus_interp(flat, g.d, lead, y, tau)
        return out


def composition_eval(phi, eps, x, t):
    """``phi^eps(x, t) = phi(x, t; x/eps, t/eps^2)`` for one or many points."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    d = phi.grid.d
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0 or (d > 1 and x.ndim == 1)
    x = x.reshape(-1, d)
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
    out = phi.eval(x, t, x / eps, t / eps**2)
    return float(out[0]) if scalar else out


def spatial_norm(values, h, p, d):
    """Trapezoid L^p(Omega) norm of arrays shaped ``(..., *[n+1]*d)`` over the last d axes."""
    if p < 1:
        raise InvalidExponent(f"p must be >= 1, got {p}")
    axes = tuple(range(-d, 0))
    a = np.abs(values)
    if np.isinf(p):
        return a.max(axis=axes)
    w = 1.0
    for k in range(d):
        shape = [1] * d
        shape[k] = values.shape[-d + k]
        w = w * trapezoid_weights(values.shape[-d + k], h).reshape(shape)
    return ((a**p) * w).sum(axis=axes) ** (1.0 / p)


def time_norm(series, dt, q):
    """Trapezoid L^q(0, T) norm of a sequence of time-level values."""
    if q < 1:
        raise InvalidExponent(f"q must be >= 1, got {q}")
    s = np.abs(np.asarray(series, dtype=float))
    if np.isinf(q):
        return float(s.max())
    return float(((s**q) * trapezoid_weights(len(s), dt)).sum() ** (1.0 / q))


def mixed_norm(u, q, p):
    """``||u||_{L^q(0, T; L^p(Omega))}`` by composite trapezoid quadrature."""
    if p < 1 or q < 1:
        raise InvalidExponent(f"exponents must be >= 1, got q={q}, p={p}")
    g = u.grid
    vals = u.values
    if vals.ndim > g.d + 1:
        vals = np.sqrt((vals.reshape(vals.shape[: g.d + 1] + (-1,)) ** 2).sum(axis=-1))
    return time_norm(spatial_norm(vals, g.h, p, g.d), g.dt, q)
