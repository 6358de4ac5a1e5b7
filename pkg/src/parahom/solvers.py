"""Crank-Nicolson reference solvers on the unit box with zero Dirichlet data.

``d_t u - div(A grad u) = f`` is discretised in conservative flux form: the
coefficient is sampled at face midpoints and at the half time level, so for
the fine problem the micro arguments are ``(x_face / eps, t_half / eps^2)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from ._util import strict_kwargs
from .errors import ConfigError, EpsilonTooLarge, StepSolverDiverged, UnderResolved
from .fields import MacroGrid, MacroGridFn, spatial_norm, time_norm

log = logging.getLogger(__name__)

STEP_TOL = 1e-10


@dataclass(frozen=True)
class SineTerm:
    """``amplitude * prod_k sin(pi m_k x_k) * (c0 + c1 t) * exp(rate t)``."""

    amplitude: float = 1.0
    modes: tuple = (1,)
    poly: tuple = (1.0, 0.0)
    rate: float = 0.0

    @classmethod
    def from_dict(cls, table):
        kw = strict_kwargs(cls, table, "problem term")
        kw["modes"] = tuple(int(m) for m in kw.get("modes", (1,)))
        kw["poly"] = tuple(float(c) for c in kw.get("poly", (1.0, 0.0)))
        return cls(**kw)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        if len(self.modes) != x.shape[-1]:
            raise ConfigError(f"term modes {self.modes} do not match dimension {x.shape[-1]}")
        s = np.ones(x.shape[:-1])
        for k, m in enumerate(self.modes):
            s = s * np.sin(np.pi * m * x[..., k])
        return self.amplitude * s * (self.poly[0] + self.poly[1] * t) * np.exp(self.rate * t)


def _sum_terms(terms):
    terms = tuple(terms)

    def fn(x, t):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for term in terms:
            out = out + term(x, t)
        return out

    return fn


@dataclass
class ProblemData:
    """Source ``f(x, t)``, initial datum ``h(x)`` and horizon ``T``; ``g = 0`` on the boundary.

    ``f`` and ``h`` are callables taking points with a trailing axis of
    length d (``h`` ignores its time argument).  ``from_dict`` builds them
    from lists of SineTerm tables, which vanish on the boundary by design.
    """

    f: callable
    h: callable
    T: float = 1.0
    descriptor: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, table):
        allowed = {"source", "initial", "T"}
        unknown = sorted(set(table) - allowed)
        if unknown:
            raise ConfigError(f"problem: unknown key(s) {unknown}")
        src = [SineTerm.from_dict(t) for t in table.get("source", [])]
        ini = [SineTerm.from_dict(t) for t in table.get("initial", [])]
        return cls(_sum_terms(src), _sum_terms(ini), float(table.get("T", 1.0)), dict(table))

    @classmethod
    def zero(cls, T=1.0):
        return cls(_sum_terms(()), _sum_terms(()), T, {})


@dataclass
class DiscreteSolution:
    """Snapshots of a grid solution plus per-step diagnostics.

    ``values`` is ``(len(steps), *[n+1]*d)`` and ``steps`` lists the kept time indices.
    """

    grid: MacroGrid
    values: np.ndarray
    steps: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.grid.t[self.steps]

    def as_gridfn(self):
        if len(self.steps) != self.grid.nt + 1:
            raise ValueError("only solutions that keep every step form a MacroGridFn")
        return MacroGridFn(self.grid, self.values)

    def at(self, step):
        i = np.searchsorted(self.steps, step)
        if i >= len(self.steps) or self.steps[i] != step:
            raise KeyError(f"step {step} was not kept")
        return self.values[i]

    def to_csv(self, path):
        g = self.grid
        pts = g.points().reshape(-1, g.d)
        rows = [np.column_stack([pts, np.full(len(pts), g.t[s]), v.ravel()]) for s, v in zip(self.steps, self.values)]
        header = ",".join([f"x{k + 1}" for k in range(g.d)] + ["t", "value"])
        np.savetxt(path, np.vstack(rows), delimiter=",", header=header, comments="", fmt="%.17g")


def _face_points(grid):
    """Midpoints of the faces normal to each axis, each shaped ``(P_k, d)``."""
    x = grid.x
    mid = 0.5 * (x[1:] + x[:-1])
    out = []
    for k in range(grid.d):
        axes = [x] * grid.d
        axes[k] = mid
        out.append(np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, grid.d))
    return out


class _Operator2D:
    """Sparse pieces for the 2D flux-form operator on interior nodes."""

    def __init__(self, grid):
        n = grid.n
        h = grid.h
        self.n = n
        eye = sp.identity(n + 1, format="csr")
        fwd = sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1), format="csr") / h
        avg = sp.diags([0.5 * np.ones(n), 0.5 * np.ones(n)], [0, 1], shape=(n, n + 1), format="csr")
        cen = sp.diags([-np.ones(n), np.ones(n)], [-1, 1], shape=(n + 1, n + 1), format="lil")
        cen[0, :] = 0
        cen[n, :] = 0
        cen = cen.tocsr() / (2 * h)
        self.fwd = [sp.kron(fwd, eye, format="csr"), sp.kron(eye, fwd, format="csr")]
        self.avg = [sp.kron(avg, eye, format="csr"), sp.kron(eye, avg, format="csr")]
        self.cen = [sp.kron(cen, eye, format="csr"), sp.kron(eye, cen, format="csr")]
        interior = ~grid.boundary_mask().ravel()
        self.restrict = sp.identity((n + 1) ** 2, format="csr")[interior]

    def matrix(self, faces):
        """``faces[k]`` is ``(P_k, 2, 2)`` coefficient at the faces normal to axis k."""
        op = None
        for k in range(2):
            a = faces[k]
            flux = sp.diags(a[:, k, k]) @ self.fwd[k]
            l = 1 - k
            if np.any(a[:, k, l]):
                flux = flux + sp.diags(a[:, k, l]) @ self.avg[k] @ self.cen[l]
            term = self.fwd[k].T @ flux
            op = term if op is None else op + term
        return (self.restrict @ op @ self.restrict.T).tocsr()


class CNStepper:
    """Crank-Nicolson time marching that can be advanced one step at a time.

    ``coef(points, t)`` returns ``(P, d, d)`` matrices, ``source(points, t)``
    scalar values.  Several steppers can march in lockstep, which lets a
    caller compare solutions without storing every time level.
    """

    def __init__(self, grid, coef, source, initial, time_dependent=True, symmetric=True, res_tol=STEP_TOL):
        self.grid = grid
        self.coef = coef
        self.source = source
        self.time_dependent = time_dependent
        self.symmetric = symmetric
        self.res_tol = res_tol
        self.d = grid.d
        self.n_step = 0
        self.faces = _face_points(grid)
        self.nodes = grid.points().reshape(-1, grid.d)
        self.interior = ~grid.boundary_mask().ravel()
        u0 = np.asarray(initial(self.nodes, grid.t0), dtype=float).reshape(-1)
        u0 = np.where(self.interior, u0, 0.0)
        self.u = u0
        self._f_prev = self._source(grid.t0)
        self._cached = None
        self.iterations = []
        self.max_residual = 0.0
        if self.d == 2:
            self._ops = _Operator2D(grid)

    @property
    def t(self):
        return self.grid.t0 + self.n_step * self.grid.dt

    def values(self):
        return self.u.reshape(self.grid.spatial_shape)

    def _source(self, t):
        return np.asarray(self.source(self.nodes[self.interior], t), dtype=float).reshape(-1)

    def _operator(self, t):
        if not self.time_dependent and self._cached is not None:
            return self._cached
        g = self.grid
        if self.d == 1:
            a = self.coef(self.faces[0], t)[:, 0, 0]
            h2 = g.h**2
            main = (a[:-1] + a[1:]) / h2
            off = -a[1:-1] / h2
            op = (main, off)
        else:
            op = self._ops.matrix([self.coef(f, t) for f in self.faces])
        if not self.time_dependent:
            self._cached = op
        return op

    def _solve_1d(self, op, rhs, dt):
        main, off = op
        ab = np.zeros((3, len(main)))
        ab[0, 1:] = 0.5 * dt * off
        ab[1] = 1.0 + 0.5 * dt * main
        ab[2, :-1] = 0.5 * dt * off
        u = solve_banded((1, 1), ab, rhs, check_finite=False)
        return u, 0

    def _apply_1d(self, op, u):
        main, off = op
        out = main * u
        out[:-1] += off * u[1:]
        out[1:] += off * u[:-1]
        return out

    def _solve_2d(self, L, rhs, dt, u_guess):
        m = (sp.identity(L.shape[0], format="csr") + 0.5 * dt * L).tocsr()
        if not self.time_dependent:
            if getattr(self, "_lu", None) is None:
                self._lu = spla.splu(m.tocsc())
            return self._lu.solve(rhs), 0
        diag = m.diagonal()
        prec = spla.LinearOperator(m.shape, lambda v: v / diag)
        count = [0]

        def cb(_):
            count[0] += 1

        solver = spla.cg if self.symmetric else spla.bicgstab
        u, info = solver(m, rhs, x0=u_guess, rtol=self.res_tol, atol=0.0, maxiter=2000, M=prec, callback=cb)
        if info != 0:
            res = np.linalg.norm(m @ u - rhs) / max(np.linalg.norm(rhs), 1e-300)
            raise StepSolverDiverged(f"step {self.n_step + 1}: Krylov solve did not converge", residual=res)
        return u, count[0]

    def step(self):
        g = self.grid
        dt = g.dt
        t_half = self.t + 0.5 * dt
        op = self._operator(t_half)
        f_next = self._source(self.t + dt)
        ui = self.u[self.interior]
        if self.d == 1:
            rhs = ui - 0.5 * dt * self._apply_1d(op, ui) + 0.5 * dt * (self._f_prev + f_next)
            new, iters = self._solve_1d(op, rhs, dt)
        else:
            rhs = ui - 0.5 * dt * (op @ ui) + 0.5 * dt * (self._f_prev + f_next)
            new, iters = self._solve_2d(op, rhs, dt, ui)
        self.iterations.append(iters)
        self.u = np.zeros_like(self.u)
        self.u[self.interior] = new
        self._f_prev = f_next
        self.n_step += 1
        return self.u

    def run(self, keep="all"):
        """March to the final time; ``keep`` is ``"all"``, ``"last"``, an int stride or a list of steps."""
        nt = self.grid.nt
        if keep == "all":
            steps = np.arange(nt + 1)
        elif keep == "last":
            steps = np.array([0, nt])
        elif isinstance(keep, (int, np.integer)):
            steps = np.unique(np.append(np.arange(0, nt + 1, int(keep)), nt))
        else:
            steps = np.unique(np.asarray(keep, dtype=int))
        wanted = set(steps.tolist())
        out = []
        if 0 in wanted:
            out.append(self.values().copy())
        while self.n_step < nt:
            self.step()
            if self.n_step in wanted:
                out.append(self.values().copy())
        info = {"iterations": list(self.iterations), "max_iterations": max(self.iterations or [0])}
        return DiscreteSolution(self.grid, np.array(out), steps, info)


def check_fine_resolution(eps, grid, c1=16.0, c2=16.0):
    if eps > np.sqrt(grid.T - grid.t0) * (1 + 1e-12):
        raise EpsilonTooLarge(f"eps = {eps} exceeds sqrt(T)")
    if grid.h > eps / c1 * (1 + 1e-12) or grid.dt > eps**2 / c2 * (1 + 1e-12):
        raise UnderResolved(f"fine grid h = {grid.h:.3g}, dt = {grid.dt:.3g} does not resolve eps = {eps}")


def fine_coefficient(spec, eps, reverse_T=None):
    """``A(x, t; x/eps, t/eps^2)`` (or the reversed adjoint ``A^T`` at ``T - s``)."""

    def coef(points, t):
        tt = t if reverse_T is None else reverse_T - t
        a = spec.matrix(points, tt, points / eps, tt / eps**2)
        return a if reverse_T is None else np.swapaxes(a, -1, -2)

    return coef


def fine_stepper(spec, eps, data, grid, res_tol=STEP_TOL, check=True):
    if check and spec.micro_dependent:
        check_fine_resolution(eps, grid)
    return CNStepper(grid, fine_coefficient(spec, eps), data.f, data.h, spec.time_dependent, spec.symmetric, res_tol)


def solve_fine(spec, eps, data, grid, keep="all", res_tol=STEP_TOL):
    """Fine-scale solve of ``d_t u + L_eps u = f``."""
    return fine_stepper(spec, eps, data, grid, res_tol).run(keep)


def _homogenized_coef(ahat):
    """Coefficient callable for an EffectiveTensor, a constant matrix, or a callable."""
    if callable(ahat) and not hasattr(ahat, "interpolator"):
        return ahat, True, True
    if hasattr(ahat, "interpolator"):
        vals = ahat.values
        tdep = bool(np.ptp(vals, axis=0).max() > 0) if vals.shape[0] > 1 else False
        sym = bool(np.allclose(vals, np.swapaxes(vals, -1, -2)))
        return ahat.interpolator(), tdep, sym
    m = np.atleast_2d(np.asarray(ahat, dtype=float))

    def const(points, t):
        return np.broadcast_to(m, (len(points),) + m.shape)

    return const, False, bool(np.allclose(m, m.T))


def homogenized_stepper(ahat, data, grid, res_tol=STEP_TOL):
    coef, tdep, sym = _homogenized_coef(ahat)
    return CNStepper(grid, coef, data.f, data.h, tdep, sym, res_tol)


def solve_homogenized(ahat, data, grid, keep="all", res_tol=STEP_TOL):
    """Solve ``d_t u0 - div(A_hat grad u0) = f``; ``ahat`` is an EffectiveTensor, a matrix or a callable."""
    return homogenized_stepper(ahat, data, grid, res_tol).run(keep)


def solve_dual(operator, F, grid, eps=None, keep="all", res_tol=STEP_TOL):
    """Backward problem ``-d_t v + L^* v = F``, ``v(T) = 0``, by time reversal.

    ``operator`` is a CoefficientSpec (fine problem, needs ``eps``), an
    EffectiveTensor, a constant matrix, or a coefficient callable.  The
    reversed forward problem ``d_s w + L^*(T - s) w = F(T - s)`` is solved
    and flipped, so ``values[k]`` is v at ``grid.t[steps[k]]``.
    """
    T = grid.T
    src = lambda x, s: F(x, T - s)
    zero = lambda x, t: np.zeros(np.shape(x)[:-1])
    if hasattr(operator, "terms"):
        if eps is None:
            raise ValueError("a fine dual solve needs eps")
        if operator.micro_dependent:
            check_fine_resolution(eps, grid)
        coef = fine_coefficient(operator, eps, reverse_T=T)
        tdep, sym = operator.time_dependent, operator.symmetric
    else:
        base, tdep, sym = _homogenized_coef(operator)

        def coef(points, s):
            return np.swapaxes(base(points, T - s), -1, -2)

    stepper = CNStepper(grid, coef, src, zero, tdep, sym, res_tol)
    nt = grid.nt
    if keep == "all":
        rev_keep = "all"
    elif keep == "last":
        rev_keep = [0, nt]
    else:
        steps = np.arange(0, nt + 1, int(keep)) if isinstance(keep, (int, np.integer)) else np.asarray(keep)
        rev_keep = sorted({nt - int(s) for s in steps})
    sol = stepper.run(rev_keep)
    steps = nt - sol.steps[::-1]
    return DiscreteSolution(grid, sol.values[::-1].copy(), steps, dict(sol.info, reversed=True))


def l2_space_time(values, grid, steps=None):
    """``L^2(Omega_T)`` norm of snapshots (trapezoid in space, trapezoid over kept times)."""
    sp_norm = spatial_norm(values, grid.h, 2, grid.d)
    if steps is None:
        return time_norm(sp_norm, grid.dt, 2)
    t = grid.t[np.asarray(steps)]
    return float(np.sqrt(np.trapezoid(sp_norm**2, t)))


def _sin_prod(x):
    return np.prod(np.sin(np.pi * np.asarray(x)), axis=-1)


def manufactured_case(name, d=1, T=1.0):
    """Exact solution and data for identity coefficients."""
    lam = d * np.pi**2
    if name == "decay":
        exact = lambda x, t: _sin_prod(x) * np.exp(-t)
        f = lambda x, t: (lam - 1.0) * _sin_prod(x) * np.exp(-t)
        return exact, ProblemData(f, lambda x, t: _sin_prod(x), T)
    if name == "dual":
        exact = lambda x, t: _sin_prod(x) * (T - t)
        F = lambda x, t: _sin_prod(x) * (1.0 + lam * (T - t))
        return exact, F
    raise ValueError(f"unknown manufactured case {name!r}")


def mms_orders(which=("fine", "homogenized", "dual"), d=1, levels=(16, 32), T=0.5):
    """Observed orders of the three solvers on manufactured solutions (dt = h / 2).

    Errors are discrete ``L^2(Omega_T)`` norms against the exact solution.
    """
    from .fields import CoefficientSpec

    ident = np.eye(d)
    report = {}
    for kind in which:
        errs = []
        for n in levels:
            grid = MacroGrid(d, n, int(round(2 * n * T)), T)
            pts = grid.points()
            if kind == "dual":
                exact, F = manufactured_case("dual", d, T)
                sol = solve_dual(ident, F, grid)
            else:
                exact, data = manufactured_case("decay", d, T)
                if kind == "fine":
                    sol = solve_fine(CoefficientSpec.constant(ident), 1.0 / 16, data, grid, keep="all")
                else:
                    sol = solve_homogenized(ident, data, grid)
            ex = np.stack([exact(pts, t) for t in grid.t])
            errs.append(l2_space_time(sol.values - ex, grid))
        orders = [float(np.log(errs[i] / errs[i + 1]) / np.log(levels[i + 1] / levels[i])) for i in range(len(errs) - 1)]
        report[kind] = {"levels": list(levels), "errors": errs, "orders": orders}
    return report
