"""Effective coefficients, flux mismatch and parabolic flux correctors.

Indices ``i_`` (underlined in the usual notation) run over ``0..d``, with
``d`` standing for the time slot; ``j`` runs over ``0..d-1``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from ._util import linear_weights
from .cell import CellFactor, SpectralHeat, assemble_cell_system, macro_nodes, parallel_map, solve_correctors, torus_ops
from .errors import GridMismatch, MeanNotZero
from .fields import MacroGrid, sample_cell


def _chi_array(chis, shape):
    arr = np.stack([getattr(c, "values", getattr(getattr(c, "fn", None), "values", c)) for c in chis])
    if arr.shape[1:] != shape:
        raise GridMismatch(f"corrector grid {arr.shape[1:]} does not match coefficient grid {shape}")
    return arr


def face_fluxes(cellA, chis):
    """Flux ``A(e_j + grad chi_j)`` component i on the faces normal to axis i.

    Returned shape ``(d_i, d_j, *torus)``; this is exactly the flux the
    cell operator uses, so its torus mean is the effective coefficient.
    """
    cellA = np.asarray(cellA, dtype=float)
    d = cellA.shape[-1]
    shape = cellA.shape[:-2]
    chi = _chi_array(chis, shape)
    ops = torus_ops(d, shape[0], shape[-1])
    faces = ops.face_coefficients(cellA)
    out = np.empty((d, d) + shape)
    for j in range(d):
        u = chi[j].ravel()
        for i in range(d):
            flux = faces[i, j].copy()
            for l in range(d):
                grad = ops.fwd[i] @ u if l == i else ops.avg[i] @ (ops.cen[l] @ u)
                flux += faces[i, l] * grad
            out[i, j] = flux.reshape(shape)
    return out


def effective_tensor(cellA, chis):
    """Torus average of ``A + A grad_y chi`` at one macro point (d x d)."""
    return face_fluxes(cellA, chis).mean(axis=tuple(range(2, 2 + np.ndim(cellA) - 2)))


@dataclass
class EffectiveTensor:
    """Effective matrix sampled on a macro grid: ``values`` is ``(nt+1, *spatial, d, d)``."""

    grid: MacroGrid
    values: np.ndarray
    min_eig: float = field(init=False)

    def __post_init__(self):
        sym = 0.5 * (self.values + np.swapaxes(self.values, -1, -2))
        self.min_eig = float(np.linalg.eigvalsh(sym).min())

    def certify(self, mu, tol=1e-8):
        return self.min_eig >= mu - tol

    def interpolator(self, kind="cubic"):
        """Callable ``(points (P, d), t) -> (P, d, d)``.

        ``kind="cubic"`` uses not-a-knot cubic splines in every macro direction
        with at least four nodes (linear otherwise); ``"linear"`` is multilinear.
        Spatial interpolation is done once per distinct point set, so
        repeated calls on fixed face points cost one spline evaluation in t.
        """
        g = self.grid
        x_cubic = kind == "cubic" and g.n >= 3
        t_cubic = kind == "cubic" and g.nt >= 3
        cache = {}

        def weights(coord):
            """Row p holds the interpolation weights of the macro nodes at coord[p]."""
            if x_cubic:
                return CubicSpline(g.x, np.eye(g.n + 1))(coord)
            i0, lam = linear_weights(coord, 0.0, g.h, g.n + 1)
            w = np.zeros((len(coord), g.n + 1))
            rows = np.arange(len(coord))
            w[rows, i0] += 1 - lam
            w[rows, np.minimum(i0 + 1, g.n)] += lam
            return w

        def spatial(points):
            key = (points.shape, hash(points.tobytes()))
            if key not in cache:
                pts = np.clip(points, 0.0, 1.0)
                if g.d == 1:
                    slices = np.einsum("pi,tiab->tpab", weights(pts[:, 0]), self.values)
                else:
                    w1, w2 = weights(pts[:, 0]), weights(pts[:, 1])
                    m = g.n + 1
                    slices = np.empty((g.nt + 1, len(pts), g.d, g.d))
                    for it in range(g.nt + 1):
                        rows = (w1 @ self.values[it].reshape(m, -1)).reshape(len(pts), m, g.d, g.d)
                        slices[it] = np.einsum("pj,pjab->pab", w2, rows)
                if t_cubic:
                    fn = CubicSpline(g.t, slices, axis=0)
                else:
                    def fn(t, slices=slices):
                        i0, lam = linear_weights(t, g.t0, g.dt, g.nt + 1)
                        i1 = min(int(i0) + 1, g.nt)
                        return (1 - lam) * slices[int(i0)] + lam * slices[i1]
                cache[key] = fn
            return cache[key]

        def at(points, t):
            pts = np.asarray(points, dtype=float).reshape(-1, g.d)
            return spatial(pts)(float(np.clip(t, g.t0, g.T)))

        return at

    def to_csv(self, path):
        g = self.grid
        pts = g.points().reshape(-1, g.d)
        rows = []
        for it, t in enumerate(g.t):
            vals = self.values[it].reshape(-1, g.d * g.d)
            rows.append(np.column_stack([pts, np.full(len(pts), t), vals]))
        header = ",".join([f"x{k + 1}" for k in range(g.d)] + ["t"] + [f"A{i + 1}{j + 1}" for i in range(g.d) for j in range(g.d)])
        np.savetxt(path, np.vstack(rows), delimiter=",", header=header, comments="", fmt="%.17g")


def effective_tensor_field(spec, grid, ny, ntau, jobs=1, dual=False):
    """Cell solves at every node of ``grid`` and the resulting EffectiveTensor."""
    def at_node(node):
        _, x, t = node
        cellA = sample_cell(spec, x, t, ny, ntau)
        sols = solve_correctors(cellA, dual=dual)
        ahat = effective_tensor(np.swapaxes(cellA, -1, -2) if dual else cellA, [q.fn for q in sols])
        return ahat

    nodes = macro_nodes(grid)
    vals = np.empty(grid.shape + (spec.d, spec.d))
    for (idx, _, _), a in zip(nodes, parallel_map(at_node, nodes, jobs)):
        vals[idx] = a
    return EffectiveTensor(grid, vals)


def adjoint_check(spec, ny, ntau, points=None):
    """Max deviation between ``(A_hat)^T`` and the effective matrix of the dual problem.

    ``points`` is a list of ``(x, t)`` macro points (default: the origin).
    """
    points = points or [(np.zeros(spec.d), 0.0)]
    worst = 0.0
    for x, t in points:
        cellA = sample_cell(spec, x, t, ny, ntau)
        chi = [s.fn for s in solve_correctors(cellA)]
        chi_star = [s.fn for s in solve_correctors(cellA, dual=True)]
        ahat = effective_tensor(cellA, chi)
        ahat_star = effective_tensor(np.swapaxes(cellA, -1, -2), chi_star)
        worst = max(worst, float(np.abs(ahat.T - ahat_star).max()))
    return {"deviation": worst, "points": len(points)}


@dataclass
class FluxMismatch:
    """``values[i_, j]`` on the torus; rows ``0..d-1`` flux minus its mean, row ``d`` is ``-chi_j``."""

    values: np.ndarray
    ahat: np.ndarray

    @property
    def d(self):
        return self.values.shape[1]

    def means(self):
        return self.values.reshape(self.values.shape[:2] + (-1,)).mean(axis=-1)


def build_flux_mismatch(cellA, chis, ahat=None, tol=1e-8):
    cellA = np.asarray(cellA, dtype=float)
    d = cellA.shape[-1]
    shape = cellA.shape[:-2]
    ops = torus_ops(d, shape[0], shape[-1])
    flux = face_fluxes(cellA, chis)
    if ahat is None:
        ahat = flux.mean(axis=tuple(range(2, flux.ndim)))
    ahat = np.asarray(ahat, dtype=float)
    chi = _chi_array(chis, shape)
    B = np.empty((d + 1, d) + shape)
    for i in range(d):
        for j in range(d):
            # face flux moved to nodes by averaging the two adjacent faces
            nodal = 0.5 * (flux[i, j].ravel() + ops.minus[i] @ flux[i, j].ravel())
            B[i, j] = nodal.reshape(shape) - ahat[i, j]
    B[d] = -chi
    out = FluxMismatch(B, ahat)
    m = np.abs(out.means()).max()
    if m > tol:
        raise MeanNotZero(f"flux mismatch has torus mean {m:.3e}; A_hat and chi are inconsistent")
    return out


@dataclass
class FluxCorrectorSet:
    """``frak[k_, i_, j]`` and the flux potentials ``f[i_, j]`` on the torus."""

    frak: np.ndarray
    f: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.f.shape[1]


def heat_factor(d, ny, ntau, method="fft", **kw):
    """Solver for the torus heat operator shared by every flux-potential solve."""
    if method == "fft":
        return SpectralHeat(d, ny, ntau)
    shape = (ny,) * d + (ntau,)
    system = assemble_cell_system(np.zeros(shape + (d, d)), "flux", rhs=np.zeros(shape))
    return CellFactor(system, **kw)


def flux_potentials(B, factor=None):
    d = B.d
    shape = B.values.shape[2:]
    factor = factor or heat_factor(d, shape[0], shape[-1])
    f = np.empty_like(B.values)
    worst = 0.0
    for i in range(d + 1):
        for j in range(d):
            rhs = B.values[i, j]
            if not np.any(rhs):
                f[i, j] = 0.0
                continue
            u, res, _ = factor.solve(rhs)
            worst = max(worst, res)
            f[i, j] = u.reshape(shape)
    return f, worst


def assemble_frak(f):
    d = f.shape[1]
    shape = f.shape[2:]
    ops = torus_ops(d, shape[0], shape[-1])

    def dc(k, u):
        return (ops.cen[k] @ u.ravel()).reshape(shape)

    frak = np.zeros((d + 1, d + 1, d) + shape)
    for j in range(d):
        for k in range(d):
            for i in range(d):
                if i != k:
                    frak[k, i, j] = dc(i, f[k, j]) - dc(k, f[i, j])
            frak[d, k, j] = f[k, j] + dc(k, f[d, j])
            frak[k, d, j] = -frak[d, k, j]
    return frak


def build_flux_correctors(B, factor=None):
    f, res = flux_potentials(B, factor)
    return FluxCorrectorSet(assemble_frak(f), f, {"residual": res})


def flux_identity_residual(fc, B):
    """Discrete L2 residual of ``d_{y_k} frak[k, i_, j] + d_tau frak[d, i_, j] - B[i_, j]``.

    Returned shape ``(d+1, d)``.
    """
    d = B.d
    shape = B.values.shape[2:]
    ops = torus_ops(d, shape[0], shape[-1])
    out = np.empty((d + 1, d))
    for i in range(d + 1):
        for j in range(d):
            r = ops.dtau_c(fc.frak[d, i, j]).ravel() - B.values[i, j].ravel()
            for k in range(d):
                r = r + ops.cen[k] @ fc.frak[k, i, j].ravel()
            out[i, j] = np.sqrt(np.mean(r**2))
    return out


def constraint_residual(fc):
    """Discrete L2 norm of ``sum_i d_{y_i} f[i, j] + d_tau f[d, j]`` per j."""
    f = fc.f
    d = fc.d
    shape = f.shape[2:]
    ops = torus_ops(d, shape[0], shape[-1])
    out = np.empty(d)
    for j in range(d):
        w = ops.dtau_c(f[d, j]).ravel()
        for i in range(d):
            w = w + ops.cen[i] @ f[i, j].ravel()
        out[j] = np.sqrt(np.mean(w**2))
    return out


def node_pipeline(cellA, heat=None, res_tol=1e-10):
    """Everything the two-scale expansion needs at one macro point.

    Returns ``chi`` (d, *torus), ``ahat`` (d, d), ``frak_t`` (d, d, *torus)
    holding ``frak[d, k, j]``, and the solver diagnostics.
    """
    d = cellA.shape[-1]
    sols = solve_correctors(cellA, res_tol=res_tol)
    chi = [s.fn for s in sols]
    B = build_flux_mismatch(cellA, chi)
    fc = build_flux_correctors(B, heat)
    return {
        "chi": np.stack([c.values for c in chi]),
        "ahat": B.ahat,
        "frak_t": fc.frak[d, :d],
        "residual": max(max(s.residual for s in sols), fc.info["residual"]),
        "mean": max(abs(s.mean) for s in sols),
    }
