"""Macroscopic mollifiers S^t, S^x, their composition, and the space-time cutoff.

Kernels are smooth bumps supported in (-1/2, 1/2) (time) and in the ball of
radius 1/2 (space), rescaled to widths eps^2 and eps.  On a resolved macro
grid the convolution is a direct stencil sum with weights renormalised to
unit discrete mass; fields outside the cylinder are taken to be zero.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, ndimage

from ._util import linear_weights
from .errors import EpsilonTooLarge, UnderResolved
from .fields import FourVarGridFn, MacroGrid, MacroGridFn, spatial_norm, time_norm


def _bump(r2):
    """``exp(-1/(1 - 4 r^2))`` inside r < 1/2, zero outside (r2 = r^2)."""
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    inside = r2 < 0.25
    out[inside] = np.exp(-1.0 / (1.0 - 4.0 * r2[inside]))
    return out


def _bump_dr2(r2):
    """Derivative of the bump with respect to r^2."""
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    inside = r2 < 0.25
    den = 1.0 - 4.0 * r2[inside]
    out[inside] = -4.0 * np.exp(-1.0 / den) / den**2
    return out


@lru_cache(maxsize=None)
def _mass(d):
    if d == 1:
        val, _ = integrate.quad(lambda s: _bump(s * s), -0.5, 0.5, epsabs=1e-14, epsrel=1e-13, limit=200)
    elif d == 2:
        val, _ = integrate.quad(lambda r: 2 * np.pi * r * _bump(r * r), 0.0, 0.5, epsabs=1e-14, epsrel=1e-13, limit=200)
    else:
        raise ValueError("only d = 1, 2 are supported")
    return val


@dataclass(frozen=True)
class KernelPair:
    """Unit-mass bumps: ``phi1`` on (-1/2, 1/2) and radial ``phi2`` on B(0, 1/2) in R^d."""

    d: int = 1

    @property
    def c1(self):
        return 1.0 / _mass(1)

    @property
    def c2(self):
        return 1.0 / _mass(self.d)

    def phi1(self, s):
        s = np.asarray(s, dtype=float)
        return self.c1 * _bump(s * s)

    def dphi1(self, s):
        s = np.asarray(s, dtype=float)
        return self.c1 * 2 * s * _bump_dr2(s * s)

    def phi2(self, z):
        z = np.asarray(z, dtype=float).reshape(-1, self.d) if np.ndim(z) else np.asarray([[z]], dtype=float)
        return self.c2 * _bump((z**2).sum(axis=-1))

    def grad_phi2(self, z):
        z = np.asarray(z, dtype=float).reshape(-1, self.d)
        return self.c2 * 2 * z * _bump_dr2((z**2).sum(axis=-1))[:, None]

    def masses(self):
        """Quadrature masses of both kernels (each should be 1)."""
        m1, _ = integrate.quad(self.phi1, -0.5, 0.5, epsabs=1e-14, epsrel=1e-13, limit=200)
        if self.d == 1:
            m2, _ = integrate.quad(lambda s: self.phi2(s)[0], -0.5, 0.5, epsabs=1e-14, epsrel=1e-13, limit=200)
        else:
            m2, _ = integrate.quad(lambda r: 2 * np.pi * r * self.phi2([r, 0.0])[0], 0.0, 0.5, epsabs=1e-14, epsrel=1e-13, limit=200)
        return m1, m2

    def multiplier(self, freq, eps=1.0):
        """``rho = int phi2(z) cos(2 pi eps freq z_1) dz``, the Fourier multiplier of S^x on a plane wave."""
        w = 2 * np.pi * eps * freq
        if self.d == 1:
            val, _ = integrate.quad(lambda s: self.phi2(s)[0] * np.cos(w * s), -0.5, 0.5, epsabs=1e-14, epsrel=1e-12, limit=200)
        else:
            from scipy.special import j0

            val, _ = integrate.quad(
                lambda r: 2 * np.pi * r * self.phi2([r, 0.0])[0] * j0(w * r), 0.0, 0.5, epsabs=1e-14, epsrel=1e-12, limit=200
            )
        return val


def check_resolution(eps, h=None, dt=None):
    if h is not None and h > eps / 4 * (1 + 1e-12):
        raise UnderResolved(f"spatial spacing {h:.3g} exceeds eps/4 = {eps / 4:.3g}")
    if dt is not None and dt > eps**2 / 4 * (1 + 1e-12):
        raise UnderResolved(f"time step {dt:.3g} exceeds eps^2/4 = {eps**2 / 4:.3g}")


def time_weights(eps, dt):
    """Offsets (in steps) and unit-sum weights of the discrete phi_{1,eps}."""
    m = int(np.ceil(0.5 * eps**2 / dt))
    off = np.arange(-m, m + 1)
    w = KernelPair(1).phi1(off * dt / eps**2)
    return off, w / w.sum()


def space_weights(eps, h, d):
    """Stencil array (odd side length) of unit-sum weights of the discrete phi_{2,eps}."""
    m = int(np.ceil(0.5 * eps / h))
    axes = np.meshgrid(*([np.arange(-m, m + 1) * h] * d), indexing="ij")
    z = np.stack(axes, axis=-1)
    w = KernelPair(d).phi2(z / eps).reshape(z.shape[:-1])
    return w / w.sum()


def grad_weights(eps, h, d):
    """Stencils (d, side, ...) of the derivative kernel ``eps^-1 (grad phi2)_eps``.

    Each component is rescaled so that it reproduces the derivative of a
    linear function exactly (the continuous kernel does this by itself).
    """
    m = int(np.ceil(0.5 * eps / h))
    axes = np.meshgrid(*([np.arange(-m, m + 1) * h] * d), indexing="ij")
    z = np.stack(axes, axis=-1)
    g = KernelPair(d).grad_phi2(z / eps).reshape(z.shape[:-1] + (d,))
    out = np.empty((d,) + z.shape[:-1])
    for k in range(d):
        # convolution with g maps x_k to -sum g z_k
        out[k] = g[..., k] / (-(g[..., k] * z[..., k]).sum())
    return out


def _periodic_apply(values, axes, func):
    """Apply ``func`` on a grid whose last node along each axis duplicates the first."""
    sl = [slice(None)] * values.ndim
    for a in axes:
        sl[a] = slice(0, -1)
    core = func(values[tuple(sl)])
    for a in axes:
        first = np.take(core, [0], axis=a)
        core = np.concatenate([core, first], axis=a)
    return core


def _kernel_on_axes(weights, ndim, axes):
    shape = [1] * ndim
    for a, n in zip(axes, weights.shape):
        shape[a] = n
    return weights.reshape(shape)


def smooth_array(values, eps, h=None, dt=None, time_axis=None, space_axes=(), boundary="zero", check=True):
    """Discrete S^t (along ``time_axis``) and/or S^x (along ``space_axes``) of an array.

    ``boundary`` is ``"zero"`` (zero extension) or ``"periodic"`` (the grid
    includes both endpoints of one period along every smoothed axis).
    """
    values = np.asarray(values, dtype=float)
    if check:
        check_resolution(eps, h if space_axes else None, dt if time_axis is not None else None)
    mode = {"zero": "constant", "periodic": "wrap"}[boundary]
    out = values
    if time_axis is not None:
        _, w = time_weights(eps, dt)

        def along_t(v):
            return ndimage.correlate1d(v, w, axis=time_axis, mode=mode, cval=0.0)

        out = _periodic_apply(out, [time_axis], along_t) if boundary == "periodic" else along_t(out)
    if space_axes:
        w = space_weights(eps, h, len(space_axes))
        ker = _kernel_on_axes(w, out.ndim, space_axes)

        def along_x(v):
            return ndimage.correlate(v, ker, mode=mode, cval=0.0)

        out = _periodic_apply(out, list(space_axes), along_x) if boundary == "periodic" else along_x(out)
    return out


def grad_array(values, eps, h, space_axes, boundary="zero", check=True):
    """``grad S^x`` via the derivative kernel; a new trailing axis holds the components."""
    values = np.asarray(values, dtype=float)
    if check:
        check_resolution(eps, h)
    mode = {"zero": "constant", "periodic": "wrap"}[boundary]
    g = grad_weights(eps, h, len(space_axes))
    comps = []
    for k in range(len(space_axes)):
        ker = _kernel_on_axes(g[k], values.ndim, space_axes)

        def conv(v, ker=ker):
            return ndimage.convolve(v, ker, mode=mode, cval=0.0)

        comps.append(_periodic_apply(values, list(space_axes), conv) if boundary == "periodic" else conv(values))
    return np.stack(comps, axis=-1)


def _axes_flags(axes):
    if axes not in ("time", "space", "both"):
        raise ValueError("axes must be 'time', 'space' or 'both'")
    return axes in ("time", "both"), axes in ("space", "both")


def _interp_matrix_1d(nodes, eps_width, kernel, n_quad):
    """Rows: kernel-weighted average of the piecewise-linear interpolant (zero outside)."""
    import scipy.sparse as sp

    s = (np.arange(n_quad) + 0.5) / n_quad - 0.5
    w = kernel(s)
    w = w / w.sum()
    npts = len(nodes)
    step = nodes[1] - nodes[0] if npts > 1 else 1.0
    rows, cols, vals = [], [], []
    for sq, wq in zip(s * eps_width, w):
        pts = nodes - sq
        inside = (pts >= nodes[0] - 1e-12) & (pts <= nodes[-1] + 1e-12)
        i0, lam = linear_weights(pts, nodes[0], step, npts)
        idx = np.nonzero(inside)[0]
        i0, lam = i0[idx], lam[idx]
        rows += [idx, idx]
        cols += [i0, np.minimum(i0 + 1, npts - 1)]
        vals += [wq * (1 - lam), wq * lam]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(npts, npts))


def _interp_matrix_space(grid, eps, n_quad):
    import scipy.sparse as sp

    d = grid.d
    if d == 1:
        return _interp_matrix_1d(grid.x, eps, lambda s: KernelPair(1).phi2(s), n_quad)
    s = (np.arange(n_quad) + 0.5) / n_quad - 0.5
    zz = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
    w = KernelPair(2).phi2(zz)
    keep = w > 0
    zz, w = zz[keep] * eps, w[keep] / w[keep].sum()
    pts0 = grid.points().reshape(-1, 2)
    npts = grid.n + 1
    rows, cols, vals = [], [], []
    for zq, wq in zip(zz, w):
        pts = pts0 - zq
        inside = np.all((pts >= -1e-12) & (pts <= 1 + 1e-12), axis=1)
        idx = np.nonzero(inside)[0]
        ax = [linear_weights(pts[idx, k], 0.0, grid.h, npts) for k in range(2)]
        for c0 in (0, 1):
            for c1 in (0, 1):
                wt = (ax[0][1] if c0 else 1 - ax[0][1]) * (ax[1][1] if c1 else 1 - ax[1][1])
                j = np.minimum(ax[0][0] + c0, grid.n) * npts + np.minimum(ax[1][0] + c1, grid.n)
                rows.append(idx)
                cols.append(j)
                vals.append(wq * wt)
    n = npts**2
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def smooth_fourvar(f, eps, axes="both", n_quad=64):
    """S_eps of a FourVarGridFn: convolution of its macro-multilinear interpolant.

    The macro sample grid may be coarser than the kernel (spacing up to
    eps/2), so the interpolant is integrated against the kernel by a
    midpoint rule rather than sampled at grid nodes.  Micro indices are
    untouched, so the result commutes with micro differences exactly.
    """
    do_t, do_x = _axes_flags(axes)
    g = f.grid
    vals = f.values
    lead = g.shape
    rest = vals.shape[g.d + 1 :]
    if do_t:
        mt = _interp_matrix_1d(g.t, eps**2, KernelPair(1).phi1, n_quad)
        vals = (mt @ vals.reshape(lead[0], -1)).reshape(vals.shape)
    if do_x:
        mx = _interp_matrix_space(g, eps, n_quad)
        nsp = int(np.prod(g.spatial_shape))
        v = vals.reshape(lead[0], nsp, -1)
        vals = np.stack([mx @ v[i] for i in range(lead[0])]).reshape(lead + rest)
    return FourVarGridFn(g, vals, dict(f.meta, smoothed=axes))


def smooth(f, eps, axes="both", boundary="zero"):
    """S^t_eps, S^x_eps or S_eps of a MacroGridFn (stencil sum) or FourVarGridFn."""
    if isinstance(f, FourVarGridFn):
        return smooth_fourvar(f, eps, axes)
    do_t, do_x = _axes_flags(axes)
    g = f.grid
    out = smooth_array(
        f.values, eps, h=g.h, dt=g.dt,
        time_axis=0 if do_t else None,
        space_axes=tuple(range(1, g.d + 1)) if do_x else (),
        boundary=boundary,
    )
    return MacroGridFn(g, out)


def grad_smooth_x(f, eps, with_time=False, boundary="zero"):
    """``grad_x S^x_eps f`` (or ``grad_x S_eps f``) through the derivative kernel.

    Returns a MacroGridFn with a trailing component axis of length d.
    """
    g = f.grid
    vals = f.values
    if with_time:
        vals = smooth_array(vals, eps, dt=g.dt, time_axis=0, boundary=boundary)
    out = grad_array(vals, eps, g.h, tuple(range(1, g.d + 1)), boundary=boundary)
    return MacroGridFn(g, out)


@lru_cache(maxsize=1)
def _ramp_table():
    s = np.linspace(-0.5, 0.5, 8193)
    cdf = integrate.cumulative_trapezoid(KernelPair(1).phi1(s), s, initial=0.0)
    return s + 0.5, cdf / cdf[-1]


def ramp(s):
    """Smooth step: 0 for s <= 0, 1 for s >= 1 (the integrated time bump)."""
    xs, cdf = _ramp_table()
    return np.interp(np.asarray(s, dtype=float), xs, cdf, left=0.0, right=1.0)


@dataclass(frozen=True)
class Cutoff:
    """``eta(x, t) = eta1(t) eta2(x)`` with collars 4..5 eps^2 in time and 4..5 eps in space."""

    eps: float
    d: int
    T: float

    def eta1(self, t):
        e2 = self.eps**2
        t = np.asarray(t, dtype=float)
        return ramp((t - 4 * e2) / e2) * ramp((self.T - 4 * e2 - t) / e2)

    def eta2(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.d) if self.d > 1 or np.ndim(x) == 0 else np.asarray(x, dtype=float)[..., None]
        out = np.ones(x.shape[:-1])
        for k in range(self.d):
            out = out * ramp((x[..., k] - 4 * self.eps) / self.eps) * ramp((1 - 4 * self.eps - x[..., k]) / self.eps)
        return out

    def spatial(self, grid):
        return self.eta2(grid.points().reshape(-1, self.d)).reshape(grid.spatial_shape)

    def on_grid(self, grid):
        vals = self.eta1(grid.t).reshape((-1,) + (1,) * grid.d) * self.spatial(grid)[None]
        return MacroGridFn(grid, vals)

    def __call__(self, x, t):
        return self.eta1(t) * self.eta2(x)


def cutoff(eps, d=1, T=1.0, strict=True):
    """Build the cutoff; ``strict`` insists that both plateaus are nonempty."""
    diam = np.sqrt(d)
    if eps > np.sqrt(T) / 5 * (1 + 1e-12) or (strict and eps > diam / 10 * (1 + 1e-12)):
        raise EpsilonTooLarge(f"eps = {eps} too large for T = {T} and the unit box in d = {d}")
    return Cutoff(float(eps), int(d), float(T))


def K_eps(f, eps, eta):
    """``S_eps(f) * eta`` on the grid of ``f``."""
    sm = smooth(f, eps, "both")
    eta_vals = eta.on_grid(f.grid).values
    extra = sm.values.ndim - eta_vals.ndim
    return MacroGridFn(f.grid, sm.values * eta_vals.reshape(eta_vals.shape + (1,) * extra))


def _fit(eps, vals):
    x, y = np.log(eps), np.log(vals)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = ((y - y.mean()) ** 2).sum()
    return float(slope), float(1 - (resid**2).sum() / ss) if ss > 0 else 1.0


def verify_scaling(family, eps_list, p=1.0, p1=np.inf, q=2.0, n=20000, T=0.25, steps_per_eps2=8):
    """Fit the eps exponent of a smoothing estimate on an analytic family.

    ``family``:

    * ``"spike"``: narrow unit-mass bump f in 1D, measures
      ``||S^x f||_{p1} / ||f||_p`` (predicted ``1/p1 - 1/p``).
    * ``"smooth"``: fixed ``sin(2 pi x)``, same ratio with ``p1 = p`` (predicted 0).
    * ``"gradient"``: ``u = sin(2 pi x) cos(pi t)`` periodic in x on (0, T),
      measures ``||grad u - S_eps grad u||_{L^2(L^2)}`` (predicted ``1 + 1/p - 1/q`` with p = q = 2).
    """
    eps_list = np.asarray(sorted(eps_list, reverse=True), dtype=float)
    vals = []
    if family in ("spike", "smooth"):
        x = np.linspace(0.0, 1.0, n + 1)
        h = x[1] - x[0]
        if family == "spike":
            delta = eps_list.min() / 40
            f = KernelPair(1).phi2((x - 0.5) / delta) / delta
            predicted = 1.0 / p1 - 1.0 / p
        else:
            f = np.sin(2 * np.pi * x)
            p1 = p
            predicted = 0.0
        base = spatial_norm(f, h, p, 1)
        for e in eps_list:
            sf = smooth_array(f, e, h=h, space_axes=(0,), boundary="periodic")
            vals.append(float(spatial_norm(sf, h, p1, 1) / base))
    elif family == "gradient":
        p = q = 2.0
        predicted = 1.0
        for e in eps_list:
            nx = int(np.ceil(8 / e))
            nt = int(np.ceil(steps_per_eps2 * T / e**2))
            grid = MacroGrid(1, nx, nt, T)
            X, Tt = np.meshgrid(grid.x, grid.t, indexing="xy")
            du = 2 * np.pi * np.cos(2 * np.pi * X) * np.cos(np.pi * Tt)
            sm = smooth_array(du, e, dt=grid.dt, time_axis=0, boundary="zero", check=False)
            sm = smooth_array(sm, e, h=grid.h, space_axes=(1,), boundary="periodic", check=False)
            vals.append(time_norm(spatial_norm(du - sm, grid.h, 2, 1), grid.dt, 2))
    else:
        raise ValueError(f"unknown family {family!r}")
    vals = np.asarray(vals)
    slope, r2 = _fit(eps_list, vals)
    return {"family": family, "eps": eps_list.tolist(), "values": vals.tolist(), "slope": slope,
            "predicted": predicted, "r2": r2, "p": p, "p1": p1}
