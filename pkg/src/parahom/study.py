"""Two-scale expansion, error norms, rate fitting and the convergence study driver."""

import csv
import io
import json
import logging
import math
import platform
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from ._util import strict_kwargs, trapezoid_weights
from .cell import macro_nodes, parallel_map
from .effective import EffectiveTensor, effective_tensor_field, heat_factor, node_pipeline
from .errors import ConfigError, DegenerateFit, EpsilonTooLarge, ParahomError
from .fields import CoefficientSpec, FourVarGridFn, MacroGrid, sample_cell, spatial_norm, time_norm, torus_interp
from .smoothing import cutoff, grad_weights, smooth_array, smooth_fourvar, space_weights, time_weights
from .solvers import ProblemData, fine_coefficient, fine_stepper, homogenized_stepper, CNStepper

log = logging.getLogger(__name__)

CSV_COLUMNS = ["eps", "err_L2L2", "err_L2Lp0", "w_L2H1", "layer_norm", "h", "dt", "Ny", "Ntau", "wall_seconds"]


def p0_exponent(d):
    """``2d/(d-1)``; infinite for d = 1."""
    return math.inf if d == 1 else 2.0 * d / (d - 1)


def q0_exponent(d):
    return 2.0 * d / (d + 1)


def _parse_exponent(v, d):
    if isinstance(v, str):
        key = v.strip().lower()
        if key == "p0":
            return p0_exponent(d)
        if key == "q0":
            return q0_exponent(d)
        if key in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"unknown exponent {v!r}")
    return float(v)


# ---------------------------------------------------------------- rates


def fit_rate(eps, errors):
    """Least-squares line through ``(log eps, log error)``."""
    eps = np.asarray(eps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if eps.size != errors.size:
        raise ValueError("eps and errors differ in length")
    if eps.size < 3:
        raise DegenerateFit(f"need at least 3 points, got {eps.size}")
    if not np.all(np.isfinite(errors)) or np.any(errors <= 0) or np.any(eps <= 0):
        raise DegenerateFit("errors must be finite and positive")
    x, y = np.log(eps), np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss if ss > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2, "n": int(eps.size)}


# ---------------------------------------------------------------- norms


def _grad(values, h, d):
    """Nodal gradient; centred inside, one-sided at the Dirichlet boundary."""
    if d == 1:
        return np.gradient(values, h, axis=-1)[..., None]
    return np.stack(np.gradient(values, h, axis=(-2, -1)), axis=-1)


def layer_mask(grid, k, eps):
    """Spatial nodes within ``k eps`` of the boundary (the collar Omega_{k eps})."""
    pts = grid.points()
    dist = np.minimum(pts, 1.0 - pts).min(axis=-1)
    return dist < k * eps


def error_report(u_eps, u_0, w, eps, norms=((2.0, 2.0),), layer_k=6):
    """Norms of one run from full grid functions (MacroGridFn or arrays on a common grid).

    Returns ``{"diff": {(q, p): value}, "w_L2H1": ..., "layer_norm": ...}``.
    """
    g = u_eps.grid
    diff = u_eps.values - u_0.values
    out = {"diff": {}}
    for q, p in norms:
        out["diff"][(q, p)] = time_norm(spatial_norm(diff, g.h, p, g.d), g.dt, q)
    if w is not None:
        wv = w.values
        h1 = spatial_norm(wv, g.h, 2, g.d) ** 2 + spatial_norm(np.linalg.norm(_grad(wv, g.h, g.d), axis=-1), g.h, 2, g.d) ** 2
        out["w_L2H1"] = float(np.sqrt((h1 * trapezoid_weights(g.nt + 1, g.dt)).sum()))
    gu = np.linalg.norm(_grad(u_0.values, g.h, g.d), axis=-1)
    out["layer_norm"] = _layer_norm(gu, g, eps, layer_k)
    return out


def _layer_norm(grad_mag, grid, eps, k):
    spatial = layer_mask(grid, k, eps)
    t = grid.t
    in_t = (t < k * eps**2) | (t > grid.T - k * eps**2)
    mask = spatial[None] | in_t.reshape((-1,) + (1,) * grid.d)
    per_t = spatial_norm(np.where(mask, grad_mag, 0.0), grid.h, 2, grid.d)
    return time_norm(per_t, grid.dt, 2)


# ---------------------------------------------------------------- the corrected expansion


class CorrectorTerms:
    """Evaluates ``eps [S(chi~ K(grad u0))]^eps + eps^2 [d_k S(B~_{(d+1)kj} K(d_j u0))]^eps``.

    ``chi_s`` is ``(d, *macro, *torus)`` and ``frak_s`` is ``(d_k, d_j, *macro,
    *torus)``, both already smoothed in the macro variables and sampled on
    ``sample_grid``.  ``eta`` is a Cutoff.  Evaluation needs ``u0`` on the
    time levels within ``eps^2`` of the target step.
    """

    def __init__(self, grid, sample_grid, eps, chi_s, frak_s, eta, chunk=8192):
        self.grid = grid
        self.sg = sample_grid
        self.eps = eps
        self.d = grid.d
        self.eta = eta
        self.chunk = chunk
        d = self.d
        mshape = sample_grid.shape
        self.torus = chi_s.shape[1 + d + 1 :]
        self.chi = chi_s.reshape((d, -1) + self.torus)
        self.frak = frak_s.reshape((d, d, -1) + self.torus)
        self.toff, self.tw = time_weights(eps, grid.dt)
        self.m = int(self.toff.max())
        sw = space_weights(eps, grid.h, d)
        gw = grad_weights(eps, grid.h, d)
        side = sw.shape[0]
        r = side // 2
        offs = np.stack(np.meshgrid(*([np.arange(-r, r + 1)] * d), indexing="ij"), axis=-1).reshape(-1, d)
        keep = (sw.reshape(-1) != 0) | np.any(gw.reshape(d, -1) != 0, axis=0)
        self.offs = offs[keep]
        self.sw = sw.reshape(-1)[keep]
        self.gw = gw.reshape(d, -1)[:, keep]
        self.nodes = grid.points().reshape(-1, d)
        self.eta_x = eta.spatial(grid).reshape(-1)
        self.npx = int(np.ceil(eps / sample_grid.h - 1e-9)) + 2
        self.mshape = mshape

    def _coarse_window(self, x):
        """Per node and axis: first coarse index of a window covering x +- eps/2."""
        sg = self.sg
        b = np.floor((x - 0.5 * self.eps) / sg.h + 1e-9).astype(np.intp)
        return np.clip(b, 0, max(sg.n + 1 - self.npx, 0))

    def _K(self, n, u0_at):
        """``S_eps(grad u0) * eta`` on the levels ``n - m .. n + m`` (list of (N, d) or None)."""
        g = self.grid
        m = self.m
        sx = {}
        for s in range(n - 2 * m, n + 2 * m + 1):
            lvl = u0_at(s) if 0 <= s <= g.nt else None
            if lvl is None:
                continue
            gr = _grad(lvl, g.h, self.d)
            sx[s] = smooth_array(gr, self.eps, h=g.h, space_axes=tuple(range(self.d)), check=False)
        out = []
        for r in range(-m, m + 1):
            s = n + r
            if s < 0 or s > g.nt:
                out.append(None)
                continue
            acc = 0.0
            for o, w in zip(self.toff, self.tw):
                lv = sx.get(s + o)
                if lv is not None:
                    acc = acc + w * lv
            eta = self.eta.eta1(g.t[s]) * self.eta_x
            out.append(None if np.isscalar(acc) else acc.reshape(-1, self.d) * eta[:, None])
        return out

    def __call__(self, n, u0_at):
        """Correction terms at step ``n`` on the fine nodes, shape ``(N,)`` each (term1, term2)."""
        g, sg, d, eps = self.grid, self.sg, self.d, self.eps
        m = self.m
        N = self.nodes.shape[0]
        t_n = g.t[n]
        K = self._K(n, u0_at)
        if all(k is None for k in K):
            return np.zeros(N), np.zeros(N)
        # time hats of the coarse sample grid touched by the window
        lo = max(int(np.floor((t_n - eps**2 - sg.t0) / sg.dt)), 0)
        hi = min(int(np.floor((t_n + eps**2 - sg.t0) / sg.dt)) + 1, sg.nt)
        mts = list(range(lo, hi + 1))
        Z = {}
        for mt in mts:
            acc = np.zeros((N, d))
            for r in range(-m, m + 1):
                # K holds levels n - m .. n + m; the time kernel pulls level n - r
                kr = K[m - r]
                if kr is None:
                    continue
                lam = max(0.0, 1.0 - abs((g.t[n - r] - sg.t0) / sg.dt - mt))
                wr = self.tw[r + m]
                if lam and wr:
                    acc += (wr * lam) * kr
            Z[mt] = acc
        y = self.nodes / eps
        tau = np.full(N, t_n / eps**2)
        term1 = np.zeros(N)
        term2 = np.zeros(N)
        spatial_shape = g.spatial_shape
        idx_nd = np.stack(np.unravel_index(np.arange(N), spatial_shape), axis=-1)
        base = self._coarse_window(self.nodes)
        combos = np.stack(np.meshgrid(*([np.arange(self.npx)] * d), indexing="ij"), axis=-1).reshape(-1, d)
        ncomb = len(combos)
        for start in range(0, N, self.chunk):
            sl = slice(start, min(start + self.chunk, N))
            nb = sl.stop - sl.start
            cidx = base[sl][:, None, :] + combos[None]                       # (nb, C, d)
            cidx = np.minimum(cidx, sg.n)
            flat_sp = np.ravel_multi_index(tuple(cidx[..., k] for k in range(d)), sg.spatial_shape)
            # neighbour fine nodes i - q and their coordinates
            nbr = idx_nd[sl][:, None, :] - self.offs[None]                   # (nb, Q, d)
            valid = np.all((nbr >= 0) & (nbr <= g.n), axis=-1)
            nbr_c = np.clip(nbr, 0, g.n)
            nbr_flat = np.ravel_multi_index(tuple(nbr_c[..., k] for k in range(d)), spatial_shape)
            xq = nbr_c * g.h                                                 # (nb, Q, d)
            lam = np.ones((nb, xq.shape[1], ncomb))
            for k in range(d):
                lam *= np.maximum(0.0, 1.0 - np.abs(xq[:, :, None, k] / sg.h - cidx[:, None, :, k]))
            yy = np.repeat(y[sl], ncomb, axis=0)
            tt = np.repeat(tau[sl], ncomb)
            for mt in mts:
                lead = (mt * int(np.prod(sg.spatial_shape)) + flat_sp).reshape(-1)
                zq = Z[mt][nbr_flat] * valid[..., None]                       # (nb, Q, d)
                for j in range(d):
                    c = torus_interp(self.chi[j], d, lead, yy, tt).reshape(nb, ncomb)
                    Y = np.einsum("iqc,ic->iq", lam, c)
                    term1[sl] += eps * np.einsum("q,iq,iq->i", self.sw, Y, zq[..., j])
                    for k in range(d):
                        cb = torus_interp(self.frak[k, j], d, lead, yy, tt).reshape(nb, ncomb)
                        Yb = np.einsum("iqc,ic->iq", lam, cb)
                        term2[sl] += eps**2 * np.einsum("q,iq,iq->i", self.gw[k], Yb, zq[..., j])
        return term1, term2


def build_w_eps(u_eps, u_0, chi_s, frak_s, eps, sample_grid, eta=None, steps=None):
    """``w_eps`` at the requested steps (default: all) from full solutions.

    ``u_eps`` and ``u_0`` are MacroGridFn on one fine grid.  Returns an
    array ``(len(steps), *spatial)``.
    """
    g = u_eps.grid
    if u_0.grid != g:
        from .errors import GridMismatch

        raise GridMismatch("u_eps and u_0 live on different grids")
    eta = eta or cutoff(eps, g.d, g.T, strict=False)
    terms = CorrectorTerms(g, sample_grid, eps, chi_s, frak_s, eta)
    steps = range(g.nt + 1) if steps is None else steps
    out = []
    for n in steps:
        t1, t2 = terms(n, lambda s: u_0.values[s])
        out.append(u_eps.values[n] - u_0.values[n] - (t1 + t2).reshape(g.spatial_shape))
    return np.array(out)


# ---------------------------------------------------------------- configuration


@dataclass
class GridPolicy:
    c1: float = 16.0
    c2: float = 16.0
    sample_spacing: float = 0.5
    ny: int = 32
    ntau: int = 15
    ahat_n: int = 32
    ahat_nt: int = 32

    def validate(self):
        if self.c1 < 16 or self.c2 < 16:
            raise ConfigError("grid policy needs c1 >= 16 and c2 >= 16")
        if not 0 < self.sample_spacing <= 0.5:
            raise ConfigError("sample_spacing (in units of eps) must be in (0, 0.5]")
        if self.ny < 4 or self.ntau < 1:
            raise ConfigError("torus resolution too small")


@dataclass
class StudyConfig:
    name: str
    spec: CoefficientSpec
    problem: ProblemData
    eps: list
    T: float = 1.0
    grid: GridPolicy = field(default_factory=GridPolicy)
    norms: list = field(default_factory=lambda: [(2.0, 2.0)])
    res_tol: float = 1e-10
    jobs: int = 1
    compute_w: bool = True
    w_samples: int = 128
    floor_check: bool = True
    floor_fraction: float = 0.1
    layer_k: float = 6.0
    out_dir: str = "out"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def d(self):
        return self.spec.d

    @classmethod
    def from_dict(cls, table):
        table = dict(table)
        allowed = {"name", "study", "grid", "norms", "solver", "output", "coefficient", "problem"}
        unknown = sorted(set(table) - allowed)
        if unknown:
            raise ConfigError(f"config: unknown top-level key(s) {unknown}")
        if "coefficient" not in table or "study" not in table:
            raise ConfigError("config needs [study] and [coefficient] tables")
        spec = CoefficientSpec.from_dict(table["coefficient"])
        st = dict(table["study"])
        st_allowed = {"eps", "T", "jobs", "compute_w", "w_samples", "floor_check", "floor_fraction", "layer_k"}
        unknown = sorted(set(st) - st_allowed)
        if unknown:
            raise ConfigError(f"study: unknown key(s) {unknown}")
        if "eps" not in st:
            raise ConfigError("study.eps is required")
        T = float(st.get("T", 1.0))
        prob_tab = dict(table.get("problem", {}))
        if "T" in prob_tab and float(prob_tab["T"]) != T:
            raise ConfigError("problem.T differs from study.T")
        prob_tab["T"] = T
        problem = ProblemData.from_dict(prob_tab)
        grid = GridPolicy(**strict_kwargs(GridPolicy, table.get("grid", {}), "grid"))
        nt = table.get("norms", {})
        unknown = sorted(set(nt) - {"pairs"})
        if unknown:
            raise ConfigError(f"norms: unknown key(s) {unknown}")
        pairs = [(_parse_exponent(q, spec.d), _parse_exponent(p, spec.d)) for q, p in nt.get("pairs", [[2, 2]])]
        solver = table.get("solver", {})
        if set(solver) - {"res_tol"}:
            raise ConfigError(f"solver: unknown key(s) {sorted(set(solver) - {'res_tol'})}")
        output = table.get("output", {})
        if set(output) - {"dir"}:
            raise ConfigError(f"output: unknown key(s) {sorted(set(output) - {'dir'})}")
        cfg = cls(
            name=str(table.get("name", "study")),
            spec=spec,
            problem=problem,
            eps=[float(e) for e in st["eps"]],
            T=T,
            grid=grid,
            norms=pairs,
            res_tol=float(solver.get("res_tol", 1e-10)),
            jobs=int(st.get("jobs", 1)),
            compute_w=bool(st.get("compute_w", True)),
            w_samples=int(st.get("w_samples", 128)),
            floor_check=bool(st.get("floor_check", True)),
            floor_fraction=float(st.get("floor_fraction", 0.1)),
            layer_k=float(st.get("layer_k", 6.0)),
            out_dir=str(output.get("dir", "out")),
            raw=table,
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_toml(cls, path):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def validate(self):
        self.grid.validate()
        if len(self.eps) < 1:
            raise ConfigError("study.eps is empty")
        bound = math.sqrt(self.T) / 5
        for e in self.eps:
            if not e > 0:
                raise ConfigError("eps values must be positive")
            if e > bound * (1 + 1e-12):
                raise EpsilonTooLarge(f"eps = {e} exceeds sqrt(T)/5 = {bound:.4g}")
        for q, p in self.norms:
            if q < 1 or p < 1:
                from .errors import InvalidExponent

                raise InvalidExponent(f"norm exponents must be >= 1, got ({q}, {p})")

    def echo(self):
        """JSON-safe copy of the configuration."""
        return json.loads(json.dumps(self.raw, default=str))


# ---------------------------------------------------------------- one eps


def _fine_grid(cfg, eps, refine=1):
    n = int(math.ceil(cfg.grid.c1 * refine / eps - 1e-9))
    nt = int(math.ceil(cfg.T * cfg.grid.c2 * refine**2 / eps**2 - 1e-9))
    return MacroGrid(cfg.d, n, nt, cfg.T)


def _sample_grid(cfg, eps):
    H = cfg.grid.sample_spacing * eps
    return MacroGrid(cfg.d, int(math.ceil(1.0 / H - 1e-9)), int(math.ceil(cfg.T / H - 1e-9)), cfg.T)


def cell_fields(spec, sample_grid, ny, ntau, jobs=1, res_tol=1e-10):
    """Correctors and ``frak[d+1, k, j]`` at every node of the sample grid, smoothed in (x, t)."""
    d = spec.d
    heat = heat_factor(d, ny, ntau)

    def at_node(node):
        _, x, t = node
        res = node_pipeline(sample_cell(spec, x, t, ny, ntau), heat, res_tol=res_tol)
        return res["chi"], res["frak_t"], res["residual"]

    nodes = macro_nodes(sample_grid)
    results = parallel_map(at_node, nodes, jobs)
    torus = (ny,) * d + (ntau,)
    chi = np.empty((d,) + sample_grid.shape + torus)
    frak = np.empty((d, d) + sample_grid.shape + torus)
    worst = 0.0
    for (idx, _, _), (c, f, r) in zip(nodes, results):
        for j in range(d):
            chi[(j,) + idx] = c[j]
            for k in range(d):
                frak[(k, j) + idx] = f[k, j]
        worst = max(worst, r)
    return chi, frak, worst


def smooth_cell_fields(chi, frak, sample_grid, eps):
    d = sample_grid.d
    chi_s = np.stack([smooth_fourvar(FourVarGridFn(sample_grid, chi[j]), eps).values for j in range(d)])
    frak_s = np.stack(
        [np.stack([smooth_fourvar(FourVarGridFn(sample_grid, frak[k, j]), eps).values for j in range(d)]) for k in range(d)]
    )
    return chi_s, frak_s


def _sample_steps(nt, samples):
    """Odd-stride steps (so the micro-time phases cycle) with midpoint weights."""
    stride = max(1, nt // max(samples, 1))
    if stride % 2 == 0:
        stride -= 1
    count = nt // stride
    steps = stride // 2 + stride * np.arange(count)
    return steps[steps <= nt], stride


def run_single(cfg, eps, ahat, refine=1, compute_w=None, jobs=1, dump_dir=None):
    """One eps of the study; returns the CSV row and extra diagnostics."""
    started = time.perf_counter()
    compute_w = cfg.compute_w if compute_w is None else compute_w
    d = cfg.d
    grid = _fine_grid(cfg, eps, refine)
    stage = "cells"
    extra = {"eps": eps}
    try:
        terms = None
        if compute_w:
            sg = _sample_grid(cfg, eps)
            chi, frak, cell_res = cell_fields(cfg.spec, sg, cfg.grid.ny, cfg.grid.ntau, jobs, cfg.res_tol)
            chi_s, frak_s = smooth_cell_fields(chi, frak, sg, eps)
            del chi, frak
            eta = cutoff(eps, d, cfg.T, strict=False)
            terms = CorrectorTerms(grid, sg, eps, chi_s, frak_s, eta)
            extra.update(cell_residual=cell_res, sample_grid=[sg.n, sg.nt],
                         cutoff_plateau_empty=bool(10 * eps > math.sqrt(d)))
        stage = "solve"
        fine = fine_stepper(cfg.spec, eps, cfg.problem, grid, cfg.res_tol)
        if not cfg.spec.micro_dependent:
            hom = CNStepper(grid, fine_coefficient(cfg.spec, eps), cfg.problem.f, cfg.problem.h,
                            cfg.spec.time_dependent, cfg.spec.symmetric, cfg.res_tol)
        else:
            hom = homogenized_stepper(ahat, cfg.problem, grid, cfg.res_tol)
        nt = grid.nt
        diff_norms = {pair: np.empty(nt + 1) for pair in cfg.norms}
        layer_sq = np.empty(nt + 1)
        full_sq = np.empty(nt + 1)
        spatial_layer = layer_mask(grid, cfg.layer_k, eps)
        if compute_w:
            samples, stride = _sample_steps(nt, cfg.w_samples)
            pending = {}
            ring = OrderedDict()
            span = 2 * terms.m
            w_sq = {}

        def record(n):
            ue, u0 = fine.values(), hom.values()
            diff = ue - u0
            for (q, p), arr in diff_norms.items():
                arr[n] = spatial_norm(diff, grid.h, p, d)
            gmag = np.linalg.norm(_grad(u0, grid.h, d), axis=-1)
            t = grid.t[n]
            in_t = t < cfg.layer_k * eps**2 or t > cfg.T - cfg.layer_k * eps**2
            layer_sq[n] = spatial_norm(gmag if in_t else np.where(spatial_layer, gmag, 0.0), grid.h, 2, d) ** 2
            full_sq[n] = spatial_norm(gmag, grid.h, 2, d) ** 2
            if compute_w:
                ring[n] = u0.copy()
                while ring and next(iter(ring)) < n - 2 * span:
                    ring.popitem(last=False)
                if n in sample_set:
                    pending[n] = diff.copy()
                for s in [s for s in pending if s + span <= n or n == nt]:
                    t1, t2 = terms(s, lambda k: ring.get(k))
                    w = pending.pop(s) - (t1 + t2).reshape(grid.spatial_shape)
                    gw = np.linalg.norm(_grad(w, grid.h, d), axis=-1)
                    w_sq[s] = spatial_norm(w, grid.h, 2, d) ** 2 + spatial_norm(gw, grid.h, 2, d) ** 2

        if compute_w:
            sample_set = set(int(s) for s in samples)
        record(0)
        for n in range(1, nt + 1):
            fine.step()
            hom.step()
            record(n)
        stage = "norms"
        if dump_dir is not None:
            _dump_final(Path(dump_dir) / f"{cfg.name}_fields_eps{eps:.6g}.csv", grid, fine.values(), hom.values())
        row = {"eps": eps}
        errs = {pair: time_norm(arr, grid.dt, pair[0]) for pair, arr in diff_norms.items()}
        row["err_L2L2"] = errs.get((2.0, 2.0), float("nan"))
        p0 = p0_exponent(d)
        row["err_L2Lp0"] = errs.get((2.0, p0), float("nan"))
        if compute_w:
            vals = np.array([w_sq[s] for s in sorted(w_sq)])
            row["w_L2H1"] = float(np.sqrt(vals.sum() * stride * grid.dt))
            extra["w_samples"] = int(len(vals))
            extra["w_stride"] = int(stride)
        else:
            row["w_L2H1"] = float("nan")
        row["layer_norm"] = float(np.sqrt((layer_sq * trapezoid_weights(nt + 1, grid.dt)).sum()))
        k_t = int(round(eps**2 / grid.dt))
        extra["temporal_layer"] = float(np.sqrt((full_sq[: k_t + 1] * trapezoid_weights(k_t + 1, grid.dt)).sum()))
        extra["norms"] = {f"L{q:g}L{p:g}": v for (q, p), v in errs.items()}
        extra["max_step_iterations"] = max(max(fine.iterations or [0]), max(hom.iterations or [0]))
        row.update(h=grid.h, dt=grid.dt, Ny=cfg.grid.ny, Ntau=cfg.grid.ntau)
        row["wall_seconds"] = time.perf_counter() - started
        extra["status"] = "ok"
        return row, extra
    except ParahomError as exc:
        row = {c: float("nan") for c in CSV_COLUMNS}
        row.update(eps=eps, h=grid.h, dt=grid.dt, Ny=cfg.grid.ny, Ntau=cfg.grid.ntau)
        row["wall_seconds"] = time.perf_counter() - started
        extra.update(status="failed", stage=stage, error=f"{type(exc).__name__}: {exc}")
        log.error("eps = %g failed in stage %s: %s", eps, stage, exc)
        return row, extra


def _dump_final(path, grid, ue, u0):
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = grid.points().reshape(-1, grid.d)
    cols = [pts, np.full((len(pts), 1), grid.T), ue.reshape(-1, 1), u0.reshape(-1, 1)]
    header = ",".join([f"x{k + 1}" for k in range(grid.d)] + ["t", "u_eps", "u_0"])
    np.savetxt(path, np.hstack(cols), delimiter=",", header=header, comments="", fmt="%.17g")


# ---------------------------------------------------------------- the study


@dataclass
class ConvergenceReport:
    rows: list
    slopes: dict
    extras: list
    meta: dict

    def csv_text(self, with_wall=True):
        buf = io.StringIO()
        cols = CSV_COLUMNS if with_wall else CSV_COLUMNS[:-1]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def to_json(self):
        return {"rows": self.rows, "slopes": self.slopes, "runs": self.extras, "meta": self.meta}

    def write(self, out_dir, name):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{name}.csv"
        csv_path.write_text(self.csv_text())
        json_path = out / f"{name}.json"
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True, default=_json_default) + "\n")
        return csv_path, json_path


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _safe_fit(eps, vals):
    try:
        return fit_rate(eps, vals)
    except DegenerateFit as exc:
        return {"error": f"DegenerateFit: {exc}", "n": int(len(eps))}


def effective_for_study(cfg, jobs=1):
    """Effective tensor on the fixed (eps-independent) macro grid used by every u0 solve."""
    g = cfg.grid
    nt = g.ahat_nt if cfg.spec.time_dependent else 1
    grid = MacroGrid(cfg.d, g.ahat_n, nt, cfg.T)
    return effective_tensor_field(cfg.spec, grid, g.ny, g.ntau, jobs=jobs)


def run_study(cfg, out_dir=None, jobs=None, write=True, dump_fields=False):
    """Full pipeline over every eps; writes ``<name>.csv`` and ``<name>.json``."""
    jobs = cfg.jobs if jobs is None else jobs
    started = time.perf_counter()
    ahat = effective_for_study(cfg, jobs) if cfg.spec.micro_dependent else None
    eps_sorted = sorted(cfg.eps, reverse=True)
    outer = jobs if len(eps_sorted) > 1 else 1
    inner = 1 if outer > 1 else jobs
    dump_dir = (out_dir or cfg.out_dir) if dump_fields else None
    results = parallel_map(lambda e: run_single(cfg, e, ahat, jobs=inner, dump_dir=dump_dir), eps_sorted, outer)
    rows = [r for r, _ in results]
    extras = [x for _, x in results]
    ok = [x["status"] == "ok" for x in extras]
    eps_ok = [r["eps"] for r, good in zip(rows, ok) if good]
    slopes = {}
    floor = None
    if cfg.floor_check and ok and ok[0] and cfg.spec.micro_dependent:
        ref_row, ref_extra = run_single(cfg, eps_sorted[0], ahat, refine=2, compute_w=False, jobs=jobs)
        if ref_extra["status"] == "ok":
            base = rows[0]["err_L2L2"]
            est = abs(base - ref_row["err_L2L2"]) * 4.0 / 3.0
            smallest = min(r["err_L2L2"] for r, good in zip(rows, ok) if good)
            floor = {"eps": eps_sorted[0], "err": base, "err_refined": ref_row["err_L2L2"], "floor": est,
                     "smallest_error": smallest, "ratio": est / smallest if smallest > 0 else math.inf}
            floor["passed"] = bool(est <= cfg.floor_fraction * smallest)
        else:
            floor = {"passed": False, "error": ref_extra.get("error")}
    fit_allowed = floor is None or floor.get("passed", False)
    series = {"err_L2L2": "err_L2L2", "layer_norm": "layer_norm"}
    if cfg.d >= 2:
        series["err_L2Lp0"] = "err_L2Lp0"
    if cfg.compute_w:
        series["w_L2H1"] = "w_L2H1"
    for key, col in series.items():
        vals = [r[col] for r, good in zip(rows, ok) if good]
        if key.startswith("err") and not fit_allowed:
            slopes[key] = {"error": "discretization floor guard failed; fit skipped", "n": len(vals)}
        else:
            slopes[key] = _safe_fit(eps_ok, vals)
    if cfg.compute_w:
        # informational: only eps whose cutoff plateau is nonempty (10 eps <= diam)
        plateau = [(r["eps"], r["w_L2H1"]) for r, good in zip(rows, ok) if good and 10 * r["eps"] <= math.sqrt(cfg.d)]
        slopes["w_L2H1_plateau"] = _safe_fit([e for e, _ in plateau], [v for _, v in plateau])
    slopes["temporal_layer"] = _safe_fit(eps_ok, [x["temporal_layer"] for x, good in zip(extras, ok) if good])
    meta = {
        "name": cfg.name,
        "config": cfg.echo(),
        "floor_check": floor,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
        "jobs": jobs,
        "wall_seconds": time.perf_counter() - started,
        "ahat_range": None if ahat is None else [float(ahat.values.min()), float(ahat.values.max())],
        "ahat_min_eig": None if ahat is None else ahat.min_eig,
    }
    report = ConvergenceReport(rows, slopes, extras, meta)
    if write:
        report.write(out_dir or cfg.out_dir, cfg.name)
    return report
