"""Periodic parabolic cell problems on the torus T^{d+1}.

Three problem kinds share one assembly path:

* ``corrector``: ``d_tau chi_j + L chi_j = -L(y_j)``
* ``dual``:      ``-d_tau chi*_j + L^* chi*_j = -L^*(y_j)``
* ``flux``:      ``d_tau f - Lap_y f = B`` (heat operator, supplied RHS)

``L = -div_y(A grad_y .)`` is discretised in conservative flux form with
face-averaged coefficients.  The zero-mean condition is imposed through a
bordered (Lagrange multiplier) system.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import IncompatibleRHS, SolverDiverged
from .fields import FourVarGridFn, MacroGrid, TorusGridFn, sample_cell

log = logging.getLogger(__name__)

DIRECT_THRESHOLD = 20_000
RES_TOL = 1e-10
MEAN_TOL = 1e-12

KINDS = ("corrector", "dual", "flux")


def tau_scheme(ntau):
    """``"none"`` for one level, ``"centered"`` for odd counts, else ``"upwind"``.

    The cyclic centred difference on an even grid annihilates the
    alternating mode, which would make the cell system singular.
    """
    if ntau == 1:
        return "none"
    return "centered" if ntau % 2 == 1 else "upwind"


def _shift(n, k):
    """Cyclic shift matrix: (S u)_i = u_{i+k}."""
    return sp.csr_matrix((np.ones(n), (np.arange(n), (np.arange(n) + k) % n)), shape=(n, n))


def _on_axis(mat, axis, shape):
    ops = [sp.identity(n, format="csr") for n in shape]
    ops[axis] = mat
    out = ops[0]
    for op in ops[1:]:
        out = sp.kron(out, op, format="csr")
    return out


@dataclass
class TorusOps:
    """Difference operators on a flattened ``(*[ny]*d, ntau)`` periodic grid."""

    d: int
    ny: int
    ntau: int

    def __post_init__(self):
        self.shape = (self.ny,) * self.d + (self.ntau,)
        self.size = int(np.prod(self.shape))
        self.hy = 1.0 / self.ny
        self.htau = 1.0 / self.ntau
        self.plus = [_on_axis(_shift(self.ny, 1), k, self.shape) for k in range(self.d)]
        self.minus = [_on_axis(_shift(self.ny, -1), k, self.shape) for k in range(self.d)]
        eye = sp.identity(self.size, format="csr")
        self.eye = eye
        # node -> face (i + 1/2 along axis k)
        self.fwd = [(p - eye) / self.hy for p in self.plus]
        self.cen = [(p - m) / (2 * self.hy) for p, m in zip(self.plus, self.minus)]
        self.avg = [0.5 * (eye + p) for p in self.plus]
        self.scheme = tau_scheme(self.ntau)
        tp = _on_axis(_shift(self.ntau, 1), self.d, self.shape)
        tm = _on_axis(_shift(self.ntau, -1), self.d, self.shape)
        if self.scheme == "centered":
            self.dtau = (tp - tm) / (2 * self.htau)
            self.dtau_rev = -self.dtau
        elif self.scheme == "upwind":
            self.dtau = (eye - tm) / self.htau
            # -d_tau marches backward in tau, so its upwind side is ahead
            self.dtau_rev = (eye - tp) / self.htau
        else:
            self.dtau = sp.csr_matrix((self.size, self.size))
            self.dtau_rev = self.dtau

    def grad_c(self, u):
        """Centred periodic gradient of nodal values, shape ``(d, *shape)``."""
        return np.stack([np.reshape(c @ u.ravel(), self.shape) for c in self.cen])

    def dtau_c(self, u):
        """Centred periodic tau-derivative (independent of the solve scheme)."""
        u = np.reshape(u, self.shape)
        if self.ntau == 1:
            return np.zeros_like(u)
        return (np.roll(u, -1, axis=-1) - np.roll(u, 1, axis=-1)) / (2 * self.htau)

    def face_coefficients(self, cellA):
        """Face averages ``a^f_{kl}`` on the faces normal to axis k (flattened)."""
        flat = cellA.reshape(self.size, self.d, self.d)
        faces = np.empty((self.d, self.d, self.size))
        for k in range(self.d):
            for l in range(self.d):
                a0 = flat[:, k, l]
                a1 = self.plus[k] @ a0
                if self.d == 1 and k == l:
                    faces[k, l] = 2.0 * a0 * a1 / (a0 + a1)
                else:
                    faces[k, l] = 0.5 * (a0 + a1)
        return faces

    def elliptic(self, cellA):
        """Matrix of ``-div(A grad .)`` in flux form."""
        faces = self.face_coefficients(cellA)
        op = sp.csr_matrix((self.size, self.size))
        for k in range(self.d):
            flux = sp.diags(faces[k, k]) @ self.fwd[k]
            for l in range(self.d):
                if l != k and np.any(faces[k, l]):
                    flux = flux + sp.diags(faces[k, l]) @ self.avg[k] @ self.cen[l]
            op = op + self.fwd[k].T @ flux
        return op.tocsr()

    def elliptic_rhs(self, cellA, j):
        """``-L(y_j)`` as the discrete divergence of column j of the face coefficients."""
        faces = self.face_coefficients(cellA)
        out = np.zeros(self.size)
        for k in range(self.d):
            out -= self.fwd[k].T @ faces[k, j]
        return out

    def laplacian(self):
        return -sum((f.T @ f for f in self.fwd), sp.csr_matrix((self.size, self.size))).tocsr()


_OPS_CACHE = {}


def torus_ops(d, ny, ntau):
    key = (d, ny, ntau)
    if key not in _OPS_CACHE:
        _OPS_CACHE[key] = TorusOps(d, ny, ntau)
    return _OPS_CACHE[key]


@dataclass
class CellSystem:
    """Pure cell operator, right-hand side and the bordered zero-mean system."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    d: int
    shape: tuple
    kind: str
    j: int = None
    diffusion: np.ndarray = None

    @property
    def size(self):
        return self.matrix.shape[0]

    def bordered(self):
        n = self.size
        ones = np.ones((n, 1))
        return sp.bmat([[self.matrix, sp.csr_matrix(ones)], [sp.csr_matrix(ones.T / n), None]], format="csc")

    def bordered_rhs(self):
        return np.append(self.rhs, 0.0)


@dataclass
class CellSolution:
    fn: TorusGridFn
    residual: float
    mean: float
    iterations: int
    kind: str
    j: int = None
    info: dict = field(default_factory=dict)


def assemble_cell_system(cellA, kind, j=None, rhs=None, ntau=None):
    """Assemble a cell problem.

    ``cellA`` is shaped ``(*[ny]*d, ntau, d, d)``.  For ``kind="flux"`` only
    its grid shape is used and ``rhs`` (shaped like the torus grid) must be
    mean-zero.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    cellA = np.asarray(cellA, dtype=float)
    d = cellA.shape[-1]
    shape = cellA.shape[:-2]
    ops = torus_ops(d, shape[0], shape[-1])
    if kind == "flux":
        b = np.asarray(rhs, dtype=float).reshape(-1)
        scale = 1.0 + np.abs(b).max()
        if abs(b.mean()) > 1e-8 * scale:
            raise IncompatibleRHS(f"flux-potential RHS has mean {b.mean():.3e}")
        b = b - b.mean()
        mat = (ops.dtau - ops.laplacian()).tocsr()
        return CellSystem(mat, b, d, shape, kind, j)
    if j is None:
        raise ValueError("corrector kinds need a direction j")
    diffusion = np.array([cellA[..., k, k].mean() for k in range(d)])
    if kind == "dual":
        cellA = np.swapaxes(cellA, -1, -2)
        mat = (ops.dtau_rev + ops.elliptic(cellA)).tocsr()
    else:
        mat = (ops.dtau + ops.elliptic(cellA)).tocsr()
    b = ops.elliptic_rhs(cellA, j)
    scale = 1.0 + np.abs(b).max()
    if abs(b.mean()) > 1e-8 * scale:
        raise IncompatibleRHS(f"cell RHS has mean {b.mean():.3e}")
    return CellSystem(mat, b, d, shape, kind, j, diffusion)


class SpectralHeat:
    """Zero-mean solves of ``c d_tau u - sum_k a_k d_kk u = b`` by FFT.

    The symbol matches the sparse assembly (same tau scheme, 3-point
    second differences).  ``reverse`` gives ``-d_tau`` as used by the dual
    problem.  With unit diffusion this is the exact flux-potential
    operator; with averaged diagonal coefficients it preconditions the
    corrector systems.
    """

    def __init__(self, d, ny, ntau, diffusion=None, reverse=False):
        self.d, self.ny, self.ntau = d, ny, ntau
        self.shape = (ny,) * d + (ntau,)
        diffusion = np.ones(d) if diffusion is None else np.asarray(diffusion, dtype=float)
        ky = 2 * np.pi * np.fft.fftfreq(ny)
        lam = 4 * ny**2 * np.sin(ky / 2) ** 2
        symbol = np.zeros(self.shape, dtype=complex)
        for k in range(d):
            symbol += diffusion[k] * lam.reshape([-1 if a == k else 1 for a in range(d + 1)])
        w = 2 * np.pi * np.fft.fftfreq(ntau)
        scheme = tau_scheme(ntau)
        if scheme == "centered":
            sym_t = 1j * np.sin(w) * ntau
        elif scheme == "upwind":
            sym_t = (1 - np.exp(-1j * w)) * ntau
        else:
            sym_t = np.zeros(ntau)
        if reverse:
            sym_t = np.conj(sym_t)
        symbol += sym_t.reshape((1,) * d + (-1,))
        symbol.flat[0] = 1.0
        self._symbol = symbol
        self._inv = 1.0 / symbol
        self._inv.flat[0] = 0.0

    def apply_inverse(self, b):
        b = np.reshape(b, self.shape)
        return np.fft.ifftn(np.fft.fftn(b - b.mean()) * self._inv).real.ravel()

    def solve(self, rhs):
        b = np.asarray(rhs, dtype=float).reshape(self.shape)
        b = b - b.mean()
        u = self.apply_inverse(b)
        r = np.fft.ifftn(np.fft.fftn(u.reshape(self.shape)) * self._symbol).real - b
        bn = np.linalg.norm(b)
        res = float(np.linalg.norm(r) / bn) if bn > 0 else 0.0
        return u, res, 0


class CellFactor:
    """Reusable solver for one cell operator (several right-hand sides)."""

    def __init__(self, system, res_tol=RES_TOL, direct_threshold=DIRECT_THRESHOLD, maxiter=2000):
        self.system = system
        self.res_tol = res_tol
        # 2D tori factor with heavy fill; the spectral preconditioner wins there
        self.direct = system.size <= direct_threshold and (system.d == 1 or system.kind == "flux")
        self.maxiter = maxiter
        if self.direct:
            self._lu = spla.splu(system.bordered())
        else:
            self._prec = spla.LinearOperator(
                system.matrix.shape, self._spectral(system).apply_inverse, dtype=float
            )

    @staticmethod
    def _spectral(system):
        """Constant-coefficient surrogate: averaged diagonal of A, same tau direction."""
        diff = system.diffusion if system.diffusion is not None else np.ones(system.d)
        return SpectralHeat(system.d, system.shape[0], system.shape[-1], diff, reverse=system.kind == "dual")

    def solve(self, rhs):
        m = self.system.matrix
        rhs = np.asarray(rhs, dtype=float).reshape(-1)
        rhs = rhs - rhs.mean()
        iters = 0
        if self.direct:
            u = self._lu.solve(np.append(rhs, 0.0))[:-1]
        else:
            count = [0]

            def cb(_):
                count[0] += 1

            u, info = spla.gmres(
                m, rhs, rtol=self.res_tol, atol=0.0, restart=60, maxiter=self.maxiter,
                M=self._prec, callback=cb, callback_type="pr_norm",
            )
            iters = count[0]
            if info != 0:
                res = np.linalg.norm(m @ u - rhs) / max(np.linalg.norm(rhs), 1e-300)
                raise SolverDiverged(f"cell GMRES stopped after {iters} iterations", residual=res)
        u = u - u.mean()
        bn = np.linalg.norm(rhs)
        res = float(np.linalg.norm(m @ u - rhs) / bn) if bn > 0 else float(np.linalg.norm(m @ u))
        return u, res, iters


def solve_cell(system, res_tol=RES_TOL, direct_threshold=DIRECT_THRESHOLD, factor=None):
    """Solve one assembled cell system; the returned solution has zero mean."""
    factor = factor or CellFactor(system, res_tol, direct_threshold)
    u, res, iters = factor.solve(system.rhs)
    if res > max(res_tol, 1e-9) * 10 and np.linalg.norm(system.rhs) > 0:
        raise SolverDiverged(f"cell residual {res:.2e} above tolerance", residual=res)
    fn = TorusGridFn(u.reshape(system.shape), system.d)
    return CellSolution(fn, res, fn.mean(), iters, system.kind, system.j)


def solve_correctors(cellA, dual=False, res_tol=RES_TOL, direct_threshold=DIRECT_THRESHOLD):
    """All d correctors (or dual correctors) for one macro point; one factorisation."""
    d = cellA.shape[-1]
    kind = "dual" if dual else "corrector"
    systems = [assemble_cell_system(cellA, kind, j) for j in range(d)]
    factor = CellFactor(systems[0], res_tol, direct_threshold)
    return [solve_cell(s, res_tol, direct_threshold, factor=factor) for s in systems]


def parallel_map(fn, items, jobs=1):
    """Ordered map; joblib workers when ``jobs > 1``."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(fn)(it) for it in items)


def macro_nodes(grid):
    """Macro sample points as a list of (index tuple, x, t)."""
    pts = grid.points()
    out = []
    for it, t in enumerate(grid.t):
        for idx in np.ndindex(grid.spatial_shape):
            out.append(((it,) + idx, pts[idx], float(t)))
    return out


def solve_corrector_field(spec, grid, ny, ntau, dual=False, jobs=1, res_tol=RES_TOL):
    """Correctors at every node of ``grid``; returns one FourVarGridFn per direction."""
    if spec.d != grid.d:
        raise ValueError("spec and grid dimensions differ")

    def at_node(node):
        idx, x, t = node
        cellA = sample_cell(spec, x, t, ny, ntau)
        try:
            sols = solve_correctors(cellA, dual=dual, res_tol=res_tol)
        except SolverDiverged as exc:
            raise SolverDiverged(f"at macro node {idx}: {exc}", exc.residual) from exc
        return [s.fn.values for s in sols]

    nodes = macro_nodes(grid)
    results = parallel_map(at_node, nodes, jobs)
    torus_shape = (ny,) * spec.d + (ntau,)
    out = []
    for j in range(spec.d):
        vals = np.empty(grid.shape + torus_shape)
        for (idx, _, _), res in zip(nodes, results):
            vals[idx] = res[j]
        out.append(FourVarGridFn(grid, vals, {"kind": "dual" if dual else "corrector", "j": j}))
    return out


def dump_solution_csv(sol, path):
    """Write ``node, y_1..y_d, tau, value`` rows for one cell solution."""
    d = sol.fn.d
    vals = sol.fn.values
    shape = vals.shape
    grids = np.meshgrid(*[np.arange(n) / n for n in shape], indexing="ij")
    cols = [np.arange(vals.size)] + [g.ravel() for g in grids] + [vals.ravel()]
    header = "node," + ",".join(f"y{k + 1}" for k in range(d)) + ",tau,value"
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt="%.17g")
