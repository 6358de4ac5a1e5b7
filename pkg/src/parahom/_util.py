import dataclasses

import numpy as np

from .errors import ConfigError


def strict_kwargs(cls, table, where):
    """Check ``table`` keys against the dataclass fields of ``cls``."""
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table, got {type(table).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return dict(table)


def trapezoid_weights(npts, spacing):
    """Composite trapezoid weights for ``npts`` equispaced nodes."""
    w = np.full(npts, float(spacing))
    if npts > 1:
        w[0] *= 0.5
        w[-1] *= 0.5
    else:
        w[:] = 0.0
    return w


def linear_weights(coord, origin, spacing, npts):
    """Left index and right weight for linear interpolation on a uniform axis.

    Coordinates are clipped to the axis; the right weight is in [0, 1].
    """
    s = (np.asarray(coord, dtype=float) - origin) / spacing
    s = np.clip(s, 0.0, npts - 1)
    i0 = np.minimum(np.floor(s).astype(np.intp), max(npts - 2, 0))
    lam = s - i0
    if npts == 1:
        lam = np.zeros_like(s)
    return i0, lam


def periodic_weights(coord, npts):
    """Left index, right index and right weight for periodic interpolation on [0, 1)."""
    s = np.mod(np.asarray(coord, dtype=float), 1.0) * npts
    i0 = np.floor(s).astype(np.intp)
    lam = s - i0
    i0 = np.mod(i0, npts)
    return i0, np.mod(i0 + 1, npts), lam
