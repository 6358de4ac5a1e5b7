import numpy as np
import pytest

from parahom.fields import CoefficientSpec


def spec_1d(base=2.0, terms=(), envelope=(), mu=0.2):
    return CoefficientSpec.from_dict({"d": 1, "mu": mu, "base": [[base]], "terms": list(terms), "envelope": list(envelope)})


@pytest.fixture
def micro_space_1d():
    """a(y) = 2 + sin(2 pi y)."""
    return spec_1d(terms=[{"amplitude": 1.0, "kind": "sin", "micro_k": [1]}])


@pytest.fixture
def micro_time_1d():
    """a(tau) = 2 + cos(2 pi tau)."""
    return spec_1d(terms=[{"amplitude": 1.0, "kind": "cos", "micro_omega": 1}])


@pytest.fixture
def preset_1d():
    """(2 + sin 2 pi y + 0.5 cos 2 pi tau)(1 + 0.5 x)(1 + 0.25 sin 2 pi t)."""
    return spec_1d(
        terms=[
            {"amplitude": 1.0, "kind": "sin", "micro_k": [1]},
            {"amplitude": 0.5, "kind": "cos", "micro_omega": 1},
        ],
        envelope=[
            {"axis": "x1", "offset": 1.0, "slope": 0.5},
            {"axis": "t", "offset": 1.0, "amplitude": 0.25, "kind": "sin", "frequency": 1.0},
        ],
        mu=0.15,
    )


@pytest.fixture
def diag_2d():
    """diag(2 + sin 2 pi y1, 2 + sin 2 pi y2)(1 + 0.5 x1); time independent and symmetric."""
    return CoefficientSpec.from_dict({
        "d": 2, "mu": 0.2, "base": [[2.0, 0.0], [0.0, 2.0]],
        "terms": [
            {"entry": [0, 0], "amplitude": 1.0, "kind": "sin", "micro_k": [1, 0]},
            {"entry": [1, 1], "amplitude": 1.0, "kind": "sin", "micro_k": [0, 1]},
        ],
        "envelope": [{"axis": "x1", "offset": 1.0, "slope": 0.5}],
    })


@pytest.fixture
def full_2d():
    """2D coefficient with off-diagonal coupling and micro-time dependence."""
    return CoefficientSpec.from_dict({
        "d": 2, "mu": 0.1, "base": [[2.0, 0.3], [0.3, 2.0]],
        "terms": [
            {"entry": [0, 0], "amplitude": 0.6, "kind": "sin", "micro_k": [1, 1]},
            {"entry": [1, 1], "amplitude": 0.5, "kind": "cos", "micro_k": [0, 1], "micro_omega": 1},
            {"entry": [0, 1], "amplitude": 0.2, "kind": "sin", "micro_k": [1, 0]},
        ],
    })


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
