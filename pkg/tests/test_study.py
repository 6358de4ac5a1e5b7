import json
import math
from importlib import resources

import numpy as np
import pytest

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from parahom.errors import ConfigError, DegenerateFit, EpsilonTooLarge, GridMismatch
from parahom.fields import MacroGrid, MacroGridFn, torus_coords
from parahom.smoothing import cutoff
from parahom.study import (
    CSV_COLUMNS,
    CorrectorTerms,
    StudyConfig,
    build_w_eps,
    error_report,
    fit_rate,
    layer_mask,
    p0_exponent,
    run_study,
)


def preset_table(name="default-1d"):
    with resources.files("parahom.presets").joinpath(f"{name}.toml").open("rb") as fh:
        return tomllib.load(fh)


def test_fit_rate_oracles(rng):
    eps = np.array([0.1, 0.05, 0.025, 0.0125])
    assert fit_rate(eps, 3.0 * eps)["slope"] == pytest.approx(1.0, abs=1e-12)
    assert fit_rate(eps, np.sqrt(eps))["slope"] == pytest.approx(0.5, abs=1e-12)
    noisy = eps**1.3 * np.exp(rng.uniform(-0.02, 0.02, eps.size))
    fit = fit_rate(eps, noisy)
    assert 1.25 <= fit["slope"] <= 1.35 and fit["r2"] > 0.99


@pytest.mark.parametrize("errors", [[1.0, 0.5], [1.0, 0.0, 0.2], [1.0, np.nan, 0.1], [1.0, -1.0, 0.1]])
def test_fit_rate_degenerate(errors):
    with pytest.raises(DegenerateFit):
        fit_rate([0.1, 0.05, 0.025][: len(errors)], errors)


def test_exponent_p0():
    assert p0_exponent(1) == math.inf and p0_exponent(2) == 4.0 and p0_exponent(3) == 3.0


def _fn(grid, func):
    x = grid.points()[..., 0]
    return MacroGridFn(grid, np.broadcast_to(func(x), grid.shape).copy())


def test_error_report_oracles():
    g = MacroGrid(1, 400, 20, 1.0)
    u = _fn(g, lambda x: np.sin(np.pi * x))
    zero = _fn(g, lambda x: 0 * x)
    rep = error_report(u, u, zero, 0.05, norms=((2, 2), (2, math.inf)))
    assert rep["diff"][(2, 2)] == 0.0 and rep["diff"][(2, math.inf)] == 0.0 and rep["w_L2H1"] == 0.0
    rep = error_report(u, zero, None, 0.05)
    assert rep["diff"][(2, 2)] == pytest.approx(1 / math.sqrt(2), rel=1e-5)


def test_layer_mask():
    g = MacroGrid(2, 40, 1, 1.0)
    mask = layer_mask(g, 2, 0.05)
    assert mask[0, 20] and mask[20, 3] and not mask[20, 4] and not mask[20, 20]


def _setup(eps=1 / 16, T=0.1, d=1, seed=0):
    n = int(round(16 / eps))
    grid = MacroGrid(d, n, int(math.ceil(T * 16 / eps**2)), T)
    sg = MacroGrid(d, int(round(2 / eps)), int(math.ceil(T / (eps / 2))), T)
    torus = (32,) * d + (15,)
    rng = np.random.default_rng(seed)
    chi = rng.standard_normal((d,) + sg.shape + torus)
    frak = rng.standard_normal((d, d) + sg.shape + torus)
    return grid, sg, chi, frak


def test_w_without_correctors_is_the_plain_difference():
    grid, sg, chi, frak = _setup()
    ue = _fn(grid, lambda x: np.sin(np.pi * x) + 0.1 * x * (1 - x))
    u0 = _fn(grid, lambda x: np.sin(np.pi * x))
    steps = [0, 7, grid.nt // 2, grid.nt]
    w = build_w_eps(ue, u0, 0 * chi, 0 * frak, 1 / 16, sg, steps=steps)
    np.testing.assert_array_equal(w, (ue.values - u0.values)[steps])


def test_w_rejects_mismatched_grids():
    grid, sg, chi, frak = _setup()
    other = MacroGrid(1, grid.n // 2, grid.nt, grid.T)
    with pytest.raises(GridMismatch):
        build_w_eps(_fn(grid, np.sin), _fn(other, np.sin), chi, frak, 1 / 16, sg)


def test_deep_interior_first_corrector():
    eps = 1 / 16
    grid, sg, _, _ = _setup(eps)
    y, tau = torus_coords(1, 32, 15)
    cell = np.sin(2 * np.pi * y[..., 0]) + 0.3 * np.cos(2 * np.pi * tau)
    chi = np.broadcast_to(cell, (1,) + sg.shape + cell.shape).copy()
    u0 = _fn(grid, lambda x: x)
    terms = CorrectorTerms(grid, sg, eps, chi, 0 * chi[None], cutoff(eps, 1, grid.T))
    n = grid.nt // 2
    t1, t2 = terms(n, lambda s: u0.values[s])
    x = grid.x
    inner = (x > 5.5 * eps) & (x < 1 - 5.5 * eps)
    t = grid.t[n]
    exact = eps * (np.sin(2 * np.pi * x / eps) + 0.3 * np.cos(2 * np.pi * t / eps**2))
    assert np.abs(t1[inner] - exact[inner]).max() <= 0.02 * eps
    assert np.abs(t2).max() == 0.0


def test_collar_identity():
    eps = 1 / 16
    grid, sg, chi, frak = _setup(eps)
    ue = _fn(grid, lambda x: np.sin(np.pi * x) * (1 + x))
    u0 = _fn(grid, lambda x: np.sin(np.pi * x))
    steps = [s for s in range(grid.nt + 1) if grid.t[s] < 3.5 * eps**2] + [grid.nt // 2]
    w = build_w_eps(ue, u0, chi, frak, eps, sg, steps=steps)
    diff = (ue.values - u0.values)[steps]
    early = grid.t[steps] < 3.5 * eps**2
    np.testing.assert_array_equal(w[early], diff[early])
    collar = layer_mask(grid, 3.5, eps)
    np.testing.assert_array_equal(w[-1][collar], diff[-1][collar])
    assert np.abs(w[-1][~collar] - diff[-1][~collar]).max() > 0


def test_config_rejects_unknown_keys():
    table = preset_table()
    table["extras"] = {}
    with pytest.raises(ConfigError):
        StudyConfig.from_dict(table)
    table = preset_table()
    table["study"]["epsilon"] = [0.1]
    with pytest.raises(ConfigError):
        StudyConfig.from_dict(table)


def test_config_rejects_large_eps():
    table = preset_table()
    table["study"]["eps"] = [0.9]
    with pytest.raises(EpsilonTooLarge):
        StudyConfig.from_dict(table).validate()


def test_config_echo_roundtrip():
    cfg = StudyConfig.from_dict(preset_table())
    echo = cfg.echo()
    assert json.loads(json.dumps(echo)) == echo
    assert StudyConfig.from_dict(echo).eps == cfg.eps


def test_micro_independent_study_is_degenerate(tmp_path):
    table = preset_table()
    table["coefficient"]["terms"] = []
    table["study"].update({"eps": [0.125, 0.0625, 0.03125], "T": 0.4, "compute_w": False})
    table["problem"]["T"] = 0.4
    cfg = StudyConfig.from_dict(table)
    report = run_study(cfg, out_dir=tmp_path, write=False)
    assert all(r["err_L2L2"] == 0.0 for r in report.rows)
    assert "DegenerateFit" in report.slopes["err_L2L2"]["error"]
    with pytest.raises(DegenerateFit):
        fit_rate([r["eps"] for r in report.rows], [r["err_L2L2"] for r in report.rows])


def test_small_study_end_to_end(tmp_path):
    table = preset_table()
    table["study"].update({"eps": [0.0625, 0.125, 0.03125], "w_samples": 32})
    table["grid"].update({"ahat_n": 16, "ahat_nt": 16})
    cfg = StudyConfig.from_dict(table)
    report = run_study(cfg, out_dir=tmp_path)
    assert [r["eps"] for r in report.rows] == [0.125, 0.0625, 0.03125]
    lines = (tmp_path / "default-1d.csv").read_text().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS and len(lines) == 4
    meta = json.loads((tmp_path / "default-1d.json").read_text())
    assert meta["meta"]["config"]["study"]["eps"] == [0.0625, 0.125, 0.03125]
    errs = [r["err_L2L2"] for r in report.rows]
    assert errs[0] > errs[1] > errs[2]
    assert report.slopes["err_L2L2"]["slope"] > 0.85
    assert all(x["status"] == "ok" for x in report.extras)
