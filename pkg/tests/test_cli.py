import json
import subprocess
import sys

import pytest

from parahom.cli import build_parser, load_config, main, preset_names


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_help_lists_subcommands():
    text = build_parser().format_help()
    for name in ("cell", "effective", "flux", "smooth-check", "study", "mms"):
        assert name in text


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "parahom.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "smooth-check" in res.stdout


def test_presets_load():
    assert {"default-1d", "separable-2d"} <= set(preset_names())
    for name in preset_names():
        load_config(name).validate()


def test_flux(capsys):
    code, out, _ = run(capsys, "flux", "--config", "default-1d", "--x", "0.3", "--t", "0.2")
    data = json.loads(out)
    assert code == 0
    assert data["skew_symmetry"] == 0.0
    assert max(abs(v) for v in _flat(data["mismatch_means"])) < 1e-10


def test_cell_dump_fields(capsys, tmp_path):
    code, out, _ = run(capsys, "cell", "--config", "default-1d", "--dump-fields", "--out", str(tmp_path))
    assert code == 0
    data = json.loads(out)
    assert data["correctors"][0]["residual"] < 1e-8
    assert (tmp_path / "chi_1.csv").exists()


def test_effective_csv(capsys, tmp_path):
    code, out, _ = run(capsys, "effective", "--config", "separable-2d", "--out", str(tmp_path), "--jobs", "2")
    assert code == 0
    data = json.loads(out)
    assert data["certified"] and (tmp_path / "separable-2d_ahat.csv").exists()


def test_mms(capsys):
    code, out, _ = run(capsys, "mms")
    data = json.loads(out)
    assert code == 0 and min(data["fine"]["orders"]) >= 1.9


def test_smooth_check(capsys):
    code, out, _ = run(capsys, "smooth-check")
    data = json.loads(out)
    assert code == 0
    assert data["spike"]["slope"] == pytest.approx(-1.0, abs=0.1)
    assert data["gradient"]["slope"] == pytest.approx(1.0, abs=0.1)


def test_bad_config_exits_nonzero(capsys, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("name = 'x'\n[study]\neps = [0.1]\nbogus = 1\n[coefficient]\nd = 1\nmu = 0.2\nbase = [[2.0]]\n")
    code, _, err = run(capsys, "study", "--config", str(bad))
    assert code == 2 and "ConfigError" in err
    code, _, err = run(capsys, "flux", "--config", "no-such-preset")
    assert code == 2


def _flat(x):
    return [v for item in x for v in _flat(item)] if isinstance(x, list) else [x]
