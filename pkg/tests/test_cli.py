import json

import numpy as np
import pytest
import yaml

from fcmfrac import __version__
from fcmfrac.cli import main
from fcmfrac.cli.config import ConfigError, dump_config, load_config, parse_config
from fcmfrac.cli.phantoms import KINDS, make_phantom
from fcmfrac.material import ash_to_E


@pytest.fixture(scope="module")
def bar_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("bar")
    assert main(["--log-level", "WARNING", "phantom", "--kind", "uniform-bar", "--size", "8", "8", "16",
                 "--output-dir", str(d)]) == 0
    assert main(["--log-level", "WARNING", "run", "--config", str(d / "config.yaml")]) == 0
    return d


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == f"fcmfrac {__version__}"


def test_phantom_kinds_are_deterministic():
    for kind in KINDS:
        size = [16] if kind == "sphere" else [8, 8, 8]
        a, b = make_phantom(kind, size, seed=3), make_phantom(kind, size, seed=3)
        np.testing.assert_array_equal(a.image.values, b.image.values)
        assert a.config == b.config
    with pytest.raises(ValueError, match="unknown phantom"):
        make_phantom("cube")


def test_run_artifacts_and_linear_force(bar_run):
    out = bar_run / "output"
    for name in ("force_strain.csv", "summary.json", "provenance.json", "checkpoint.npz", "history.csv"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["termination"] == "target"
    lines = (out / "force_strain.csv").read_text().splitlines()
    last = [float(x) for x in lines[-1].split(",")]
    # 8 x 8 bar, 16 long, strained to -1e-3: F = E A eps; probe at the centre reads -1000 microstrain
    assert last[2] == pytest.approx(ash_to_E(1.0) * 64 * -1e-3, rel=5e-3)
    assert last[3] == pytest.approx(-1000.0, rel=5e-3)


def test_probe_and_postproc_from_checkpoint(bar_run, capsys):
    cfg = str(bar_run / "config.yaml")
    capsys.readouterr()
    assert main(["--log-level", "WARNING", "probe", "--config", cfg, "--point", "4", "4", "8", "--radius", "1"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "name,x,y,z,eps3_ustrain"
    assert float(rows[1].split(",")[-1]) == pytest.approx(-1000.0, rel=5e-3)
    before = (bar_run / "output" / "force_strain.csv").read_bytes()
    assert main(["--log-level", "WARNING", "postproc", "--config", cfg]) == 0
    assert (bar_run / "output" / "force_strain.csv").read_bytes() == before
    # resuming a finished run changes nothing
    assert main(["--log-level", "WARNING", "run", "--config", cfg, "--resume"]) == 0
    assert (bar_run / "output" / "force_strain.csv").read_bytes() == before


def test_config_errors_carry_line_numbers(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("solver:\n  l0: -1.0\n")
    assert main(["run", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "bad.yaml:2" in err and "l0" in err
    with pytest.raises(ConfigError, match=r":3: .*unknown key"):
        parse_config("solver:\n  l0: 1.0\n  bogus: 2\n")
    with pytest.raises(ConfigError):
        parse_config("boundary:\n  conditions:\n    - {name: a, kind: glue, face: zmin}\n")
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_config_dump_roundtrip(bar_run):
    cfg = load_config(bar_run / "config.yaml")
    again = parse_config(dump_config(cfg), base_dir=str(bar_run))
    assert again == cfg
    data = yaml.safe_load((bar_run / "config.yaml").read_text())
    assert data["paths"]["image"] == "image.json"
