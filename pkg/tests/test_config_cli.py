import csv
import json
import math

import numpy as np
import pytest

from rydberg_lz.cli import main
from rydberg_lz.config import ConfigError, RunConfig, config_from_dict, load_config
from rydberg_lz.dataset import DATASET_HEADER, read_dataset_csv
from rydberg_lz.physics import MAGIC_ANGLE


def _write_cfg(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return str(p)


def test_defaults_and_digest_are_stable():
    a, b = RunConfig(), load_config(None)
    assert a.digest() == b.digest()
    c = config_from_dict({"seed": 3})
    assert c.digest() != a.digest()


def test_toml_values_are_applied(tmp_path):
    cfg = load_config(_write_cfg(tmp_path, """
seed = 5
[physics]
r0_marker_meaning = "r0"
[simulation]
n_shots = 12
mode = "expected"
sweep_grid_V_per_cm_per_us = [1, 2]
[simulation.noise]
enabled = false
"""))
    sim = cfg.sim_config()
    assert sim.seed == 5 and sim.n_shots == 12 and sim.noise is None
    assert sim.sweep_grid == (1.0, 2.0)
    assert cfg.physics.build().r0_ref == 13.5


@pytest.mark.parametrize("raw, fragment", [
    ({"physics": {"bogus_um": 1.0}}, "physics.bogus_um"),
    ({"nonsense": {}}, "nonsense"),
    ({"simulation": {"n_shots": "many"}}, "simulation.n_shots"),
    ({"simulation": {"mode": "teleport"}}, "simulation.mode"),
    ({"fit": {"significance": 1.5}}, "fit.significance"),
    ({"seed": -1}, "seed"),
])
def test_invalid_config_names_the_key(raw, fragment):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert fragment in str(exc.value)


def _simulate(out, *extra):
    return main(["simulate", "--out", str(out), *extra])


def test_simulate_is_byte_deterministic(tmp_path):
    assert _simulate(tmp_path / "a", "--n-shots", "30", "--seed", "4") == 0
    assert _simulate(tmp_path / "b", "--n-shots", "30", "--seed", "4") == 0
    for name in ("dataset.csv", "truth.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 4 and len(man["config_sha256"]) == 64


def test_zero_shots_gives_header_only_csv(tmp_path):
    assert _simulate(tmp_path, "--n-shots", "0") == 0
    lines = (tmp_path / "dataset.csv").read_text().splitlines()
    assert lines == [",".join(DATASET_HEADER)]


def test_fit_both_and_convert(tmp_path, capsys):
    assert _simulate(tmp_path, "--n-shots", "300") == 0
    rc = main(["fit", str(tmp_path / "dataset.csv"), "--kind", "both", "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "fit_report.json").read_text())
    assert set(rep["fits"]) == {"linear", "quadratic"}
    assert rep["f_test"]["dof"] == [1, 298]
    assert rep["fits"]["linear"]["model"]["g0_cm3_per_Vs"] == pytest.approx(4.15e15, rel=0.05)
    assert "F-test" in capsys.readouterr().out
    rc = main(["convert", "--fit-report", str(tmp_path / "fit_report.json"),
               "--s-total", "10", "--model", "linear", "--out", str(tmp_path)])
    assert rc == 0
    conv = json.loads((tmp_path / "convert.json").read_text())
    g0 = rep["fits"]["linear"]["model"]["g0_cm3_per_Vs"]
    assert conv["eta_cm3"] == pytest.approx(g0 * 1e-8, rel=1e-14)
    assert conv["finite_sample_abs"] == pytest.approx(0.5 / math.sqrt(5e3))


def test_fit_with_baseline(tmp_path):
    assert _simulate(tmp_path / "m", "--n-shots", "200") == 0
    assert _simulate(tmp_path / "b", "--n-shots", "200", "--no-sweep") == 0
    rc = main(["fit", str(tmp_path / "m" / "dataset.csv"), "--baseline",
               str(tmp_path / "b" / "dataset.csv"), "--out", str(tmp_path)])
    assert rc == 0
    assert json.loads((tmp_path / "fit_report.json").read_text())["bbr_corrected"] is True


def test_noise_command(tmp_path):
    cfg = _write_cfg(tmp_path, "[noise]\nbins_per_group = 20\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path), "--n-shots", "4000"]) == 0
    assert main(["fit", str(tmp_path / "dataset.csv"), "--out", str(tmp_path)]) == 0
    rc = main(["noise", str(tmp_path / "dataset.csv"), "--config", cfg,
               "--fit-report", str(tmp_path / "fit_report.json"), "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "noise_report.json").read_text())
    assert rep["converged"] and rep["model"]["alpha_per_sqrt_nVs"] > 0
    with (tmp_path / "snr_points.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {r["gate"] for r in rows} == {"np", "R"}


def test_table_marker_and_magic_angle(tmp_path):
    assert main(["table", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "table_manifest.json").read_text())
    assert man["contour_marker_um"] == pytest.approx(13.5, rel=1e-12)
    with (tmp_path / "polar_contour.csv").open() as fh:
        rows = [(float(a), float(b)) for a, b in list(csv.reader(fh))[1:]]
    th = np.array([r[0] for r in rows])
    rc = np.array([r[1] for r in rows])
    assert rc[0] == pytest.approx(13.5, rel=1e-12)
    # The contour closes at the magic angle, where the (0,0) factor vanishes.
    upper = th <= math.pi / 2
    assert th[upper][np.argmin(rc[upper])] == pytest.approx(MAGIC_ANGLE, abs=th[1] - th[0])
    with (tmp_path / "transition_grid.csv").open() as fh:
        grid = list(csv.reader(fh))
    p = np.array(grid[1][2:], dtype=float)
    assert np.all(np.diff(p) >= 0) and np.all((p >= 0) & (p <= 1))


def test_exit_codes(tmp_path, capsys):
    bad_cfg = _write_cfg(tmp_path, "[physics]\nbogus_um = 1\n")
    assert main(["table", "--config", bad_cfg, "--out", str(tmp_path)]) == 2
    assert "physics.bogus_um" in capsys.readouterr().err

    bad = tmp_path / "bad.csv"
    bad.write_text(",".join(DATASET_HEADER) + "\n0,1,0.1,0.2\n1,1,x,0.2\n")
    assert main(["fit", str(bad), "--out", str(tmp_path)]) == 3
    assert ":3:" in capsys.readouterr().err

    assert main(["fit", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 3

    assert _simulate(tmp_path / "e", "--n-shots", "0") == 0
    assert main(["fit", str(tmp_path / "e" / "dataset.csv"), "--out", str(tmp_path)]) == 2

    const = tmp_path / "const.csv"
    const.write_text(",".join(DATASET_HEADER) + "\n"
                     + "".join(f"{i},2.0,0.3,9.7\n" for i in range(400)))
    report = tmp_path / "rep.json"
    report.write_text(json.dumps({"schema_version": 1, "fits": {"linear": {"model": {
        "g0_cm3_per_Vs": 4.15e15}}}}))
    assert main(["noise", str(const), "--fit-report", str(report), "--out", str(tmp_path)]) == 4


def test_read_back_cli_dataset(tmp_path):
    assert _simulate(tmp_path, "--n-shots", "16") == 0
    data = read_dataset_csv(tmp_path / "dataset.csv")
    assert len(data) == 16 and np.all(data.f_prime > 0)
