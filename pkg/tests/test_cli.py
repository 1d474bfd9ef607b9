import json
import subprocess
import sys

import numpy as np
import pytest

from photophys.cli import build_parser, main
from photophys.pipeline import sha256_file, stage_seed
from photophys.spectro import Spectrum, write_spectrum_csv

SUBCOMMANDS = ["simulate", "correlate", "fit-lifetime", "fit-saturation", "fit-spectrum", "plmap-render",
               "plmap-detect", "plmap-stats", "convert", "raman", "mirror", "lineshape", "pipeline"]

SCENARIO = {
    "seed": 3,
    "acquisition": {"rep_rate_mhz": 20, "power_uw": 1140, "duration_s": 3, "irf_sigma_ps": 100, "dark_rate_hz": 150},
    "emitters": [{"i_sat_hz": 46880, "p_sat_uw": 114, "lifetime_ns": 3.83}],
    "hbt_transmittance": 0.5,
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_every_subcommand_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "--seed" in out and "--threads" in out


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["raman", "--excitation-nm", "530", "--shift-cm", "1360", "--bogus"])
    assert exc.value.code == 2


def test_parser_lists_all_subcommands():
    text = build_parser().format_help()
    for cmd in SUBCOMMANDS:
        assert cmd in text


def test_raman_and_convert(capsys):
    code, out = run(["raman", "--excitation-nm", 530, "--shift-cm", 1360], capsys)
    assert code == 0 and abs(json.loads(out.out)["wavelength_nm"] - 571.17) < 0.01
    code, out = run(["convert", "--value", 575], capsys)
    assert abs(json.loads(out.out)["value"] - 2.15625) < 1e-4


def test_simulate_correlate_fit_chain(tmp_path, capsys):
    (tmp_path / "sc.json").write_text(json.dumps(SCENARIO))
    code, _ = run(["--out-dir", tmp_path, "simulate", "--scenario", tmp_path / "sc.json", "-o", "s.bin"], capsys)
    assert code == 0
    man = json.loads((tmp_path / "s.bin.manifest.json").read_text())
    assert man["subcommand"] == "simulate" and man["status"] == "ok"
    assert man["outputs"][str(tmp_path / "s.bin")] == sha256_file(tmp_path / "s.bin")
    assert str(tmp_path / "sc.json") in man["inputs"]

    code, out = run(["correlate", "--in", tmp_path / "s.bin", "--out-dir", tmp_path], capsys)
    assert code == 0
    g = json.loads((tmp_path / "g2.json").read_text())
    assert g["class"] == "Single" and g["g2_zero"] < 0.05
    hist = np.loadtxt(tmp_path / "g2_histogram.csv", delimiter=",", skiprows=1)
    assert hist.shape[1] == 2

    code, out = run(["fit-lifetime", "--in", tmp_path / "s.bin", "--irf-sigma-ps", 100, "--out-dir", tmp_path], capsys)
    fr = json.loads((tmp_path / "lifetime_fit.json").read_text())
    assert abs(fr["params"]["tau_ns"] - 3.83) < 0.05


def test_seed_flag_position_and_override(tmp_path, capsys):
    (tmp_path / "sc.json").write_text(json.dumps(SCENARIO))
    run(["--seed", 9, "simulate", "--scenario", tmp_path / "sc.json", "-o", tmp_path / "a.bin"], capsys)
    run(["simulate", "--seed", 9, "--scenario", tmp_path / "sc.json", "-o", tmp_path / "b.bin"], capsys)
    run(["simulate", "--scenario", tmp_path / "sc.json", "-o", tmp_path / "c.bin"], capsys)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() != (tmp_path / "c.bin").read_bytes()
    assert json.loads((tmp_path / "a.bin.manifest.json").read_text())["seed"] == 9


def test_env_var_sets_default_output_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PHOTOPHYS_OUT", str(tmp_path))
    code, _ = run(["lineshape", "--zpl-ev", 2.156, "--hr-factor", 1.033, "--phonon-mev", 41.5], capsys)
    assert code == 0 and (tmp_path / "lineshape.csv").exists()
    assert (tmp_path / "lineshape.csv.manifest.json").exists()


def test_fit_saturation_cli(tmp_path, capsys):
    p = np.array([5, 10, 20, 50, 114, 200, 500, 1000.0])
    i = 46880 * p / (p + 114) + 150
    np.savetxt(tmp_path / "sat.csv", np.column_stack([p, i]), delimiter=",", header="power_uw,rate_hz", comments="")
    code, out = run(["fit-saturation", "--in", tmp_path / "sat.csv", "--out-dir", tmp_path], capsys)
    fr = json.loads(out.out)
    assert abs(fr["params"]["i_sat_hz"] / 46880 - 1) < 1e-6


def test_fit_spectrum_and_mirror_cli(tmp_path, capsys):
    lam = np.arange(550, 650, 0.25)
    write_spectrum_csv(tmp_path / "s.csv", Spectrum(lam, 2000 * np.exp(-0.5 * ((lam - 575) / 8.3) ** 2) + 20))
    code, out = run(["fit-spectrum", "--in", tmp_path / "s.csv", "--out-dir", tmp_path], capsys)
    assert abs(json.loads(out.out)["params"]["center_nm"] - 575) < 1e-6
    code, _ = run(["mirror", "--in", tmp_path / "s.csv", "--zpl-ev", 2.156, "--out-dir", tmp_path], capsys)
    assert code == 0 and (tmp_path / "mirrored.csv").exists()


def test_plmap_cli_chain(tmp_path, capsys):
    rows = "x_um,y_um,rate_hz\n2.0,2.0,20000\n5.0,2.5,20000\n2.5,5.0,20000\n"
    (tmp_path / "em.csv").write_text(rows)
    code, _ = run(["--seed", 1, "plmap-render", "--emitters", tmp_path / "em.csv", "--size-um", 7,
                   "--background", 5, "--out-dir", tmp_path], capsys)
    assert code == 0
    code, out = run(["plmap-detect", "--in", tmp_path / "plmap.f32", "--out-dir", tmp_path], capsys)
    assert json.loads(out.out)["detections"] == 3
    det = np.loadtxt(tmp_path / "detections.csv", delimiter=",", skiprows=1)
    assert np.all(np.abs(det[:, 4] / 20000 - 1) < 0.1)


def test_plmap_stats_cli(tmp_path, capsys):
    (tmp_path / "r.csv").write_text(
        "x_um,y_um,g2_zero,lifetime_ns,brightness_hz,peak_wavelength_nm,fwhm_nm\n"
        "0,0,0.3,3.5,1,575,19\n1,1,0.2,4.1,1,574,20\n2,2,0.8,9.0,1,576,21\n")
    code, out = run(["plmap-stats", "--in", tmp_path / "r.csv", "--quantity", "lifetime_ns", "--out-dir", tmp_path],
                    capsys)
    st = json.loads(out.out)
    assert st["n"] == 2 and abs(st["mean"] - 3.8) < 1e-12


def test_domain_error_exit_code(capsys):
    code, out = run(["convert", "--value", -3], capsys)
    assert code == 1 and "error" in out.err


def test_stage_seed_is_stable():
    assert stage_seed(2023, "lifetime") == stage_seed(2023, "lifetime")
    assert stage_seed(2023, "lifetime") != stage_seed(2023, "saturation")
    assert 0 <= stage_seed(1, "x") < 2**63


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "photophys", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "photophys" in out.stdout
