import json

import pytest
from pydantic import ValidationError

from timebin.cli import main
from timebin.eventsim import SimConfig
from timebin.experiments import ExperimentRecipe


def test_recipe_defaults_and_roundtrip():
    r = ExperimentRecipe(scheme="III", visibility=0.89, sim=SimConfig(seed=4, duration=0.2))
    assert ExperimentRecipe.model_validate_json(r.dumps()) == r
    assert r.coincidence_window == 8.1e-9
    assert r.coincidence_mode.value == "all_slots"
    assert ExperimentRecipe().coincidence_window == 2.4e-9


def test_recipe_errors_carry_field_path():
    with pytest.raises(ValidationError) as exc:
        ExperimentRecipe.model_validate({"sim": {"pair_prob": 3}})
    assert exc.value.errors()[0]["loc"] == ("sim",)
    assert "pair_prob" in str(exc.value)
    with pytest.raises(ValidationError) as exc:
        ExperimentRecipe(scheme="II", window=2.4e-9)
    assert exc.value.errors()[0]["loc"] == ("window",)
    with pytest.raises(ValidationError):
        ExperimentRecipe(unknown=1)


def test_policy_override():
    r = ExperimentRecipe(scheme="II", window=2.4e-9, mode="central_only",
                         allow_policy_override=True)
    assert r.coincidence_mode.value == "central_only"
    # overriding still has to give a usable window
    with pytest.raises(ValidationError):
        ExperimentRecipe(scheme="II", window=2.4e-9, allow_policy_override=True)


def test_bell_command_outputs(tmp_path, capsys):
    out = tmp_path / "b"
    rc = main(["bell", "--duration-s", "0.05", "--pair-prob", "0.02", "--out", str(out)])
    assert rc == 0
    for name in ("result.json", "meta.json", "recipe.json", "histograms.csv", "summary.txt"):
        assert (out / name).exists()
    printed = capsys.readouterr().out
    assert "standard deviations" in printed
    assert "POSTSELECTION LOOPHOLE" in printed
    assert ExperimentRecipe.load(out / "recipe.json").sim.duration == 0.05


def test_bell_json_is_reproducible(tmp_path):
    args = ["bell", "--duration-s", "0.02", "--pair-prob", "0.02", "--seed", "5", "--dump-tags"]
    assert main(args + ["--out", str(tmp_path / "x")]) == 0
    assert main(args + ["--out", str(tmp_path / "y"), "--workers", "3"]) == 0
    for name in ("result.json", "tags.tags", "tags.tags.json", "scan.csv", "histograms.csv"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "r.json"
    cfg.write_text(json.dumps({"scheme": "II", "sim": {"pair_prob": 0.02, "duration": 0.02}}))
    assert main(["bell", "--config", str(cfg), "--visibility", "1.0",
                 "--out", str(tmp_path / "o")]) == 0
    saved = json.loads((tmp_path / "o" / "recipe.json").read_text())
    assert saved["scheme"] == "II" and saved["visibility"] == 1.0
    assert saved["sim"]["pair_prob"] == 0.02


def test_exit_codes(tmp_path, capsys):
    assert main(["bell", "--pair-prob", "2", "--out", str(tmp_path / "a")]) == 2
    assert "sim" in capsys.readouterr().err
    assert main(["bell", "--scheme", "II", "--window-ns", "2.4", "--out", str(tmp_path)]) == 2
    assert main(["bell", "--config", str(tmp_path / "missing.json")]) == 2
    # no photons: the fit cannot run
    assert main(["scan", "--pair-prob", "0", "--out", str(tmp_path / "s")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["bell", "--scheme", "IV"])
    assert exc.value.code == 2


def test_scan_passive_full_visibility(tmp_path):
    assert main(["scan", "--scheme", "II", "--visibility", "1", "--pair-prob", "0.05",
                 "--duration-s", "0.05", "--out", str(tmp_path)]) == 0
    fit = json.loads((tmp_path / "scan.json").read_text())["fit"]
    assert abs(fit["visibility"] - 0.25) < 4 * fit["sigma"]


def test_short_scan_warns(tmp_path):
    with pytest.warns(UserWarning):
        main(["scan", "--stop", "2", "--out", str(tmp_path)])


def test_lock_command(tmp_path, capsys):
    assert main(["lock", "--drift", "none", "--duration-s", "10", "--poisson",
                 "--out", str(tmp_path / "l")]) == 0
    summary = json.loads((tmp_path / "l" / "lock_summary.json").read_text())
    assert summary["locked"]
    assert main(["lock", "--drift", "sinusoidal", "--magnitude", "2", "--time-constant", "3",
                 "--duration-s", "30", "--poisson", "--out", str(tmp_path / "m")]) == 0
    assert "LOCK LOST" in capsys.readouterr().out
    assert main(["lock", "--time-constant", "0", "--out", str(tmp_path / "n")]) == 2


def test_lhv_command(tmp_path, capsys):
    assert main(["lhv", "--simulate", "--duration-s", "0.02", "--out", str(tmp_path / "v")]) == 0
    report = json.loads((tmp_path / "v" / "report.json").read_text())
    assert report["report"]["S_post"] == 4.0 and report["report"]["S_full"] == 2.0
    assert report["pipeline"]["postselected"]["S"] == pytest.approx(4.0)
    assert "POSTSELECTION LOOPHOLE" in capsys.readouterr().out
    for d in ("o1", "o2"):
        assert main(["lhv", "--optimize", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "o1" / "report.json").read_bytes() == \
        (tmp_path / "o2" / "report.json").read_bytes()


def test_histogram_command(tmp_path):
    assert main(["histogram", "--scheme", "III", "--duration-s", "0.01", "--out",
                 str(tmp_path)]) == 0
    peaks = json.loads((tmp_path / "peaks.json").read_text())
    assert peaks["A+"][0] == 0 and peaks["A+"][2] == 0
