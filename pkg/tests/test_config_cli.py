import json

import pytest

from ddslab.cli import main
from ddslab.config import RUNS_ENV, ConfigError, PRESETS, build_config, load_config, merge_strict
from ddslab.experiments import REGISTRY

SUBCOMMANDS = ("gen-data", "train-denoiser", "sample", "edit", "train-i2i", "translate", "experiment", "report")


def test_help_lists_subcommands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in SUBCOMMANDS:
        assert cmd in out


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_subcommand_help(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "--" in capsys.readouterr().out


def test_unknown_subcommand_and_flag(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["gen-data", "--out", "x", "--bogus"]) == 1
    assert main([]) == 1


def test_invalid_config_key_named(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"denoiser": {"stepz": 3}}))
    code = main(["gen-data", "--config", str(cfg), "--preset", "smoke", "--out", str(tmp_path / "d")])
    assert code == 1
    assert "denoiser.stepz" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_bad_json_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(cfg)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1


def test_merge_strict():
    base = {"a": {"b": 1, "c": [1, 2]}, "d": None}
    assert merge_strict(base, {"a": {"b": 5}}) == {"a": {"b": 5, "c": [1, 2]}, "d": None}
    assert merge_strict(base, {"d": {"anything": 1}})["d"] == {"anything": 1}
    with pytest.raises(ConfigError, match="'a.x'"):
        merge_strict(base, {"a": {"x": 0}})
    assert base["a"]["b"] == 1


def test_presets_share_keys():
    def keys(d, p=""):
        return {p + k for k in d} | {x for k, v in d.items() if isinstance(v, dict) for x in keys(v, p + k + ".")}

    for name, preset in PRESETS.items():
        assert keys(preset) == keys(PRESETS["desk"]), name
    assert set(PRESETS["desk"]["experiments"]) - {"t_grid"} == set(REGISTRY)


def test_seed_and_preset_override():
    cfg = build_config({"seed": 3}, preset="smoke", seed=7)
    assert cfg.seed == 7 and cfg.preset == "smoke" and cfg.canvas == (8, 8, 3)
    with pytest.raises(ConfigError, match="unknown preset"):
        build_config(preset="huge")


def test_runs_dir_env(monkeypatch, tmp_path):
    monkeypatch.delenv(RUNS_ENV, raising=False)
    assert str(build_config().runs_dir) == "runs"
    monkeypatch.setenv(RUNS_ENV, str(tmp_path))
    assert build_config().runs_dir == tmp_path


def test_experiment_report_dir_and_env(smoke_runs, monkeypatch, tmp_path):
    root, _ = smoke_runs
    monkeypatch.setenv(RUNS_ENV, str(tmp_path / "elsewhere"))
    code = main(["experiment", "sds-norm-curve", "--preset", "smoke", "--config", str(root / "c.json")])
    # the config file names a runs_dir, but the environment variable wins
    assert code in (0, 2)
    runs = list((tmp_path / "elsewhere" / "sds-norm-curve").iterdir())
    assert len(runs) == 1
    report = json.loads((runs[0] / "report.json").read_text())
    assert report["config"]["preset"] == "smoke"
    assert report["config"]["paths"]["artifacts_dir"] == str(root / "art")
    assert any(p.suffix == ".csv" for p in runs[0].iterdir())
    assert any(p.suffix == ".png" for p in runs[0].iterdir())


def test_unknown_experiment_lists_registry(capsys):
    assert main(["experiment", "nope", "--preset", "smoke"]) == 1
    err = capsys.readouterr().err
    for name in REGISTRY:
        assert name in err


def test_missing_checkpoint_names_build_command(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"paths": {"artifacts_dir": str(tmp_path / "none"), "runs_dir": str(tmp_path)}}))
    assert main(["experiment", "sds-norm-curve", "--preset", "smoke", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "ddslab train-denoiser" in err


def test_report_rerenders(smoke_runs, capsys):
    _, runs = smoke_runs
    run = runs["sds-norm-curve"]
    pngs = sorted(p for p in run.glob("*.png"))
    figures = json.loads((run / "report.json").read_text())["figures"]
    assert figures
    for fig in figures:
        (run / fig["file"]).unlink()
    code = main(["report", str(run)])
    assert code in (0, 2)
    assert sorted(run.glob("*.png")) == pngs
    assert "sds-norm-curve" in capsys.readouterr().out


def test_report_exit_code_follows_verdict(smoke_runs):
    _, runs = smoke_runs
    for name in REGISTRY:
        verdict = json.loads((runs[name] / "report.json").read_text())["verdict"]
        assert main(["report", str(runs[name])]) == (0 if verdict == "pass" else 2)


def test_edit_outputs(smoke_runs):
    _, runs = smoke_runs
    out = runs["edit"]
    for f in ("z_final.png", "trajectory.png", "accumulated_diff.png", "metrics.csv", "edit.json"):
        assert (out / f).exists(), f
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert "clip-proxy" in header and "lpips-proxy" in header
    meta = json.loads((out / "edit.json").read_text())
    assert meta["config"]["preset"] == "smoke"


def test_translate_cli(smoke_runs, tmp_path):
    root, runs = smoke_runs
    from ddslab.synthdata import gen_image, load_png, place, save_png

    src = tmp_path / "in.png"
    save_png(gen_image(place(0, (8, 8, 3), shape="circle", shape_color="red", background="white"), (8, 8, 3)), src)
    assert main(["translate", "--net", str(root / "art" / "i2i" / "dds.ckpt"), "--task", "to-blue",
                 "--in", str(src), "--out", str(tmp_path / "o.png")]) == 0
    assert load_png(tmp_path / "o.png").shape == (8, 8, 3)
    assert main(["translate", "--net", str(root / "art" / "i2i" / "dds.ckpt"), "--task", "to-nowhere",
                 "--in", str(src), "--out", str(tmp_path / "o2.png")]) == 3


def test_sample_cli(smoke_runs, tmp_path):
    root, _ = smoke_runs
    assert main(["sample", "--preset", "smoke", "--checkpoint", str(root / "art" / "denoiser.ckpt"),
                 "--caption", "shape=circle,shape_color=red", "--omega", "3", "--steps", "3", "--n", "2",
                 "--out", str(tmp_path / "s")]) == 0
    assert len(list((tmp_path / "s").glob("*.png"))) == 2
