import json

import pytest

from ddslab.config import build_config
from ddslab.experiments import CLIP, LPIPS, REGISTRY, UnknownExperiment, rerender, run_experiment
from ddslab.pipeline import MissingArtifact


def _smoke_cfg(root):
    return build_config(json.loads((root / "c.json").read_text()), preset="smoke", seed=0)


def test_unknown_name_lists_registry():
    with pytest.raises(UnknownExperiment) as err:
        run_experiment("nope", build_config(preset="smoke"))
    for name in REGISTRY:
        assert name in str(err.value)


def test_missing_checkpoint_error_has_build_command(tmp_path):
    cfg = build_config({"paths": {"artifacts_dir": str(tmp_path)}}, preset="smoke")
    with pytest.raises(MissingArtifact, match="ddslab train-denoiser"):
        run_experiment("grad-cosine", cfg, tmp_path / "runs")


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_report_contents(smoke_runs, name):
    _, runs = smoke_runs
    run = runs[name]
    report = json.loads((run / "report.json").read_text())
    assert report["name"] == name
    assert report["verdict"] in ("pass", "fail")
    assert report["checks"] and all(isinstance(v, bool) for v in report["checks"].values())
    assert report["config"]["preset"] == "smoke"
    assert set(report["seeds"]) == {"global", "experiment"}
    for f in report["files"]:
        assert (run / f).exists(), f
    csvs = list(run.glob("*.csv"))
    assert csvs and any(p.suffix == ".png" for p in run.iterdir())
    headers = " ".join(p.read_text().split("\n", 1)[0] for p in csvs)
    assert "CLIP" not in headers and "LPIPS" not in headers


def test_fidelity_columns_labelled_as_proxies(smoke_runs):
    _, runs = smoke_runs
    header = (runs["edit-compare"] / "per_task.csv").read_text().split("\n", 1)[0].split(",")
    assert CLIP in header and LPIPS in header


@pytest.mark.parametrize("name", ["sds-norm-curve", "edit-compare", "i2i-compare"])
def test_rerun_identical_csvs(smoke_runs, tmp_path, name):
    root, runs = smoke_runs
    rep = run_experiment(name, _smoke_cfg(root), tmp_path)
    first = runs[name]
    names = sorted(p.name for p in first.glob("*.csv"))
    assert names == sorted(p.name for p in rep.run_dir.glob("*.csv"))
    for n in names:
        assert (first / n).read_bytes() == (rep.run_dir / n).read_bytes(), n


def test_run_dirs_do_not_collide(smoke_runs, tmp_path):
    root, _ = smoke_runs
    a = run_experiment("sds-norm-curve", _smoke_cfg(root), tmp_path).run_dir
    b = run_experiment("sds-norm-curve", _smoke_cfg(root), tmp_path).run_dir
    assert a != b and a.parent == b.parent == tmp_path / "sds-norm-curve"


def test_rerender_restores_figures(smoke_runs):
    _, runs = smoke_runs
    run = runs["cfg-sweep"]
    report = rerender(run)
    for fig in report["figures"]:
        assert (run / fig["file"]).stat().st_size > 0
