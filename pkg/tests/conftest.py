from pathlib import Path

import pytest
import torch
import torch.nn as nn

from ddslab.diffusion import Denoiser, DenoiserConfig
from ddslab.seeding import configure_determinism

configure_determinism()

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "artifacts" / "desk"


def desk_artifact(name: str) -> Path:
    path = DESK / name
    if not path.exists():
        pytest.fail(f"desk artifact {path} is missing; run `ddslab build --preset desk` first")
    return path


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(0)
    return Denoiser(DenoiserConfig(image_size=(8, 8), width=8)).eval()


@pytest.fixture(scope="session")
def desk_denoiser():
    from ddslab.checkpoint import load_denoiser

    return load_denoiser(desk_artifact("denoiser.ckpt"))


@pytest.fixture(scope="session")
def desk_classifier():
    from ddslab.checkpoint import load_classifier

    return load_classifier(desk_artifact("classifier.ckpt"))[0]


class OracleStub(nn.Module):
    """Predicts exactly the noise it was given: eps_phi = eps."""

    def __init__(self, eps: torch.Tensor):
        super().__init__()
        self.eps = eps

    def forward(self, x, t, cond):
        return self.eps.repeat(x.shape[0] // self.eps.shape[0], 1, 1, 1)


class NullCorruptStub(nn.Module):
    """Wraps a model and replaces its null-caption output with garbage."""

    def __init__(self, inner, null_index):
        super().__init__()
        self.inner, self.null_index = inner, null_index

    def forward(self, x, t, cond):
        out = self.inner(x, t, cond)
        is_null = (cond == torch.as_tensor(self.null_index)).all(dim=1)
        out = out.clone()
        out[is_null] = 1e3 * torch.sin(torch.arange(out[is_null].numel(), dtype=out.dtype)).reshape(out[is_null].shape)
        return out


@pytest.fixture
def oracle_stub():
    return OracleStub


def smoke_pipeline(root: Path, experiments=("sds-norm-curve", "edit-compare"), seed: int = 0) -> dict:
    """gen-data -> train-denoiser -> train-classifier -> train-i2i -> edit -> experiments, all via the CLI.

    Returns {name: run_dir} for the experiments plus "edit" for the edit output directory.
    """
    import json

    from ddslab.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    art, runs = root / "art", root / "runs"
    cfg = root / "c.json"
    cfg.write_text(json.dumps({"paths": {"artifacts_dir": str(art), "runs_dir": str(runs)}}))
    common = ["--preset", "smoke", "--seed", str(seed), "--config", str(cfg)]
    data, den, clf = art / "data" / "train", art / "denoiser.ckpt", art / "classifier.ckpt"

    def run(*argv):
        code = main(list(argv))
        assert code == 0, f"ddslab {' '.join(map(str, argv))} exited with {code}"

    run("gen-data", *common, "--out", str(data))
    run("train-denoiser", *common, "--dataset", str(data), "--out", str(den))
    run("train-classifier", *common, "--dataset", str(data), "--out", str(clf))
    for v in ("dds", "no-warmup", "sds"):
        run("train-i2i", *common, "--denoiser", str(den), "--dataset", str(data), "--variant", v,
            "--out", str(art / "i2i"))
    out = {"edit": root / "edit"}
    run("edit", *common, "--checkpoint", str(den), "--classifier", str(clf),
        "--source-spec", '{"shape": "circle", "shape_color": "red", "background": "white"}',
        "--target-spec", "shape_color=blue", "--out", str(out["edit"]))
    for name in experiments:
        code = main(["experiment", name, *common])
        assert code in (0, 2), f"experiment {name} exited with {code}"
        out[name] = sorted((runs / name).iterdir())[-1]
    return out


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    from ddslab.experiments import REGISTRY

    root = tmp_path_factory.mktemp("smoke")
    return root, smoke_pipeline(root, tuple(sorted(REGISTRY)))
