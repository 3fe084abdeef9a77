"""Artifact build steps shared by the CLI, the experiment harness and the tests.

Every step draws its seeds from the run's global seed via ``derive_seed``.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from ddslab import checkpoint
from ddslab.config import RunConfig
from ddslab.diffusion import NoiseSchedule, TrainConfig, train_denoiser
from ddslab.metrics import ClassifierConfig, train_attr_classifier
from ddslab.plotting import write_csv
from ddslab.seeding import derive_seed
from ddslab.synthdata import Dataset, load_dataset, sample_dataset, save_dataset
from ddslab.translator import I2ITrainConfig, Task, build_translator, train_translator

log = logging.getLogger(__name__)

I2I_VARIANTS = ("dds", "no-warmup", "sds")


class MissingArtifact(FileNotFoundError):
    pass


class Layout:
    """Where a run's artifacts live under ``artifacts_dir``."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.artifacts_dir

    @property
    def train_data(self) -> Path:
        return self.root / "data" / "train"

    @property
    def denoiser(self) -> Path:
        return self.root / "denoiser.ckpt"

    @property
    def classifier(self) -> Path:
        return self.root / "classifier.ckpt"

    def translator(self, variant: str) -> Path:
        return self.root / "i2i" / f"{variant}.ckpt"

    def hint(self, what: str) -> str:
        p, s = self.cfg.preset, self.cfg.seed
        cmds = {
            "data": f"ddslab gen-data --preset {p} --seed {s} --out {self.train_data}",
            "denoiser": f"ddslab train-denoiser --preset {p} --seed {s} --dataset {self.train_data} --out {self.denoiser}",
            "classifier": f"ddslab train-classifier --preset {p} --seed {s} --dataset {self.train_data} "
                          f"--out {self.classifier}",
        }
        if what.startswith("i2i:"):
            v = what[4:]
            return (f"ddslab train-i2i --preset {p} --seed {s} --denoiser {self.denoiser} --dataset {self.train_data} "
                    f"--variant {v} --out {self.translator(v).parent}")
        return cmds[what]

    def require(self, path: Path, what: str) -> Path:
        if not Path(path).exists():
            raise MissingArtifact(f"missing {what} artifact {path}; build it with:\n  {self.hint(what)}")
        return Path(path)


# ---------------------------------------------------------------------------
# seeded datasets


def train_set(cfg: RunConfig) -> Dataset:
    return sample_dataset(derive_seed(cfg.seed, "data", "train"), cfg.section("data")["n_train"], cfg.canvas)


def val_set(cfg: RunConfig) -> Dataset:
    return sample_dataset(derive_seed(cfg.seed, "data", "val"), cfg.section("data")["n_val"], cfg.canvas)


def heldout_set(cfg: RunConfig) -> Dataset:
    return sample_dataset(derive_seed(cfg.seed, "data", "heldout"), cfg.section("data")["n_heldout"], cfg.canvas)


# ---------------------------------------------------------------------------
# steps


def gen_data(cfg: RunConfig, out: str | Path) -> Path:
    return save_dataset(train_set(cfg), out)


def denoiser_config(cfg: RunConfig) -> TrainConfig:
    d = dict(cfg.section("denoiser"))
    d["mult"] = tuple(d["mult"])
    return TrainConfig(**d, seed=derive_seed(cfg.seed, "denoiser"), val_seed=derive_seed(cfg.seed, "denoiser", "val-noise"),
                       val_size=cfg.section("data")["n_val"])


def build_denoiser(cfg: RunConfig, dataset_dir: str | Path, out: str | Path) -> Path:
    ds = load_dataset(dataset_dir)
    model = train_denoiser(ds, NoiseSchedule(), denoiser_config(cfg), val=val_set(cfg))
    log.info("denoiser validation loss %.4f", model.val_loss)
    return checkpoint.save_denoiser(out, model, NoiseSchedule())


def classifier_config(cfg: RunConfig) -> tuple[ClassifierConfig, float]:
    d = dict(cfg.section("classifier"))
    gate = d.pop("gate")
    return ClassifierConfig(**d, seed=derive_seed(cfg.seed, "classifier")), gate


def build_classifier(cfg: RunConfig, dataset_dir: str | Path, out: str | Path) -> Path:
    ccfg, gate = classifier_config(cfg)
    clf = train_attr_classifier(load_dataset(dataset_dir), heldout_set(cfg), ccfg, gate)
    return checkpoint.save_classifier(out, clf, {**ccfg.to_json(), "gate": gate})


def i2i_config(cfg: RunConfig, variant: str = "dds", tasks: list | None = None, **overrides) -> I2ITrainConfig:
    if variant not in I2I_VARIANTS:
        raise ValueError(f"unknown i2i variant {variant!r}; choose from {I2I_VARIANTS}")
    d = dict(cfg.section("i2i"))
    d.pop("heldout_exclude_target", None)
    if tasks is not None:
        d["tasks"] = [t.to_json() if isinstance(t, Task) else t for t in tasks]
    d["t_range"] = tuple(d["t_range"])
    d.update(overrides)
    # every variant shares the same data / noise stream so that only the recipe differs
    return I2ITrainConfig(**d, seed=derive_seed(cfg.seed, "i2i"), score="sds" if variant == "sds" else "dds",
                          omega_warmup=variant != "no-warmup")


def build_translator_ckpt(cfg: RunConfig, denoiser_ckpt: str | Path, dataset_dir: str | Path, out: str | Path,
                          variant: str = "dds", tasks: list | None = None, **overrides) -> Path:
    denoiser, sched, _ = checkpoint.load_denoiser(denoiser_ckpt)
    icfg = i2i_config(cfg, variant, tasks, **overrides)
    out = Path(out)
    net = build_translator(denoiser, icfg.task_list())
    start = time.perf_counter()
    net, rows = train_translator(net, load_dataset(dataset_dir), icfg, denoiser, sched,
                                 dump_path=out.with_suffix(".failed.ckpt"))
    took = time.perf_counter() - start
    meta = {**icfg.to_json(), "variant": variant, "preset": cfg.preset}
    checkpoint.save_translator(out, net, meta, rows)
    # wall-clock lives beside the checkpoint so that the archive itself stays byte-reproducible
    out.with_suffix(".timing.json").write_text(json.dumps({"train_seconds": round(took, 1)}))
    write_csv(out.with_suffix(".log.csv"), rows)
    return out


def build_all(cfg: RunConfig, variants=I2I_VARIANTS, force: bool = False) -> Layout:
    """Build any missing artifact of the run (data, denoiser, classifier, translators)."""
    lay = Layout(cfg)
    if force or not (lay.train_data / "manifest.json").exists():
        gen_data(cfg, lay.train_data)
    if force or not lay.denoiser.exists():
        build_denoiser(cfg, lay.train_data, lay.denoiser)
    if force or not lay.classifier.exists():
        build_classifier(cfg, lay.train_data, lay.classifier)
    for v in variants:
        if force or not lay.translator(v).exists():
            build_translator_ckpt(cfg, lay.denoiser, lay.train_data, lay.translator(v), v)
    (lay.root / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True))
    return lay
