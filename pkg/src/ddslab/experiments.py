"""Registered experiments. Each writes CSV tables, figures and a verdict under runs/<name>/<timestamp>/.

Fidelity columns are always labelled ``clip-proxy`` (attribute-classifier probability of
the target caption) and ``lpips-proxy`` (off-target MSE against the source image).
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.stats import spearmanr

from ddslab import checkpoint
from ddslab.config import RunConfig
from ddslab.editor import EditTask, run_edits, step_sweep
from ddslab.metrics import EditScorer, source_fidelity, target_fidelity
from ddslab.pipeline import Layout, heldout_set
from ddslab.plotting import heatmap, image_grid, render_figure, write_csv
from ddslab.scores import grad_cosine_curve, sds_norm_curve
from ddslab.seeding import derive_seed
from ddslab.synthdata import (ATTRIBUTES, VOCAB, SceneSpec, gen_image, mask_of, permute_captions, random_spec,
                              sample_dataset)
from ddslab.translator import mode_collapse_index, translate

log = logging.getLogger(__name__)

CLIP = "clip-proxy"
LPIPS = "lpips-proxy"


class UnknownExperiment(KeyError):
    pass


def _spearman(a, b) -> float:
    """Rank correlation; NaN (so every sign check fails) when either side is constant."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return float(spearmanr(a, b).statistic)


@dataclass
class Outcome:
    tables: dict[str, list[dict]] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    figures: list[dict] = field(default_factory=list)
    images: dict[str, Callable[[Path], Path]] = field(default_factory=dict)


@dataclass
class ExperimentReport:
    name: str
    run_dir: Path
    config: dict
    seeds: dict
    metrics: dict
    checks: dict[str, bool]
    files: list[str]
    wall_clock: float

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> dict:
        return {"name": self.name, "config": self.config, "seeds": self.seeds, "metrics": self.metrics,
                "checks": self.checks, "verdict": "pass" if self.passed else "fail", "files": self.files,
                "wall_clock_s": self.wall_clock}


class Context:
    """Lazy access to the run's checkpoints and seeds."""

    def __init__(self, cfg: RunConfig, name: str):
        self.cfg, self.name = cfg, name
        self.layout = Layout(cfg)
        self.seed = derive_seed(cfg.seed, "exp", name)
        self.params = cfg.experiment(name)
        self.t_grid = list(cfg.experiment("t_grid"))
        self._cache = {}

    def denoiser(self):
        if "den" not in self._cache:
            model, sched, _ = checkpoint.load_denoiser(self.layout.require(self.layout.denoiser, "denoiser"))
            self._cache["den"] = (model, sched)
        return self._cache["den"]

    def classifier(self):
        if "clf" not in self._cache:
            self._cache["clf"] = checkpoint.load_classifier(self.layout.require(self.layout.classifier, "classifier"))[0]
        return self._cache["clf"]

    def translator(self, variant: str):
        key = f"i2i:{variant}"
        if key not in self._cache:
            self._cache[key] = checkpoint.load_translator(self.layout.require(self.layout.translator(variant), key))[0]
        return self._cache[key]

    @property
    def canvas(self):
        return self.cfg.canvas


# ---------------------------------------------------------------------------
# edit suites


@dataclass
class SuiteItem:
    source: SceneSpec
    target: SceneSpec
    mask: np.ndarray  # union of the source and target shape masks

    @property
    def name(self) -> str:
        a = [k for k in ATTRIBUTES if getattr(self.source, k) != getattr(self.target, k)][0]
        return f"{a}:{getattr(self.source, a)}->{getattr(self.target, a)}"


def edit_suite(seed: int, n: int, canvas, attr: str = "shape_color") -> list[SuiteItem]:
    """``n`` seeded single-attribute edits; the edited attribute takes a different value."""
    items = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, "suite", attr, i))
        spec = random_spec(rng, canvas, jitter_seed=derive_seed(seed, "suite", attr, i, "jitter"))
        options = [v for v in VOCAB[attr] if v != getattr(spec, attr)]
        target = spec.with_attrs(**{attr: options[int(rng.integers(len(options)))]})
        items.append(SuiteItem(spec, target, mask_of(spec, canvas).mask | mask_of(target, canvas).mask))
    return items


def edit_tasks(ctx: Context, items: list[SuiteItem], **overrides) -> list[EditTask]:
    e = dict(ctx.cfg.section("edit"))
    e.pop("lambda_id", None)
    e["t_range"] = tuple(e["t_range"])
    e.update(overrides)
    return [EditTask(zhat=gen_image(it.source, ctx.canvas), y=it.target.caption, yhat=it.source.caption,
                     seed=derive_seed(ctx.seed, "edit", i), source=it.source, name=it.name, **e)
            for i, it in enumerate(items)]


def scorer(ctx: Context, items: list[SuiteItem]) -> EditScorer:
    return EditScorer(ctx.classifier(), [it.target.caption for it in items],
                      [gen_image(it.source, ctx.canvas) for it in items], [it.mask for it in items])


def run_suite(ctx: Context, items, method="dds", lambda_id=0.0, **overrides):
    model, sched = ctx.denoiser()
    tasks = edit_tasks(ctx, items, **overrides)
    return run_edits(model, tasks, method, lambda_id=lambda_id, monitor=scorer(ctx, items), sched=sched,
                     trajectory_every=0, saliency_every=0)


def final_row(res, item: SuiteItem, **extra) -> dict:
    last = res.metrics[-1]
    return {**extra, "task": item.name, CLIP: last["fidelity"], LPIPS: last["off_target_mse"]}


def _interior(seq):
    return list(seq)[1:-1] if len(seq) > 2 else list(seq)


# ---------------------------------------------------------------------------
# runners


def exp_sds_norm_curve(ctx: Context) -> Outcome:
    p = ctx.params
    model, sched = ctx.denoiser()
    ds = sample_dataset(derive_seed(ctx.seed, "pairs"), p["pairs"], ctx.canvas)
    matched = [(img, s.caption) for img, s in ds.items]
    unmatched = [(img, s.caption) for img, s in permute_captions(ds, derive_seed(ctx.seed, "perm"))]
    noise = derive_seed(ctx.seed, "noise")
    cm = sds_norm_curve(model, matched, ctx.t_grid, p["draws"], p["omega"], noise, "matched", sched)
    cu = sds_norm_curve(model, unmatched, ctx.t_grid, p["draws"], p["omega"], noise, "permuted", sched)
    interior = _interior(range(len(ctx.t_grid)))
    out = Outcome()
    out.tables["curves"] = cm.rows() + cu.rows()
    out.metrics = {"matched": cm.mean.tolist(), "permuted": cu.mean.tolist(), "t_grid": ctx.t_grid}
    out.checks["matched_positive"] = bool((cm.mean > 0).all())
    out.checks["permuted_above_matched_interior"] = bool(all(cu.mean[k] > cm.mean[k] for k in interior))
    out.figures.append({"kind": "lines", "table": "curves", "file": "sds_norm_curve.png", "x": "t", "y": "mean",
                        "err": "stderr", "group": "condition_set", "ylabel": "E||grad SDS||",
                        "title": "SDS gradient norm, matched vs permuted"})
    return out


def _similar(spec: SceneSpec, rng) -> SceneSpec:
    attr = ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))]
    options = [v for v in VOCAB[attr] if v != getattr(spec, attr)]
    return spec.with_attrs(**{attr: options[int(rng.integers(len(options)))]})


def exp_grad_cosine(ctx: Context) -> Outcome:
    p = ctx.params
    model, sched = ctx.denoiser()
    similar, unrelated = [], []
    for q in range(p["quads"]):
        rng = np.random.default_rng(derive_seed(ctx.seed, "quad", q))
        s = random_spec(rng, ctx.canvas, jitter_seed=derive_seed(ctx.seed, "quad", q, "jitter"))
        s2 = _similar(s, rng)
        u = random_spec(rng, ctx.canvas, jitter_seed=derive_seed(ctx.seed, "quad", q, "other"))
        zhat = gen_image(s, ctx.canvas)
        similar.append((gen_image(s2, ctx.canvas), s2.caption, zhat, s.caption))
        unrelated.append((gen_image(u, ctx.canvas), u.caption, zhat, s.caption))
    noise = derive_seed(ctx.seed, "noise")
    cs = grad_cosine_curve(model, similar, ctx.t_grid, p["draws"], p["omega"], noise, "similar", sched)
    cu = grad_cosine_curve(model, unrelated, ctx.t_grid, p["draws"], p["omega"], noise, "unrelated", sched)
    k = len(ctx.t_grid) // 2
    pooled = float(np.hypot(cs.stderr[k], cu.stderr[k]))
    gap = float(cs.mean[k] - cu.mean[k])
    out = Outcome()
    out.tables["curves"] = cs.rows() + cu.rows()
    out.metrics = {"similar": cs.mean.tolist(), "unrelated": cu.mean.tolist(), "median_t": ctx.t_grid[k],
                   "median_gap": gap, "pooled_stderr": pooled, "gap_in_stderr": gap / pooled if pooled else None,
                   "excluded_draws": {"similar": cs.excluded.tolist(), "unrelated": cu.excluded.tolist()}}
    interior = _interior(range(len(ctx.t_grid)))
    out.checks["similar_above_unrelated_interior"] = bool(all(cs.mean[i] > cu.mean[i] for i in interior))
    out.checks["median_gap_significant"] = bool(gap > 0 and gap >= p["sigma"] * pooled)
    out.figures.append({"kind": "lines", "table": "curves", "file": "grad_cosine.png", "x": "t", "y": "mean",
                        "err": "stderr", "group": "condition_set", "ylabel": "cosine similarity",
                        "title": "SDS gradient cosine, similar vs unrelated"})
    return out


def _grid_images(results, items, canvas, k=6):
    rows = []
    for res, it in list(zip(results, items))[:k]:
        rows.append([gen_image(it.source, canvas), res.image])
    return rows


def exp_edit_compare(ctx: Context) -> Outcome:
    p = ctx.params
    items = edit_suite(ctx.seed, p["tasks"], ctx.canvas)
    omegas = sorted(set(p["omegas"]) | {p["omega"]})
    rows, finals = [], {}
    for method in ("dds", "sds"):
        for om in omegas:
            results = run_suite(ctx, items, method, omega=om, iters=p["iters"])
            finals[(method, om)] = results
            rows += [final_row(r, it, method=method, omega=om) for r, it in zip(results, items)]
    dds, sds = finals[("dds", p["omega"])], finals[("sds", p["omega"])]
    paired = []
    for r_d, r_s, it in zip(dds, sds, items):
        a, b = r_d.metrics[-1], r_s.metrics[-1]
        win = a["off_target_mse"] < b["off_target_mse"] and a["fidelity"] >= b["fidelity"] - p["fidelity_margin"]
        paired.append({"task": it.name, f"dds_{LPIPS}": a["off_target_mse"], f"sds_{LPIPS}": b["off_target_mse"],
                       f"dds_{CLIP}": a["fidelity"], f"sds_{CLIP}": b["fidelity"], "dds_wins": int(win)})
    share = float(np.mean([r["dds_wins"] for r in paired]))
    summary = [{"method": m, "omega": om, CLIP: float(np.mean([r.metrics[-1]["fidelity"] for r in finals[(m, om)]])),
                LPIPS: float(np.mean([r.metrics[-1]["off_target_mse"] for r in finals[(m, om)]]))}
               for m, om in sorted(finals)]
    out = Outcome()
    out.tables = {"per_task": rows, "paired": paired, "summary": summary}
    out.metrics = {"dds_win_share": share, "omega": p["omega"]}
    out.checks["dds_wins_share"] = share >= p["min_share"]
    out.figures.append({"kind": "scatter", "table": "summary", "file": "tradeoff.png", "x": LPIPS, "y": CLIP,
                        "group": "method", "title": "clip-proxy vs lpips-proxy across omega"})
    grid = [[a, b.image, c.image] for (a, _), b, c in zip(_grid_images(dds, items, ctx.canvas), dds, sds)]
    out.images["edits.png"] = lambda path: image_grid(grid, path, ["source", "DDS", "SDS"])
    return out


def exp_cfg_sweep(ctx: Context) -> Outcome:
    p = ctx.params
    items = edit_suite(ctx.seed, p["tasks"], ctx.canvas)
    rows = []
    for om in p["omegas"]:
        for res, it in zip(run_suite(ctx, items, "dds", omega=om, iters=p["iters"]), items):
            rows.append({**final_row(res, it, omega=om),
                         "iters_to_level": res.first_iter_reaching("fidelity", p["level"])})
    om = [r["omega"] for r in rows]
    rho_mse, rho_it = _spearman(om, [r[LPIPS] for r in rows]), _spearman(om, [r["iters_to_level"] for r in rows])
    summary = [{"omega": o, LPIPS: float(np.mean([r[LPIPS] for r in rows if r["omega"] == o])),
                "iters_to_level": float(np.mean([r["iters_to_level"] for r in rows if r["omega"] == o])),
                CLIP: float(np.mean([r[CLIP] for r in rows if r["omega"] == o]))} for o in p["omegas"]]
    out = Outcome()
    out.tables = {"per_task": rows, "summary": summary}
    out.metrics = {"spearman_omega_lpips_proxy": rho_mse, "spearman_omega_iters_to_level": rho_it,
                   "tasks": p["tasks"], "level": p["level"]}
    out.checks["omega_vs_offtarget_positive"] = rho_mse > 0
    out.checks["omega_vs_iters_negative"] = rho_it < 0
    out.figures += [
        {"kind": "lines", "table": "summary", "file": "omega_lpips.png", "x": "omega", "y": LPIPS,
         "title": "off-target error vs omega"},
        {"kind": "lines", "table": "summary", "file": "omega_iters.png", "x": "omega", "y": "iters_to_level",
         "title": "iterations to fidelity level vs omega"},
    ]
    return out


def exp_sds_reg_sweep(ctx: Context) -> Outcome:
    p = ctx.params
    items = edit_suite(ctx.seed, p["tasks"], ctx.canvas)
    rows = []
    for lam in p["lambdas"]:
        for res, it in zip(run_suite(ctx, items, "sds-reg", lambda_id=lam, omega=p["omega"], iters=p["iters"]), items):
            rows.append(final_row(res, it, lambda_id=lam))
    summary = [{"lambda_id": lam, CLIP: float(np.mean([r[CLIP] for r in rows if r["lambda_id"] == lam])),
                LPIPS: float(np.mean([r[LPIPS] for r in rows if r["lambda_id"] == lam]))} for lam in p["lambdas"]]
    fid = [s[CLIP] for s in summary]
    out = Outcome()
    out.tables = {"per_task": rows, "summary": summary}
    out.metrics = {"mean_clip_proxy": fid}
    out.checks["fidelity_non_increasing"] = all(b <= a for a, b in zip(fid, fid[1:]))
    out.figures.append({"kind": "bars", "table": "summary", "file": "sds_reg.png", "x": "lambda_id", "y": CLIP,
                        "title": "regularised SDS: fidelity vs lambda"})
    return out


def exp_optimizer_ablation(ctx: Context) -> Outcome:
    p = ctx.params
    items = edit_suite(ctx.seed, p["tasks"], ctx.canvas)
    res = {opt: run_suite(ctx, items, "dds", omega=p["omega"], iters=p["iters"], optimizer=opt, lr=None)
           for opt in ("sgd", "adam")}
    rows = []
    for i, it in enumerate(items):
        row = {"task": it.name}
        for opt in ("sgd", "adam"):
            r = res[opt][i]
            row[f"{opt}_in_mask_energy"] = r.energy_fraction(it.mask)
            row[f"{opt}_{CLIP}"] = r.metrics[-1]["fidelity"]
        row["sgd_more_concentrated"] = int(row["sgd_in_mask_energy"] > row["adam_in_mask_energy"])
        rows.append(row)
    share = float(np.mean([r["sgd_more_concentrated"] for r in rows]))
    out = Outcome()
    out.tables = {"per_task": rows}
    out.metrics = {"sgd_share": share}
    out.checks["sgd_concentrated_share"] = share >= p["min_share"]
    out.figures.append({"kind": "scatter", "table": "per_task", "file": "energy.png", "x": "adam_in_mask_energy",
                        "y": "sgd_in_mask_energy", "title": "in-mask update energy: SGD vs Adam"})
    diffs = [(res["sgd"][i].accumulated_diff, res["adam"][i].accumulated_diff) for i in range(min(3, len(items)))]
    for i, (a, b) in enumerate(diffs):
        out.images[f"diff_{i}_sgd.png"] = lambda path, a=a: heatmap(a, path, "accumulated |dz|, SGD")
        out.images[f"diff_{i}_adam.png"] = lambda path, b=b: heatmap(b, path, "accumulated |dz|, Adam")
    return out


def exp_step_sweep(ctx: Context) -> Outcome:
    p = ctx.params
    model, sched = ctx.denoiser()
    counts = list(p["counts"])
    rows = []
    for attr in ("shape_color", "shape"):
        items = edit_suite(ctx.seed, p["tasks"], ctx.canvas, attr)
        tasks = edit_tasks(ctx, items, omega=p["omega"])
        for row in step_sweep(model, tasks, counts, scorer(ctx, items), "dds"):
            rows.append({"attr": attr, "task": row["task"], "steps": row["steps"], CLIP: row["fidelity"],
                         LPIPS: row["off_target_mse"]})
    summary = [{"attr": a, "steps": n, CLIP: float(np.mean([r[CLIP] for r in rows if r["attr"] == a and r["steps"] == n]))}
               for a in ("shape_color", "shape") for n in counts]
    mean = {(s["attr"], s["steps"]): s[CLIP] for s in summary}
    mid, top = counts[-2] if len(counts) > 1 else counts[-1], counts[-1]
    out = Outcome()
    out.tables = {"per_task": rows, "summary": summary}
    out.metrics = {"color_fidelity_at": {mid: mean[("shape_color", mid)]},
                   "shape_fidelity_at": {mid: mean[("shape", mid)], top: mean[("shape", top)]}}
    out.checks["color_reaches_level"] = mean[("shape_color", mid)] >= p["level"]
    out.checks["shape_gains_from_more_steps"] = mean[("shape", top)] >= mean[("shape", mid)]
    out.figures.append({"kind": "lines", "table": "summary", "file": "steps.png", "x": "steps", "y": CLIP,
                        "group": "attr", "title": "fidelity vs optimisation steps"})
    return out


def _i2i_eval(ctx: Context, variants):
    p = ctx.params
    net0 = ctx.translator(variants[0])
    j = net0.task_index(p["task"])
    task = net0.tasks[j]
    ds = heldout_set(ctx.cfg)
    keep = [i for i, s in enumerate(ds.specs) if task.target_for(s.caption) != s.caption]
    keep = keep[: p["images"]]
    x = ds.images[keep]
    specs = [ds.specs[i] for i in keep]
    targets = [task.target_for(s.caption) for s in specs]
    masks = [mask_of(s, ctx.canvas).mask for s in specs]
    outs = {}
    for v in variants:
        y = translate(ctx.translator(v), x, task.name)
        fid = target_fidelity(ctx.classifier(), y, targets)
        mse = [source_fidelity(y[i], x[i], masks[i]) for i in range(len(keep))]
        outs[v] = {"outputs": y, CLIP: float(np.mean(fid)), LPIPS: float(np.mean(mse)),
                   "mci": mode_collapse_index(y, x)}
    return x, outs


def _i2i_grid(x, outs, variants, k=8):
    return [[x[i]] + [outs[v]["outputs"][i] for v in variants] for i in range(min(k, len(x)))]


def exp_i2i_ablation(ctx: Context) -> Outcome:
    variants = ("dds", "no-warmup")
    x, outs = _i2i_eval(ctx, variants)
    rows = [{"variant": v, "mode_collapse_index": outs[v]["mci"], CLIP: outs[v][CLIP], LPIPS: outs[v][LPIPS]}
            for v in variants]
    full, nw = outs["dds"]["mci"], outs["no-warmup"]["mci"]
    out = Outcome()
    out.tables = {"variants": rows}
    out.metrics = {"mci_full": full, "mci_no_warmup": nw, "images": len(x)}
    out.checks["no_warmup_more_collapsed"] = nw > full
    out.checks["collapse_ratio"] = nw >= ctx.params["ratio"] * full
    out.figures.append({"kind": "bars", "table": "variants", "file": "mci.png", "x": "variant",
                        "y": "mode_collapse_index", "title": "mode collapse index"})
    grid = _i2i_grid(x, outs, variants)
    out.images["translations.png"] = lambda path: image_grid(grid, path, ["input", *variants])
    return out


def exp_i2i_compare(ctx: Context) -> Outcome:
    variants = ("dds", "sds")
    x, outs = _i2i_eval(ctx, variants)
    rows = [{"variant": v, CLIP: outs[v][CLIP], LPIPS: outs[v][LPIPS], "mode_collapse_index": outs[v]["mci"]}
            for v in variants]
    d, s = outs["dds"], outs["sds"]
    out = Outcome()
    out.tables = {"variants": rows}
    out.metrics = {v: {CLIP: outs[v][CLIP], LPIPS: outs[v][LPIPS]} for v in variants}
    out.checks["sds_more_offtarget_error"] = s[LPIPS] > d[LPIPS]
    out.checks["dds_fidelity_comparable"] = d[CLIP] >= s[CLIP] - ctx.params["fidelity_margin"]
    out.checks["dds_fidelity_above_half"] = d[CLIP] > 0.5
    out.figures.append({"kind": "scatter", "table": "variants", "file": "i2i_compare.png", "x": LPIPS, "y": CLIP,
                        "group": "variant", "title": "translator variants"})
    grid = _i2i_grid(x, outs, variants)
    out.images["translations.png"] = lambda path: image_grid(grid, path, ["input", *variants])
    return out


REGISTRY: dict[str, Callable[[Context], Outcome]] = {
    "sds-norm-curve": exp_sds_norm_curve,
    "grad-cosine": exp_grad_cosine,
    "edit-compare": exp_edit_compare,
    "cfg-sweep": exp_cfg_sweep,
    "optimizer-ablation": exp_optimizer_ablation,
    "sds-reg-sweep": exp_sds_reg_sweep,
    "i2i-ablation": exp_i2i_ablation,
    "i2i-compare": exp_i2i_compare,
    "step-sweep": exp_step_sweep,
}


def _run_dir(root: Path, name: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    d = root / name / stamp
    k = 1
    while d.exists():
        d = root / name / f"{stamp}-{k}"
        k += 1
    d.mkdir(parents=True)
    return d


def run_experiment(name: str, cfg: RunConfig, runs_dir: str | Path | None = None) -> ExperimentReport:
    if name not in REGISTRY:
        raise UnknownExperiment(f"unknown experiment {name!r}; registered: {', '.join(sorted(REGISTRY))}")
    start = time.perf_counter()
    ctx = Context(cfg, name)
    torch.manual_seed(ctx.seed)
    outcome = REGISTRY[name](ctx)
    run_dir = _run_dir(Path(runs_dir) if runs_dir is not None else cfg.runs_dir, name)
    files = []
    for table, rows in outcome.tables.items():
        files.append(write_csv(run_dir / f"{table}.csv", rows).name)
    for fig in outcome.figures:
        files.append(render_figure(run_dir, fig).name)
    for fname, draw in outcome.images.items():
        files.append(draw(run_dir / fname).name)
    report = ExperimentReport(name, run_dir, cfg.to_json(), {"global": cfg.seed, "experiment": ctx.seed},
                              outcome.metrics, {k: bool(v) for k, v in outcome.checks.items()}, files,
                              time.perf_counter() - start)
    payload = report.to_json()
    payload["figures"] = outcome.figures
    (run_dir / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True, default=float))
    log.info("%s: %s (%s)", name, "pass" if report.passed else "fail", run_dir)
    return report


def rerender(run_dir: str | Path) -> dict:
    """Redraw every declared figure of a finished run from its CSVs; returns the stored report."""
    run_dir = Path(run_dir)
    report = json.loads((run_dir / "report.json").read_text())
    for fig in report.get("figures", []):
        render_figure(run_dir, fig)
    return report
