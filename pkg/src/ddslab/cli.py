"""Command-line entry point: ``ddslab <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 experiment verdict failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VERDICT, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("ddslab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of overrides on top of the preset")
    p.add_argument("--preset", choices=["desk", "paper", "smoke"], help="base preset (default: desk)")
    p.add_argument("--seed", type=int, help="global seed (default: from config)")


def _json_arg(text: str) -> dict:
    """Inline JSON or a path to a JSON file."""
    path = Path(text)
    try:
        return json.loads(path.read_text() if path.exists() else text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"not valid JSON or a JSON file: {text!r} ({exc})") from exc


def _attrs_arg(text: str) -> dict:
    """``shape=circle,shape_color=red`` or JSON."""
    if text.lstrip().startswith("{") or Path(text).exists():
        return _json_arg(text)
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise UsageError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    from ddslab.experiments import REGISTRY
    from ddslab.pipeline import I2I_VARIANTS

    ap = _Parser(prog="ddslab", description="Score distillation editing lab on synthetic shapes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the seeded training set (manifest.json + PNGs)")
    _common(p)
    p.add_argument("--n", type=int, help="number of images (default: data.n_train)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-denoiser", help="train the conditional denoiser")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-classifier", help="train the attribute classifier used by the fidelity proxy")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="DDIM samples for a caption")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True, help="e.g. shape=circle,shape_color=red,background=white")
    p.add_argument("--omega", type=float, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", required=True, help="PNG path (n=1) or directory")

    p = sub.add_parser("edit", help="zero-shot edit of one rendered scene")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-spec", required=True, help="scene spec JSON (inline or file)")
    p.add_argument("--target-spec", required=True, help="attributes to change, JSON or key=value list")
    p.add_argument("--method", choices=["dds", "sds", "sds-reg"], default="dds")
    p.add_argument("--omega", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--lambda-id", type=float)
    p.add_argument("--null-reference", action="store_true", help="use the null caption as the reference")
    p.add_argument("--classifier", help="classifier checkpoint; adds clip-proxy to metrics.csv")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-i2i", help="train a feed-forward translator with DDS")
    _common(p)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--tasks", help="tasks.json (default: i2i.tasks from the config)")
    p.add_argument("--variant", choices=I2I_VARIANTS, default="dds")
    p.add_argument("--iters", type=int)
    p.add_argument("--out", required=True, help="output directory; writes <variant>.ckpt")

    p = sub.add_parser("translate", help="run a trained translator on one image")
    p.add_argument("--net", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("experiment", help="run a registered experiment")
    _common(p)
    p.add_argument("name", help="one of: " + ", ".join(sorted(REGISTRY)))
    p.add_argument("--runs-dir")

    p = sub.add_parser("report", help="re-render figures of a finished run and print its verdict")
    p.add_argument("run", help="run directory, or an experiment name (latest run)")
    p.add_argument("--runs-dir", default=None)

    p = sub.add_parser("build", help="build all missing artifacts for a preset")
    _common(p)
    p.add_argument("--variants", nargs="*", default=list(I2I_VARIANTS))
    return ap


def _config(args):
    from ddslab.config import load_config

    return load_config(args.config, args.preset, args.seed)


# ---------------------------------------------------------------------------
# handlers


def cmd_gen_data(args) -> int:
    from ddslab.config import build_config
    from ddslab.pipeline import gen_data

    cfg = _config(args)
    if args.n is not None:
        cfg = build_config({**cfg.to_json(), "data": {**cfg.section("data"), "n_train": args.n}})
    print(gen_data(cfg, args.out))
    return EXIT_OK


def cmd_train_denoiser(args) -> int:
    from ddslab.config import build_config
    from ddslab.pipeline import build_denoiser

    cfg = _config(args)
    if args.steps is not None:
        cfg = build_config({**cfg.to_json(), "denoiser": {**cfg.section("denoiser"), "steps": args.steps}})
    print(build_denoiser(cfg, args.dataset, args.out))
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    from ddslab.pipeline import build_classifier

    print(build_classifier(_config(args), args.dataset, args.out))
    return EXIT_OK


def cmd_sample(args) -> int:
    from ddslab.checkpoint import load_denoiser
    from ddslab.diffusion import sample, to_numpy
    from ddslab.seeding import derive_seed
    from ddslab.synthdata import Caption, save_png

    cfg = _config(args)
    model, sched, _ = load_denoiser(args.checkpoint)
    imgs = to_numpy(sample(model, Caption(**_attrs_arg(args.caption)), args.omega, args.steps,
                           derive_seed(cfg.seed, "sample"), args.n, sched))
    out = Path(args.out)
    if args.n == 1 and out.suffix == ".png":
        out.parent.mkdir(parents=True, exist_ok=True)
        save_png(imgs[0], out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            save_png(img, out / f"{i:04d}.png")
    print(out)
    return EXIT_OK


def _scene(d: dict, canvas):
    from ddslab.synthdata import SceneSpec, place

    if "center" in d and "radius" in d:
        return SceneSpec.from_json({"jitter_seed": 0, **d})
    return place(int(d.get("jitter_seed", 0)), canvas, **{k: d[k] for k in ("shape", "shape_color", "background")})


def cmd_edit(args) -> int:
    from ddslab.checkpoint import load_classifier, load_denoiser
    from ddslab.editor import EditTask, run_edits
    from ddslab.diffusion import to_numpy
    from ddslab.metrics import EditScorer, source_fidelity
    from ddslab.plotting import heatmap, image_grid, write_csv
    from ddslab.seeding import derive_seed
    from ddslab.synthdata import gen_image, mask_of, save_png

    cfg = _config(args)
    model, sched, _ = load_denoiser(args.checkpoint)
    canvas = (*model.cfg.image_size, model.cfg.channels)
    src = _scene(_json_arg(args.source_spec), canvas)
    tgt = src.with_attrs(**_attrs_arg(args.target_spec))
    e = dict(cfg.section("edit"))
    lam = args.lambda_id if args.lambda_id is not None else e.pop("lambda_id")
    e.pop("lambda_id", None)
    e["t_range"] = tuple(e["t_range"])
    for key in ("omega", "iters", "optimizer"):
        if getattr(args, key) is not None:
            e[key] = getattr(args, key)
    if args.optimizer is not None:
        e["lr"] = None
    zhat = gen_image(src, canvas)
    task = EditTask(zhat=zhat, y=tgt.caption, yhat=None if args.null_reference else src.caption,
                    seed=derive_seed(cfg.seed, "edit"), source=src, name="cli", **e)
    mask = mask_of(src, canvas).mask | mask_of(tgt, canvas).mask
    if args.classifier:
        monitor = EditScorer(load_classifier(args.classifier)[0], [tgt.caption], [zhat], [mask])
    else:
        def monitor(z):
            return {"off_target_mse": np.array([source_fidelity(to_numpy(z)[0], zhat, mask)])}
    res = run_edits(model, [task], args.method, lambda_id=lam, monitor=monitor, sched=sched)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(res.image, out / "z_final.png")
    image_grid([[img for _, img in res.trajectory]], out / "trajectory.png", [str(k) for k, _ in res.trajectory])
    heatmap(res.accumulated_diff, out / "accumulated_diff.png", "accumulated |dz|")
    write_csv(out / "metrics.csv", [{k.replace("fidelity", "clip-proxy").replace("off_target_mse", "lpips-proxy"): v
                                     for k, v in row.items()} for row in res.metrics])
    (out / "edit.json").write_text(json.dumps({"config": cfg.to_json(), "source": src.to_json(),
                                               "target": tgt.to_json(), "meta": res.meta}, indent=1, sort_keys=True))
    print(out)
    return EXIT_OK


def cmd_train_i2i(args) -> int:
    from ddslab.pipeline import build_translator_ckpt
    from ddslab.translator import load_tasks

    cfg = _config(args)
    tasks = load_tasks(args.tasks) if args.tasks else None
    overrides = {"total_iters": args.iters} if args.iters is not None else {}
    out = Path(args.out) / f"{args.variant}.ckpt"
    print(build_translator_ckpt(cfg, args.denoiser, args.dataset, out, args.variant, tasks, **overrides))
    return EXIT_OK


def cmd_translate(args) -> int:
    from ddslab.checkpoint import load_translator
    from ddslab.synthdata import load_png, save_png
    from ddslab.translator import translate

    net, _ = load_translator(args.net)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(translate(net, load_png(args.inp), args.task), out)
    print(out)
    return EXIT_OK


def _print_report(report: dict, run_dir) -> None:
    print(f"{report['name']}: {report['verdict']}  ({run_dir})")
    for k, v in report["checks"].items():
        print(f"  {'PASS' if v else 'FAIL'}  {k}")


def cmd_experiment(args) -> int:
    from ddslab.experiments import run_experiment

    rep = run_experiment(args.name, _config(args), args.runs_dir)
    _print_report(rep.to_json(), rep.run_dir)
    return EXIT_OK if rep.passed else EXIT_VERDICT


def cmd_report(args) -> int:
    import os

    from ddslab.config import RUNS_ENV
    from ddslab.experiments import rerender

    run = Path(args.run)
    if not (run / "report.json").exists():
        root = Path(args.runs_dir or os.environ.get(RUNS_ENV) or "runs") / args.run
        runs = sorted(p for p in root.glob("*") if (p / "report.json").exists()) if root.is_dir() else []
        if not runs:
            raise UsageError(f"no finished run found for {args.run!r}")
        run = runs[-1]
    report = rerender(run)
    _print_report(report, run)
    return EXIT_OK if report["verdict"] == "pass" else EXIT_VERDICT


def cmd_build(args) -> int:
    from ddslab.pipeline import build_all

    lay = build_all(_config(args), tuple(args.variants))
    print(lay.root)
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data, "train-denoiser": cmd_train_denoiser, "train-classifier": cmd_train_classifier,
    "sample": cmd_sample, "edit": cmd_edit, "train-i2i": cmd_train_i2i, "translate": cmd_translate,
    "experiment": cmd_experiment, "report": cmd_report, "build": cmd_build,
}


def main(argv=None) -> int:
    from ddslab.config import ConfigError
    from ddslab.experiments import UnknownExperiment
    from ddslab.seeding import configure_determinism
    from ddslab.synthdata import SceneError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.cmd is None:
        parser.print_help()
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_determinism()
    try:
        return HANDLERS[args.cmd](args)
    except (UsageError, ConfigError, UnknownExperiment, SceneError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ddslab {args.cmd}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"ddslab {args.cmd}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
