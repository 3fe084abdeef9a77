"""Properties of the trained desk-scale models (denoiser, classifier, translators)."""

import time

import numpy as np
import pytest
import torch

from conftest import DESK, desk_artifact
from ddslab.checkpoint import load_translator
from ddslab.config import build_config
from ddslab.diffusion import cond_tensor, null_cond, sample, to_tensor, validation_loss
from ddslab.editor import EditTask, edit_dds, run_edits
from ddslab.experiments import run_experiment
from ddslab.metrics import head_accuracy, source_fidelity, target_fidelity
from ddslab.pipeline import heldout_set
from ddslab.scores import dds_grad, draw_noise, estimate_bias
from ddslab.synthdata import ATTRIBUTES, VOCAB, Caption, gen_image, load_dataset, mask_of, place
from ddslab.translator import translate

CFG = build_config({"paths": {"artifacts_dir": str(DESK)}}, preset="desk", seed=0)
CANVAS = CFG.canvas
RED = place(0, CANVAS, shape="circle", shape_color="red", background="white")
BLUE = RED.with_attrs(shape_color="blue")


@pytest.fixture(scope="module")
def red_to_blue():
    zhat = gen_image(RED, CANVAS)
    mask = mask_of(RED, CANVAS).mask | mask_of(BLUE, CANVAS).mask
    return EditTask(zhat=zhat, y=BLUE.caption, yhat=RED.caption, seed=5, source=RED), mask


def test_conditioning_lowers_validation_loss(desk_denoiser):
    model, sched, _ = desk_denoiser
    val = heldout_set(CFG)
    x = to_tensor(val.images[:256])
    matched = validation_loss(model, x, cond_tensor(val.captions()[:256]), sched, seed=17)
    null = validation_loss(model, x, null_cond(x.shape[0]), sched, seed=17)
    assert matched < null


def test_samples_carry_their_caption(desk_denoiser, desk_classifier):
    model, sched, _ = desk_denoiser
    cap = Caption("circle", "red", "white")
    imgs = sample(model, cap, omega=3.0, steps=50, seed=2, n=64, sched=sched)
    pred = desk_classifier.predict(imgs)
    for j, attr in enumerate(ATTRIBUTES):
        acc = float((pred[:, j] == VOCAB[attr].index(getattr(cap, attr))).float().mean())
        assert acc > 1.0 / len(VOCAB[attr]), attr


def test_classifier_gate_and_fidelity(desk_classifier):
    held = heldout_set(CFG)
    acc = head_accuracy(desk_classifier, held)
    assert min(acc.values()) >= 0.98
    fid = target_fidelity(desk_classifier, held.images, held.captions())
    assert fid.mean() >= 0.9

    def far(c):
        return Caption(*(next(v for v in VOCAB[a] if v != getattr(c, a)) for a in ATTRIBUTES))

    assert target_fidelity(desk_classifier, held.images, [far(c) for c in held.captions()]).mean() <= 0.1


def test_training_accuracy_not_below_heldout(desk_classifier):
    train_acc = head_accuracy(desk_classifier, load_dataset(desk_artifact("data/train")))
    held_acc = head_accuracy(desk_classifier, heldout_set(CFG))
    for attr in ATTRIBUTES:
        # 1000 held-out items near 0.99 accuracy: 0.01 is about three binomial standard errors
        assert train_acc[attr] >= held_acc[attr] - 0.01, attr


def test_matched_pair_bias_is_nonzero(desk_denoiser):
    model, sched, _ = desk_denoiser
    est = estimate_bias(model, gen_image(RED, CANVAS), RED.caption, 200, [0.5], 7.5, seed=1, sched=sched)
    assert est.norm[0] > 3 * est.norm_stderr[0] > 0


def test_bias_estimate_converges(desk_denoiser):
    model, sched, _ = desk_denoiser
    z = gen_image(RED, CANVAS)
    a = estimate_bias(model, z, RED.caption, 100, [0.5], 7.5, seed=1, sched=sched)
    b = estimate_bias(model, z, RED.caption, 200, [0.5], 7.5, seed=2, sched=sched)
    assert b.norm_stderr[0] < a.norm_stderr[0]
    # the norm of a noisy mean is biased upward by ~stderr, so allow a few stderrs on each side
    assert abs(a.norm[0] - b.norm[0]) <= 4 * np.hypot(a.norm_stderr[0], b.norm_stderr[0])


def test_dds_gradient_concentrates_in_mask(desk_denoiser, red_to_blue):
    model, sched, _ = desk_denoiser
    task, mask = red_to_blue
    eps = draw_noise(3, 32, (CANVAS[2], CANVAS[0], CANVAS[1]))
    t = torch.linspace(0.1, 0.9, 32)
    z = np.repeat(task.zhat[None], 32, 0)
    g = dds_grad(model, z, BLUE.caption, z.copy(), RED.caption, eps, t, 7.5, sched).grad
    mag = g.abs().sum(dim=(0, 1)).numpy()
    assert mag[mask].sum() >= mag[~mask].sum()


def test_red_to_blue_edit(desk_denoiser, desk_classifier, red_to_blue):
    model, sched, _ = desk_denoiser
    task, mask = red_to_blue
    dds, sds = run_edits(model, [task], "dds", sched=sched)[0], run_edits(model, [task], "sds", sched=sched)[0]
    assert target_fidelity(desk_classifier, dds.image, BLUE.caption)[0] > 0.5
    assert source_fidelity(dds.image, task.zhat, mask) < source_fidelity(sds.image, task.zhat, mask)
    assert sds.accumulated_diff.sum() >= dds.accumulated_diff.sum()


def test_noop_edit_sds_drifts(desk_denoiser, red_to_blue):
    model, sched, _ = desk_denoiser
    task, mask = red_to_blue
    noop = EditTask(zhat=task.zhat, y=RED.caption, yhat=RED.caption, seed=5, source=RED)
    dds, sds = run_edits(model, [noop], "dds", sched=sched)[0], run_edits(model, [noop], "sds", sched=sched)[0]
    assert source_fidelity(sds.image, task.zhat, mask) > source_fidelity(dds.image, task.zhat, mask) == 0.0


def test_step_sweep_experiment(tmp_path):
    desk_artifact("classifier.ckpt")
    rep = run_experiment("step-sweep", CFG, tmp_path)
    assert rep.checks["color_reaches_level"], rep.metrics
    assert rep.checks["shape_gains_from_more_steps"], rep.metrics


@pytest.fixture(scope="module")
def translators():
    return {v: load_translator(desk_artifact(f"i2i/{v}.ckpt"))[0] for v in ("dds", "sds")}


def test_translator_beats_sds_trained(translators, desk_classifier):
    held = heldout_set(CFG)
    keep = [i for i, s in enumerate(held.specs) if s.shape_color != "blue"][:64]
    x = held.images[keep]
    masks = [mask_of(held.specs[i], CANVAS).mask for i in keep]
    targets = [held.specs[i].caption.override(shape_color="blue") for i in keep]
    res = {}
    for v, net in translators.items():
        out = translate(net, x, "to-blue")
        res[v] = (target_fidelity(desk_classifier, out, targets).mean(),
                  np.mean([source_fidelity(o, r, m) for o, r, m in zip(out, x, masks)]))
    assert res["dds"][0] > 0.5, res
    assert res["dds"][1] < res["sds"][1], res


def test_translator_is_fast(translators, desk_denoiser):
    model, sched, _ = desk_denoiser
    img = gen_image(RED, CANVAS)
    net = translators["dds"]
    translate(net, img, "to-blue")
    start = time.perf_counter()
    for _ in range(20):
        translate(net, img, "to-blue")
    per_image = (time.perf_counter() - start) / 20
    start = time.perf_counter()
    edit_dds(model, EditTask(zhat=img, y=BLUE.caption, yhat=RED.caption, iters=50), sched=sched)
    assert per_image <= (time.perf_counter() - start) / 10
