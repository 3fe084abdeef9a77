"""Attribute classifier and the two fidelity proxies (clip-proxy, lpips-proxy)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ddslab.diffusion import cond_tensor, to_tensor
from ddslab.seeding import derive_seed, torch_gen
from ddslab.synthdata import ATTRIBUTES, VOCAB, Caption, Dataset, EditMask

log = logging.getLogger(__name__)

GATE = 0.98


class GateError(RuntimeError):
    pass


@dataclass
class ClassifierConfig:
    width: int = 32
    steps: int = 4000
    batch: int = 64
    lr: float = 2e-3
    noise_aug: float = 0.1  # std of additive pixel noise during training
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


class AttrClassifier(nn.Module):
    """Small CNN with one softmax head per attribute."""

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.channels, self.width = channels, width
        self.body = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.SiLU(), nn.AvgPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.heads = nn.ModuleList([nn.Linear(2 * width, len(VOCAB[a])) for a in ATTRIBUTES])
        self.accuracy: dict[str, float] = {}

    def forward(self, x):
        f = self.body(x)
        return [head(f) for head in self.heads]

    @torch.no_grad()
    def probs(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [F.softmax(logits, dim=1) for logits in self(x)]

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return torch.stack([p.argmax(dim=1) for p in self.probs(x)], dim=1)


@torch.no_grad()
def head_accuracy(clf: AttrClassifier, ds: Dataset, batch: int = 512) -> dict[str, float]:
    x = to_tensor(ds.images)
    labels = cond_tensor(ds.captions())
    preds = torch.cat([clf.predict(x[i:i + batch]) for i in range(0, len(ds), batch)])
    return {a: float((preds[:, j] == labels[:, j]).float().mean()) for j, a in enumerate(ATTRIBUTES)}


def train_attr_classifier(train: Dataset, heldout: Dataset, cfg: ClassifierConfig = ClassifierConfig(),
                          gate: float = GATE) -> AttrClassifier:
    """Fit the three heads and enforce the held-out accuracy gate on every head."""
    torch.manual_seed(derive_seed(cfg.seed, "clf-init"))
    clf = AttrClassifier(train.canvas[2], cfg.width)
    x = to_tensor(train.images)
    labels = cond_tensor(train.captions())
    g = torch_gen(derive_seed(cfg.seed, "clf-train"))
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    clf.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, x.shape[0], (cfg.batch,), generator=g)
        xb = x[idx] + cfg.noise_aug * torch.randn(x[idx].shape, generator=g)
        loss = sum(F.cross_entropy(logits, labels[idx, j]) for j, logits in enumerate(clf(xb)))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    clf.eval()
    clf.accuracy = head_accuracy(clf, heldout)
    weakest = min(clf.accuracy, key=clf.accuracy.get)
    log.info("classifier held-out accuracy %s", clf.accuracy)
    if clf.accuracy[weakest] < gate:
        raise GateError(f"classifier gate unmet: head {weakest!r} has held-out accuracy "
                        f"{clf.accuracy[weakest]:.4f} < {gate}")
    return clf


def _batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        return to_tensor(image)
    return image if image.ndim == 4 else image[None]


def target_fidelity(clf: AttrClassifier, image, target: Caption | Sequence[Caption]) -> np.ndarray:
    """Product over heads of the probability of each target attribute (null attributes skipped)."""
    x = _batch(image)
    targets = [target] * x.shape[0] if isinstance(target, Caption) else list(target)
    probs = clf.probs(x)
    out = torch.ones(x.shape[0], dtype=torch.float64)
    for j, attr in enumerate(ATTRIBUTES):
        for i, tgt in enumerate(targets):
            value = getattr(tgt, attr)
            if value is not None:
                out[i] *= float(probs[j][i, VOCAB[attr].index(value)])
    return out.numpy()


def source_fidelity(image, ref, mask: EditMask | np.ndarray) -> float:
    """Mean squared pixel difference over the off-target (mask == False) region."""
    image, ref = np.asarray(image, np.float64), np.asarray(ref, np.float64)
    if image.shape != ref.shape:
        raise ValueError(f"image {image.shape} and reference {ref.shape} differ in shape")
    m = mask.mask if isinstance(mask, EditMask) else np.asarray(mask, bool)
    off = ~m
    if not off.any():
        raise ValueError("mask leaves no off-target pixels")
    return float(((image - ref) ** 2)[off].mean())


class EditScorer:
    """Per-iteration monitor for batched edits: clip-proxy and lpips-proxy per task."""

    def __init__(self, clf: AttrClassifier, targets: Sequence[Caption], refs, masks: Sequence[np.ndarray]):
        self.clf = clf
        self.targets = list(targets)
        self.refs = to_tensor(np.stack([np.asarray(r) for r in refs])).double()
        off = torch.from_numpy(~np.stack([np.asarray(m.mask if isinstance(m, EditMask) else m, bool)
                                          for m in masks]))
        self.off = off[:, None].expand_as(self.refs)
        self.off_count = self.off.flatten(1).sum(1).double()

    def __call__(self, z: torch.Tensor) -> dict:
        fid = target_fidelity(self.clf, z, self.targets)
        sq = (z.double() - self.refs) ** 2 * self.off
        mse = (sq.flatten(1).sum(1) / self.off_count).numpy()
        return {"fidelity": fid, "off_target_mse": mse}
