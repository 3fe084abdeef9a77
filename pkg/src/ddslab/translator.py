"""Feed-forward multi-task image translation trained with DDS as the only edit signal."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from ddslab.diffusion import (Denoiser, DenoiserConfig, NoiseSchedule, cond_tensor, timestep_features, to_numpy,
                              to_tensor)
from ddslab.scores import ScoreError, dds_grad, sds_grad
from ddslab.seeding import derive_seed, torch_gen
from ddslab.synthdata import ATTRIBUTES, Caption, Dataset

log = logging.getLogger(__name__)

TASK_TIME = 0.5  # the timestep slot starts at the embedding of t = 0.5


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Task:
    """One translation: attributes overridden in the source caption, and the caption seeding k_j."""

    name: str
    target_attrs: dict
    init_attrs: dict | None = None  # defaults to target_attrs

    def __post_init__(self):
        for key in list(self.target_attrs) + list(self.init_attrs or {}):
            if key not in ATTRIBUTES:
                raise ValueError(f"task {self.name!r}: unknown attribute {key!r}")
        Caption(**self.target_attrs)

    @property
    def init_caption(self) -> Caption:
        return Caption(**(self.init_attrs if self.init_attrs is not None else self.target_attrs))

    def target_for(self, source: Caption) -> Caption:
        return source.override(**self.target_attrs)

    def to_json(self) -> dict:
        return {"name": self.name, "init_caption_attrs": dict(self.init_attrs or self.target_attrs),
                "target_caption_attrs": dict(self.target_attrs)}

    @classmethod
    def from_json(cls, d: dict) -> "Task":
        return cls(d["name"], dict(d["target_caption_attrs"]), dict(d.get("init_caption_attrs") or {}) or None)


def load_tasks(path: str | Path) -> list[Task]:
    import json

    return [Task.from_json(d) for d in json.loads(Path(path).read_text())]


@dataclass
class I2ITrainConfig:
    batch: int = 8
    total_iters: int = 20000
    lr: float = 1e-4
    lr_warmup_iters: int = 1000
    omega_max: float = 25.0
    omega_warmup_iters: int = 4000
    lambda_start: float = 3.0
    lambda_end: float = 0.1
    lambda_cool_iters: int = 4000
    tasks: list = field(default_factory=lambda: [{"name": "to-blue", "init_caption_attrs": {"shape_color": "blue"},
                                                   "target_caption_attrs": {"shape_color": "blue"}}])
    source_caption: dict | None = None  # None -> every image's own caption
    seed: int = 0
    t_range: tuple[float, float] = (0.05, 0.98)
    score: str = "dds"  # "sds" for the vanilla-SDS ablation
    omega_warmup: bool = True  # False: omega fixed at omega_max from iteration 0
    grad_clip: float = 1.0
    log_every: int = 1

    def __post_init__(self):
        if self.lambda_start < self.lambda_end or self.lambda_end < 0:
            raise ValueError("need lambda_start >= lambda_end >= 0")
        if self.score not in ("dds", "sds"):
            raise ValueError("score must be 'dds' or 'sds'")
        if not self.tasks:
            raise ValueError("at least one task is required")

    def task_list(self) -> list[Task]:
        return [t if isinstance(t, Task) else Task.from_json(t) for t in self.tasks]

    def to_json(self) -> dict:
        d = asdict(self)
        d["tasks"] = [t.to_json() for t in self.task_list()]
        d["t_range"] = list(self.t_range)
        return d


FULL_SCALE_I2I = dict(batch=2, total_iters=125000, lr=1e-5, lr_warmup_iters=10000, omega_max=25.0,
                 omega_warmup_iters=20000, lambda_start=3.0, lambda_end=0.1, lambda_cool_iters=20000)


def _cosine_ramp(it: int, start: float, end: float, span: int) -> float:
    if span <= 0 or it >= span:
        return float(end)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * it / span))


def cfg_warmup(it: int, cfg: I2ITrainConfig) -> float:
    """Guidance scale: cosine from 1 to omega_max over omega_warmup_iters, then constant."""
    if it < 0:
        raise ValueError("iteration must be >= 0")
    if not cfg.omega_warmup:
        return float(cfg.omega_max)
    return _cosine_ramp(it, 1.0, cfg.omega_max, cfg.omega_warmup_iters)


def id_weight(it: int, cfg: I2ITrainConfig) -> float:
    """Identity weight: cosine from lambda_start to lambda_end over lambda_cool_iters."""
    if it < 0:
        raise ValueError("iteration must be >= 0")
    return _cosine_ramp(it, cfg.lambda_start, cfg.lambda_end, cfg.lambda_cool_iters)


def lr_factor(it: int, cfg: I2ITrainConfig) -> float:
    return min(1.0, (it + 1) / cfg.lr_warmup_iters) if cfg.lr_warmup_iters > 0 else 1.0


class TranslationNetwork(nn.Module):
    """g_theta(zhat | k_j) = clamp(zhat + U-Net(zhat; time slot, k_j), -1, 1)."""

    def __init__(self, gen: Denoiser, task_emb: torch.Tensor, time_feat: torch.Tensor, tasks: Sequence[Task]):
        super().__init__()
        self.gen = gen
        self.task_emb = nn.Parameter(task_emb.clone())
        self.time_feat = nn.Parameter(time_feat.clone())
        self.tasks = list(tasks)

    @classmethod
    def empty(cls, cfg: DenoiserConfig, tasks: Sequence[Task]) -> "TranslationNetwork":
        gen = Denoiser(cfg)
        e = gen.emb_dim
        return cls(gen, torch.zeros(len(tasks), e), torch.zeros(gen.time_dim), tasks)

    def task_index(self, task: int | str) -> int:
        if isinstance(task, str):
            names = [t.name for t in self.tasks]
            if task not in names:
                raise ValueError(f"unknown task {task!r}; known: {names}")
            return names.index(task)
        if not 0 <= int(task) < len(self.tasks):
            raise ValueError(f"task index {task} out of range for {len(self.tasks)} tasks")
        return int(task)

    def forward(self, x: torch.Tensor, task_idx: torch.Tensor) -> torch.Tensor:
        task_idx = torch.as_tensor(task_idx, dtype=torch.long).reshape(-1)
        if task_idx.numel() == 1 and x.shape[0] > 1:
            task_idx = task_idx.expand(x.shape[0])
        k = self.task_emb.index_select(0, task_idx)
        tf = self.time_feat.expand(x.shape[0], -1)
        return (x + self.gen.forward_embedded(x, tf, k)).clamp(-1.0, 1.0)


def build_translator(denoiser: Denoiser, tasks: Sequence[Task]) -> TranslationNetwork:
    """Copy the denoiser's weights; rebind the condition slot to per-task embeddings."""
    tasks = [t if isinstance(t, Task) else Task.from_json(t) for t in tasks]
    if not tasks:
        raise ValueError("task list is empty")
    gen = copy.deepcopy(denoiser)
    for p in gen.parameters():
        p.requires_grad_(True)
    with torch.no_grad():
        k = denoiser.embed_cond(cond_tensor([t.init_caption for t in tasks]))
        tf = timestep_features(torch.tensor([TASK_TIME]), denoiser.time_dim)[0]
    net = TranslationNetwork(gen, k, tf, tasks)
    for attr in ("history", "validation", "val_loss", "train_config", "rng_state"):
        net.gen.__dict__.pop(attr, None)
    return net


def dds_surrogate(grad: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Per-sample sum(stopgrad(grad) * z); its derivative w.r.t. any generator parameters is
    grad chained through dz/dtheta only (no diffusion-model Jacobian)."""
    return (grad.detach() * z).flatten(1).sum(dim=1)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)


def train_translator(net: TranslationNetwork, dataset: Dataset, cfg: I2ITrainConfig, denoiser: Denoiser,
                     sched: NoiseSchedule = NoiseSchedule(), progress: Callable[[dict], None] | None = None,
                     dump_path: str | Path | None = None) -> tuple[TranslationNetwork, list[dict]]:
    """Unsupervised training: DDS (or SDS) surrogate on g(zhat | k_j) plus the weighted identity term."""
    tasks = net.tasks
    for p in denoiser.parameters():
        p.requires_grad_(False)
    denoiser.eval()
    images = to_tensor(dataset.images)
    captions = dataset.captions()
    if cfg.source_caption is not None:
        captions = [Caption(**cfg.source_caption)] * len(captions)
    n, (c, h, w) = images.shape[0], images.shape[1:]
    g = torch_gen(derive_seed(cfg.seed, "i2i"))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rows = []
    net.train()
    for it in range(cfg.total_iters):
        for group in opt.param_groups:
            group["lr"] = cfg.lr * lr_factor(it, cfg)
        idx = torch.randint(0, n, (cfg.batch,), generator=g)
        tj = torch.randint(0, len(tasks), (cfg.batch,), generator=g)
        eps = torch.randn((cfg.batch, c, h, w), generator=g)
        t = cfg.t_range[0] + (cfg.t_range[1] - cfg.t_range[0]) * torch.rand(cfg.batch, generator=g)
        zhat = images[idx]
        yhat = [captions[int(i)] for i in idx]
        y = cond_tensor([tasks[int(j)].target_for(src) for j, src in zip(tj, yhat)])
        omega = cfg_warmup(it, cfg)
        lam = id_weight(it, cfg)

        z = net(zhat, tj)
        try:
            if cfg.score == "dds":
                grad = dds_grad(denoiser, z.detach(), y, zhat, cond_tensor(yhat), eps, t, omega, sched).grad.to(z.dtype)
            else:
                grad = sds_grad(denoiser, z.detach(), y, eps, t, omega, sched).grad.to(z.dtype)
        except ScoreError:
            grad = torch.full_like(z, float("nan"))
        score_term = dds_surrogate(grad, z).mean() / (h * w)
        l_id = ((z - zhat) ** 2).flatten(1).sum(dim=1).mean() / (h * w)
        loss = score_term + lam * l_id
        if not torch.isfinite(loss):
            if dump_path is not None:
                from ddslab.checkpoint import save_translator
                save_translator(dump_path, net, cfg.to_json(), rows)
            raise TrainingError(f"non-finite loss at iteration {it}; last log rows: {rows[-3:]}"
                                + (f"; state dumped to {dump_path}" if dump_path else ""))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        if it % cfg.log_every == 0 or it + 1 == cfg.total_iters:
            row = {"iter": it, "task": "|".join(str(int(j)) for j in tj), "omega": omega, "lambda_id": lam,
                   "l_id": float(l_id.detach()), "score_magnitude": float(grad.abs().mean())}
            rows.append(row)
            if progress:
                progress(row)
    net.eval()
    return net, rows


def _check_range(x: torch.Tensor) -> None:
    if x.numel() and (float(x.min()) < -1.0 - 1e-6 or float(x.max()) > 1.0 + 1e-6):
        raise ValueError("input pixels must lie in [-1, 1]")


@torch.no_grad()
def translate(net: TranslationNetwork, image, task: int | str) -> np.ndarray:
    """Single feed-forward pass; ``image`` is (H, W, C) or (N, H, W, C) in [-1, 1]."""
    j = net.task_index(task)
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    x = to_tensor(arr)
    _check_range(x)
    out = to_numpy(net(x, torch.full((x.shape[0],), j, dtype=torch.long)))
    return out[0] if single else out


def _mean_pairwise_sq(x: np.ndarray) -> float:
    """Mean over pairs i < j of the per-pixel mean squared difference."""
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    m = flat.shape[0]
    # sum_{i<j} ||a_i - a_j||^2 = m * sum_i ||a_i - mean||^2
    total = m * ((flat - flat.mean(axis=0)) ** 2).sum()
    return float(total / (m * (m - 1) / 2) / flat.shape[1])


def mode_collapse_index(outputs, inputs) -> float:
    """1 - (pairwise spread of outputs / pairwise spread of their inputs); 1 = fully collapsed."""
    outputs, inputs = np.asarray(outputs), np.asarray(inputs)
    if outputs.shape[0] < 2 or outputs.shape[0] != inputs.shape[0]:
        raise ValueError("need at least two outputs, one per input")
    spread_in = _mean_pairwise_sq(inputs)
    if np.all(inputs == inputs[:1]) or spread_in <= 0:
        raise ValueError("inputs are identical; the collapse ratio is undefined")
    return 1.0 - _mean_pairwise_sq(outputs) / spread_in
