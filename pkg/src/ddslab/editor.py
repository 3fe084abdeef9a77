"""Zero-shot pixel-space editing driven by DDS, SDS or L2-regularised SDS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ddslab.diffusion import NoiseSchedule, cond_tensor, to_numpy, to_tensor
from ddslab.scores import dds_grad, saliency_of, sds_grad
from ddslab.seeding import torch_gen
from ddslab.synthdata import NULL, Caption, SceneSpec

METHODS = ("dds", "sds", "sds-reg")
OPTIMIZERS = ("sgd", "adam")
DEFAULT_LR = {"sgd": 2.0, "adam": 0.05}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# evaluated on the (clamped) current image; returns per-task metric arrays
Monitor = Callable[[torch.Tensor], dict]


class EditError(RuntimeError):
    pass


@dataclass
class EditTask:
    zhat: np.ndarray  # (H, W, C) source image
    y: Caption
    yhat: Caption | None = None  # None -> null caption
    omega: float = 7.5
    iters: int = 200
    optimizer: str = "sgd"
    lr: float | None = None  # None -> optimizer default
    lr_decay: float = 0.9
    lr_decay_interval: int = 20
    seed: int = 0
    t_range: tuple[float, float] = (0.05, 0.95)
    grad_scale: float | None = None  # None -> 1 / (H * W)
    source: SceneSpec | None = None
    name: str = ""

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.optimizer]
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        lo, hi = self.t_range
        if not 0 < lo < hi < 1:
            raise ValueError(f"t_range {self.t_range} must satisfy 0 < lo < hi < 1")

    @property
    def reference_caption(self) -> Caption:
        return NULL if self.yhat is None else self.yhat

    def lr_at(self, k: int) -> float:
        return lr_at(k, self.lr, self.lr_decay, self.lr_decay_interval)


def lr_at(k: int, lr: float, decay: float, interval: int) -> float:
    """Step decay lr * decay ** floor(k / interval)."""
    return lr * decay ** (k // interval)


@dataclass
class EditResult:
    z_final: np.ndarray  # (H, W, C), unclamped
    accumulated_diff: np.ndarray  # (H, W) sum over steps and channels of |dz|
    update_energy: np.ndarray  # (H, W) sum over steps and channels of dz^2
    trajectory: list[tuple[int, np.ndarray]] = field(default_factory=list)
    update_saliency: list[tuple[int, np.ndarray]] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def image(self) -> np.ndarray:
        """Export view: clamped to [-1, 1]."""
        return np.clip(self.z_final, -1.0, 1.0)

    def energy_fraction(self, mask: np.ndarray) -> float:
        total = float(self.update_energy.sum())
        return float(self.update_energy[mask].sum()) / total if total > 0 else float("nan")

    def metric(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.metrics])

    def first_iter_reaching(self, key: str, level: float) -> int:
        """First iteration (1-based) whose metric reaches ``level``; iters + 1 if never."""
        for row in self.metrics:
            if row[key] >= level:
                return row["iter"]
        return self.meta["iters"] + 1


def adam_direction(g, m, v, k: int, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One Adam moment update; returns (normalised direction, m, v). ``k`` is 1-based."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**k)
    vhat = v / (1 - b2**k)
    return mhat / (vhat.sqrt() + eps), m, v


def run_edits(model, tasks: Sequence[EditTask], method: str = "dds", lambda_id: float = 0.0,
              monitor: Monitor | None = None, sched: NoiseSchedule = NoiseSchedule(),
              trajectory_every: int = 25, saliency_every: int = 20, record: Callable | None = None
              ) -> list[EditResult]:
    """Optimise a batch of tasks jointly; every task keeps its own (eps, t) stream.

    ``record(k, dz)`` is called with each step's update, for accounting checks.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if lambda_id < 0:
        raise ValueError("lambda_id must be nonnegative")
    if not tasks:
        return []
    iters = {t.iters for t in tasks}
    opts = {t.optimizer for t in tasks}
    if len(iters) != 1 or len(opts) != 1:
        raise ValueError("tasks in one batch must share iters and optimizer")
    iters, opt = iters.pop(), opts.pop()

    zhat = torch.cat([to_tensor(t.zhat) for t in tasks])
    b, c, h, w = zhat.shape
    y = cond_tensor([t.y for t in tasks])
    yhat = cond_tensor([t.reference_caption for t in tasks])
    omega = torch.tensor([t.omega for t in tasks], dtype=torch.float32)
    scale = torch.tensor([t.grad_scale if t.grad_scale is not None else 1.0 / (h * w) for t in tasks],
                         dtype=torch.float32).reshape(-1, 1, 1, 1)
    gens = [torch_gen(t.seed) for t in tasks]
    lo = torch.tensor([t.t_range[0] for t in tasks])
    hi = torch.tensor([t.t_range[1] for t in tasks])

    z = zhat.clone()
    m = torch.zeros_like(z)
    v = torch.zeros_like(z)
    acc = torch.zeros(b, h, w, dtype=torch.float64)
    energy = torch.zeros(b, h, w, dtype=torch.float64)
    results = [EditResult(None, None, None, meta={
        "method": method, "iters": iters, "optimizer": opt, "omega": t.omega, "lr": t.lr,
        "lr_decay": t.lr_decay, "lr_decay_interval": t.lr_decay_interval, "seed": t.seed,
        "t_range": list(t.t_range), "lambda_id": lambda_id, "name": t.name,
        "y": str(t.y), "yhat": str(t.reference_caption),
    }) for t in tasks]
    for i, r in enumerate(results):
        r.trajectory.append((0, to_numpy(zhat[i:i + 1])[0]))

    for k in range(iters):
        u = torch.stack([torch.rand((), generator=g) for g in gens])
        t_k = lo + (hi - lo) * u
        eps = torch.cat([torch.randn((1, c, h, w), generator=g) for g in gens])
        if method == "dds":
            grad = dds_grad(model, z, y, zhat, yhat, eps, t_k, omega, sched).grad.to(z.dtype)
        else:
            grad = sds_grad(model, z, y, eps, t_k, omega, sched).grad.to(z.dtype)
            if method == "sds-reg":
                grad = grad + lambda_id * (z - zhat)
        grad = grad * scale
        lr = torch.tensor([task.lr_at(k) for task in tasks], dtype=torch.float32).reshape(-1, 1, 1, 1)
        if opt == "sgd":
            dz = -lr * grad
        else:
            direction, m, v = adam_direction(grad, m, v, k + 1)
            dz = -lr * direction
        if not bool(torch.isfinite(dz).all()):
            bad = [tasks[i].name or i for i in range(b) if not torch.isfinite(dz[i]).all()]
            raise EditError(f"non-finite update at iteration {k} for task(s) {bad}")
        z = z + dz
        if record is not None:
            record(k, dz.clone())
        d64 = dz.double()
        acc += d64.abs().sum(dim=1)
        energy += d64.pow(2).sum(dim=1)
        it = k + 1
        metrics = monitor(z.clamp(-1, 1)) if monitor is not None else {}
        for i, r in enumerate(results):
            row = {"iter": it, "lr": float(lr[i]), "t": float(t_k[i])}
            row.update({key: float(val[i]) for key, val in metrics.items()})
            r.metrics.append(row)
            if trajectory_every and (it % trajectory_every == 0 or it == iters):
                r.trajectory.append((it, to_numpy(z[i:i + 1])[0]))
            if saliency_every and (k % saliency_every == 0):
                r.update_saliency.append((it, saliency_of(dz[i])))

    zf = to_numpy(z)
    for i, r in enumerate(results):
        r.z_final = zf[i]
        r.accumulated_diff = acc[i].numpy()
        r.update_energy = energy[i].numpy()
    return results


def edit_dds(model, task: EditTask, **kw) -> EditResult:
    return run_edits(model, [task], "dds", **kw)[0]


def edit_sds(model, task: EditTask, **kw) -> EditResult:
    return run_edits(model, [task], "sds", **kw)[0]


def edit_sds_regularized(model, task: EditTask, lambda_id: float, **kw) -> EditResult:
    return run_edits(model, [task], "sds-reg", lambda_id=lambda_id, **kw)[0]


@dataclass
class OptimizerComparison:
    results: dict[str, EditResult]
    in_mask_energy: dict[str, float]


def compare_optimizers(model, task: EditTask, mask: np.ndarray, monitor: Monitor | None = None,
                       method: str = "dds") -> OptimizerComparison:
    """Run the same task under SGD and Adam; report each one's in-mask share of update energy."""
    results, frac = {}, {}
    for opt in OPTIMIZERS:
        variant = EditTask(**{**task.__dict__, "optimizer": opt, "lr": DEFAULT_LR[opt]})
        res = run_edits(model, [variant], method, monitor=monitor)[0]
        results[opt] = res
        frac[opt] = res.energy_fraction(mask)
    return OptimizerComparison(results, frac)


def step_sweep(model, tasks: Sequence[EditTask], step_counts: Sequence[int], monitor: Monitor | None = None,
               method: str = "dds", keys: Sequence[str] = ("fidelity", "off_target_mse")) -> list[dict]:
    """Final metrics after each step count.

    A run of ``max(step_counts)`` iterations is used for every count: the (eps, t)
    stream and the lr schedule depend only on the iteration index, so the shorter
    runs are exact prefixes of the longest one.
    """
    if not step_counts or min(step_counts) < 1:
        raise ValueError("step counts must be a nonempty list of positive integers")
    longest = max(step_counts)
    runs = run_edits(model, [EditTask(**{**t.__dict__, "iters": longest}) for t in tasks], method,
                     monitor=monitor, trajectory_every=0, saliency_every=0)
    rows = []
    for task, res in zip(tasks, runs):
        for n in sorted(step_counts):
            row = {"task": task.name, "steps": n}
            for key in keys:
                if res.metrics and key in res.metrics[n - 1]:
                    row[key] = res.metrics[n - 1][key]
            rows.append(row)
    return rows
