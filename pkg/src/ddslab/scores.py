"""SDS and DDS gradients plus Monte-Carlo diagnostics of the SDS bias direction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ddslab.diffusion import NoiseSchedule, _bcast, _check_t, cfg_predict, cond_tensor, noise_image, to_tensor
from ddslab.seeding import derive_seed, torch_gen
from ddslab.synthdata import Caption


class ScoreError(RuntimeError):
    pass


@dataclass
class ScoreResult:
    grad: torch.Tensor
    branch_cond: torch.Tensor
    branch_ref: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        return to_tensor(x)
    return x if x.ndim == 4 else x[None]


def _as_cond(y, b: int) -> torch.Tensor:
    if isinstance(y, Caption):
        return cond_tensor(y, b)
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], Caption):
        return cond_tensor(list(y))
    y = torch.as_tensor(y, dtype=torch.long)
    y = y[None] if y.ndim == 1 else y
    return y.expand(b, -1) if y.shape[0] == 1 else y


def _t_vec(t, b: int) -> torch.Tensor:
    t = _check_t(t)
    return t.expand(b) if t.ndim == 0 else t


def _finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise ScoreError(f"non-finite values in {what}")
    return x


@torch.no_grad()
def sds_grad(model, z, y, eps, t, omega: float, sched: NoiseSchedule = NoiseSchedule()) -> ScoreResult:
    """w(t) * sqrt(alpha_t) * (eps^omega(z_t, y, t) - eps), with z as the optimised variable.

    The gradient is returned in float64: at large omega the guided prediction is big enough
    that float32 rounding of the final difference would be visible.
    """
    z = _as_batch(z)
    b = z.shape[0]
    t = _t_vec(t, b)
    a = sched.alpha(t)
    pred = _finite(cfg_predict(model, noise_image(z, eps, a), _as_cond(y, b), t, omega), "model output")
    scale = _bcast(sched.w(t).double() * a.double().sqrt(), z.double())
    return ScoreResult(scale * (pred.double() - eps.double()), pred, None, {"t": t, "omega": omega, "kind": "sds"})


@torch.no_grad()
def dds_grad(model, z, y, zhat, yhat, eps, t, omega: float,
             sched: NoiseSchedule = NoiseSchedule()) -> ScoreResult:
    """w(t) * sqrt(alpha_t) * (eps^omega(z_t, y, t) - eps^omega(zhat_t, yhat, t)).

    Both branches share ``eps`` and ``t``; the reference branch is a constant.
    """
    z, zhat = _as_batch(z), _as_batch(zhat)
    if z.shape != zhat.shape:
        raise ValueError(f"image {tuple(z.shape)} and reference {tuple(zhat.shape)} differ in shape")
    b = z.shape[0]
    t = _t_vec(t, b)
    a = sched.alpha(t)
    # separate calls with the same batch layout as sds_grad: conv kernels are not
    # bitwise invariant to batch size, and the difference identity must hold to fp precision
    cond = _finite(cfg_predict(model, noise_image(z, eps, a), _as_cond(y, b), t, omega), "model output")
    ref = _finite(cfg_predict(model, noise_image(zhat, eps, a), _as_cond(yhat, b), t, omega), "model output")
    scale = _bcast(sched.w(t).double() * a.double().sqrt(), z.double())
    return ScoreResult(scale * (cond.double() - ref.double()), cond, ref, {"t": t, "omega": omega, "kind": "dds"})


def saliency_of(result: ScoreResult | torch.Tensor) -> np.ndarray:
    """Per-pixel channel L2 norm, scaled to [0, 1] by the maximum (H, W)."""
    g = result.grad if isinstance(result, ScoreResult) else torch.as_tensor(result)
    g = g.detach().double()
    if g.ndim == 4:
        g = g[0]
    sal = g.pow(2).sum(dim=0).sqrt().numpy()
    peak = sal.max()
    return sal / peak if peak > 0 else np.zeros_like(sal)


# ---------------------------------------------------------------------------
# Monte-Carlo estimators


def draw_noise(seed: int, n: int, shape) -> torch.Tensor:
    return torch.randn((n, *shape), generator=torch_gen(seed))


@dataclass
class BiasEstimate:
    t_grid: np.ndarray
    mean: np.ndarray  # (T, C, H, W) mean SDS gradient of the matched pair
    stderr: np.ndarray  # (T, C, H, W) per-element standard error
    n: int

    @property
    def norm(self) -> np.ndarray:
        return np.sqrt((self.mean.astype(np.float64) ** 2).reshape(len(self.t_grid), -1).sum(1))

    @property
    def norm_stderr(self) -> np.ndarray:
        return np.sqrt((self.stderr.astype(np.float64) ** 2).reshape(len(self.t_grid), -1).sum(1))


def estimate_bias(model, zhat, yhat, n: int, t_grid: Sequence[float], omega: float, seed: int = 0,
                  sched: NoiseSchedule = NoiseSchedule()) -> BiasEstimate:
    """Mean SDS gradient of a matched pair over ``n`` noise draws at each t."""
    if n < 1:
        raise ValueError("need at least one draw")
    zhat = _as_batch(zhat)
    means, errs = [], []
    for k, t in enumerate(t_grid):
        eps = draw_noise(derive_seed(seed, "bias", k), n, zhat.shape[1:])
        g = sds_grad(model, zhat.expand(n, -1, -1, -1), yhat, eps, float(t), omega, sched).grad.double()
        means.append(g.mean(0).numpy())
        errs.append((g.std(0, unbiased=True) / np.sqrt(n)).numpy() if n > 1 else np.zeros(g.shape[1:]))
    return BiasEstimate(np.asarray(t_grid, float), np.stack(means), np.stack(errs), n)


@dataclass
class Curve:
    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n: int
    condition_set: str
    per_item: np.ndarray  # (T, P) per-item Monte-Carlo means
    excluded: np.ndarray | None = None  # (T,) draws dropped for zero norm

    def rows(self) -> list[dict]:
        return [
            {"t": float(t), "mean": float(m), "stderr": float(s), "n": self.n, "condition_set": self.condition_set}
            for t, m, s in zip(self.t, self.mean, self.stderr)
        ]


def _grand_mean(per_item: np.ndarray, within_var: np.ndarray, n: int):
    """Mean over items; stderr from the spread of per-item means (Monte-Carlo only if one item)."""
    p = np.sum(~np.isnan(per_item), axis=1)
    with warnings.catch_warnings():
        # rows whose draws were all excluded stay NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(per_item, axis=1)
        if per_item.shape[1] > 1:
            stderr = np.nanstd(per_item, axis=1, ddof=1) / np.sqrt(p)
        else:
            stderr = np.sqrt(within_var[:, 0] / max(n, 1))
    return mean, stderr


def _pair_batches(items, chunk: int):
    for i in range(0, len(items), chunk):
        yield i, items[i:i + chunk]


def sds_norm_curve(model, pairs: Sequence[tuple], t_grid: Sequence[float], n: int, omega: float = 7.5,
                   seed: int = 0, condition_set: str = "", sched: NoiseSchedule = NoiseSchedule(),
                   batch: int = 512) -> Curve:
    """E||grad SDS||_2 per t: Monte-Carlo over ``n`` draws per pair, then averaged over pairs.

    Draw streams depend only on (seed, pair index, t index), so two pair sets of the
    same size are evaluated on identical noise.
    """
    if not pairs:
        raise ValueError("no pairs given")
    z = torch.cat([_as_batch(p[0]) for p in pairs])
    y = torch.cat([_as_cond(p[1], 1) for p in pairs])
    shape = z.shape[1:]
    per = max(1, batch // n)
    T, P = len(t_grid), len(pairs)
    means = np.zeros((T, P))
    var = np.zeros((T, P))
    for k, t in enumerate(t_grid):
        for start, chunk in _pair_batches(list(range(P)), per):
            eps = torch.cat([draw_noise(derive_seed(seed, "sds-norm", p, k), n, shape) for p in chunk])
            zz = z[chunk].repeat_interleave(n, dim=0)
            yy = y[chunk].repeat_interleave(n, dim=0)
            g = sds_grad(model, zz, yy, eps, float(t), omega, sched).grad
            norms = g.double().flatten(1).norm(dim=1).reshape(len(chunk), n).numpy()
            means[k, chunk] = norms.mean(axis=1)
            var[k, chunk] = norms.var(axis=1, ddof=1) if n > 1 else 0.0
    mean, stderr = _grand_mean(means, var, n)
    return Curve(np.asarray(t_grid, float), mean, stderr, n, condition_set, means)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of flattened tensors, in float64; NaN where a norm is zero."""
    a, b = a.double().flatten(1), b.double().flatten(1)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    out = (a * b).sum(dim=1) / (na * nb)
    out = out.clamp(-1.0, 1.0)
    out[(na == 0) | (nb == 0)] = float("nan")
    return out


def grad_cosine_curve(model, quads: Sequence[tuple], t_grid: Sequence[float], n: int, omega: float = 7.5,
                      seed: int = 0, condition_set: str = "", sched: NoiseSchedule = NoiseSchedule(),
                      batch: int = 256) -> Curve:
    """Mean cos(grad SDS(z, y), grad SDS(zhat, yhat)) per t with shared (eps, t) per draw.

    Draws where either gradient has zero norm are excluded and counted.
    """
    if not quads:
        raise ValueError("no quads given")
    z = torch.cat([_as_batch(q[0]) for q in quads])
    y = torch.cat([_as_cond(q[1], 1) for q in quads])
    zh = torch.cat([_as_batch(q[2]) for q in quads])
    yh = torch.cat([_as_cond(q[3], 1) for q in quads])
    shape = z.shape[1:]
    per = max(1, batch // n)
    T, P = len(t_grid), len(quads)
    means = np.zeros((T, P))
    var = np.zeros((T, P))
    excluded = np.zeros(T, dtype=int)
    for k, t in enumerate(t_grid):
        for start, chunk in _pair_batches(list(range(P)), per):
            m = len(chunk)
            eps = torch.cat([draw_noise(derive_seed(seed, "cosine", q, k), n, shape) for q in chunk])
            zz = torch.cat([z[chunk].repeat_interleave(n, 0), zh[chunk].repeat_interleave(n, 0)])
            yy = torch.cat([y[chunk].repeat_interleave(n, 0), yh[chunk].repeat_interleave(n, 0)])
            g = sds_grad(model, zz, yy, torch.cat([eps, eps]), float(t), omega, sched).grad
            cos = cosine(g[: m * n], g[m * n:]).reshape(m, n).numpy()
            bad = np.isnan(cos)
            excluded[k] += int(bad.sum())
            with np.errstate(invalid="ignore"), warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                means[k, chunk] = np.nanmean(np.where(bad, np.nan, cos), axis=1)
                var[k, chunk] = np.nanvar(cos, axis=1, ddof=1) if n > 1 else 0.0
    mean, stderr = _grand_mean(means, np.nan_to_num(var), n)
    return Curve(np.asarray(t_grid, float), mean, stderr, n, condition_set, means, excluded)
