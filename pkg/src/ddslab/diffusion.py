"""Noise schedule, conditional noise-prediction network, CFG, training and DDIM sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ddslab.seeding import derive_seed, torch_gen
from ddslab.synthdata import ATTRIBUTES, NULL, VOCAB, Caption, Dataset

log = logging.getLogger(__name__)

Cond = torch.Tensor  # (B, 3) long tensor of attribute indices


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine alpha-bar schedule over continuous t, normalised so alpha(0) = 1."""

    kind: str = "cosine"
    s: float = 0.008
    weight: float = 1.0  # constant w(t)

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("w(t) must be nonnegative")

    def _f(self, t):
        return torch.cos((t + self.s) / (1 + self.s) * math.pi / 2) ** 2

    def alpha(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64)
        a = self._f(t) / self._f(torch.zeros((), dtype=torch.float64))
        return a.clamp(0.0, 1.0).to(torch.float32)

    def w(self, t) -> torch.Tensor:
        return torch.full_like(torch.as_tensor(t, dtype=torch.float32), self.weight)

    def to_json(self) -> dict:
        return asdict(self)


def _check_t(t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float32)
    if not bool(((t > 0) & (t < 1)).all()):
        raise ValueError(f"timestep must lie in the open interval (0, 1), got {t}")
    return t


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=like.dtype)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


@dataclass
class NoisedImage:
    z_t: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor


def noise_image(z, eps, alpha) -> torch.Tensor:
    a = _bcast(alpha, z)
    return a.sqrt() * z + (1 - a).sqrt() * eps


def add_noise(z: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> NoisedImage:
    if eps.shape != z.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match image shape {tuple(z.shape)}")
    t = _check_t(t)
    return NoisedImage(noise_image(z, eps, sched.alpha(t)), eps, t)


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    image_size: tuple[int, int] = (16, 16)
    width: int = 32
    mult: tuple[int, ...] = (1, 2, 2)
    groups: int = 8
    emb_mult: int = 4

    def to_json(self) -> dict:
        d = asdict(self)
        d["mult"] = list(self.mult)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["mult"] = tuple(d["mult"])
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of continuous t (scaled to the usual 0..1000 range)."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1) * 1000.0
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """Residual block; timestep+condition embedding enters through adaptive group norm."""

    def __init__(self, cin, cout, emb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.ada = nn.Linear(emb_dim, 2 * cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.ada(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Small U-Net predicting the noise in z_t given (t, caption)."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        w, e = cfg.width, cfg.width * cfg.emb_mult
        self.emb_dim = e
        self.time_dim = w
        self.time_mlp = nn.Sequential(nn.Linear(w, e), nn.SiLU(), nn.Linear(e, e))
        # one extra row per attribute is the null entry
        self.attr_emb = nn.ModuleList([nn.Embedding(len(VOCAB[a]) + 1, e) for a in ATTRIBUTES])
        self.inc = nn.Conv2d(cfg.channels, w, 3, padding=1)
        chs = [w * m for m in cfg.mult]
        self.down = nn.ModuleList()
        c, skips = w, []
        for ch in chs:
            self.down.append(ResBlock(c, ch, e, cfg.groups))
            c = ch
            skips.append(c)
        self.mid = ResBlock(c, c, e, cfg.groups)
        self.up = nn.ModuleList()
        for i in reversed(range(len(chs))):
            self.up.append(ResBlock(c + skips[i], chs[i], e, cfg.groups))
            c = chs[i]
        self.out_norm = nn.GroupNorm(cfg.groups, c)
        self.out = nn.Conv2d(c, cfg.channels, 3, padding=1)

    def embed_cond(self, cond: Cond) -> torch.Tensor:
        cond = torch.as_tensor(cond, dtype=torch.long)
        return sum(emb(cond[:, i]) for i, emb in enumerate(self.attr_emb))

    def forward(self, x: torch.Tensor, t, cond: Cond) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float32)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        return self.forward_embedded(x, timestep_features(t, self.time_dim), self.embed_cond(cond))

    def forward_embedded(self, x, time_feat, cond_vec):
        """Forward pass with the raw timestep features and condition vector supplied directly."""
        emb = self.time_mlp(time_feat) + cond_vec
        h = self.inc(x)
        hs = []
        n = len(self.down)
        for i, block in enumerate(self.down):
            h = block(h, emb)
            hs.append(h)
            if i < n - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        for j, block in enumerate(self.up):
            i = n - 1 - j
            if h.shape[-1] != hs[i].shape[-1]:
                h = F.interpolate(h, size=hs[i].shape[-2:], mode="nearest")
            h = block(torch.cat([h, hs[i]], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


def cond_tensor(captions: Caption | Sequence[Caption], n: int | None = None) -> Cond:
    if isinstance(captions, Caption):
        captions = [captions] * (n or 1)
    return torch.tensor([c.indices() for c in captions], dtype=torch.long)


def null_cond(n: int) -> Cond:
    return cond_tensor(NULL, n)


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, C) numpy images to an (N, C, H, W) float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


def cfg_predict(model: Denoiser, z_t: torch.Tensor, y: Cond, t, omega) -> torch.Tensor:
    """Guided noise prediction (1 + omega) * eps(z_t, y, t) - omega * eps(z_t, t).

    Both branches run in a single batch. ``omega`` may be a scalar or one value per row.
    """
    b = z_t.shape[0]
    y = torch.as_tensor(y, dtype=torch.long)
    if y.shape[0] == 1 and b > 1:
        y = y.expand(b, -1)
    t = torch.as_tensor(t, dtype=torch.float32)
    t = t.expand(b) if t.ndim == 0 else t
    out = model(torch.cat([z_t, z_t]), torch.cat([t, t]), torch.cat([y, null_cond(b)]))
    cond, uncond = out[:b], out[b:]
    omega = _bcast(torch.as_tensor(omega, dtype=torch.float32), z_t)
    return (1 + omega) * cond - omega * uncond


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 6000
    batch: int = 64
    lr: float = 2e-3
    warmup: int = 200
    p_uncond: float = 0.1
    t_min: float = 0.02
    t_max: float = 0.98
    grad_clip: float = 1.0
    seed: int = 0
    val_size: int = 256
    val_seed: int = 1
    log_every: int = 100
    width: int = 32
    mult: tuple[int, ...] = (1, 2, 2)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mult"] = list(self.mult)
        return d


def diffusion_loss(model, z, cond, eps, t, sched: NoiseSchedule) -> torch.Tensor:
    """Monte-Carlo w(t) * ||eps_phi(z_t, y, t) - eps||^2, averaged over the batch."""
    z_t = noise_image(z, eps, sched.alpha(t))
    pred = model(z_t, t, cond)
    per = ((pred - eps) ** 2).flatten(1).sum(dim=1)
    return (sched.w(t) * per).mean()


@torch.no_grad()
def validation_loss(model, images: torch.Tensor, cond: Cond, sched: NoiseSchedule, seed: int,
                    t_min=0.02, t_max=0.98, batch: int = 256) -> float:
    """Fixed-draw diffusion loss; the same (seed, images) always uses the same (eps, t)."""
    g = torch_gen(seed)
    eps = torch.randn(images.shape, generator=g)
    t = t_min + (t_max - t_min) * torch.rand(images.shape[0], generator=g)
    total = 0.0
    for i in range(0, images.shape[0], batch):
        sl = slice(i, i + batch)
        n = images[sl].shape[0]
        total += float(diffusion_loss(model, images[sl], cond[sl], eps[sl], t[sl], sched)) * n
    return total / images.shape[0]


def train_denoiser(dataset: Dataset, sched: NoiseSchedule, cfg: TrainConfig,
                   val: Dataset | None = None, progress: Callable[[dict], None] | None = None) -> Denoiser:
    """Fit the noise predictor with null-caption dropout.

    The returned model carries ``history`` (list of log rows) and ``val_loss``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = Denoiser(DenoiserConfig(channels=dataset.canvas[2], image_size=tuple(dataset.canvas[:2]),
                                    width=cfg.width, mult=tuple(cfg.mult)))
    images = to_tensor(dataset.images)
    conds = cond_tensor(dataset.captions())
    null = null_cond(1)[0]
    g = torch_gen(derive_seed(cfg.seed, "train"))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched_lr = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: min(1.0, (k + 1) / max(1, cfg.warmup)) * 0.5 * (1 + math.cos(math.pi * k / cfg.steps)))
    history = []
    running = 0.0
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, images.shape[0], (cfg.batch,), generator=g)
        z, cond = images[idx], conds[idx].clone()
        drop = torch.rand(cfg.batch, generator=g) < cfg.p_uncond
        cond[drop] = null
        eps = torch.randn(z.shape, generator=g)
        t = cfg.t_min + (cfg.t_max - cfg.t_min) * torch.rand(cfg.batch, generator=g)
        loss = diffusion_loss(model, z, cond, eps, t, sched)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite diffusion loss at step {step} (last running mean {running:.4g})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched_lr.step()
        running += loss.item()
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            k = (step % cfg.log_every) + 1
            row = {"step": step + 1, "loss": running / k, "lr": sched_lr.get_last_lr()[0]}
            history.append(row)
            running = 0.0
            log.info("step %d loss %.4f", row["step"], row["loss"])
            if progress:
                progress(row)
    model.eval()
    model.history = history
    model.train_config = cfg.to_json()
    model.rng_state = g.get_state().numpy().copy()
    model.validation = {}
    model.val_loss = None
    if val is not None:
        model.validation = validation_record(model, val, sched, cfg.val_seed, cfg.t_min, cfg.t_max)
        model.val_loss = model.validation["loss"]
    return model


def validation_record(model, val: Dataset, sched: NoiseSchedule, noise_seed: int, t_min=0.02, t_max=0.98) -> dict:
    """Validation loss plus everything needed to recompute it from scratch."""
    loss = validation_loss(model, to_tensor(val.images), cond_tensor(val.captions()), sched, noise_seed, t_min, t_max)
    return {"loss": loss, "dataset_seed": val.generator_seed, "n": len(val), "canvas": list(val.canvas),
            "noise_seed": noise_seed, "t_min": t_min, "t_max": t_max}


def recompute_validation(model, sched: NoiseSchedule, record: dict) -> float:
    from ddslab.synthdata import sample_dataset

    val = sample_dataset(record["dataset_seed"], record["n"], tuple(record["canvas"]))
    return validation_loss(model, to_tensor(val.images), cond_tensor(val.captions()), sched,
                           record["noise_seed"], record["t_min"], record["t_max"])


# ---------------------------------------------------------------------------
# sampling


@torch.no_grad()
def sample(model: Denoiser, y: Caption | Cond, omega: float, steps: int = 50, seed: int = 0,
           n: int = 1, sched: NoiseSchedule = NoiseSchedule(), t_start: float = 0.98) -> torch.Tensor:
    """Deterministic DDIM reverse process with CFG; returns (n, C, H, W) in [-1, 1]."""
    if steps < 1:
        raise ValueError("sampler needs at least one step")
    if omega is None:
        raise ValueError("omega must be given explicitly")
    cond = cond_tensor(y, n) if isinstance(y, Caption) else torch.as_tensor(y, dtype=torch.long)
    (h, w), c = model.cfg.image_size, model.cfg.channels
    x = torch.randn((n, c, h, w), generator=torch_gen(seed))
    ts = torch.linspace(t_start, 0.0, steps + 1)
    x0 = x
    for i in range(steps):
        t, t_next = ts[i], ts[i + 1]
        a, a_next = sched.alpha(t), sched.alpha(t_next)
        eps = cfg_predict(model, x, cond, t.expand(n), omega)
        x0 = ((x - (1 - a).sqrt() * eps) / a.sqrt()).clamp(-1, 1)
        eps = (x - a.sqrt() * x0) / (1 - a).sqrt()
        x = a_next.sqrt() * x0 + (1 - a_next).sqrt() * eps
    return x0.clamp(-1, 1)
