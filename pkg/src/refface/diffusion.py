"""Pixel-space conditional diffusion: schedule, forward process, denoiser and training loop.

Images enter the denoiser on a [-1, 1] scale. The LQ condition is concatenated
channel-wise with the noisy image; the Composite Context enters through masked
cross-attention at every resolution level.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .degrade import degrade, get_preset
from .encoders import CompositeContext, build_composite_context, to_tensor
from .losses import hard_example_identity_loss, total_loss
from .toyfaces import DatasetManifest, render_identity_pool

log = logging.getLogger(__name__)

MODEL_FORMAT = "refface.denoiser"


class ScheduleError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- schedule


@dataclass
class NoiseSchedule:
    beta: torch.Tensor  # float64, index k holds beta_{k+1}
    beta_min: float
    beta_max: float

    def __post_init__(self):
        self.alpha = 1.0 - self.beta
        self.alpha_bar = torch.cumprod(self.alpha, dim=0)

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t) -> torch.Tensor:
        """abar_t for 1-based timestep(s) ``t``."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ScheduleError(f"timestep out of range [1, {self.T}]")
        return self.alpha_bar[t - 1]

    def params(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(T: int = 200, beta_min: float = 1e-4, beta_max: float = 0.04) -> NoiseSchedule:
    """Linear beta schedule from beta_min to beta_max over T steps."""
    if T < 2:
        raise ScheduleError("T must be >= 2")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ScheduleError("need 0 < beta_min <= beta_max < 1")
    beta = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    return NoiseSchedule(beta=beta, beta_min=beta_min, beta_max=beta_max)


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(-1, *([1] * (like.ndim - 1))) if v.ndim else v


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0, eps = torch.as_tensor(x0), torch.as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = _bcast(schedule.alpha_bar_at(t), x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def direct_estimate(z_t, eps_hat, t, schedule: NoiseSchedule) -> torch.Tensor:
    """x_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t); no clamping."""
    z_t, eps_hat = torch.as_tensor(z_t), torch.as_tensor(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != z_t shape {tuple(z_t.shape)}")
    ab = schedule.alpha_bar_at(t)
    if torch.any(ab <= 0):
        raise ScheduleError("alpha_bar_t = 0: direct estimate is singular")
    ab = _bcast(ab, z_t)
    return (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


# ---------------------------------------------------------------- network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Residual multi-head cross-attention from feature pixels to context tokens.

    Masked tokens get exactly zero attention weight. A sample whose context
    is fully masked passes through unchanged.
    """

    def __init__(self, channels: int, d_ctx: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(d_ctx, channels, bias=False)
        self.v = nn.Linear(d_ctx, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, ctx: CompositeContext | None) -> torch.Tensor:
        if ctx is None or not bool(ctx.mask.any()):
            return x
        b, c, hh, ww = x.shape
        nh, dh = self.heads, c // self.heads
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.k(ctx.tokens), self.v(ctx.tokens)
        q = q.reshape(b, -1, nh, dh).transpose(1, 2)
        k = k.reshape(b, -1, nh, dh).transpose(1, 2)
        v = v.reshape(b, -1, nh, dh).transpose(1, 2)
        any_tok = ctx.mask.any(dim=1)
        # fully masked rows attend everywhere and are zeroed below, avoiding NaN softmax
        mask = ctx.mask | ~any_tok[:, None]
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(b, hh * ww, c)
        h = self.out(h).transpose(1, 2).reshape(b, c, hh, ww)
        if not bool(any_tok.all()):
            h = h * any_tok[:, None, None, None].to(h.dtype)
        return x + h


class Denoiser(nn.Module):
    """Small UNet eps(z_t, z_LQ, c, t) with cross-attention at every level."""

    def __init__(self, channels=(32, 64, 64), d_ctx: int = 64, image_channels: int = 3, heads: int = 4):
        super().__init__()
        self.config = {"channels": list(channels), "d_ctx": d_ctx, "image_channels": image_channels, "heads": heads}
        temb = channels[0] * 4
        self.temb_dim = channels[0]
        self.temb_mlp = nn.Sequential(nn.Linear(channels[0], temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(2 * image_channels, channels[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = channels[0]
        skips = []
        for i, ch in enumerate(channels[:-1]):
            self.down_res.append(ResBlock(prev, ch, temb))
            self.down_attn.append(CrossAttention(ch, d_ctx, heads))
            self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            skips.append(ch)
            prev = ch
        mid = channels[-1]
        self.mid_res1 = ResBlock(prev, mid, temb)
        self.mid_attn = CrossAttention(mid, d_ctx, heads)
        self.mid_res2 = ResBlock(mid, mid, temb)
        prev = mid
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for ch in reversed(skips):
            self.up_res.append(ResBlock(prev + ch, ch, temb))
            self.up_attn.append(CrossAttention(ch, d_ctx, heads))
            prev = ch
        self.norm_out = nn.GroupNorm(8, prev)
        self.conv_out = nn.Conv2d(prev, image_channels, 3, padding=1)

    def forward(self, z_t, z_lq, ctx: CompositeContext | None, t):
        temb = self.temb_mlp(timestep_embedding(t, self.temb_dim))
        h = self.conv_in(torch.cat([z_t, z_lq], dim=1))
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = attn(res(h, temb), ctx)
            skips.append(h)
            h = down(h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), ctx), temb)
        for res, attn in zip(self.up_res, self.up_attn):
            h = F.interpolate(h, scale_factor=2.0, mode="nearest")
            h = attn(res(torch.cat([h, skips.pop()], dim=1), temb), ctx)
        return self.conv_out(F.silu(self.norm_out(h)))


class RestorationModel(nn.Module):
    """Denoiser plus the trainable Composite Context projections W_H and W_G."""

    def __init__(self, embedding_dim: int = 64, token_dim: int = 32, d_ctx: int = 64, channels=(32, 64, 64)):
        super().__init__()
        self.config = {"embedding_dim": embedding_dim, "token_dim": token_dim, "d_ctx": d_ctx, "channels": list(channels)}
        self.w_h = nn.Linear(embedding_dim, d_ctx, bias=False)
        self.w_g = nn.Linear(token_dim, d_ctx, bias=False)
        self.unet = Denoiser(channels=channels, d_ctx=d_ctx)
        self.context_calls = 0  # samples that saw at least one attendable context token

    def context(self, x_ref: torch.Tensor, phi_h, phi_g) -> CompositeContext:
        """Composite Context for NCHW reference images in [0, 1]."""
        return build_composite_context(x_ref, phi_h, phi_g, self.w_h, self.w_g)

    def forward(self, z_t, z_lq, ctx: CompositeContext | None, t) -> torch.Tensor:
        """Noise prediction; ``z_lq=None`` and ``ctx=None`` denote the null conditions."""
        if z_lq is None:
            z_lq = torch.zeros_like(z_t)
        if z_lq.shape != z_t.shape:
            raise ValueError(f"z_LQ shape {tuple(z_lq.shape)} != z_t shape {tuple(z_t.shape)}")
        if ctx is not None:
            if ctx.tokens.shape[0] != z_t.shape[0] or ctx.tokens.shape[-1] != self.config["d_ctx"]:
                raise ValueError(f"context shape {tuple(ctx.tokens.shape)} incompatible with batch/d_ctx")
            self.context_calls += int(ctx.mask.any(dim=1).sum())
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        return self.unet(z_t, z_lq, ctx, t)


def predict_noise(model, z_t, z_lq_or_null, ctx_or_null, t) -> torch.Tensor:
    return model(z_t, z_lq_or_null, ctx_or_null, t)


def save_model(model: RestorationModel, path, schedule: NoiseSchedule, step: int, extra: dict | None = None) -> str:
    meta = {
        "schema": 1,
        "model": model.config,
        "schedule": schedule.params(),
        "step": step,
        **(extra or {}),
    }
    return checkpoint.save_checkpoint(path, MODEL_FORMAT, model.state_dict(), meta)


def load_model(path, sha256: str | None = None) -> tuple[RestorationModel, NoiseSchedule, dict]:
    state, meta = checkpoint.load_checkpoint(path, fmt=MODEL_FORMAT, sha256=sha256)
    model = RestorationModel(**meta["model"])
    model.load_state_dict(state)
    model.eval()
    s = meta["schedule"]
    return model, make_schedule(s["T"], s["beta_min"], s["beta_max"]), meta


# ---------------------------------------------------------------- training


@dataclass
class TrainingConfig:
    lam: float = 0.6
    w_hid: float = 0.1
    cond_dropout_p: float = 0.1
    batch_size: int = 32
    learning_rate: float = 1e-4
    steps: int = 3000
    seed: int = 0
    lq_variants: int = 8
    presets: tuple[str, ...] = ("moderate", "severe")
    augment: bool = True
    log_every: int = 100
    extra_identities: int = 0  # procedurally rendered train-only identities added to the manifest's
    extra_seed: int = 20_000
    lr_decay: bool = False  # cosine decay to 10% of learning_rate over the run

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.w_hid < 0:
            raise ValueError("w_hid must be >= 0")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be positive")
        if self.extra_identities < 0:
            raise ValueError("extra_identities must be >= 0")


LOG_COLUMNS = ("step", "l_mae", "l_id_hq", "l_id_ref", "l_hid", "l_total")


@dataclass
class LossLog:
    rows: list[dict] = field(default_factory=list)
    context_steps: int = 0

    def append(self, **row):
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"], *(repr(float(r[c])) for c in LOG_COLUMNS[1:])])

    @classmethod
    def from_csv(cls, path) -> "LossLog":
        with open(path, newline="") as f:
            rows = [
                {k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)
            ]
        return cls(rows=rows)


def _color_jitter(x: torch.Tensor, g: torch.Generator, p: float = 0.5) -> torch.Tensor:
    """Per-sample brightness/contrast/saturation jitter applied with probability p. NCHW in [0, 1]."""
    n = len(x)
    on = (torch.rand(n, generator=g) < p).float()[:, None, None, None]
    bright = 1.0 + 0.2 * (2 * torch.rand(n, 1, 1, 1, generator=g) - 1)
    contrast = 1.0 + 0.2 * (2 * torch.rand(n, 1, 1, 1, generator=g) - 1)
    sat = 1.0 + 0.2 * (2 * torch.rand(n, 1, 1, 1, generator=g) - 1)
    y = x * bright
    mean = y.mean(dim=(1, 2, 3), keepdim=True)
    y = (y - mean) * contrast + mean
    gray = y.mean(dim=1, keepdim=True)
    y = ((y - gray) * sat + gray).clamp(0, 1)
    return on * y + (1 - on) * x


def _flip(x: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
    return torch.where(flags[:, None, None, None], x.flip(-1), x)


class TrainingData:
    """In-memory training tensors: HQ targets, a reference bank and an LQ bank per record.

    Degradation is applied offline with fresh parameters per variant, so every
    record is seen under ``lq_variants * len(presets)`` different LQ inputs. Each
    batch draws the reference uniformly from the record's identity. With
    ``extra_identities`` the manifest's train split is topped up with that many
    procedurally rendered identities (2 targets and 3 references each), which
    never enter evaluation.
    """

    EXTRA_HQ, EXTRA_REFS = 2, 3

    def __init__(self, manifest: DatasetManifest, cfg: TrainingConfig):
        recs = manifest.split("train")
        if not recs:
            raise ValueError("manifest has no train records")
        missing = [r.hq for r in recs if not r.lq]
        if missing:
            raise ValueError(f"train records lack LQ images (run degrade first), e.g. {missing[0]}")
        n_refs = min(len(r.refs) for r in recs)
        hq_imgs = [manifest.load(r.hq) for r in recs]
        ref_imgs = [np.stack([manifest.load(p) for p in r.refs[:n_refs]]) for r in recs]
        stored = [[manifest.load(p) for p in r.lq.values()] for r in recs]
        labels = [r.id_label for r in recs]
        if cfg.extra_identities:
            size = hq_imgs[0].shape[0]
            per = self.EXTRA_HQ + self.EXTRA_REFS
            pool, pool_labels = render_identity_pool(cfg.extra_identities, per, cfg.extra_seed + cfg.seed, size)
            for i in range(cfg.extra_identities):
                photos = pool[i * per:(i + 1) * per]
                refs = photos[self.EXTRA_HQ:]
                refs = refs[np.arange(n_refs) % len(refs)]  # same bank width as the manifest records
                for k in range(self.EXTRA_HQ):
                    hq_imgs.append(photos[k])
                    ref_imgs.append(refs)
                    stored.append([])
                    labels.append(-1 - int(pool_labels[i * per]))
        self.hq = to_tensor(np.stack(hq_imgs))
        self.refs = torch.stack([to_tensor(r) for r in ref_imgs])  # (records, n_refs, C, H, W)
        self.labels = torch.tensor(labels)
        banks = []
        for i, hq in enumerate(hq_imgs):
            variants = list(stored[i])
            for j, name in enumerate(cfg.presets):
                for k in range(cfg.lq_variants):
                    seed = int(np.random.SeedSequence([cfg.seed, i, j, k, 0x7A]).generate_state(1)[0])
                    variants.append(degrade(hq, get_preset(name), seed))
            banks.append(variants)
        if any(not v for v in banks):
            raise ValueError("no LQ variants: extra identities need lq_variants >= 1")
        # equal bank widths for stacking: shorter banks (extra identities have no stored LQ) cycle
        width = max(len(v) for v in banks)
        self.lq = torch.stack([to_tensor(np.stack([v[k % len(v)] for k in range(width)])) for v in banks])

    def __len__(self):
        return len(self.hq)

    def batch(self, n: int, g: torch.Generator, augment: bool):
        idx = torch.randint(len(self), (n,), generator=g)
        var = torch.randint(self.lq.shape[1], (n,), generator=g)
        which = torch.randint(self.refs.shape[1], (n,), generator=g)
        hq, lq, ref = self.hq[idx], self.lq[idx, var], self.refs[idx, which]
        if augment:
            flip = torch.rand(n, generator=g) < 0.5
            hq, lq = _flip(hq, flip), _flip(lq, flip)
            ref = _flip(ref, torch.rand(n, generator=g) < 0.5)
            # one jitter draw shared by HQ and LQ of a sample; REF gets its own
            state = g.get_state()
            hq = _color_jitter(hq, g)
            g.set_state(state)
            lq = _color_jitter(lq, g)
            ref = _color_jitter(ref, g)
        return hq, lq, ref


def train(
    model: RestorationModel,
    manifest: DatasetManifest,
    encoders: tuple,
    schedule: NoiseSchedule,
    cfg: TrainingConfig,
    data: TrainingData | None = None,
    progress=None,
) -> LossLog:
    """Train the denoiser and the context projections; the encoders stay frozen.

    ``encoders`` is (phi_H, phi_G). Returns the per-step LossLog; the model is
    updated in place.
    """
    phi_h, phi_g = encoders[0], encoders[1]
    for enc in (phi_h, phi_g):
        if not getattr(enc, "frozen", False):
            raise ValueError("encoders must be frozen before diffusion training")
    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    data = data or TrainingData(manifest, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=0.1 * cfg.learning_rate)
             if cfg.lr_decay else None)
    lossl = LossLog()
    model.train()
    p = cfg.cond_dropout_p
    for step in range(cfg.steps):
        hq, lq, ref = data.batch(cfg.batch_size, g, cfg.augment)
        n = len(hq)
        t = torch.randint(1, schedule.T + 1, (n,), generator=g)
        eps = torch.randn(hq.shape, generator=g)
        x0 = hq * 2 - 1
        z_t = forward_diffuse(x0, t, eps, schedule).float()
        z_lq = lq * 2 - 1
        drop_lq = torch.rand(n, generator=g) < p
        drop_id = torch.rand(n, generator=g) < p
        drop_gen = torch.rand(n, generator=g) < p
        z_lq = torch.where(drop_lq[:, None, None, None], torch.zeros_like(z_lq), z_lq)
        ctx = model.context(ref, phi_h, phi_g)
        mask = ctx.mask.clone()
        mask[:, 0] &= ~drop_id
        mask[:, 1:] &= ~drop_gen[:, None]
        ctx = CompositeContext(ctx.tokens, mask)
        lossl.context_steps += int(bool(mask.any(dim=1).all()))

        eps_hat = model(z_t, z_lq, ctx, t)
        l_mae = (eps - eps_hat).abs().mean()
        x_hat = direct_estimate(z_t, eps_hat, t, schedule).float()
        l_hid, l_hq, l_ref = hard_example_identity_loss(
            hq, ref, (x_hat + 1) / 2, t, schedule, cfg.lam, phi_h, parts=True
        )
        loss = total_loss(l_mae, l_hid, cfg.w_hid) if cfg.w_hid > 0 else l_mae
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        lossl.append(
            step=step,
            l_mae=l_mae.item(),
            l_id_hq=l_hq.item(),
            l_id_ref=l_ref.item(),
            l_hid=l_hid.item(),
            l_total=loss.item(),
        )
        if progress is not None:
            progress(step, lossl.rows[-1])
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d l_mae %.4f l_id_hq %.4f l_hid %.4f", step, l_mae.item(), l_hq.item(), l_hid.item())
    model.eval()
    return lossl
