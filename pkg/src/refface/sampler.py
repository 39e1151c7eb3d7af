"""Guided reverse diffusion with one or many reference faces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, direct_estimate, predict_noise
from .encoders import CompositeContext, mask_components, to_tensor


class GuidanceConfigError(ValueError):
    pass


@dataclass
class GuidanceConfig:
    s_i: float = 1.2
    s_c: float = 1.2
    num_steps: int | None = None  # None -> every timestep of the schedule
    component_mask: tuple[bool, bool] = (True, True)  # (identity, general)
    seed: int = 0
    clip_denoised: bool = True


@dataclass
class ReferenceSet:
    contexts: list[CompositeContext] = field(default_factory=list)

    def __post_init__(self):
        if self.contexts:
            shape = self.contexts[0].tokens.shape
            for c in self.contexts[1:]:
                if c.tokens.shape != shape:
                    raise GuidanceConfigError("all reference contexts must share length and width")

    def __len__(self):
        return len(self.contexts)

    def masked(self, use_identity: bool, use_general: bool) -> "ReferenceSet":
        return ReferenceSet([mask_components(c, use_identity, use_general) for c in self.contexts])


def encode_references(model, refs, phi_h, phi_g) -> ReferenceSet:
    """Build one context per reference slot.

    ``refs`` is a list over reference slots, each a batch of images (B, H, W, 3)
    in [0, 1] or NCHW tensors, one image per LQ input.
    """
    contexts = []
    for batch in refs:
        x = batch if isinstance(batch, torch.Tensor) else to_tensor(batch)
        with torch.no_grad():
            contexts.append(model.context(x, phi_h, phi_g))
    return ReferenceSet(contexts)


def _combine(uncond, lq_only, cond, s_i: float, s_c: float):
    out = None
    for coef, term in ((1.0 - s_i, uncond), (s_i - s_c, lq_only), (s_c, cond)):
        if coef == 0.0:
            continue  # a zero-weighted branch adds only signed zeros
        out = coef * term if out is None else out + coef * term
    return out if out is not None else torch.zeros_like(cond)


def _branch(model, z_t, z_lq, ctx, t, coef):
    return predict_noise(model, z_t, z_lq, ctx, t) if coef != 0.0 else None


def cfg_epsilon(model, z_t, z_lq, c, t, s_i: float, s_c: float):
    """(1 - s_i) eps(z, 0, 0) + (s_i - s_c) eps(z, lq, 0) + s_c eps(z, lq, c)."""
    uncond = _branch(model, z_t, None, None, t, 1.0 - s_i)
    lq_only = _branch(model, z_t, z_lq, None, t, s_i - s_c)
    cond = _branch(model, z_t, z_lq, c, t, s_c)
    return _combine(uncond, lq_only, cond, s_i, s_c)


def ensemble_mean(preds: list[torch.Tensor]) -> torch.Tensor:
    """Mean over references, summed in sorted order so any permutation gives identical bits."""
    if len(preds) == 1:
        return preds[0]
    stacked = torch.stack(preds, dim=0)
    return stacked.sort(dim=0).values.sum(dim=0) / len(preds)


def multi_ref_epsilon(model, z_t, z_lq, refs: ReferenceSet, t, s_i: float, s_c: float):
    """Dual-scale guidance whose conditional branch averages over N reference contexts."""
    contexts = refs.contexts if isinstance(refs, ReferenceSet) else list(refs)
    if not contexts:
        raise GuidanceConfigError("reference set is empty")
    uncond = _branch(model, z_t, None, None, t, 1.0 - s_i)
    lq_only = _branch(model, z_t, z_lq, None, t, s_i - s_c)
    cond = None
    if s_c != 0.0:
        cond = ensemble_mean([predict_noise(model, z_t, z_lq, c, t) for c in contexts])
    return _combine(uncond, lq_only, cond, s_i, s_c)


def timesteps(schedule: NoiseSchedule, num_steps: int | None) -> list[int]:
    n = schedule.T if num_steps is None else num_steps
    if not 1 <= n <= schedule.T:
        raise GuidanceConfigError(f"num_steps must lie in [1, {schedule.T}], got {n}")
    return sorted({int(round(v)) for v in np.linspace(1, schedule.T, n)}, reverse=True)


@torch.no_grad()
def restore(
    model,
    x_lq,
    refs: ReferenceSet,
    schedule: NoiseSchedule,
    gcfg: GuidanceConfig,
    trajectory: list | None = None,
    color_fix_output: bool = False,
) -> torch.Tensor:
    """Ancestral sampling conditioned on ``x_lq`` (NCHW or NHWC in [0, 1]) and references.

    Returns NCHW in [0, 1]. Every 10th latent is appended to ``trajectory`` if given.
    """
    if isinstance(x_lq, np.ndarray):
        x_lq = to_tensor(x_lq)
    refs = refs.masked(*gcfg.component_mask)
    steps = timesteps(schedule, gcfg.num_steps)
    g = torch.Generator().manual_seed(gcfg.seed)
    z_lq = x_lq * 2 - 1
    z = torch.randn(z_lq.shape, generator=g)
    ab = schedule.alpha_bar
    for k, t in enumerate(steps):
        t_prev = steps[k + 1] if k + 1 < len(steps) else 0
        ab_t = ab[t - 1]
        ab_prev = ab[t_prev - 1] if t_prev > 0 else torch.tensor(1.0, dtype=ab.dtype)
        eps = multi_ref_epsilon(model, z, z_lq, refs, t, gcfg.s_i, gcfg.s_c)
        x0 = direct_estimate(z, eps, t, schedule)
        if gcfg.clip_denoised:
            x0 = x0.clamp(-1, 1)
        beta = 1.0 - ab_t / ab_prev
        c0 = (ab_prev.sqrt() * beta / (1 - ab_t)).item()
        ct = ((1 - beta).sqrt() * (1 - ab_prev) / (1 - ab_t)).item()
        mean = c0 * x0 + ct * z
        if t_prev > 0:
            var = (beta * (1 - ab_prev) / (1 - ab_t)).item()
            z = (mean + var**0.5 * torch.randn(z.shape, generator=g)).float()
        else:
            z = mean.float()
        if trajectory is not None and k % 10 == 0:
            trajectory.append(z.clone())
    out = ((z + 1) / 2).clamp(0, 1)
    if color_fix_output:
        out = color_fix(out, x_lq)
    return out


def color_fix(output, x_lq, std_floor: float = 1e-6, clamp: bool = True):
    """Match per-channel mean and std of ``output`` to ``x_lq`` (AdaIN-style), NCHW."""
    output = torch.as_tensor(output)
    x_lq = torch.as_tensor(x_lq, dtype=output.dtype)
    if output.shape != x_lq.shape:
        raise ValueError("output and x_LQ must share a shape")
    dims = (-2, -1)
    mu_o, sd_o = output.mean(dims, keepdim=True), output.std(dims, keepdim=True, unbiased=False)
    mu_l, sd_l = x_lq.mean(dims, keepdim=True), x_lq.std(dims, keepdim=True, unbiased=False)
    sd_o = sd_o.clamp_min(std_floor)
    # std_floor on the target too: a flat LQ channel only sets the mean
    scale = torch.where(sd_l > std_floor, sd_l / sd_o, torch.ones_like(sd_l))
    fixed = (output - mu_o) * scale + mu_l
    return fixed.clamp(0, 1) if clamp else fixed
