"""Timestep-scaled identity loss, hard-example identity loss and the total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class LossConfigError(ValueError):
    pass


@dataclass
class LossTerms:
    l_mae: float
    l_id_hq: float
    l_id_ref: float
    l_hid: float
    l_total: float


def _sqrt_alpha_bar(t, schedule, like: torch.Tensor) -> torch.Tensor:
    ab = schedule.alpha_bar_at(t).to(like.dtype)
    return ab.sqrt().reshape(-1)


def _embed_target(phi_h, x_target: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return phi_h(x_target).detach()


def identity_loss_from_embeddings(e_target, e_hat, sqrt_ab) -> torch.Tensor:
    """Per-sample sqrt(abar_t) * (1 - cos<e_target, e_hat>)."""
    cos = torch.nn.functional.cosine_similarity(e_target, e_hat, dim=1)
    return sqrt_ab * (1.0 - cos)


def identity_loss(x_target, x_hat, t, schedule, phi_h, reduction: str = "mean") -> torch.Tensor:
    """sqrt(abar_t) * (1 - cos<phi_H(x_target), phi_H(x_hat)>).

    Images are NCHW on the encoder's [0, 1] scale. Only ``x_hat`` carries
    gradient; the target embedding is a constant.
    """
    per = identity_loss_from_embeddings(
        _embed_target(phi_h, x_target), phi_h(x_hat), _sqrt_alpha_bar(t, schedule, x_hat)
    )
    return per.mean() if reduction == "mean" else per


def hard_example_identity_loss(
    x_hq, x_ref, x_hat, t, schedule, lam: float, phi_h, reduction: str = "mean", parts: bool = False
):
    """(1 - lam) * L_ID(x_HQ, x_hat) + lam * L_ID(x_REF, x_hat).

    With ``parts=True`` returns (l_hid, l_id_hq, l_id_ref).
    """
    if not 0.0 <= lam <= 1.0:
        raise LossConfigError(f"lambda must lie in [0, 1], got {lam}")
    sqrt_ab = _sqrt_alpha_bar(t, schedule, x_hat)
    e_hat = phi_h(x_hat)
    l_hq = identity_loss_from_embeddings(_embed_target(phi_h, x_hq), e_hat, sqrt_ab)
    l_ref = identity_loss_from_embeddings(_embed_target(phi_h, x_ref), e_hat, sqrt_ab)
    l_hid = (1.0 - lam) * l_hq + lam * l_ref
    if reduction == "mean":
        l_hid, l_hq, l_ref = l_hid.mean(), l_hq.mean(), l_ref.mean()
    return (l_hid, l_hq, l_ref) if parts else l_hid


def total_loss(l_mae, l_hid, w_hid: float):
    if w_hid < 0:
        raise LossConfigError("w_HID must be >= 0")
    return l_mae + w_hid * l_hid


def plateau_diagnostic(log, window_frac: float = 0.2, head_frac: float = 0.05) -> dict:
    """Time-averaged identity terms over the final ``window_frac`` of training.

    Also reports the mean of the HQ identity term over the first ``head_frac``
    of steps so a decay-then-plateau shape can be checked.
    """
    rows = log.rows if hasattr(log, "rows") else log
    if len(rows) < 100:
        raise ValueError("plateau diagnostic needs at least 100 logged steps")
    l_id = np.array([r["l_id_hq"] for r in rows], dtype=np.float64)
    l_hid = np.array([r["l_hid"] for r in rows], dtype=np.float64)
    n = len(rows)
    tail = max(1, int(round(n * window_frac)))
    head = max(1, int(round(n * head_frac)))
    tail_id, tail_hid = l_id[-tail:].mean(), l_hid[-tail:].mean()
    head_id = l_id[:head].mean()
    return {
        "l_id_hq": float(tail_id),
        "l_hid": float(tail_hid),
        "ratio": float(tail_hid / tail_id) if tail_id > 0 else float("inf"),
        "head_l_id_hq": float(head_id),
        "decay": float(tail_id / head_id) if head_id > 0 else float("inf"),
        "window": tail,
        "head_window": head,
    }
