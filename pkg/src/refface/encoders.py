"""Frozen reference-face encoders and Composite Context assembly.

Two representation models stand in for pretrained face networks:

* ``IdentityEncoder`` -- a small CNN trained with an additive angular margin
  (ArcFace-style) loss; outputs unit-norm identity embeddings.
* ``GeneralEncoder`` -- a patch tokenizer plus two self-attention blocks,
  pretrained by masked image modeling; outputs ``1 + (size/patch)**2`` tokens.

Both are pretrained on a procedurally generated identity pool that is disjoint
from the dataset, then frozen. The held-out checks run on the dataset images.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .toyfaces import DatasetManifest, render_identity_pool

log = logging.getLogger(__name__)

IDENTITY_FORMAT = "refface.encoder.identity"
GENERAL_FORMAT = "refface.encoder.general"


class TrainingFailure(RuntimeError):
    pass


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) array in [0, 1] -> float32 NCHW tensor."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    module.frozen = True
    return module


class IdentityEncoder(nn.Module):
    def __init__(self, size: int = 32, width: int = 32, embedding_dim: int = 64):
        super().__init__()
        self.config = {"size": size, "width": width, "embedding_dim": embedding_dim}
        self.embedding_dim = embedding_dim
        self.frozen = False
        w = width
        chans = [(3, w, 1), (w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 4 * w, 2)]
        layers = []
        for cin, cout, stride in chans:
            layers += [
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(8, cout),
                nn.SiLU(),
            ]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(4 * w * (size // 8) ** 2, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: NCHW in [0, 1] -> unit-norm (N, embedding_dim)."""
        h = self.features(x * 2.0 - 1.0)
        return F.normalize(self.head(h.flatten(1)), dim=1)


class GeneralEncoder(nn.Module):
    def __init__(self, size: int = 32, patch: int = 8, token_dim: int = 32, depth: int = 2, heads: int = 4):
        super().__init__()
        if size % patch:
            raise ValueError("size must be a multiple of patch")
        self.config = {"size": size, "patch": patch, "token_dim": token_dim, "depth": depth, "heads": heads}
        self.patch = patch
        self.n_patches = (size // patch) ** 2
        self.token_count = 1 + self.n_patches
        self.token_dim = token_dim
        self.frozen = False
        self.embed = nn.Conv2d(3, token_dim, patch, stride=patch)
        self.cls = nn.Parameter(torch.zeros(1, 1, token_dim))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, token_dim))
        self.pos = nn.Parameter(torch.randn(1, self.token_count, token_dim) * 0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                token_dim,
                heads,
                dim_feedforward=2 * token_dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(token_dim)
        # reconstruction head, used only during masked-image pretraining
        self.decoder = nn.Linear(token_dim, patch * patch * 3)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        p = self.patch
        n, c, h, w = x.shape
        x = x.reshape(n, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(n, (h // p) * (w // p), p * p * c)

    def encode(self, x: torch.Tensor, patch_mask: torch.Tensor | None = None) -> torch.Tensor:
        tok = self.embed(x * 2.0 - 1.0).flatten(2).transpose(1, 2)
        if patch_mask is not None:
            tok = torch.where(patch_mask[..., None], self.mask_token.expand_as(tok), tok)
        tok = torch.cat([self.cls.expand(len(tok), -1, -1), tok], dim=1) + self.pos
        for blk in self.blocks:
            tok = blk(tok)
        return self.norm(tok)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: NCHW in [0, 1] -> (N, token_count, token_dim)."""
        return self.encode(x)


def _jitter(x: torch.Tensor, g: torch.Generator, strength: float = 0.1) -> torch.Tensor:
    n = len(x)
    gain = 1.0 + strength * (2 * torch.rand(n, 1, 1, 1, generator=g) - 1)
    bias = 0.5 * strength * (2 * torch.rand(n, 3, 1, 1, generator=g) - 1)
    return (x * gain + bias).clamp(0, 1)


def manifest_images(manifest: DatasetManifest, split: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All distinct HQ and reference images of a manifest, with their identity labels."""
    seen, images, labels = set(), [], []
    recs = manifest.records if split is None else manifest.split(split)
    for rec in recs:
        for rel in [rec.hq, *rec.refs]:
            if rel in seen:
                continue
            seen.add(rel)
            images.append(manifest.load(rel))
            labels.append(rec.id_label)
    return np.stack(images).astype(np.float32), np.asarray(labels)


@torch.no_grad()
def identity_gap(encoder: IdentityEncoder, images: np.ndarray, labels: np.ndarray) -> float:
    """Mean same-identity cosine minus mean different-identity cosine (distinct images only)."""
    emb = encoder(to_tensor(images))
    cos = emb @ emb.T
    lab = torch.as_tensor(labels)
    same = lab[:, None] == lab[None, :]
    off_diag = ~torch.eye(len(lab), dtype=torch.bool)
    return float(cos[same & off_diag].mean() - cos[~same].mean())


def _pool(manifest: DatasetManifest, seed: int, n_identities: int, images_per_identity: int):
    size = int(manifest.config.get("size", 32))
    # pool identities come from their own seed stream, disjoint from the dataset build
    return render_identity_pool(n_identities, images_per_identity, seed=10_000 + seed, size=size)


def train_identity_encoder(
    manifest: DatasetManifest,
    margin: float = 0.3,
    scale: float = 16.0,
    steps: int = 400,
    seed: int = 0,
    width: int = 32,
    embedding_dim: int = 64,
    pool_identities: int = 160,
    pool_images: int = 3,
    batch_size: int = 64,
    lr: float = 2e-3,
    min_gap: float = 0.3,
) -> IdentityEncoder:
    """Pretrain an identity encoder with an additive angular margin loss, then freeze it.

    Raises TrainingFailure if the same-vs-different identity cosine gap on the
    manifest's images (never seen during pretraining) is below ``min_gap``.
    """
    if len(manifest.id_labels()) < 2:
        raise ValueError("manifest needs at least 2 identities")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    images, labels = _pool(manifest, seed, pool_identities, pool_images)
    x_all = to_tensor(images)
    y_all = torch.as_tensor(labels)
    size = x_all.shape[-1]

    enc = IdentityEncoder(size=size, width=width, embedding_dim=embedding_dim)
    centers = nn.Parameter(torch.randn(pool_identities, embedding_dim) * 0.01)
    opt = torch.optim.Adam([*enc.parameters(), centers], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    cos_m, sin_m = math.cos(margin), math.sin(margin)
    enc.train()
    for step in range(steps):
        idx = torch.randint(len(x_all), (batch_size,), generator=g)
        x, y = _jitter(x_all[idx], g), y_all[idx]
        emb = enc(x)
        cos = (emb @ F.normalize(centers, dim=1).T).clamp(-1 + 1e-7, 1 - 1e-7)
        sin = torch.sqrt(1.0 - cos**2)
        target = cos * cos_m - sin * sin_m  # cos(theta + m)
        onehot = F.one_hot(y, pool_identities).bool()
        logits = scale * torch.where(onehot, target, cos)
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("identity encoder step %d loss %.4f", step, loss.item())
    freeze(enc)
    enc.seed = seed
    held_x, held_y = manifest_images(manifest)
    gap = identity_gap(enc, held_x, held_y)
    enc.heldout_gap = gap
    log.info("identity encoder held-out gap %.3f", gap)
    if gap < min_gap:
        raise TrainingFailure(f"identity encoder gap {gap:.3f} < required {min_gap}")
    return enc


def train_eval_identity_encoder(manifest: DatasetManifest, seed: int = 1, **kwargs) -> IdentityEncoder:
    """Independent identity encoder used only for evaluation (wider, separately seeded)."""
    opts = {"width": 48, "margin": 0.4, "scale": 20.0, **kwargs}
    return train_identity_encoder(manifest, seed=seed + 7919, **opts)


@torch.no_grad()
def masked_reconstruction_error(
    enc: GeneralEncoder, images: np.ndarray, mask_ratio: float, seed: int
) -> tuple[float, float]:
    """(model MSE, per-channel-mean baseline MSE) on masked patches."""
    g = torch.Generator().manual_seed(seed)
    x = to_tensor(images)
    target = enc.patchify(x)
    mask = _patch_mask(len(x), enc.n_patches, mask_ratio, g)
    pred = enc.decoder(enc.encode(x, mask)[:, 1:])
    err = ((pred - target) ** 2)[mask].mean()
    # baseline: every masked pixel predicted by the image's visible per-channel mean
    c = x.shape[1]
    vis = target.reshape(len(x), enc.n_patches, -1, c)
    vis_mean = (vis * (~mask)[..., None, None]).sum((1, 2)) / ((~mask).sum(1)[:, None] * vis.shape[2])
    base_pred = vis_mean[:, None, None, :].expand_as(vis).reshape_as(target)
    base = ((base_pred - target) ** 2)[mask].mean()
    return float(err), float(base)


def _patch_mask(n: int, n_patches: int, ratio: float, g: torch.Generator) -> torch.Tensor:
    k = max(1, int(round(n_patches * ratio)))
    order = torch.rand(n, n_patches, generator=g).argsort(dim=1)
    mask = torch.zeros(n, n_patches, dtype=torch.bool)
    mask.scatter_(1, order[:, :k], True)
    return mask


def train_general_encoder(
    manifest: DatasetManifest,
    mask_ratio: float = 0.5,
    steps: int = 1500,
    seed: int = 0,
    patch: int = 8,
    token_dim: int = 32,
    pool_identities: int = 160,
    pool_images: int = 3,
    batch_size: int = 64,
    lr: float = 2e-3,
) -> GeneralEncoder:
    """Masked-image-modeling pretraining of the general encoder, then freeze it."""
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    images, _ = _pool(manifest, seed + 1, pool_identities, pool_images)
    x_all = to_tensor(images)
    enc = GeneralEncoder(size=x_all.shape[-1], patch=patch, token_dim=token_dim)
    opt = torch.optim.AdamW(enc.parameters(), lr=lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    enc.train()
    for step in range(steps):
        idx = torch.randint(len(x_all), (batch_size,), generator=g)
        x = _jitter(x_all[idx], g)
        mask = _patch_mask(len(x), enc.n_patches, mask_ratio, g)
        pred = enc.decoder(enc.encode(x, mask)[:, 1:])
        loss = ((pred - enc.patchify(x)) ** 2)[mask].mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("general encoder step %d loss %.4f", step, loss.item())
    freeze(enc)
    enc.seed = seed
    held_x, _ = manifest_images(manifest)
    err, base = masked_reconstruction_error(enc, held_x, mask_ratio, seed)
    enc.heldout_mse = (err, base)
    log.info("general encoder held-out masked MSE %.4f (baseline %.4f)", err, base)
    if not err < base:
        raise TrainingFailure(f"masked reconstruction MSE {err:.4f} not below baseline {base:.4f}")
    return enc


# ---------------------------------------------------------------- persistence


def save_encoder(enc: nn.Module, path: str | Path) -> str:
    fmt = IDENTITY_FORMAT if isinstance(enc, IdentityEncoder) else GENERAL_FORMAT
    meta = {"config": enc.config, "seed": getattr(enc, "seed", None)}
    return checkpoint.save_checkpoint(path, fmt, enc.state_dict(), meta)


def load_encoder(path: str | Path, sha256: str | None = None) -> nn.Module:
    header = checkpoint.read_header(path)
    fmt = header["format"]
    state, meta = checkpoint.load_checkpoint(path, fmt=fmt, sha256=sha256)
    if fmt == IDENTITY_FORMAT:
        enc = IdentityEncoder(**meta["config"])
    elif fmt == GENERAL_FORMAT:
        enc = GeneralEncoder(**meta["config"])
    else:
        raise checkpoint.CheckpointError(f"{path}: not an encoder checkpoint ({fmt})")
    enc.load_state_dict(state)
    enc.seed = meta.get("seed")
    return freeze(enc)


# ---------------------------------------------------------------- composite context


def sinusoidal_pe(length: int, dim: int) -> torch.Tensor:
    """Transformer positional encoding: PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(.)."""
    if dim % 2:
        raise ValueError("dim must be even")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.float()


@dataclass
class CompositeContext:
    """Projected reference tokens: identity token at position 0, general tokens after it."""

    tokens: torch.Tensor  # (B, 1 + P, d_ctx)
    mask: torch.Tensor  # (B, 1 + P) bool; True = attendable

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def spans(self) -> dict[str, tuple[int, int]]:
        return {"identity": (0, 1), "general": (1, self.length)}

    def select(self, index) -> "CompositeContext":
        return CompositeContext(self.tokens[index], self.mask[index])

    def compact(self) -> "CompositeContext":
        """Physically drop masked tokens (requires the same mask on every batch row)."""
        if not torch.equal(self.mask, self.mask[:1].expand_as(self.mask)):
            raise ValueError("compact() needs a batch-uniform mask")
        keep = self.mask[0]
        return CompositeContext(self.tokens[:, keep], self.mask[:, keep])

    @staticmethod
    def null(batch: int, length: int, dim: int) -> "CompositeContext":
        return CompositeContext(
            torch.zeros(batch, length, dim), torch.zeros(batch, length, dtype=torch.bool)
        )


def _project(w, x: torch.Tensor) -> torch.Tensor:
    if isinstance(w, nn.Module):
        return w(x)
    return x @ torch.as_tensor(w, dtype=x.dtype).T


def _out_dim(w) -> int:
    return w.out_features if isinstance(w, nn.Linear) else int(torch.as_tensor(w).shape[0])


def _in_dim(w) -> int:
    return w.in_features if isinstance(w, nn.Linear) else int(torch.as_tensor(w).shape[1])


def build_composite_context(x_ref: torch.Tensor, phi_h, phi_g, w_h, w_g) -> CompositeContext:
    """Concat[W_H phi_H(x), W_G phi_G(x)] + sinusoidal positions, all tokens unmasked.

    ``x_ref`` is NCHW in [0, 1]. ``w_h``/``w_g`` are bias-free linear maps or
    (d_ctx, d_in) matrices.
    """
    if x_ref.ndim == 3:
        x_ref = x_ref[None]
    d_ctx = _out_dim(w_h)
    if _out_dim(w_g) != d_ctx:
        raise ValueError(f"W_H and W_G map to different widths ({d_ctx} vs {_out_dim(w_g)})")
    with torch.no_grad():  # encoders are frozen; W_H and W_G still receive gradient
        ident = phi_h(x_ref)
        general = phi_g(x_ref)
    if ident.shape[-1] != _in_dim(w_h):
        raise ValueError(f"W_H expects {_in_dim(w_h)}-d input, identity embedding is {ident.shape[-1]}-d")
    if general.shape[-1] != _in_dim(w_g):
        raise ValueError(f"W_G expects {_in_dim(w_g)}-d input, general tokens are {general.shape[-1]}-d")
    tokens = torch.cat([_project(w_h, ident)[:, None, :], _project(w_g, general)], dim=1)
    tokens = tokens + sinusoidal_pe(tokens.shape[1], d_ctx).to(tokens.dtype)
    mask = torch.ones(tokens.shape[:2], dtype=torch.bool)
    return CompositeContext(tokens, mask)


def mask_components(ctx: CompositeContext, use_identity: bool, use_general: bool) -> CompositeContext:
    """Disable whole components by clearing their mask span; tokens are left as is."""
    mask = ctx.mask.clone()
    if not use_identity:
        mask[:, 0:1] = False
    if not use_general:
        mask[:, 1:] = False
    return replace(ctx, mask=mask)
