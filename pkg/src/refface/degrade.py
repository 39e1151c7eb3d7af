"""Second-order synthetic degradation: (blur -> downscale -> noise -> compress -> upscale) x 2."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from .toyfaces import ConfigError, DatasetManifest, Record, save_image

# IJG luminance table; the block-DCT quantizer scales it linearly by quality
JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
MAX_QUALITY = 100


@dataclass(frozen=True)
class DegradationPreset:
    name: str
    blur_sigma_range: tuple[float, float]
    downscale_range: tuple[float, float]
    noise_sigma_range: tuple[float, float]
    compression_quality_range: tuple[int, int]
    rounds: int = 2

    def __post_init__(self):
        for field_name in (
            "blur_sigma_range",
            "downscale_range",
            "noise_sigma_range",
            "compression_quality_range",
        ):
            lo, hi = getattr(self, field_name)
            if lo > hi:
                raise ConfigError(f"{self.name}.{field_name}: lo > hi")
        lo, hi = self.downscale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"{self.name}.downscale_range must lie in (0, 1]")
        lo, hi = self.compression_quality_range
        if not 1 <= lo <= hi <= MAX_QUALITY:
            raise ConfigError(f"{self.name}.compression_quality_range must lie in [1, 100]")
        if self.blur_sigma_range[0] < 0 or self.noise_sigma_range[0] < 0:
            raise ConfigError(f"{self.name}: negative sigma")
        if self.rounds != 2:
            raise ConfigError("second-order degradation uses exactly 2 rounds")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationPreset":
        return cls(
            name=d["name"],
            blur_sigma_range=tuple(d["blur_sigma_range"]),
            downscale_range=tuple(d["downscale_range"]),
            noise_sigma_range=tuple(d["noise_sigma_range"]),
            compression_quality_range=tuple(int(q) for q in d["compression_quality_range"]),
            rounds=int(d.get("rounds", 2)),
        )


MODERATE = DegradationPreset(
    name="moderate",
    blur_sigma_range=(0.5, 1.5),
    downscale_range=(0.5, 1.0),
    noise_sigma_range=(0.0, 0.03),
    compression_quality_range=(60, 95),
)
SEVERE = DegradationPreset(
    name="severe",
    blur_sigma_range=(1.5, 3.0),
    downscale_range=(0.25, 0.5),
    noise_sigma_range=(0.03, 0.08),
    compression_quality_range=(20, 50),
)
IDENTITY = DegradationPreset(
    name="identity",
    blur_sigma_range=(0.0, 0.0),
    downscale_range=(1.0, 1.0),
    noise_sigma_range=(0.0, 0.0),
    compression_quality_range=(MAX_QUALITY, MAX_QUALITY),
)
PRESETS = {p.name: p for p in (MODERATE, SEVERE)}


def get_preset(name_or_preset) -> DegradationPreset:
    if isinstance(name_or_preset, DegradationPreset):
        return name_or_preset
    try:
        return PRESETS[name_or_preset]
    except KeyError:
        raise ConfigError(f"unknown preset {name_or_preset!r}; expected one of {sorted(PRESETS)}")


def _resize(img: np.ndarray, shape: tuple[int, int], order: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == tuple(shape):
        return img
    factors = (shape[0] / h, shape[1] / w, 1.0)
    out = ndimage.zoom(img, factors, order=order, mode="nearest", grid_mode=True)
    assert out.shape[:2] == tuple(shape), (out.shape, shape)
    return out


def quantization_table(quality: int) -> np.ndarray:
    """Per-frequency step size on a [0, 1] intensity scale; zero at quality 100."""
    strength = (MAX_QUALITY - quality) / 50.0
    return JPEG_LUMA * strength / 255.0


def block_dct_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """JPEG-like 8x8 block-DCT quantization applied to every channel independently."""
    q = quantization_table(quality)
    if not np.any(q):
        return img.copy()
    h, w, c = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = x.shape[:2]
    blocks = x.reshape(H // 8, 8, W // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    # ortho DCT of a block has DC = 8 * mean; the IJG table assumes that scale
    coef = np.round(coef / q) * q
    blocks = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    x = blocks.transpose(0, 3, 1, 4, 2).reshape(H, W, c)
    return x[:h, :w]


def degrade_round(img: np.ndarray, rng: np.random.Generator, preset: DegradationPreset) -> np.ndarray:
    h, w = img.shape[:2]
    sigma = rng.uniform(*preset.blur_sigma_range)
    scale = rng.uniform(*preset.downscale_range)
    noise = rng.uniform(*preset.noise_sigma_range)
    lo, hi = preset.compression_quality_range
    quality = int(rng.integers(lo, hi + 1))

    x = img
    if sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")
    small = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    x = _resize(x, small, order=1)
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    x = block_dct_compress(x, quality)
    x = _resize(x, (h, w), order=3)
    return np.clip(x, 0.0, 1.0)


def degrade(x_hq: np.ndarray, preset, seed: int) -> np.ndarray:
    """Degrade an HxWxC image in [0, 1]; output has the same shape, values in [0, 1]."""
    preset = get_preset(preset)
    x = np.asarray(x_hq, dtype=np.float64)
    if x.min() < 0 or x.max() > 1:
        raise ValueError("x_HQ must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDE9]))
    for _ in range(preset.rounds):
        x = degrade_round(x, rng, preset)
    return x


def record_seed(seed: int, index: int, preset_name: str) -> int:
    tag = sum(ord(ch) * 31**i for i, ch in enumerate(preset_name)) % (2**31)
    return int(np.random.SeedSequence([seed, index, tag]).generate_state(1)[0])


def degrade_batch(manifest: DatasetManifest, preset, seed: int) -> DatasetManifest:
    """Write one LQ image per record for ``preset``; references are left untouched."""
    preset = get_preset(preset)
    records = []
    for i, rec in enumerate(manifest.records):
        hq = manifest.load(rec.hq)  # raises FileNotFoundError naming the path
        lq = degrade(hq, preset, record_seed(seed, i, preset.name))
        rel = str(Path(rec.hq).parent / f"lq-{preset.name}_{Path(rec.hq).stem.split('_')[-1]}.png")
        save_image(manifest.path(rel), lq)
        records.append(
            Record(
                id_label=rec.id_label,
                split=rec.split,
                hq=rec.hq,
                refs=list(rec.refs),
                lq={**rec.lq, preset.name: rel},
                hq_nuisance=rec.hq_nuisance,
            )
        )
    out = DatasetManifest(
        root=manifest.root,
        records=records,
        identities=manifest.identities,
        config={**manifest.config, "degrade_seed": seed},
    )
    out.save()
    return out
