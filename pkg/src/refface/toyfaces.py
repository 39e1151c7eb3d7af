"""Procedural toy faces with explicit, controllable identity.

An identity is a small parameter vector (face geometry, region colors, moles,
hair coverage). Each photo of that identity adds independent nuisance
variation (pose, rotation, lighting, expression, background). Everything is a
pure function of integer seeds, so a whole corpus can be rebuilt bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

GEOMETRY_NAMES = (
    "aspect",
    "eye_spacing",
    "eye_size",
    "mouth_width",
    "mouth_curvature",
    "nose_length",
    "brow_angle",
)
ALBEDO_NAMES = (
    "skin_tone",
    "skin_red",
    "hair_light",
    "hair_hue",
    "iris",
    "lips",
    "shirt_hue",
    "shirt_light",
)
MIN_SEPARATION = 0.05
MAX_ATTEMPTS = 1000
SIZES = (32, 48, 64)
SUPERSAMPLE = 4


class GenerationError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IdentitySpec:
    id_label: int
    geometry: tuple[float, ...]
    albedo: tuple[float, ...]
    marks: tuple[tuple[float, float, float], ...]  # (x, y, radius)
    hair_region: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IdentitySpec":
        return cls(
            id_label=int(d["id_label"]),
            geometry=tuple(float(v) for v in d["geometry"]),
            albedo=tuple(float(v) for v in d["albedo"]),
            marks=tuple(tuple(float(v) for v in m) for m in d["marks"]),
            hair_region=float(d["hair_region"]),
        )


@dataclass(frozen=True)
class NuisanceSpec:
    pose_shift: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    illumination: float = 1.0
    expression: float = 0.0
    background: float = 0.5

    def __post_init__(self):
        dx, dy = self.pose_shift
        if not (abs(dx) <= 0.1 and abs(dy) <= 0.1):
            raise ConfigError(f"pose_shift out of range: {self.pose_shift}")
        if not -15.0 <= self.rotation <= 15.0:
            raise ConfigError(f"rotation out of range: {self.rotation}")
        if not 0.7 <= self.illumination <= 1.3:
            raise ConfigError(f"illumination out of range: {self.illumination}")
        if not 0.0 <= self.expression <= 1.0:
            raise ConfigError(f"expression out of range: {self.expression}")
        if not 0.0 <= self.background <= 1.0:
            raise ConfigError(f"background out of range: {self.background}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NuisanceSpec":
        return cls(
            pose_shift=tuple(float(v) for v in d["pose_shift"]),
            rotation=float(d["rotation"]),
            illumination=float(d["illumination"]),
            expression=float(d["expression"]),
            background=float(d["background"]),
        )


@dataclass
class SamplePair:
    x_hq: np.ndarray
    x_ref_list: list[np.ndarray]
    identity: int
    preset: str | None = None
    x_lq: np.ndarray | None = None

    def __post_init__(self):
        shapes = {self.x_hq.shape, *(r.shape for r in self.x_ref_list)}
        if self.x_lq is not None:
            shapes.add(self.x_lq.shape)
        if len(shapes) != 1:
            raise ValueError(f"images in a sample must share one shape, got {shapes}")


def _rng(*words: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(w) for w in words]))


def _draw_identity(rng: np.random.Generator, id_label: int) -> IdentitySpec:
    geometry = tuple(float(v) for v in rng.uniform(0.0, 1.0, len(GEOMETRY_NAMES)))
    albedo = tuple(float(v) for v in rng.uniform(0.0, 1.0, len(ALBEDO_NAMES)))
    n_marks = int(rng.integers(0, 4))
    marks = []
    for _ in range(n_marks):
        # cheeks and chin; keeps moles on skin rather than in the eyes or hair
        x = float(rng.choice([rng.uniform(0.18, 0.38), rng.uniform(0.62, 0.82)]))
        y = float(rng.uniform(0.5, 0.8))
        marks.append((x, y, float(rng.uniform(0.03, 0.05))))
    return IdentitySpec(
        id_label=id_label,
        geometry=geometry,
        albedo=albedo,
        marks=tuple(marks),
        hair_region=float(rng.uniform(0.0, 1.0)),
    )


def geometry_distance(a: IdentitySpec, b: IdentitySpec) -> float:
    return float(np.max(np.abs(np.subtract(a.geometry, b.geometry))))


def sample_identity(
    seed: int, existing: Sequence[IdentitySpec] = (), id_label: int | None = None
) -> IdentitySpec:
    """Draw an identity from ``seed``, redrawing until it is separated from ``existing``.

    Raises GenerationError when no separated identity is found within
    MAX_ATTEMPTS draws.
    """
    label = seed if id_label is None else id_label
    rng = _rng(0x1D, seed)
    for _ in range(MAX_ATTEMPTS):
        spec = _draw_identity(rng, label)
        if all(geometry_distance(spec, other) > MIN_SEPARATION for other in existing):
            return spec
    raise GenerationError(
        f"no identity separated by >{MIN_SEPARATION} after {MAX_ATTEMPTS} attempts (seed={seed})"
    )


def sample_nuisance(seed: int) -> NuisanceSpec:
    rng = _rng(0x2E, seed)
    return NuisanceSpec(
        pose_shift=(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1))),
        rotation=float(rng.uniform(-15.0, 15.0)),
        illumination=float(rng.uniform(0.7, 1.3)),
        expression=float(rng.uniform(0.0, 1.0)),
        background=float(rng.uniform(0.0, 1.0)),
    )


# ---------------------------------------------------------------- rendering


def _hue(h: float, sat: float, val: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return val - val * sat * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _palette(identity: IdentitySpec) -> dict[str, np.ndarray]:
    tone, red, hair_light, hair_hue, iris, lips, shirt_hue, shirt_light = identity.albedo
    light_skin = np.array([0.97, 0.84, 0.72])
    dark_skin = np.array([0.45, 0.30, 0.20])
    skin = light_skin + (dark_skin - light_skin) * tone
    skin = skin + np.array([0.06, -0.04, -0.04]) * (red - 0.5) * 2
    # toy hair may take any hue; identity, not realism, is the point
    hair = _hue(hair_hue, 0.85, 0.25 + 0.65 * hair_light)
    iris_c = _hue(iris, 0.7, 0.6)
    lip = np.array([0.80, 0.35, 0.35]) + (np.array([0.55, 0.20, 0.25]) - [0.80, 0.35, 0.35]) * lips
    return {
        "skin": np.clip(skin, 0, 1),
        "hair": hair,
        "iris": iris_c,
        "lip": lip,
        "brow": hair * 0.55,
        "mark": np.array([0.20, 0.12, 0.08]),
        "sclera": np.array([0.95, 0.95, 0.93]),
        "mouth": np.array([0.25, 0.05, 0.05]),
        "shirt": _hue(shirt_hue, 0.9, 0.3 + 0.6 * shirt_light),
    }


def _face_frame(nuisance: NuisanceSpec, n: int):
    """Face-local coordinates for every supersampled pixel center."""
    coords = (np.arange(n) + 0.5) / n
    u, v = np.meshgrid(coords, coords)  # u: x (columns), v: y (rows)
    cx = 0.5 + nuisance.pose_shift[0]
    cy = 0.52 + nuisance.pose_shift[1]
    th = np.deg2rad(nuisance.rotation)
    du, dv = u - cx, v - cy
    x = np.cos(th) * du + np.sin(th) * dv
    y = -np.sin(th) * du + np.cos(th) * dv
    return x, y, v


def _ellipse(x, y, cx, cy, rx, ry):
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0


def face_layout(identity: IdentitySpec) -> dict[str, float]:
    g = dict(zip(GEOMETRY_NAMES, identity.geometry))
    a = 0.26 + 0.09 * g["aspect"]
    b = 0.36
    return {
        "a": a,
        "b": b,
        "eye_dx": (0.30 + 0.22 * g["eye_spacing"]) * a,
        "eye_y": -0.05,
        "eye_r": 0.032 + 0.03 * g["eye_size"],
        "mouth_hw": (0.25 + 0.35 * g["mouth_width"]) * a,
        "mouth_curv": (g["mouth_curvature"] - 0.5) * 2.0,
        "mouth_y": 0.17,
        "nose_len": 0.05 + 0.09 * g["nose_length"],
        "brow_angle": np.deg2rad((g["brow_angle"] - 0.5) * 50.0),
    }


def mark_position(identity: IdentitySpec, nuisance: NuisanceSpec, k: int) -> tuple[float, float]:
    """Image-space (x, y) in [0, 1] of mark ``k`` after the nuisance transform."""
    lay = face_layout(identity)
    mx, my, _ = identity.marks[k]
    fx, fy = (mx - 0.5) * 2 * lay["a"], (my - 0.5) * 2 * lay["b"]
    th = np.deg2rad(nuisance.rotation)
    u = np.cos(th) * fx - np.sin(th) * fy + 0.5 + nuisance.pose_shift[0]
    v = np.sin(th) * fx + np.cos(th) * fy + 0.52 + nuisance.pose_shift[1]
    return float(u), float(v)


def render_face(identity: IdentitySpec, nuisance: NuisanceSpec, size: int = 32) -> np.ndarray:
    """Render an HxWx3 float image in [0, 1]."""
    if size not in SIZES:
        raise ConfigError(f"size must be one of {SIZES}, got {size}")
    n = size * SUPERSAMPLE
    x, y, v = _face_frame(nuisance, n)
    pal = _palette(identity)
    lay = face_layout(identity)
    a, b = lay["a"], lay["b"]

    tone = 0.4 + 0.2 * nuisance.background
    img = np.empty((n, n, 3))
    # soft vertical gradient keeps the background from being a flat constant
    img[:] = (tone * np.array([0.92, 0.96, 1.0]))[None, None, :]
    img *= (0.9 + 0.2 * v)[..., None]

    def paint(mask, color):
        img[mask] = color

    shirt = _ellipse(x, y, 0.0, b * 1.4, a * 2.4, b * 0.85)
    paint(shirt, pal["shirt"])
    hair_back = _ellipse(x, y, 0.0, -0.04, a * 1.3, b * 1.12) & (y < 0.14)
    paint(hair_back, pal["hair"])
    face = _ellipse(x, y, 0.0, 0.0, a, b)
    subject = shirt | hair_back | face
    paint(face, pal["skin"])
    hairline = -b * (0.95 - 0.5 * identity.hair_region)
    paint(face & (y < hairline), pal["hair"])

    ey = lay["eye_y"]
    for side in (-1.0, 1.0):
        ex = side * lay["eye_dx"]
        # brow: short thick bar tilted by brow_angle, mirrored per side
        ang = side * lay["brow_angle"]
        bx, by = x - ex, y - (ey - lay["eye_r"] - 0.035)
        along = np.cos(ang) * bx + np.sin(ang) * by
        across = -np.sin(ang) * bx + np.cos(ang) * by
        paint((np.abs(along) < lay["eye_r"] * 1.3) & (np.abs(across) < 0.014), pal["brow"])
        paint(_ellipse(x, y, ex, ey, lay["eye_r"] * 1.35, lay["eye_r"] * 0.8), pal["sclera"])
        paint(_ellipse(x, y, ex, ey, lay["eye_r"] * 0.7, lay["eye_r"] * 0.7), pal["iris"])
        paint(_ellipse(x, y, ex, ey, lay["eye_r"] * 0.3, lay["eye_r"] * 0.3), np.zeros(3))

    nose = (np.abs(x) < 0.018) & (y > ey + 0.02) & (y < ey + 0.02 + lay["nose_len"])
    paint(nose, pal["skin"] * 0.78)

    hw, my = lay["mouth_hw"], lay["mouth_y"]
    rel = np.clip(x / hw, -1.0, 1.0)
    centre = my - lay["mouth_curv"] * 0.035 * (rel**2 - 0.5)
    opening = 0.004 + 0.028 * nuisance.expression
    within = np.abs(x) < hw
    paint(within & (np.abs(y - centre) < opening / 2 + 0.016), pal["lip"])
    paint(within & (np.abs(x) < hw * 0.85) & (np.abs(y - centre) < opening / 2), pal["mouth"])

    for mx, mmy, r in identity.marks:
        fx, fy = (mx - 0.5) * 2 * a, (mmy - 0.5) * 2 * b
        paint((x - fx) ** 2 + (y - fy) ** 2 <= r**2, pal["mark"])

    # the subject is lit; the backdrop is not
    img[subject] *= nuisance.illumination
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- datasets


@dataclass
class Record:
    id_label: int
    split: str
    hq: str
    refs: list[str]
    lq: dict[str, str] = field(default_factory=dict)
    hq_nuisance: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    root: Path
    records: list[Record]
    identities: dict[int, IdentitySpec]
    config: dict

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def id_labels(self, split: str | None = None) -> list[int]:
        recs = self.records if split is None else self.split(split)
        return sorted({r.id_label for r in recs})

    def path(self, rel: str) -> Path:
        return self.root / rel

    def load(self, rel: str) -> np.ndarray:
        return load_image(self.path(rel))

    def save(self, path: Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        data = {
            "config": self.config,
            "identities": [self.identities[k].to_dict() for k in sorted(self.identities)],
            "records": [r.to_dict() for r in self.records],
        }
        path.write_text(json.dumps(data, indent=1, sort_keys=True))
        return path

    @classmethod
    def load_from(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        idents = {d["id_label"]: IdentitySpec.from_dict(d) for d in data["identities"]}
        records = [Record(**r) for r in data["records"]]
        return cls(root=path.parent, records=records, identities=idents, config=data["config"])


def save_image(path: Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    # optimize=False and no metadata: output bytes depend only on pixels
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def build_identities(n: int, seed: int, label_offset: int = 0) -> list[IdentitySpec]:
    """``n`` mutually separated identities; identity k is seeded by (seed, k)."""
    specs: list[IdentitySpec] = []
    for k in range(n):
        sub = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        specs.append(sample_identity(sub, existing=specs, id_label=label_offset + k))
    return specs


def nuisance_seed(seed: int, id_label: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, id_label, k, 0x5EED]).generate_state(1)[0])


def build_dataset(
    n_identities: int,
    refs_per_identity: int,
    split_fraction: float,
    seed: int,
    out_dir: str | Path,
    hq_per_identity: int = 1,
    size: int = 32,
) -> DatasetManifest:
    """Render a corpus under ``out_dir`` and write ``manifest.json``.

    Every identity gets ``hq_per_identity + refs_per_identity`` photos with
    distinct nuisances. The first ``hq_per_identity`` are HQ targets (one
    record each); the rest are the references shared by those records. The
    first ``round(n_identities * split_fraction)`` identities form the train
    split, the remainder the test split.
    """
    if refs_per_identity < 1:
        raise ConfigError("refs_per_identity must be >= 1")
    if hq_per_identity < 1:
        raise ConfigError("hq_per_identity must be >= 1")
    if n_identities < 4:
        raise ConfigError("n_identities must be >= 4")
    if not 0.0 < split_fraction < 1.0:
        raise ConfigError("split_fraction must lie in (0, 1)")
    if size not in SIZES:
        raise ConfigError(f"size must be one of {SIZES}")

    out_dir = Path(out_dir)
    n_train = int(round(n_identities * split_fraction))
    n_train = min(max(n_train, 1), n_identities - 1)
    identities = build_identities(n_identities, seed)
    records = []
    for spec in identities:
        split = "train" if spec.id_label < n_train else "test"
        photos = []
        for k in range(hq_per_identity + refs_per_identity):
            nuis = sample_nuisance(nuisance_seed(seed, spec.id_label, k))
            photos.append((nuis, render_face(spec, nuis, size)))
        ref_paths = []
        for j in range(refs_per_identity):
            rel = f"images/{spec.id_label}/ref_{j}.png"
            save_image(out_dir / rel, photos[hq_per_identity + j][1])
            ref_paths.append(rel)
        for k in range(hq_per_identity):
            rel = f"images/{spec.id_label}/hq_{k}.png"
            save_image(out_dir / rel, photos[k][1])
            records.append(
                Record(
                    id_label=spec.id_label,
                    split=split,
                    hq=rel,
                    refs=list(ref_paths),
                    hq_nuisance=json.loads(json.dumps(photos[k][0].to_dict())),  # JSON-normal form, as reloaded
                )
            )
    config = {
        "n_identities": n_identities,
        "refs_per_identity": refs_per_identity,
        "hq_per_identity": hq_per_identity,
        "split_fraction": split_fraction,
        "seed": seed,
        "size": size,
    }
    manifest = DatasetManifest(
        root=out_dir, records=records, identities={s.id_label: s for s in identities}, config=config
    )
    manifest.save()
    return manifest


def render_identity_pool(
    n_identities: int, images_per_identity: int, seed: int, size: int = 32
) -> tuple[np.ndarray, np.ndarray]:
    """In-memory corpus (N, H, W, 3) and integer labels, used for encoder pretraining."""
    identities = build_identities(n_identities, seed)
    images, labels = [], []
    for spec in identities:
        for k in range(images_per_identity):
            nuis = sample_nuisance(nuisance_seed(seed, spec.id_label, k))
            images.append(render_face(spec, nuis, size))
            labels.append(spec.id_label)
    return np.stack(images).astype(np.float32), np.asarray(labels)
