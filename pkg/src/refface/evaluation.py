"""Restoration metrics, context ablations, reference sweeps and the wrong-reference probe.

Every table is a ``Table`` with a fixed column order so CSV output is stable:

* metrics rows: ``METRIC_COLUMNS``
* ablation / sweep summaries: the grouping columns followed by ``SUMMARY_COLUMNS``
* probe rows: ``PROBE_COLUMNS``
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from .diffusion import RestorationModel, load_model
from .encoders import to_tensor
from .sampler import GuidanceConfig, color_fix, encode_references, restore
from .toyfaces import DatasetManifest

PSNR_CAP = 99.0

METRIC_COLUMNS = ("record", "id_label", "preset", "ids", "ids_ref", "ids_indep", "psnr", "ssim")
METRIC_NAMES = ("ids", "ids_ref", "ids_indep", "psnr", "ssim")
SUMMARY_COLUMNS = tuple(f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std"))
PROBE_COLUMNS = (
    "record",
    "preset",
    "wrong_id",
    "hq_correct",
    "wrong_correct",
    "hq_wrong",
    "wrong_wrong",
)
MASK_ROWS = ((False, False), (False, True), (True, False), (True, True))


class Encoders(NamedTuple):
    phi_h: torch.nn.Module  # identity encoder used by the loss
    phi_g: torch.nn.Module
    phi_eval: torch.nn.Module  # independent identity encoder, evaluation only


# ---------------------------------------------------------------- metrics


def _nchw(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        x = x if x.is_floating_point() else x.float()
        return x if x.ndim == 4 else x[None]
    return to_tensor(x)


@torch.no_grad()
def ids(a, b, phi) -> np.ndarray:
    """Per-image cosine between identity embeddings of two image batches."""
    ea, eb = phi(_nchw(a).float()), phi(_nchw(b).float())
    return F.cosine_similarity(ea, eb, dim=1).clamp(-1, 1).double().numpy()


def psnr(a, b, cap: float = PSNR_CAP) -> np.ndarray:
    """Per-image PSNR in dB for [0, 1] images; identical images hit ``cap``."""
    a, b = _nchw(a).double(), _nchw(b).double()
    mse = ((a - b) ** 2).mean(dim=(1, 2, 3)).numpy()
    with np.errstate(divide="ignore"):
        out = -10.0 * np.log10(mse)
    return np.minimum(out, cap)


def ssim(a, b) -> np.ndarray:
    a = _nchw(a).permute(0, 2, 3, 1).double().numpy()
    b = _nchw(b).permute(0, 2, 3, 1).double().numpy()
    return np.array(
        [structural_similarity(x, y, channel_axis=-1, data_range=1.0, win_size=7) for x, y in zip(a, b)]
    )


@torch.no_grad()
def identity_centroid(images, phi) -> torch.Tensor:
    e = phi(_nchw(images).float())
    return F.normalize(e.mean(dim=0), dim=0)


# ---------------------------------------------------------------- tables


@dataclass
class Table:
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"row lacks columns {sorted(missing)}")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def where(self, **conds) -> "Table":
        return Table(self.columns, [r for r in self.rows if all(r[k] == v for k, v in conds.items())])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])

    @classmethod
    def from_csv(cls, path) -> "Table":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            rows = [{k: _parse(v) for k, v in r.items()} for r in reader]
            return cls(tuple(reader.fieldnames), rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return str(v)


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


@dataclass
class MetricsReport:
    """Per-image metric rows plus per-preset mean/std aggregates."""

    table: Table
    outputs: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    @property
    def rows(self) -> list[dict]:
        return self.table.rows

    def presets(self) -> list[str]:
        return sorted({r["preset"] for r in self.rows})

    def aggregate(self, preset: str | None = None) -> dict[str, float]:
        t = self.table if preset is None else self.table.where(preset=preset)
        if not t.rows:
            raise KeyError(f"no rows for preset {preset!r}")
        out = {}
        for m in METRIC_NAMES:
            v = t.column(m).astype(np.float64)
            out[f"{m}_mean"] = float(v.mean())
            out[f"{m}_std"] = float(v.std())
        return out

    def summary(self) -> dict:
        return {p: self.aggregate(p) for p in self.presets()}

    def to_csv(self, path) -> None:
        self.table.to_csv(path)


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- restoration drivers


def heldout_records(manifest: DatasetManifest, preset: str):
    """Test-split records that carry an LQ image for ``preset``; refuses train identities."""
    train_ids = {r.id_label for r in manifest.split("train")}
    recs = manifest.split("test")
    leaked = sorted({r.id_label for r in recs} & train_ids)
    if leaked:
        raise ValueError(f"test identities overlap train identities: {leaked}")
    missing = [r.hq for r in recs if preset not in r.lq]
    if missing:
        raise FileNotFoundError(f"no {preset} LQ for {missing[0]} (run degrade --preset {preset})")
    return recs


def _load(model_or_ckpt):
    """A checkpoint path or an already loaded (model, schedule) pair -> (model, schedule)."""
    if isinstance(model_or_ckpt, (str, Path)):
        path = Path(model_or_ckpt)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        model, schedule, _ = load_model(path)
        return model, schedule
    return model_or_ckpt


def restore_records(
    model: RestorationModel,
    schedule,
    manifest: DatasetManifest,
    recs,
    preset: str,
    gcfg: GuidanceConfig,
    encoders: Encoders,
    refs: list | None = None,
    n_refs: int = 1,
    use_color_fix: bool = True,
) -> torch.Tensor:
    """Restore the ``preset`` LQ image of every record in one batch.

    ``refs`` optionally overrides the reference images: a list over reference
    slots of (B, H, W, 3) arrays. By default slot j holds each record's j-th
    reference.
    """
    x_lq = to_tensor(np.stack([manifest.load(r.lq[preset]) for r in recs]))
    if refs is None:
        if any(len(r.refs) < n_refs for r in recs):
            raise ValueError(f"records carry fewer than {n_refs} references")
        refs = [np.stack([manifest.load(r.refs[j]) for r in recs]) for j in range(n_refs)]
    ref_set = encode_references(model, refs, encoders.phi_h, encoders.phi_g)
    out = restore(model, x_lq, ref_set, schedule, gcfg)
    return color_fix(out, x_lq) if use_color_fix else out


def score(outputs, manifest: DatasetManifest, recs, preset: str, encoders: Encoders) -> list[dict]:
    hq = to_tensor(np.stack([manifest.load(r.hq) for r in recs]))
    ref0 = to_tensor(np.stack([manifest.load(r.refs[0]) for r in recs]))
    cols = {
        "ids": ids(outputs, hq, encoders.phi_h),
        "ids_ref": ids(outputs, ref0, encoders.phi_h),
        "ids_indep": ids(outputs, hq, encoders.phi_eval),
        "psnr": psnr(outputs, hq),
        "ssim": ssim(outputs, hq),
    }
    return [
        {"record": r.hq, "id_label": r.id_label, "preset": preset, **{k: float(v[i]) for k, v in cols.items()}}
        for i, r in enumerate(recs)
    ]


def evaluate(
    model_ckpt,
    manifest: DatasetManifest,
    gcfg: GuidanceConfig,
    encoders: Encoders,
    presets=("moderate", "severe"),
    n_refs: int = 1,
    use_color_fix: bool = True,
) -> MetricsReport:
    """Restore every test LQ image under each preset and score it against HQ and the first reference."""
    model, schedule = _load(model_ckpt)
    table = Table(METRIC_COLUMNS)
    outputs = {}
    for preset in presets:
        recs = heldout_records(manifest, preset)
        out = restore_records(model, schedule, manifest, recs, preset, gcfg, encoders, n_refs=n_refs,
                              use_color_fix=use_color_fix)
        outputs[preset] = out
        for row in score(out, manifest, recs, preset, encoders):
            table.append(row)
    return MetricsReport(table, outputs)


def input_report(manifest: DatasetManifest, encoders: Encoders, presets=("moderate", "severe")) -> MetricsReport:
    """Metrics of the raw LQ inputs (already at HQ resolution), the no-restoration baseline."""
    table = Table(METRIC_COLUMNS)
    for preset in presets:
        recs = heldout_records(manifest, preset)
        x_lq = to_tensor(np.stack([manifest.load(r.lq[preset]) for r in recs]))
        for row in score(x_lq, manifest, recs, preset, encoders):
            table.append(row)
    return MetricsReport(table)


def mask_label(mask: tuple[bool, bool]) -> str:
    return f"{'H' if mask[0] else '-'}{'G' if mask[1] else '-'}"


def _summary_row(report: MetricsReport, preset: str, **keys) -> dict:
    return {**keys, "preset": preset, **report.aggregate(preset)}


def ablate_context(model_ckpt, manifest, gcfg: GuidanceConfig, encoders: Encoders, presets=("moderate", "severe"),
                   use_color_fix: bool = True):
    """One checkpoint, four attention-mask rows. Returns (summary table, reports by mask label)."""
    model = _load(model_ckpt)
    table = Table(("mask", "preset", *SUMMARY_COLUMNS))
    reports = {}
    for mask in MASK_ROWS:
        rep = evaluate(model, manifest, replace(gcfg, component_mask=mask), encoders, presets,
                       use_color_fix=use_color_fix)
        reports[mask_label(mask)] = rep
        for p in presets:
            table.append(_summary_row(rep, p, mask=mask_label(mask)))
    return table, reports


def sweep_multi_ref(model_ckpt, manifest, gcfg: GuidanceConfig, encoders: Encoders, n_max: int = 5,
                    presets=("moderate", "severe"), use_color_fix: bool = True):
    """Rows N = 1..n_max, each averaging the conditional branch over the first N references."""
    model = _load(model_ckpt)
    table = Table(("n_refs", "preset", *SUMMARY_COLUMNS))
    reports = {}
    for n in range(1, n_max + 1):
        rep = evaluate(model, manifest, gcfg, encoders, presets, n_refs=n, use_color_fix=use_color_fix)
        reports[n] = rep
        for p in presets:
            table.append(_summary_row(rep, p, n_refs=n))
    return table, reports


def cfg_sweep(model_ckpt, manifest, gcfg: GuidanceConfig, encoders: Encoders, s_i_values, s_c_values,
              presets=("moderate", "severe"), use_color_fix: bool = True):
    """Grid over the two guidance scales."""
    model = _load(model_ckpt)
    table = Table(("s_i", "s_c", "preset", *SUMMARY_COLUMNS))
    for s_i in s_i_values:
        for s_c in s_c_values:
            rep = evaluate(model, manifest, replace(gcfg, s_i=float(s_i), s_c=float(s_c)), encoders, presets,
                           use_color_fix=use_color_fix)
            for p in presets:
                table.append(_summary_row(rep, p, s_i=float(s_i), s_c=float(s_c)))
    return table


def wrong_reference_probe(model_ckpt, manifest, gcfg: GuidanceConfig, encoders: Encoders,
                          presets=("moderate", "severe"), use_color_fix: bool = True) -> Table:
    """Restore each test LQ with its own reference and with one of the next test identity.

    For both runs the output is compared (loss encoder) with the true HQ and with
    the wrong identity's centroid, the normalized mean embedding of all its images.
    """
    model, schedule = _load(model_ckpt)
    recs_all = manifest.split("test")
    labels = sorted({r.id_label for r in recs_all})
    if len(labels) < 2:
        raise ValueError("wrong-reference probe needs at least 2 test identities")
    wrong_of = {a: labels[(i + 1) % len(labels)] for i, a in enumerate(labels)}
    first = {}
    images = {}
    for r in recs_all:
        first.setdefault(r.id_label, r)
        images.setdefault(r.id_label, set()).update([r.hq, *r.refs])
    centroid = {
        k: identity_centroid(np.stack([manifest.load(p) for p in sorted(v)]), encoders.phi_h)
        for k, v in images.items()
    }
    table = Table(PROBE_COLUMNS)
    for preset in presets:
        recs = heldout_records(manifest, preset)
        hq = to_tensor(np.stack([manifest.load(r.hq) for r in recs]))
        wrong_refs = [np.stack([manifest.load(first[wrong_of[r.id_label]].refs[0]) for r in recs])]
        correct = restore_records(model, schedule, manifest, recs, preset, gcfg, encoders,
                                  use_color_fix=use_color_fix)
        wrong = restore_records(model, schedule, manifest, recs, preset, gcfg, encoders, refs=wrong_refs,
                                use_color_fix=use_color_fix)
        cents = torch.stack([centroid[wrong_of[r.id_label]] for r in recs])
        with torch.no_grad():
            e_c, e_w = encoders.phi_h(correct), encoders.phi_h(wrong)
        cos = lambda e, c: F.cosine_similarity(e, c, dim=1).double().numpy()  # noqa: E731
        cols = {
            "hq_correct": ids(correct, hq, encoders.phi_h),
            "wrong_correct": cos(e_c, cents),
            "hq_wrong": ids(wrong, hq, encoders.phi_h),
            "wrong_wrong": cos(e_w, cents),
        }
        for i, r in enumerate(recs):
            table.append(
                {"record": r.hq, "preset": preset, "wrong_id": wrong_of[r.id_label],
                 **{k: float(v[i]) for k, v in cols.items()}}
            )
    return table


def probe_summary(table: Table) -> dict:
    """Per preset: mean similarities, the wrong-identity shift, and how often HQ still wins."""
    out = {}
    for preset in sorted({r["preset"] for r in table.rows}):
        t = table.where(preset=preset)
        hq_w, wr_w = t.column("hq_wrong"), t.column("wrong_wrong")
        out[preset] = {
            "hq_correct": float(t.column("hq_correct").mean()),
            "wrong_correct": float(t.column("wrong_correct").mean()),
            "hq_wrong": float(hq_w.mean()),
            "wrong_wrong": float(wr_w.mean()),
            "wrong_shift": float(wr_w.mean() - t.column("wrong_correct").mean()),
            "hq_wins": float((hq_w > wr_w).mean()),
        }
    return out


def lambda_sweep(train_fn, lam_values, manifest, gcfg: GuidanceConfig, encoders: Encoders,
                 presets=("moderate", "severe"), use_color_fix: bool = True):
    """Train one model per lambda via ``train_fn(lam) -> (model, schedule)`` and evaluate each.

    Everything except lambda must be fixed inside ``train_fn`` (same seed, data, steps).
    """
    table = Table(("lam", "preset", *SUMMARY_COLUMNS))
    reports = {}
    for lam in lam_values:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        model = train_fn(float(lam))
        rep = evaluate(model, manifest, gcfg, encoders, presets, use_color_fix=use_color_fix)
        reports[float(lam)] = rep
        for p in presets:
            table.append(_summary_row(rep, p, lam=float(lam)))
    return table, reports


# ---------------------------------------------------------------- plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(log, path, smooth: int = 50) -> None:
    """Identity-loss terms over training, moving-averaged."""
    plt = _pyplot()
    rows = log.rows if hasattr(log, "rows") else log
    steps = np.array([r["step"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    k = max(1, min(smooth, len(rows)))
    kernel = np.ones(k) / k
    for name in ("l_id_hq", "l_id_ref", "l_hid"):
        v = np.convolve(np.array([r[name] for r in rows], dtype=float), kernel, mode="valid")
        ax.plot(steps[k - 1:], v, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_table(table: Table, x: str, y: str, path, group: str = "preset") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in sorted({r[group] for r in table.rows}, key=str):
        t = table.where(**{group: key})
        xs = t.column(x)
        if xs.dtype.kind in "iuf":
            ax.plot(xs, t.column(y), marker="o", label=str(key))
        else:
            ax.plot(range(len(xs)), t.column(y), marker="o", label=str(key))
            ax.set_xticks(range(len(xs)), [str(v) for v in xs])
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
