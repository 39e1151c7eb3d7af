"""Command line entry point: ``refface <subcommand> [flags]``.

Each invocation writes into ``<out>/<name>/<subcommand>/`` a ``config.yaml``
snapshot of the fully resolved configuration (flags folded in) and a
``run.json`` with the seed and artifact hashes. Re-running with
``--config <snapshot>`` reproduces the CSV artifacts.

Shared state between subcommands lives in the run directory:

    data/                 corpus and manifest (gen-data, degrade)
    encoders/*.ckpt       frozen encoders (train-encoders)
    train/model.ckpt      denoiser checkpoint (train)

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 missing prerequisite. Failures print a single JSON line to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .degrade import degrade_batch
from .diffusion import (
    LossLog,
    RestorationModel,
    TrainingConfig,
    load_model,
    make_schedule,
    save_model,
    train,
)
from .encoders import (
    load_encoder,
    save_encoder,
    to_tensor,
    train_eval_identity_encoder,
    train_general_encoder,
    train_identity_encoder,
)
from .evaluation import (
    Encoders,
    Table,
    ablate_context,
    cfg_sweep,
    evaluate,
    input_report,
    lambda_sweep,
    plot_loss_curves,
    plot_table,
    probe_summary,
    psnr,
    sweep_multi_ref,
    write_summary,
    wrong_reference_probe,
)
from .losses import plateau_diagnostic
from .sampler import GuidanceConfig, color_fix, encode_references, restore
from .toyfaces import DatasetManifest, build_dataset, load_image, save_image

log = logging.getLogger("refface")

SUBCOMMANDS = (
    "gen-data",
    "degrade",
    "train-encoders",
    "train",
    "restore",
    "eval",
    "ablate",
    "sweep-ref",
    "sweep-lambda",
    "sweep-cfg",
    "plot",
)

EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3


class MissingPrerequisite(Exception):
    def __init__(self, path):
        super().__init__(f"missing prerequisite: {path}")
        self.path = str(path)


# ---------------------------------------------------------------- run context


class Run:
    def __init__(self, cfg: cfgmod.RunConfig, out: Path, subcommand: str):
        self.cfg = cfg
        self.root = Path(out) / cfg.name
        self.sub = subcommand
        self.dir = self.root / subcommand
        self.artifacts: list[Path] = []

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def encoder_dir(self) -> Path:
        return self.root / "encoders"

    @property
    def model_path(self) -> Path:
        return self.root / "train" / "model.ckpt"

    def begin(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.dir / "config.yaml")

    def artifact(self, name: str) -> Path:
        path = self.dir / name
        self.artifacts.append(path)
        return path

    def finish(self, extra: dict | None = None) -> None:
        record = {
            "subcommand": self.sub,
            "seed": self.cfg.train.seed if self.sub in ("train", "sweep-lambda") else self.cfg.data.seed,
            "seeds": {s: getattr(self.cfg, s).seed for s in ("data", "degrade", "encoders", "train", "guidance")},
            "artifacts": {p.name: _sha256(p) for p in self.artifacts if p.exists()},
            **(extra or {}),
        }
        (self.dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")

    # prerequisites

    def manifest(self, presets=()) -> DatasetManifest:
        path = self.data_dir / "manifest.json"
        if not path.exists():
            raise MissingPrerequisite(path)
        m = DatasetManifest.load_from(path)
        for preset in presets:
            if any(preset not in r.lq for r in m.records):
                raise MissingPrerequisite(f"{self.data_dir}/images/*/lq-{preset}_*.png")
        return m

    def encoders(self) -> Encoders:
        paths = [self.encoder_dir / f"{n}.ckpt" for n in ("phi_h", "phi_g", "phi_eval")]
        for p in paths:
            if not p.exists():
                raise MissingPrerequisite(p)
        return Encoders(*(load_encoder(p) for p in paths))

    def model(self):
        if not self.model_path.exists():
            raise MissingPrerequisite(self.model_path)
        model, schedule, _ = load_model(self.model_path)
        return model, schedule


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def guidance(cfg: cfgmod.RunConfig) -> GuidanceConfig:
    g = cfg.guidance
    return GuidanceConfig(s_i=g.s_i, s_c=g.s_c, num_steps=g.num_steps, component_mask=tuple(g.mask), seed=g.seed)


def training_config(cfg: cfgmod.RunConfig, lam: float | None = None) -> TrainingConfig:
    t = cfg.train
    return TrainingConfig(
        lam=t.lam if lam is None else lam,
        w_hid=t.w_hid,
        cond_dropout_p=t.dropout_p,
        batch_size=t.batch,
        learning_rate=t.lr,
        lr_decay=t.lr_decay,
        steps=t.steps,
        seed=t.seed,
        lq_variants=t.lq_variants,
        extra_identities=t.extra_identities,
        presets=tuple(cfg.degrade.presets),
        log_every=max(1, t.steps // 20),
    )


def train_model(cfg: cfgmod.RunConfig, manifest, encoders: Encoders, lam: float | None = None):
    t = cfg.train
    torch.manual_seed(t.seed)
    schedule = make_schedule(t.T, t.beta_min, t.beta_max)
    model = RestorationModel(
        embedding_dim=cfg.encoders.embedding_dim,
        token_dim=cfg.encoders.token_dim,
        channels=tuple(t.channels),
    )
    loss_log = train(model, manifest, (encoders.phi_h, encoders.phi_g), schedule, training_config(cfg, lam))
    return model, schedule, loss_log


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(run: Run, args) -> None:
    d = run.cfg.data
    m = build_dataset(d.identities, d.refs, d.split, d.seed, run.data_dir, hq_per_identity=d.hq_per_identity,
                      size=d.size)
    table = Table(("id_label", "split", "n_hq", "n_refs"))
    for label in m.id_labels():
        recs = [r for r in m.records if r.id_label == label]
        table.append({"id_label": label, "split": recs[0].split, "n_hq": len(recs), "n_refs": len(recs[0].refs)})
    table.to_csv(run.artifact("identities.csv"))
    run.finish({"manifest_sha256": _sha256(run.data_dir / "manifest.json")})


def cmd_degrade(run: Run, args) -> None:
    m = run.manifest()
    for preset in run.cfg.degrade.presets:
        m = degrade_batch(m, preset, run.cfg.degrade.seed)
    table = Table(("record", "preset", "lq", "psnr"))
    for preset in run.cfg.degrade.presets:
        for r in m.records:
            hq, lq = m.load(r.hq), m.load(r.lq[preset])
            table.append({"record": r.hq, "preset": preset, "lq": r.lq[preset], "psnr": float(psnr(lq, hq)[0])})
    table.to_csv(run.artifact("degradation.csv"))
    run.finish()


def cmd_train_encoders(run: Run, args) -> None:
    m = run.manifest()
    e = run.cfg.encoders
    common = {"steps": e.identity_steps, "embedding_dim": e.embedding_dim, "pool_identities": e.pool_identities,
              "pool_images": e.pool_images, "min_gap": e.min_gap}
    phi_h = train_identity_encoder(m, seed=e.seed, **common)
    phi_eval = train_eval_identity_encoder(m, seed=e.seed + 1, **common)
    phi_g = train_general_encoder(m, steps=e.general_steps, seed=e.seed, token_dim=e.token_dim,
                                  pool_identities=e.pool_identities, pool_images=e.pool_images)
    run.encoder_dir.mkdir(parents=True, exist_ok=True)
    table = Table(("encoder", "sha256", "heldout"))
    for name, enc in (("phi_h", phi_h), ("phi_g", phi_g), ("phi_eval", phi_eval)):
        digest = save_encoder(enc, run.encoder_dir / f"{name}.ckpt")
        held = enc.heldout_mse[0] if name == "phi_g" else enc.heldout_gap
        table.append({"encoder": name, "sha256": digest, "heldout": float(held)})
    table.to_csv(run.artifact("encoders.csv"))
    run.finish()


def cmd_train(run: Run, args) -> None:
    m = run.manifest(run.cfg.degrade.presets)
    enc = run.encoders()
    model, schedule, loss_log = train_model(run.cfg, m, enc)
    digest = save_model(model, run.model_path, schedule, run.cfg.train.steps, {"lam": run.cfg.train.lam})
    loss_log.to_csv(run.artifact("loss_log.csv"))
    extra = {"model_sha256": digest}
    if len(loss_log.rows) >= 100:
        diag = plateau_diagnostic(loss_log)
        write_summary(run.artifact("plateau.json"), diag)
    run.finish(extra)


def cmd_restore(run: Run, args) -> None:
    if not args.lq:
        raise cfgmod.ConfigError("--lq", "restore needs an input image")
    if not args.refs:
        raise cfgmod.ConfigError("--refs", "restore needs at least one reference image")
    for p in [args.lq, *args.refs]:
        if not Path(p).exists():
            raise MissingPrerequisite(p)
    model, schedule = run.model()
    enc = run.encoders()
    x_lq = to_tensor(load_image(args.lq))
    refs = [load_image(p)[None] for p in args.refs]  # one slot per reference, N = len(--refs)
    ref_set = encode_references(model, refs, enc.phi_h, enc.phi_g)
    trajectory = [] if args.dump_trajectory else None
    out = restore(model, x_lq, ref_set, schedule, guidance(run.cfg), trajectory=trajectory)
    if run.cfg.eval.color_fix:
        out = color_fix(out, x_lq)
    save_image(run.artifact("restored.png"), out[0].permute(1, 2, 0).numpy())
    if trajectory is not None:
        np.save(run.artifact("trajectory.npy"), torch.cat(trajectory).numpy())
    run.finish({"lq": str(args.lq), "refs": [str(p) for p in args.refs], "n_refs": len(args.refs)})


def _eval_inputs(run: Run):
    ev = run.cfg.eval
    m = run.manifest(ev.presets)
    model = run.model()
    return m, model, run.encoders(), guidance(run.cfg), tuple(ev.presets), ev.color_fix


def cmd_eval(run: Run, args) -> None:
    m, model, enc, gcfg, presets, cf = _eval_inputs(run)
    rep = evaluate(model, m, gcfg, enc, presets, n_refs=run.cfg.guidance.n_refs, use_color_fix=cf)
    rep.to_csv(run.artifact("metrics.csv"))
    base = input_report(m, enc, presets)
    base.to_csv(run.artifact("inputs.csv"))
    probe = wrong_reference_probe(model, m, gcfg, enc, presets, use_color_fix=cf)
    probe.to_csv(run.artifact("probe.csv"))
    write_summary(run.artifact("summary.json"),
                  {"restored": rep.summary(), "inputs": base.summary(), "probe": probe_summary(probe)})
    run.finish()


def cmd_ablate(run: Run, args) -> None:
    m, model, enc, gcfg, presets, cf = _eval_inputs(run)
    table, _ = ablate_context(model, m, gcfg, enc, presets, use_color_fix=cf)
    table.to_csv(run.artifact("ablation.csv"))
    run.finish()


def cmd_sweep_ref(run: Run, args) -> None:
    m, model, enc, gcfg, presets, cf = _eval_inputs(run)
    table, _ = sweep_multi_ref(model, m, gcfg, enc, run.cfg.eval.n_max, presets, use_color_fix=cf)
    table.to_csv(run.artifact("sweep_ref.csv"))
    run.finish()


def cmd_sweep_lambda(run: Run, args) -> None:
    ev = run.cfg.eval
    m = run.manifest(sorted(set(ev.presets) | set(run.cfg.degrade.presets)))
    enc = run.encoders()

    def fit(lam):
        model, schedule, loss_log = train_model(run.cfg, m, enc, lam)
        loss_log.to_csv(run.artifact(f"loss_log_lam{lam:g}.csv"))
        return model, schedule

    table, _ = lambda_sweep(fit, ev.lambdas, m, guidance(run.cfg), enc, tuple(ev.presets), use_color_fix=ev.color_fix)
    table.to_csv(run.artifact("sweep_lambda.csv"))
    run.finish()


def cmd_sweep_cfg(run: Run, args) -> None:
    m, model, enc, gcfg, presets, cf = _eval_inputs(run)
    ev = run.cfg.eval
    table = cfg_sweep(model, m, gcfg, enc, ev.s_i_values, ev.s_c_values, presets, use_color_fix=cf)
    table.to_csv(run.artifact("sweep_cfg.csv"))
    run.finish()


def cmd_plot(run: Run, args) -> None:
    made = []
    log_path = run.root / "train" / "loss_log.csv"
    if log_path.exists():
        plot_loss_curves(LossLog.from_csv(log_path), run.artifact("loss_curves.png"))
        made.append("loss_curves.png")
    specs = [
        ("sweep-ref/sweep_ref.csv", "n_refs", "ids_mean", "sweep_ref.png"),
        ("ablate/ablation.csv", "mask", "ids_mean", "ablation.png"),
        ("sweep-lambda/sweep_lambda.csv", "lam", "ids_ref_mean", "sweep_lambda.png"),
    ]
    for rel, x, y, name in specs:
        path = run.root / rel
        if path.exists():
            plot_table(Table.from_csv(path), x, y, run.artifact(name))
            made.append(name)
    if not made:
        raise MissingPrerequisite(log_path)
    run.finish({"plots": made})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "degrade": cmd_degrade,
    "train-encoders": cmd_train_encoders,
    "train": cmd_train,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-ref": cmd_sweep_ref,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-cfg": cmd_sweep_cfg,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------- argument handling


def parse_mask(text: str) -> list[bool]:
    parts = {p.strip() for p in text.split(",") if p.strip()}
    if parts == {"none"}:
        return [False, False]
    unknown = parts - {"id", "gen"}
    if unknown:
        raise cfgmod.ConfigError("--mask", f"unknown component(s) {sorted(unknown)}; use id,gen or none")
    return ["id" in parts, "gen" in parts]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refface", description="Reference-based face restoration on toy faces.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override every seed in the configuration")
    p.add_argument("--out", type=Path, default=Path("runs"), help="runs root (default: runs)")
    p.add_argument("--name", help="run name (default: from config)")
    p.add_argument("--preset", choices=("moderate", "severe"), help="restrict to one degradation preset")
    p.add_argument("--refs", type=lambda s: [x for x in s.split(",") if x], help="comma-separated reference PNGs")
    p.add_argument("--lq", type=Path, help="LQ input PNG for restore")
    p.add_argument("--mask", help="context components to keep: id,gen | id | gen | none")
    p.add_argument("--si", type=float)
    p.add_argument("--sc", type=float)
    p.add_argument("--n-refs", type=int, dest="n_refs")
    p.add_argument("--no-color-fix", action="store_true", dest="no_color_fix")
    p.add_argument("--dump-trajectory", action="store_true", dest="dump_trajectory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.from_dict({})
    if args.name:
        cfg.name = args.name
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if args.preset:
        if args.subcommand == "degrade":
            cfg.degrade.presets = [args.preset]
        else:
            cfg.eval.presets = [args.preset]
    if args.mask is not None:
        cfg.guidance.mask = parse_mask(args.mask)
    if args.si is not None:
        cfg.guidance.s_i = args.si
    if args.sc is not None:
        cfg.guidance.s_c = args.sc
    if args.n_refs is not None:
        if args.subcommand == "sweep-ref":
            cfg.eval.n_max = args.n_refs
        else:
            cfg.guidance.n_refs = args.n_refs
    if args.no_color_fix:
        cfg.eval.color_fix = False
    return cfgmod.validate(cfg)


def _fail(code: int, kind: str, **fields) -> int:
    print(json.dumps({"error": kind, "code": code, **fields}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", field=exc.path, message=exc.message)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing", path=str(args.config), message=str(exc))
    run = Run(cfg, args.out, args.subcommand)
    try:
        run.begin()
        COMMANDS[args.subcommand](run, args)
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", field=exc.path, message=exc.message)
    except MissingPrerequisite as exc:
        return _fail(EXIT_MISSING, "missing", path=exc.path, message=str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing", path=getattr(exc, "filename", None) or "", message=str(exc))
    except Exception as exc:  # one parseable line instead of a traceback
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, type(exc).__name__, message=str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
