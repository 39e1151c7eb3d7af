import json

import numpy as np
import pytest
import yaml

from refface import config as cfgmod
from refface.cli import main, parse_mask

ARTIFACTS = {
    "gen-data": ["identities.csv"],
    "degrade": ["degradation.csv"],
    "train-encoders": ["encoders.csv"],
    "train": ["loss_log.csv", "model.ckpt"],
    "eval": ["metrics.csv", "inputs.csv", "probe.csv", "summary.json"],
    "ablate": ["ablation.csv"],
    "sweep-ref": ["sweep_ref.csv"],
    "sweep-lambda": ["sweep_lambda.csv", "loss_log_lam0.csv", "loss_log_lam0.6.csv"],
    "sweep-cfg": ["sweep_cfg.csv"],
    "plot": ["loss_curves.png", "ablation.png", "sweep_ref.png", "sweep_lambda.png"],
}


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_smoke_pipeline_writes_all_artifacts(smoke_run):
    root, codes = smoke_run
    assert all(code == 0 for code in codes.values()), codes
    assert (root / "data" / "manifest.json").exists()
    for name in ("phi_h", "phi_g", "phi_eval"):
        assert (root / "encoders" / f"{name}.ckpt").exists()
    for sub, files in ARTIFACTS.items():
        assert (root / sub / "config.yaml").exists() and (root / sub / "run.json").exists()
        for f in files:
            assert (root / sub / f).exists(), f"{sub}/{f}"


def test_snapshot_is_resolved_config(smoke_run):
    root, _ = smoke_run
    snap = yaml.safe_load((root / "train" / "config.yaml").read_text())
    assert snap["name"] == "smoke" and snap["train"]["steps"] == 30 and snap["train"]["lam"] == 0.6
    run = json.loads((root / "train" / "run.json").read_text())
    assert run["seed"] == 0 and "loss_log.csv" in run["artifacts"]


def test_summary_contents(smoke_run):
    root, _ = smoke_run
    summary = json.loads((root / "eval" / "summary.json").read_text())
    assert set(summary) == {"restored", "inputs", "probe"}
    assert set(summary["restored"]) == {"moderate", "severe"}


def test_eval_without_checkpoint_exits_3(tmp_path, capsys):
    cfg = str(tmp_path / "c.yaml")
    (tmp_path / "c.yaml").write_text("name: nock\ndata: {identities: 4, refs: 1, hq_per_identity: 1}\neval: {n_max: 1}\n")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert main(["degrade", "--config", cfg, "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 3
    err = _error(capsys)
    assert err["error"] == "missing" and err["path"].endswith("model.ckpt")


def test_train_without_data_exits_3(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 3
    assert _error(capsys)["path"].endswith("manifest.json")


def test_invalid_value_exits_2_with_field_path(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("train:\n  lam: 1.5\n")
    assert main(["train", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path)]) == 2
    err = _error(capsys)
    assert err == {"code": 2, "error": "config", "field": "train.lam", "message": "must lie in [0, 1]"}


def test_unknown_key_rejected(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("guidance:\n  s_x: 1.0\n")
    assert main(["eval", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path)]) == 2
    assert _error(capsys)["field"] == "guidance.s_x"


def test_wrong_type_rejected():
    with pytest.raises(cfgmod.ConfigError) as exc:
        cfgmod.from_dict({"train": {"steps": "many"}})
    assert exc.value.path == "train.steps"
    with pytest.raises(cfgmod.ConfigError) as exc:
        cfgmod.from_dict({"train": {"lr_decay": "yes"}})
    assert exc.value.path == "train.lr_decay"
    with pytest.raises(cfgmod.ConfigError) as exc:
        cfgmod.from_dict({"train": {"extra_identities": 4, "lq_variants": 0}})
    assert exc.value.path == "train.lq_variants"
    with pytest.raises(cfgmod.ConfigError) as exc:
        cfgmod.from_dict({"bogus": {}})
    assert exc.value.path == "bogus"


def test_num_steps_bounded_by_T():
    with pytest.raises(cfgmod.ConfigError) as exc:
        cfgmod.from_dict({"train": {"T": 50}, "guidance": {"num_steps": 60}})
    assert exc.value.path == "guidance.num_steps"


def test_bad_flag_value_exits_2(tmp_path, capsys):
    assert main(["eval", "--mask", "id,nose", "--out", str(tmp_path)]) == 2
    assert _error(capsys)["field"] == "--mask"


def test_parse_mask():
    assert parse_mask("id,gen") == [True, True]
    assert parse_mask("gen") == [False, True]
    assert parse_mask("none") == [False, False]


def test_restore_two_refs_uses_ensemble(smoke_run, monkeypatch, tmp_path):
    import refface.sampler as sampler

    root, _ = smoke_run
    seen = []
    original = sampler.multi_ref_epsilon

    def spy(model, z_t, z_lq, refs, t, s_i, s_c):
        seen.append(len(refs))
        return original(model, z_t, z_lq, refs, t, s_i, s_c)

    monkeypatch.setattr(sampler, "multi_ref_epsilon", spy)
    imgs = root / "data" / "images"
    test_id = sorted(p.name for p in imgs.iterdir())[-1]
    lq = imgs / test_id / "lq-severe_0.png"
    refs = f"{imgs / test_id / 'ref_0.png'},{imgs / test_id / 'ref_1.png'}"
    argv = ["restore", "--config", str(root / "train" / "config.yaml"), "--out", str(root.parent),
            "--lq", str(lq), "--refs", refs, "--dump-trajectory"]
    assert main(argv) == 0
    assert seen and set(seen) == {2}
    run = json.loads((root / "restore" / "run.json").read_text())
    assert run["n_refs"] == 2
    traj = np.load(root / "restore" / "trajectory.npy")
    assert traj.shape[1:] == (3, 32, 32)
    first = (root / "restore" / "restored.png").read_bytes()
    assert main(argv) == 0
    assert (root / "restore" / "restored.png").read_bytes() == first


def test_restore_missing_reference_exits_3(smoke_run, capsys):
    root, _ = smoke_run
    argv = ["restore", "--config", str(root / "train" / "config.yaml"), "--out", str(root.parent),
            "--lq", str(root / "nope.png"), "--refs", "a.png"]
    assert main(argv) == 3
    assert _error(capsys)["path"].endswith("nope.png")
