import numpy as np
import pytest
import torch

import oracles
from refface.diffusion import save_model
from refface.encoders import IdentityEncoder, freeze, to_tensor
from refface.evaluation import (
    METRIC_COLUMNS,
    PSNR_CAP,
    Encoders,
    Table,
    ablate_context,
    evaluate,
    heldout_records,
    ids,
    input_report,
    lambda_sweep,
    plot_loss_curves,
    plot_table,
    probe_summary,
    psnr,
    score,
    ssim,
    sweep_multi_ref,
    wrong_reference_probe,
)
from refface.sampler import GuidanceConfig

FAST = GuidanceConfig(num_steps=4, seed=1)


@pytest.fixture(scope="module")
def encoders(raw_encoders):
    torch.manual_seed(5)
    return Encoders(raw_encoders[0], raw_encoders[1], freeze(IdentityEncoder(width=48)))


@pytest.fixture
def loaded(tiny_model, schedule):
    return tiny_model, schedule


def test_ids_self_similarity_and_symmetry(encoders):
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(5, 3, 32, 32, generator=g), torch.rand(5, 3, 32, 32, generator=g)
    assert np.allclose(ids(a, a, encoders.phi_h), 1.0, atol=1e-6)
    assert np.array_equal(ids(a, b, encoders.phi_h), ids(b, a, encoders.phi_h))
    v = ids(a, b, encoders.phi_h)
    assert np.all((v >= -1) & (v <= 1))


def test_psnr_cap_and_oracle():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert np.all(psnr(x, x) == PSNR_CAP)
    y = (x + 0.05).clamp(0, 1)
    assert psnr(x, y)[0] == pytest.approx(oracles.psnr(x[0].numpy(), y[0].numpy()), abs=1e-9)
    assert np.all(psnr(x, y) >= 0)


def test_ssim_identity():
    x = torch.rand(1, 3, 16, 16)
    assert ssim(x, x)[0] == pytest.approx(1.0)


def test_score_with_hq_injected(small_manifest, encoders):
    recs = heldout_records(small_manifest, "severe")
    hq = to_tensor(np.stack([small_manifest.load(r.hq) for r in recs]))
    rows = score(hq, small_manifest, recs, "severe", encoders)
    assert all(r["ids"] == pytest.approx(1.0, abs=1e-6) and r["psnr"] == PSNR_CAP for r in rows)


def test_input_report_matches_direct_psnr(small_manifest, encoders):
    rep = input_report(small_manifest, encoders, presets=("moderate",))
    r = rep.rows[0]
    hq, lq = small_manifest.load(r["record"]), small_manifest.load(
        next(x for x in small_manifest.records if x.hq == r["record"]).lq["moderate"])
    assert r["psnr"] == pytest.approx(oracles.psnr(hq, lq), abs=1e-6)  # float32 image storage


def test_heldout_records_refuse_leak(small_manifest):
    import dataclasses

    leaked = dataclasses.replace(
        small_manifest,
        records=[dataclasses.replace(r, split="test") if i == 0 else r for i, r in enumerate(small_manifest.records)],
    )
    with pytest.raises(ValueError, match="overlap"):
        heldout_records(leaked, "severe")


def test_table_csv_fixed_order(tmp_path):
    t = Table(("b", "a"))
    t.append({"a": 1.5, "b": "x"})
    t.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "b,a\nx,1.5\n"
    assert Table.from_csv(tmp_path / "t.csv").rows == [{"b": "x", "a": 1.5}]
    with pytest.raises(KeyError):
        t.append({"a": 1})


def test_evaluate_rows_and_determinism(small_manifest, encoders, loaded, tmp_path):
    a = evaluate(loaded, small_manifest, FAST, encoders)
    b = evaluate(loaded, small_manifest, FAST, encoders)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.table.columns == METRIC_COLUMNS
    n_test = len(small_manifest.split("test"))
    assert len(a.rows) == 2 * n_test
    test_ids = {r.id_label for r in small_manifest.split("test")}
    assert {r["id_label"] for r in a.rows} <= test_ids
    assert set(a.summary()) == {"moderate", "severe"}


def test_evaluate_missing_checkpoint(small_manifest, encoders, tmp_path):
    with pytest.raises(FileNotFoundError):
        evaluate(tmp_path / "none.ckpt", small_manifest, FAST, encoders)


def test_evaluate_from_checkpoint_path(small_manifest, encoders, loaded, tmp_path):
    save_model(loaded[0], tmp_path / "m.ckpt", loaded[1], 0)
    a = evaluate(tmp_path / "m.ckpt", small_manifest, FAST, encoders, presets=("severe",))
    b = evaluate(loaded, small_manifest, FAST, encoders, presets=("severe",))
    assert a.rows == b.rows


def test_ablation_rows(small_manifest, encoders, loaded):
    table, reports = ablate_context(loaded, small_manifest, FAST, encoders, presets=("severe",))
    assert [r["mask"] for r in table.rows] == ["--", "-G", "H-", "HG"]
    full = evaluate(loaded, small_manifest, FAST, encoders, presets=("severe",))
    assert reports["HG"].rows == full.rows


def test_sweep_first_row_equals_evaluate(small_manifest, encoders, loaded):
    table, reports = sweep_multi_ref(loaded, small_manifest, FAST, encoders, n_max=3, presets=("severe",))
    assert [r["n_refs"] for r in table.rows] == [1, 2, 3]
    assert reports[1].rows == evaluate(loaded, small_manifest, FAST, encoders, presets=("severe",)).rows


def test_sweep_needs_enough_references(small_manifest, encoders, loaded):
    with pytest.raises(ValueError):
        sweep_multi_ref(loaded, small_manifest, FAST, encoders, n_max=4, presets=("severe",))


def test_probe_control_matches_evaluate(small_manifest, encoders, loaded):
    probe = wrong_reference_probe(loaded, small_manifest, FAST, encoders)
    rep = evaluate(loaded, small_manifest, FAST, encoders)
    for preset in ("moderate", "severe"):
        assert np.array_equal(probe.where(preset=preset).column("hq_correct"),
                              rep.table.where(preset=preset).column("ids"))
    rows = probe.rows
    labels = {r.hq: r.id_label for r in small_manifest.records}
    assert all(r["wrong_id"] != labels[r["record"]] for r in rows)
    summary = probe_summary(probe)
    assert set(summary) == {"moderate", "severe"} and 0 <= summary["severe"]["hq_wins"] <= 1


def test_lambda_sweep_rows(small_manifest, encoders, loaded):
    seen = []

    def fit(lam):
        seen.append(lam)
        return loaded

    table, _ = lambda_sweep(fit, [0.0, 0.6], small_manifest, FAST, encoders, presets=("severe",))
    assert seen == [0.0, 0.6] and [r["lam"] for r in table.rows] == [0.0, 0.6]
    with pytest.raises(ValueError):
        lambda_sweep(fit, [1.5], small_manifest, FAST, encoders)


def test_plots_write_png(tmp_path):
    rows = [{"step": i, "l_mae": 1.0, "l_id_hq": 1 / (i + 1), "l_id_ref": 0.3, "l_hid": 0.2, "l_total": 1.0}
            for i in range(120)]
    plot_loss_curves(rows, tmp_path / "loss.png")
    t = Table(("n_refs", "preset", "ids_mean"), [{"n_refs": n, "preset": "severe", "ids_mean": 0.5} for n in (1, 2)])
    plot_table(t, "n_refs", "ids_mean", tmp_path / "t.png")
    assert (tmp_path / "loss.png").read_bytes()[:4] == b"\x89PNG"
    assert (tmp_path / "t.png").stat().st_size > 0
