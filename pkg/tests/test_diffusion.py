import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from refface.diffusion import (
    LossLog,
    RestorationModel,
    ScheduleError,
    TrainingConfig,
    TrainingData,
    direct_estimate,
    forward_diffuse,
    load_model,
    make_schedule,
    predict_noise,
    save_model,
    train,
)
from refface.checkpoint import state_hash
from refface.encoders import CompositeContext, mask_components


# ---------------------------------------------------------------- schedule


def test_two_step_schedule():
    s = make_schedule(2, 0.1, 0.2)
    assert torch.allclose(s.alpha_bar, torch.tensor([0.9, 0.72], dtype=torch.float64), atol=1e-15)


def test_alpha_bar_one_is_one_minus_beta_one():
    s = make_schedule(50, 3e-4, 0.05)
    assert s.alpha_bar[0].item() == 1 - s.beta[0].item()


def test_schedule_matches_product_oracle():
    s = make_schedule(200, 1e-4, 0.04)
    ref = oracles.alpha_bar(oracles.linear_betas(200, 1e-4, 0.04))
    assert np.allclose(s.alpha_bar.numpy(), ref, rtol=1e-12)


def test_reference_linear_schedule_terminal_value():
    # T=200 with beta up to 0.02 leaves abar_T near 0.13, well above 0.05
    ab_t = oracles.alpha_bar(oracles.linear_betas(200, 1e-4, 0.02))[-1]
    assert make_schedule(200, 1e-4, 0.02).alpha_bar[-1].item() == pytest.approx(ab_t, rel=1e-12)
    assert ab_t == pytest.approx(0.1322, abs=1e-4)


def test_default_schedule_terminal_value_is_small():
    assert make_schedule().alpha_bar[-1].item() < 0.05


def test_schedule_invariants():
    s = make_schedule()
    assert torch.all(s.beta[1:] >= s.beta[:-1]) and 0 < s.beta[0] and s.beta[-1] < 1
    assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])
    assert torch.all((s.alpha_bar > 0) & (s.alpha_bar < 1))


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        make_schedule(1)
    with pytest.raises(ScheduleError):
        make_schedule(10, 0.2, 0.1)
    with pytest.raises(ScheduleError):
        make_schedule().alpha_bar_at(0)
    with pytest.raises(ScheduleError):
        make_schedule(10).alpha_bar_at(11)


# ---------------------------------------------------------------- forward / inverse


def test_direct_estimate_hand_value():
    s = make_schedule(2, 0.1, 0.2)
    x = direct_estimate(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64), 1, s)
    assert x.item() == pytest.approx((1.0 - math.sqrt(0.1) * 0.5) / math.sqrt(0.9), abs=1e-12)
    assert x.item() == pytest.approx(0.887426, abs=1e-6)
    assert x.item() == pytest.approx(oracles.direct_estimate(1.0, 0.5, 0.9), abs=1e-12)


def test_zero_noise_forward_and_inverse(schedule):
    x0 = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    t = torch.tensor([10, 150])
    z = forward_diffuse(x0, t, torch.zeros_like(x0), schedule)
    ab = schedule.alpha_bar_at(t).sqrt()[:, None, None, None]
    assert torch.allclose(z, ab * x0)
    assert torch.allclose(direct_estimate(z, torch.zeros_like(z), t, schedule), z / ab)


def test_forward_near_zero_noise_limit():
    s = make_schedule(10, 1e-8, 1e-8)
    x0 = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    assert torch.allclose(forward_diffuse(x0, 1, torch.randn_like(x0), s), x0, atol=1e-3)


@given(st.integers(1, 200), st.integers(0, 2**16))
@settings(max_examples=100, deadline=None)
def test_inversion_property(t, seed):
    s = make_schedule()
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(1, 3, 8, 8, generator=g) * 2 - 1
    eps = torch.randn(1, 3, 8, 8, generator=g)
    z = forward_diffuse(x0, torch.tensor([t]), eps, s)
    assert torch.allclose(direct_estimate(z, eps, torch.tensor([t]), s).float(), x0, atol=1e-5)


def test_direct_estimate_is_unclamped(schedule):
    z = torch.full((1, 3, 4, 4), 3.0)
    assert direct_estimate(z, torch.zeros_like(z), 200, schedule).max() > 1


# ---------------------------------------------------------------- network


def _ctx(model, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    d = model.config["d_ctx"]
    return CompositeContext(torch.randn(batch, 18, d, generator=g), torch.ones(batch, 18, dtype=torch.bool))


def test_output_shape_and_determinism(tiny_model):
    z = torch.randn(2, 3, 32, 32)
    a = predict_noise(tiny_model, z, z, _ctx(tiny_model), 5)
    b = predict_noise(tiny_model, z, z, _ctx(tiny_model), 5)
    assert a.shape == z.shape and torch.equal(a, b)


@pytest.mark.parametrize("mask", [(True, False), (False, True)])
def test_masked_equals_removed_tokens(tiny_model, mask):
    z = torch.randn(2, 3, 32, 32)
    ctx = mask_components(_ctx(tiny_model), *mask)
    masked = predict_noise(tiny_model, z, z, ctx, torch.tensor([3, 90]))
    removed = predict_noise(tiny_model, z, z, ctx.compact(), torch.tensor([3, 90]))
    assert torch.allclose(masked, removed, atol=1e-6)


def test_fully_masked_context_is_null(tiny_model):
    z = torch.randn(2, 3, 32, 32)
    ctx = mask_components(_ctx(tiny_model), False, False)
    assert torch.equal(predict_noise(tiny_model, z, z, ctx, 7), predict_noise(tiny_model, z, z, None, 7))


def test_fully_masked_row_in_mixed_batch(tiny_model):
    z = torch.randn(2, 3, 32, 32)
    ctx = _ctx(tiny_model)
    ctx.mask[1] = False
    mixed = predict_noise(tiny_model, z, z, ctx, 7)
    null = predict_noise(tiny_model, z[1:], z[1:], None, 7)
    assert torch.isfinite(mixed).all()
    assert torch.allclose(mixed[1:], null, atol=1e-6)


def test_null_lq_is_zero_image(tiny_model):
    z = torch.randn(1, 3, 32, 32)
    assert torch.equal(
        predict_noise(tiny_model, z, None, None, 4), predict_noise(tiny_model, z, torch.zeros_like(z), None, 4)
    )


def test_shape_errors(tiny_model):
    z = torch.randn(2, 3, 32, 32)
    with pytest.raises(ValueError):
        predict_noise(tiny_model, z, torch.zeros(2, 3, 16, 16), None, 1)
    bad = CompositeContext(torch.randn(2, 18, 5), torch.ones(2, 18, dtype=torch.bool))
    with pytest.raises(ValueError):
        predict_noise(tiny_model, z, z, bad, 1)


def test_model_checkpoint_roundtrip(tiny_model, schedule, tmp_path):
    digest = save_model(tiny_model, tmp_path / "m.ckpt", schedule, step=12)
    model, sch, meta = load_model(tmp_path / "m.ckpt", sha256=digest)
    assert meta["step"] == 12 and meta["schedule"] == schedule.params()
    assert torch.equal(sch.alpha_bar, schedule.alpha_bar)
    z = torch.randn(1, 3, 32, 32)
    assert torch.equal(model(z, z, None, 3), tiny_model(z, z, None, 3))


# ---------------------------------------------------------------- training


def _cfg(**kw):
    base = dict(steps=6, batch_size=4, lq_variants=1, log_every=0, learning_rate=1e-3)
    return TrainingConfig(**{**base, **kw})


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainingConfig(w_hid=-0.1)
    with pytest.raises(ValueError):
        TrainingConfig(cond_dropout_p=1.0)


def test_training_requires_frozen_encoders(small_manifest, schedule):
    from refface.encoders import GeneralEncoder, IdentityEncoder

    with pytest.raises(ValueError, match="frozen"):
        train(RestorationModel(channels=(16, 32)), small_manifest, (IdentityEncoder(), GeneralEncoder()), schedule,
              _cfg())


def test_training_is_deterministic(small_manifest, raw_encoders, schedule):
    cfg = _cfg(steps=50)
    data = TrainingData(small_manifest, cfg)
    logs = []
    for _ in range(2):
        torch.manual_seed(0)
        model = RestorationModel(channels=(16, 32))
        logs.append(train(model, small_manifest, raw_encoders, schedule, cfg, data=data).rows)
    assert logs[0] == logs[1]


def test_encoders_untouched_by_training(small_manifest, raw_encoders, schedule):
    before = [state_hash(e) for e in raw_encoders]
    train(RestorationModel(channels=(16, 32)), small_manifest, raw_encoders, schedule, _cfg(steps=100, batch_size=2))
    assert [state_hash(e) for e in raw_encoders] == before


def test_zero_weight_total_is_mae(small_manifest, raw_encoders, schedule):
    log = train(RestorationModel(channels=(16, 32)), small_manifest, raw_encoders, schedule, _cfg(w_hid=0.0))
    assert all(r["l_total"] == r["l_mae"] for r in log.rows)


def test_log_terms_satisfy_hid_identity(small_manifest, raw_encoders, schedule):
    log = train(RestorationModel(channels=(16, 32)), small_manifest, raw_encoders, schedule, _cfg(lam=0.6))
    for r in log.rows:
        assert r["l_hid"] == pytest.approx(0.4 * r["l_id_hq"] + 0.6 * r["l_id_ref"], rel=1e-5)
        assert r["l_total"] == pytest.approx(r["l_mae"] + 0.1 * r["l_hid"], rel=1e-5)


def test_no_dropout_consumes_context_every_step(small_manifest, raw_encoders, schedule):
    cfg = _cfg(steps=20, cond_dropout_p=0.0)
    log = train(RestorationModel(channels=(16, 32)), small_manifest, raw_encoders, schedule, cfg)
    assert log.context_steps == 20


def test_lossl_csv_roundtrip(tmp_path):
    log = LossLog(rows=[{"step": 0, "l_mae": 0.5, "l_id_hq": 0.1, "l_id_ref": 0.2, "l_hid": 0.16, "l_total": 0.516}])
    log.to_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "step,l_mae,l_id_hq,l_id_ref,l_hid,l_total"
    assert LossLog.from_csv(tmp_path / "l.csv").rows == log.rows


def test_training_data_refuses_missing_lq(tmp_path):
    from refface.toyfaces import build_dataset

    m = build_dataset(4, 1, 0.5, seed=0, out_dir=tmp_path)
    with pytest.raises(ValueError, match="LQ"):
        TrainingData(m, _cfg())


def test_training_data_reference_bank(small_manifest):
    data = TrainingData(small_manifest, _cfg(lq_variants=1))
    recs = small_manifest.split("train")
    assert data.refs.shape[:2] == (len(recs), 3)
    assert data.lq.shape[1] == 2 + 2  # stored moderate/severe plus one fresh variant per preset
    g = torch.Generator().manual_seed(0)
    _, _, ref = data.batch(64, g, augment=False)
    bank = data.refs.reshape(-1, *data.refs.shape[2:])
    hits = {int(((bank - r).abs().amax(dim=(1, 2, 3)) == 0).nonzero()[0]) % 3 for r in ref}
    assert hits == {0, 1, 2}  # every reference slot gets drawn


def test_extra_identities_extend_train_split_only(small_manifest):
    data = TrainingData(small_manifest, _cfg(lq_variants=2, extra_identities=3))
    n = len(small_manifest.split("train"))
    assert len(data) == n + 3 * TrainingData.EXTRA_HQ
    assert (data.labels[n:] < 0).all()  # never collide with manifest labels
    assert set(data.labels[:n].tolist()) == set(small_manifest.id_labels("train"))
    assert data.lq.shape[:2] == (len(data), 2 + 2 * 2)
    with pytest.raises(ValueError, match="LQ variants"):
        TrainingData(small_manifest, _cfg(lq_variants=0, extra_identities=1))
    with pytest.raises(ValueError):
        TrainingConfig(extra_identities=-1)


def test_lr_decay_changes_updates_not_first_step(small_manifest, raw_encoders, schedule):
    data = TrainingData(small_manifest, _cfg())
    logs = []
    for decay in (False, True):
        torch.manual_seed(0)
        logs.append(train(RestorationModel(channels=(16, 32)), small_manifest, raw_encoders, schedule,
                          _cfg(lr_decay=decay), data=data).rows)
    assert logs[0][0] == logs[1][0]  # same start, the schedule only acts after the first update
    assert logs[0][-1] != logs[1][-1]


def test_smoke_run_reduces_mae(small_manifest, raw_encoders, schedule):
    torch.manual_seed(0)
    cfg = _cfg(steps=500, batch_size=8, learning_rate=1e-3)
    log = train(RestorationModel(channels=(16, 32)), small_manifest, raw_encoders, schedule, cfg)
    mae = log.column("l_mae")
    assert mae[-100:].mean() < mae[:100].mean()
