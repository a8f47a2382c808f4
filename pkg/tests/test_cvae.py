import csv

import numpy as np
import pytest
from conftest import random_store
from hypothesis import given, settings
from hypothesis import strategies as st

from eegcvae.cvae import (HISTORY_COLUMNS, REFERENCE_PARAMETER_COUNT, ConditionalVAE, TrainConfig, evaluate,
                          kl_term, load_checkpoint, loss, loss_and_grads, recon_term, reparameterize,
                          save_checkpoint, train, write_history_csv)
from eegcvae.data import condition_vector
from eegcvae.errors import IntegrityError, NumericError, ShapeError
from eegcvae.gradcheck import _model64, check_decoder, check_encoder, check_full_loss

TABLE_SHAPES = [
    ("input", (1, 15, 400)),
    ("enc_conv1", (5, 15, 400)),
    ("enc_bn1", (5, 15, 400)),
    ("enc_elu1", (5, 15, 400)),
    ("enc_conv2", (5, 1, 400)),
    ("enc_bn2", (5, 1, 400)),
    ("enc_elu2", (5, 1, 400)),
    ("enc_pool", (5, 1, 200)),
    ("flatten", (1000,)),
    ("enc_mu", (10,)),
    ("enc_logvar", (10,)),
    ("concat_zc", (13,)),
    ("dec_dense", (1000,)),
    ("reshape", (5, 1, 200)),
    ("dec_up", (5, 1, 400)),
    ("dec_deconv1", (5, 15, 400)),
    ("dec_bn1", (5, 15, 400)),
    ("dec_elu1", (5, 15, 400)),
    ("dec_deconv2", (1, 15, 400)),
]


@pytest.fixture(scope="module")
def model():
    return ConditionalVAE(seed=3)


def _onehots(n):
    return np.stack([condition_vector(("RIGHT", "LEFT", "FEET")[i % 3]) for i in range(n)])


# ---------------------------------------------------------------- architecture


def test_shape_trace_matches_table(model):
    assert [(n, tuple(s)) for n, s in model.trace_shapes()] == TABLE_SHAPES


def test_parameter_count_items(model):
    pc = model.count_parameters()
    by = {(layer, p): n for layer, p, _, n in pc.rows}
    assert by[("enc_conv1", "weight")] + by[("enc_conv1", "bias")] == 205
    heads = sum(n for (layer, _), n in by.items() if layer in ("enc_mu", "enc_logvar"))
    assert heads == 20020
    assert pc.trainable == sum(by.values())
    assert sum(n for _, n in pc.conventions) == pc.trainable
    assert pc.non_trainable == 2 * 15


def test_parameter_count_near_reference(model):
    pc = model.count_parameters()
    assert abs(pc.delta) / REFERENCE_PARAMETER_COUNT < 0.05
    text = pc.table()
    assert "delta" in text and "itemized by convention" in text and str(REFERENCE_PARAMETER_COUNT) in text
    best = pc.closest_alternative()
    assert abs(best[2]) <= abs(pc.delta)


def test_parameter_count_convention_switches():
    base = ConditionalVAE().count_parameters().trainable
    assert ConditionalVAE(decoder_dense_bias=False).count_parameters().trainable == base - 1000
    assert ConditionalVAE(output_bn_elu=True).count_parameters().trainable == base + 2


# ---------------------------------------------------------------- encode / reparameterize / decode


def test_encode_shapes_and_determinism(model, rng):
    x = rng.standard_normal((1, 15, 400)).astype(np.float32)
    d = model.encode(np.concatenate([x, x, rng.standard_normal((1, 15, 400)).astype(np.float32)]))
    assert d.mu.shape == d.log_var.shape == (3, 10)
    np.testing.assert_array_equal(d.mu[0], d.mu[1])
    np.testing.assert_array_equal(d.log_var[0], d.log_var[1])


def test_encode_zero_input_is_finite():
    m = ConditionalVAE(seed=0)
    for train_mode in (False, True):
        d = m.encode(np.zeros((2, 15, 400), np.float32), train=train_mode)
        assert np.all(np.isfinite(d.mu)) and np.all(np.isfinite(d.log_var))


def test_encode_shape_error(model):
    with pytest.raises(ShapeError):
        model.encode(np.zeros((2, 14, 400), np.float32))


def test_reparameterize_degenerate():
    mu = np.array([[0.3, -2.0]])
    z = reparameterize(mu, np.full((1, 2), -np.inf), rng=np.random.default_rng(0))
    np.testing.assert_array_equal(z, mu)


def test_reparameterize_monte_carlo_mean():
    n = 1_000_000
    mu, lv = np.array([1.5, -0.5]), np.array([0.4, -1.0])
    z = reparameterize(np.broadcast_to(mu, (n, 2)), np.broadcast_to(lv, (n, 2)), rng=np.random.default_rng(7))
    sigma = np.exp(lv / 2)
    assert np.all(np.abs(z.mean(axis=0) - mu) < 4 * sigma / np.sqrt(n))
    np.testing.assert_allclose(z.std(axis=0), sigma, rtol=5e-3)


def test_reparameterize_seeded():
    mu, lv = np.zeros((3, 10)), np.zeros((3, 10))
    a = reparameterize(mu, lv, rng=np.random.default_rng(5))
    b = reparameterize(mu, lv, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_decode_shapes(model, rng):
    assert model.dec_dense.in_features == 13
    out = model.decode(rng.standard_normal((4, 10)), _onehots(4))
    assert out.shape == (4, 1, 15, 400)


def test_decode_strictness(model):
    z = np.zeros((1, 10))
    with pytest.raises(ValueError):
        model.decode(z, [0.5, 0.5, 0.0])
    assert model.decode(z, [0.5, 0.5, 0.0], strict=False).shape == (1, 1, 15, 400)
    with pytest.raises(ShapeError):
        model.decode(np.zeros((1, 9)), [1, 0, 0])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_decode_shape_property(batch, k, seed):
    m = ConditionalVAE(seed=1)
    z = np.random.default_rng(seed).standard_normal((batch, 10)) * 3
    out = m.decode(z, np.eye(3)[[k] * batch])
    assert out.shape == (batch, 1, 15, 400) and np.all(np.isfinite(out))


# ---------------------------------------------------------------- loss terms


def test_kl_zero():
    assert kl_term(np.zeros((3, 10)), np.zeros((3, 10))) == 0.0


def test_kl_unit_mean_value_and_monte_carlo():
    assert kl_term(np.ones((1, 10)), np.zeros((1, 10))) == pytest.approx(5.0, abs=1e-12)
    # E_q[log q(z) - log p(z)] with z ~ N(1, I); only the quadratic parts differ
    z = np.random.default_rng(11).standard_normal((1_000_000, 10)) + 1.0
    mc = np.mean(0.5 * np.sum(z**2 - (z - 1.0) ** 2, axis=1))
    assert abs(mc - 5.0) < 0.01


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(seed)
    draws = r.standard_normal((1000, 10)) * 3, r.uniform(-8, 4, (1000, 10))
    per_draw = [kl_term(draws[0][i:i + 1], draws[1][i:i + 1]) for i in range(0, 1000, 97)]
    assert min(per_draw) >= 0.0 and kl_term(*draws) >= 0.0


def test_recon_values(rng):
    x = rng.standard_normal((2, 1, 15, 400))
    assert recon_term(x, x) == 0.0
    assert recon_term(x, x + 1.0) == pytest.approx(6000.0, rel=1e-12)
    assert recon_term(x, x + 1.0, weighting="mean") == pytest.approx(1.0, rel=1e-12)
    y = rng.standard_normal(x.shape)
    assert recon_term(x, y) == recon_term(y, x)
    with pytest.raises(ShapeError):
        recon_term(x, x[:, :, :14])


def test_total_is_recon_plus_kl(model, rng):
    x = rng.standard_normal((4, 1, 15, 400)).astype(np.float32)
    parts = loss(model, x, _onehots(4), np.random.default_rng(0))
    assert parts.total == parts.recon + parts.kl
    assert parts.total >= parts.kl >= 0.0


def test_loss_isolation(rng):
    m = ConditionalVAE(seed=2)
    for name in ("enc_mu", "enc_logvar"):
        for arr in m.heads[name].params.values():
            arr[:] = 0
    for arr in m.decoder["dec_deconv2"].params.values():
        arr[:] = 0
    x = rng.standard_normal((3, 1, 15, 400)).astype(np.float32)
    parts = loss_and_grads(m, x, _onehots(3), np.zeros((3, 10), np.float32), train=False, backward=False)
    assert parts.kl == 0.0
    expected = float(np.mean(np.sum(x.astype(np.float64).reshape(3, -1) ** 2, axis=1)))
    assert parts.total == pytest.approx(expected, rel=1e-12)


def test_full_loss_gradient_small_model():
    m = _model64(4, n_channels=4, n_samples=40, latent_dim=3, n_kernels=2, temporal_kernel=6)
    r = np.random.default_rng(4)
    x = r.standard_normal((3, 1, 4, 40))
    c = np.eye(3)
    reps = [check_encoder(m, x, r), check_decoder(m, r.standard_normal((3, 3)), c, r),
            check_full_loss(m, x, c, r.standard_normal((3, 3)), r)]
    for rep in reps:
        assert rep.max_rel_error < 1e-4, rep


# ---------------------------------------------------------------- training


def _small_cfg(**kw):
    base = dict(max_epochs=3, patience=2, batch_size=8, temporal_kernel=8, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_run():
    r = np.random.default_rng(99)
    tr, va = random_store(r, n_per_class=6), random_store(r, n_per_class=2)
    return tr, va, train(tr, va, _small_cfg())


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.max_epochs, cfg.latent_dim, cfg.n_kernels) == (50, 100, 10, 5)
    assert cfg.patience == 10 and cfg.val_passes == 4 and cfg.loss_weighting == "sum"
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weighting="max")


def test_train_history_and_best(small_run):
    tr, va, ck = small_run
    hist = ck.history
    assert hist[0]["epoch"] == 0 and 2 <= len(hist) <= 4
    vals = [h["val_total"] for h in hist]
    assert ck.meta["best_val_total"] == min(vals)
    assert hist[ck.best_epoch]["val_total"] == min(vals)


def test_train_restores_best_parameters(small_run):
    tr, va, ck = small_run
    cfg = ck.config
    val_seq = np.random.SeedSequence(cfg.seed).spawn(4)[3]
    xv = (va.data[:, None] / np.float32(ck.model.input_scale)).astype(np.float32)
    cv = np.stack([condition_vector(lab) for lab in va.labels]).astype(np.float32)
    v = evaluate(ck.model, xv, cv, int(val_seq.generate_state(1)[0]), cfg.val_passes)
    assert v.total == pytest.approx(ck.meta["best_val_total"], rel=1e-6)


def test_train_deterministic(small_run):
    tr, va, ck = small_run
    again = train(tr, va, _small_cfg())
    strip = [{k: v for k, v in h.items() if k != "wall_s"} for h in ck.history]
    strip2 = [{k: v for k, v in h.items() if k != "wall_s"} for h in again.history]
    assert repr(strip) == repr(strip2)
    for k, v in ck.model.parameters().items():
        np.testing.assert_array_equal(v, again.model.parameters()[k])


def test_train_nonfinite_aborts(rng):
    tr = random_store(rng, n_per_class=3)
    tr.data[0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="batch"):
        train(tr, random_store(rng, n_per_class=1), _small_cfg(standardize=False))


def test_train_rejects_unlabeled(rng):
    tr = random_store(rng, n_per_class=2)
    tr.labels[0] = None
    with pytest.raises(ValueError):
        train(tr, random_store(rng, n_per_class=1), _small_cfg())


def test_history_csv(small_run, tmp_path):
    _, _, ck = small_run
    write_history_csv(ck.history, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv", encoding="utf-8")))
    assert tuple(rows[0]) == HISTORY_COLUMNS and len(rows) == len(ck.history) + 1


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(small_run, tmp_path, rng):
    _, _, ck = small_run
    path = save_checkpoint(ck, tmp_path / "ck.bin")
    back = load_checkpoint(path)
    for k, v in ck.model.parameters().items():
        assert v.tobytes() == back.model.parameters()[k].tobytes()
    for k, v in ck.model.buffers().items():
        assert v.tobytes() == back.model.buffers()[k].tobytes()
    assert back.config == ck.config and back.best_epoch == ck.best_epoch
    assert back.optimizer.t == ck.optimizer.t
    probe = rng.standard_normal((2, 15, 400)).astype(np.float32)
    a, b = ck.model.encode(probe), back.model.encode(probe)
    assert a.mu.tobytes() == b.mu.tobytes()
    z = np.ones((2, 10), np.float32)
    assert ck.model.decode(z, _onehots(2)).tobytes() == back.model.decode(z, _onehots(2)).tobytes()
    # saving the reloaded checkpoint gives the same bytes
    assert save_checkpoint(back, tmp_path / "ck2.bin").read_bytes() == path.read_bytes()


def test_checkpoint_integrity(small_run, tmp_path):
    _, _, ck = small_run
    raw = save_checkpoint(ck, tmp_path / "ck.bin").read_bytes()
    cases = {
        "trunc": raw[:-7],
        "magic": b"X" + raw[1:],
        "flip": raw[:-3] + bytes([raw[-3] ^ 0xFF]) + raw[-2:],
        "version": raw.replace(b'"version": 1', b'"version": 9', 1),
        "head": raw[:60],
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / name)
