import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import mean_abs
from ppgrestore.stargan import build_models, get_config
from ppgrestore.training import (
    DivergenceError,
    LossWeights,
    TrainOptions,
    cycle_loss,
    epoch_order,
    identity_loss,
    load_state,
    loss_terms,
    lsgan_discriminator,
    lsgan_generator,
    make_optimizers,
    new_state,
    save_state,
    total_loss,
    train,
    train_step,
    training_data,
)

TOY = get_config("m04", g_init=2, d_init=1)


def _toy_batch(seed, n=2, c=3, length=64, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, c, length, generator=g, dtype=dtype), torch.randn(n, c, length, generator=g, dtype=dtype)


# -- adversarial terms -----------------------------------------------------------


def test_lsgan_examples():
    ones, zeros, half = torch.ones(4), torch.zeros(4), torch.full((4,), 0.5)
    assert float(lsgan_generator(ones)) == 0.0
    assert float(lsgan_generator(zeros)) == 1.0
    assert float(lsgan_discriminator(zeros, ones)) == 0.0
    assert float(lsgan_discriminator(ones, zeros)) == 2.0
    assert float(lsgan_discriminator(half, half)) == 0.5
    with pytest.raises(ValueError):
        lsgan_generator(torch.zeros(0))


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1)),
       arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 1)))
@settings(max_examples=50, deadline=None)
def test_losses_are_non_negative(fake, real):
    f, r = torch.as_tensor(fake), torch.as_tensor(real)
    assert float(lsgan_generator(f)) >= 0
    assert float(lsgan_discriminator(f, r)) >= 0


def test_total_loss_examples():
    assert total_loss(0.5, 0.2, 0.1) == pytest.approx(3.0, abs=1e-12)
    assert total_loss(0.9, 0.7, 0.3, LossWeights(0, 0, 1)) == pytest.approx(0.3, abs=1e-12)


def test_loss_weights():
    assert LossWeights.parse("1,10,5") == LossWeights()
    with pytest.raises(ValueError):
        LossWeights.parse("1,2")
    with pytest.raises(ValueError):
        LossWeights(-1, 10, 5)


# -- cycle and identity ----------------------------------------------------------


def test_identity_maps_have_zero_cycle_and_identity_loss():
    x, y = _toy_batch(0)
    ident = lambda z: z  # noqa: E731
    cx, cy = cycle_loss(ident, ident, x, y)
    assert float(cx) == 0.0 and float(cy) == 0.0
    assert float(identity_loss(ident, y)) == 0.0


def test_constant_offset_cycle():
    x, y = _toy_batch(1)
    shift = lambda z: z + 0.7  # noqa: E731
    cx, cy = cycle_loss(shift, lambda z: z, x, y)
    assert float(cx) == pytest.approx(0.7, abs=1e-12)
    assert float(cy) == pytest.approx(0.7, abs=1e-12)


def test_cycle_matches_mean_abs_oracle():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(2, 1, 3, 8))
    a, b = rng.normal(size=(2, 3, 3))
    g_xy = lambda z: torch.einsum("ij,njl->nil", torch.as_tensor(a), z)  # noqa: E731
    g_yx = lambda z: torch.tanh(torch.einsum("ij,njl->nil", torch.as_tensor(b), z))  # noqa: E731
    cx, cy = cycle_loss(g_xy, g_yx, torch.as_tensor(x), torch.as_tensor(y))
    ref_x = mean_abs(np.tanh(np.einsum("ij,njl->nil", b, np.einsum("ij,njl->nil", a, x))), x)
    ref_y = mean_abs(np.einsum("ij,njl->nil", a, np.tanh(np.einsum("ij,njl->nil", b, y))), y)
    assert float(cx) == pytest.approx(ref_x, abs=1e-10)
    assert float(cy) == pytest.approx(ref_y, abs=1e-10)


def test_doubling_generator_identity_loss():
    _, y = _toy_batch(3)
    assert float(identity_loss(lambda z: 2 * z, y)) == pytest.approx(float(y.abs().mean()), abs=1e-12)


def test_identity_loss_is_channel_permutation_invariant():
    _, y = _toy_batch(4)
    g = build_models(TOY, seed=0).to(torch.float64).g_xy
    perm = [2, 0, 1]
    with torch.no_grad():
        a = identity_loss(lambda z: g(z), y)
        b = identity_loss(lambda z: g(z[:, [1, 2, 0]])[:, perm], y[:, perm])
    assert float(a) == pytest.approx(float(b), abs=1e-12)


# -- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("net, term", [("g_xy", "total_y"), ("d_y", "adv_d_y")])
def test_finite_difference_gradient(net, term):
    model = build_models(TOY, seed=5).to(torch.float64)
    x, y = _toy_batch(6)

    def loss():
        t = loss_terms(model, x, y)
        return t.totals()[0] if term == "total_y" else t.adv_d_y

    params = list(getattr(model, net).parameters())
    grads = torch.autograd.grad(loss(), params)
    analytic = torch.cat([g.flatten() for g in grads])
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss())
                flat[i] = old - h
                down = float(loss())
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    assert float((analytic - numeric).norm() / numeric.norm()) < 1e-4


def test_discriminator_loss_decreases():
    first, last = [], []
    for seed in range(5):
        model = build_models(TOY, seed=seed)
        opts = TrainOptions(lr=1e-3)
        optims = make_optimizers(model, opts)
        g = torch.Generator().manual_seed(seed)
        t = torch.arange(64) / 400.0
        y = torch.sin(2 * torch.pi * 6 * t).expand(4, 3, 64).contiguous()
        x = y + 0.5 * torch.randn(4, 3, 64, generator=g)
        hist = [train_step(model, optims, x, y)["adv_d_y"] for _ in range(50)]
        first.append(np.mean(hist[:5]))
        last.append(np.mean(hist[-5:]))
    assert np.mean(last) < np.mean(first)


def test_non_finite_loss_raises():
    model = build_models(TOY, seed=0)
    optims = make_optimizers(model, TrainOptions())
    x, y = _toy_batch(0, dtype=torch.float32)
    with torch.no_grad():
        model.g_xy.out.bias.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        train_step(model, optims, x, y)


# -- data and loop ---------------------------------------------------------------


def test_epoch_order_is_reproducible():
    a = epoch_order(50, 3, 2)
    assert np.array_equal(a, epoch_order(50, 3, 2))
    assert not np.array_equal(a, epoch_order(50, 3, 3))
    assert sorted(a) == list(range(50))


def test_training_data_doubles(small_dataset):
    pairs = small_dataset["train"][:6]
    data = training_data(pairs, (0, 2), seed=1)
    assert data.x.shape == (12, 2, 2000) and data.y.shape == (12, 2, 2000)
    assert np.array_equal(data.y[:6], data.y[6:])
    assert not np.array_equal(data.x[:6], data.x[6:])
    assert len(training_data(pairs, augment_sd=0)) == 6


def _tiny_opts(**kw):
    base = dict(epochs=2, batch=2, max_steps_per_epoch=2, seed=7, patience=5)
    base.update(kw)
    return TrainOptions(**base)


def test_one_epoch_smoke(small_dataset, tmp_path):
    tr, va = small_dataset["train"][:8], small_dataset["validation"][:2]
    state = train(tr, TOY, _tiny_opts(epochs=1), va, history_path=tmp_path / "h.csv")
    assert state.epoch == 1 and len(state.history) == 1
    assert np.isfinite(state.history[0]["val_RMSE_t"])
    assert state.best_epoch == 1
    assert "seconds" not in (tmp_path / "h.csv").read_text()


def test_resume_is_bit_exact(small_dataset, tmp_path):
    tr, va = small_dataset["train"][:8], small_dataset["validation"][:2]
    straight = train(tr, TOY, _tiny_opts(), va)
    half = train(tr, TOY, _tiny_opts(epochs=1), va, state_path=tmp_path / "s.state")
    resumed = load_state(tmp_path / "s.state")
    assert resumed.epoch == 1
    resumed.opts = _tiny_opts()
    resumed = train(tr, TOY, resumed.opts, va, state=resumed)
    a, b = straight.model.state_dict(), resumed.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert [h["val_RMSE_t"] for h in straight.history] == [h["val_RMSE_t"] for h in resumed.history]
    assert half.history[0]["val_RMSE_t"] == straight.history[0]["val_RMSE_t"]


def test_state_round_trip(tmp_path):
    state = new_state(TOY, _tiny_opts())
    back = load_state(save_state(state, tmp_path / "s.state"))
    a, b = state.model.state_dict(), back.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert back.opts == state.opts and back.epoch == 0


def test_empty_splits_are_rejected(small_dataset):
    with pytest.raises(ValueError):
        train(small_dataset["train"][:4], TOY, _tiny_opts(), [])
