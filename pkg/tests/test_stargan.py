import numpy as np
import pytest
import torch
from torch import nn

from ppgrestore._gru import gru_sequence
from ppgrestore.stargan import (
    CONFIGS,
    CheckpointError,
    ConfigError,
    ConvBlock,
    Generator,
    InceptionBlock,
    SkipGRU,
    build_models,
    checkpoint_bytes,
    count_parameters,
    get_config,
    load_checkpoint,
    receptive_field,
    restore,
    save_checkpoint,
)

PAPER_PARAMS = 140_567


def plain_unet_params(g, c=3, k=9):
    """Closed-form parameter count of the plain (no inception, no recurrence) generator."""
    conv = lambda cin, cout: k * cin * cout + cout  # noqa: E731
    norm = lambda ch: 2 * ch  # noqa: E731
    return (
        conv(c, g) + norm(g)
        + conv(g, g) + norm(g)
        + conv(g, 2 * g) + norm(2 * g)
        + conv(2 * g, 2 * g) + norm(2 * g)
        + conv(2 * g, 4 * g) + norm(4 * g)
        + conv(4 * g, 4 * g) + norm(4 * g)
        + conv(4 * g, 2 * g)  # up2
        + conv(4 * g, 2 * g) + norm(2 * g)
        + conv(2 * g, g)  # up1
        + conv(2 * g, g) + norm(g)
        + conv(g, c)
    )


# -- configurations ------------------------------------------------------------


def test_grid_rows():
    assert sorted(CONFIGS) == [f"m{i:02d}" for i in range(1, 12)]
    m04, m09 = CONFIGS["m04"], CONFIGS["m09"]
    assert (m04.inception, m04.gru, m04.lstm) == ("none", False, False)
    assert (m09.inception, m09.gru, m09.lstm, m09.g_init, m09.d_init) == ("first", True, False, 16, 8)
    assert CONFIGS["m06"].g_kernels == (9, 5, 5) and CONFIGS["m06"].d_kernels == (9, 7, 5, 3, 1)
    assert CONFIGS["m11"].gru and CONFIGS["m11"].lstm


def test_invalid_configs():
    with pytest.raises(ConfigError):
        get_config("m12")
    with pytest.raises(ConfigError):
        get_config("m09", g_init=12)
    with pytest.raises(ConfigError):
        get_config("m09", inception="some")


def test_config_json_round_trip():
    cfg = get_config("m07", g_init=8)
    assert type(cfg).from_json(cfg.to_json()) == cfg


# -- construction --------------------------------------------------------------


def test_m04_is_a_plain_unet():
    m = build_models(CONFIGS["m04"], seed=0)
    mods = list(m.g_xy.modules())
    assert not any(isinstance(x, (InceptionBlock, SkipGRU, nn.LSTM)) for x in mods)
    assert count_parameters(m.g_xy) == plain_unet_params(16)


def test_m09_has_inception_and_gru_skips():
    g = build_models(CONFIGS["m09"], seed=0).g_xy
    assert isinstance(g.enc1, InceptionBlock)
    assert isinstance(g.enc2, ConvBlock)
    assert isinstance(g.skip1, SkipGRU) and isinstance(g.skip2, SkipGRU)


def test_same_seed_same_weights():
    a, b = build_models(CONFIGS["m09"], seed=4), build_models(CONFIGS["m09"], seed=4)
    c = build_models(CONFIGS["m09"], seed=5)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_generators_and_discriminators_are_twins():
    m = build_models(CONFIGS["m11"], seed=0)
    shapes = lambda net: [tuple(p.shape) for p in net.parameters()]  # noqa: E731
    assert shapes(m.g_xy) == shapes(m.g_yx)
    assert shapes(m.d_x) == shapes(m.d_y)


# -- parameter accounting ------------------------------------------------------


def test_m09_generator_count_is_near_reported_total():
    n = count_parameters(build_models(CONFIGS["m09"], seed=0).g_xy)
    assert abs(n - PAPER_PARAMS) / PAPER_PARAMS < 0.15


def test_empty_stub_has_no_parameters():
    assert count_parameters(nn.Sequential()) == 0
    assert count_parameters([]) == 0


def test_doubling_width_roughly_quadruples_generator():
    small, big = plain_unet_params(16), plain_unet_params(32)
    assert count_parameters(Generator(get_config("m04", g_init=32))) == big
    assert 3.5 < big / small < 4.0


# -- forward behaviour ---------------------------------------------------------


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_forward_preserves_shape(name):
    m = build_models(CONFIGS[name], seed=1).eval()
    x = torch.randn(2, 3, 2000, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        y = m.g_xy(x)
        s = m.d_y(x)
    assert y.shape == x.shape and torch.all(torch.isfinite(y))
    assert s.shape == (2,) and torch.all((s > 0) & (s < 1))


def test_single_channel_models():
    m = build_models(CONFIGS["m09"], seed=1, channels=1)
    assert restore(m.g_xy, np.random.default_rng(0).normal(size=(1, 2000))).shape == (1, 2000)


def test_zero_output_layer_gives_zero_output():
    g = build_models(CONFIGS["m09"], seed=1).g_xy
    with torch.no_grad():
        g.out.weight.zero_()
        g.out.bias.zero_()
        assert torch.all(g(torch.zeros(1, 3, 2000)) == 0)


def test_inference_is_pure():
    m = build_models(CONFIGS["m11"], seed=2)
    x = np.random.default_rng(0).normal(size=(2, 3, 400))
    a, b = restore(m.g_xy, x), restore(m.g_xy, x)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        restore(m.g_xy, np.full((3, 400), np.nan))
    with pytest.raises(ValueError):
        m.g_xy(torch.zeros(1, 3, 402))


@pytest.mark.parametrize("name", ["m04", "m05", "m06", "m07"])
def test_perturbation_stays_inside_receptive_field(name):
    cfg = get_config(name, instance_norm=False)
    g = build_models(cfg, seed=3).g_xy.double().eval()
    rf = receptive_field(cfg)
    x = torch.randn(1, 3, 1024, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    x2 = x.clone()
    pos = 512
    x2[0, 1, pos] += 1.0
    with torch.no_grad():
        diff = (g(x2) - g(x)).abs().amax(dim=1)[0]
    changed = torch.nonzero(diff > 0).flatten()
    assert changed.min() >= pos - rf and changed.max() <= pos + rf
    # stride-2 grids make the bound reachable only within a couple of samples
    assert changed.max() >= pos + rf - 4 and changed.min() <= pos - rf + 4


def test_discriminator_is_deterministic_and_smooth():
    a = build_models(CONFIGS["m09"], seed=7).to(torch.float64)
    b = build_models(CONFIGS["m09"], seed=7).to(torch.float64)
    x = torch.randn(1, 3, 2000, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    eps = 1e-6
    with torch.no_grad():
        s = a.d_y(x)
        assert torch.equal(s, b.d_y(x))
        step = torch.randn(x.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        moved = a.d_y(x + eps * step / step.norm())
    assert 0 < abs(float(moved - s)) < 100 * eps


# -- layers --------------------------------------------------------------------


def test_swish():
    act = nn.SiLU()
    assert float(act(torch.tensor(0.0))) == 0.0
    x = torch.linspace(1, 20, 500)
    assert torch.all(torch.diff(act(x)) > 0)
    assert torch.allclose(act(x), x * torch.sigmoid(x))


@pytest.mark.parametrize("scale, shift", [(1.0, 0.0), (50.0, -3.0), (1e-2, 10.0)])
def test_instance_norm_statistics(scale, shift):
    block = build_models(CONFIGS["m04"], seed=0).g_xy.enc2
    x = scale * torch.randn(3, 32, 500, dtype=torch.float64) + shift
    y = block.double().norm(x)
    assert torch.allclose(y.mean(-1), torch.zeros(3, 32, dtype=torch.float64), atol=1e-5)
    v = x.var(-1, unbiased=False)
    # the 1e-5 stabiliser only matters for small-variance inputs
    assert torch.allclose(y.var(-1, unbiased=False), v / (v + 1e-5), atol=1e-5)
    if scale >= 1:
        assert torch.allclose(y.var(-1, unbiased=False), torch.ones(3, 32, dtype=torch.float64), atol=1e-5)


def test_gru_matches_torch():
    torch.manual_seed(0)
    ref = nn.GRU(5, 7, batch_first=True).double()
    x = torch.randn(3, 40, 5, dtype=torch.float64, requires_grad=True)
    out_ref = ref(x)[0]
    params = (ref.weight_ih_l0, ref.weight_hh_l0, ref.bias_ih_l0, ref.bias_hh_l0)
    out = gru_sequence(x, *params)
    assert torch.allclose(out, out_ref, atol=1e-12, rtol=0)
    w = torch.randn_like(out)
    g_ref = torch.autograd.grad((out_ref * w).sum(), (x, *params))
    g = torch.autograd.grad((out * w).sum(), (x, *params))
    for a, b in zip(g, g_ref):
        assert torch.allclose(a, b, atol=1e-12, rtol=0)


def test_gru_gradcheck():
    torch.manual_seed(1)
    h = 3
    x = torch.randn(2, 6, 4, dtype=torch.float64, requires_grad=True)
    params = [torch.randn(*s, dtype=torch.float64, requires_grad=True) * 0.5 for s in ((3 * h, 4), (3 * h, h), (3 * h,), (3 * h,))]
    params = [p.detach().requires_grad_() for p in params]
    assert torch.autograd.gradcheck(lambda *a: gru_sequence(*a), (x, *params))


def _skip_from_torch(ref: nn.GRU) -> SkipGRU:
    skip = SkipGRU(ref.hidden_size).double()
    with torch.no_grad():
        for sfx in ("", "_reverse"):
            for name in ("weight_ih", "weight_hh", "bias_ih", "bias_hh"):
                getattr(skip, name + sfx).copy_(getattr(ref, f"{name}_l0{sfx}"))
    return skip


def test_skip_gru_sums_both_directions_of_torch_bigru():
    torch.manual_seed(2)
    ref = nn.GRU(6, 6, batch_first=True, bidirectional=True).double()
    skip = _skip_from_torch(ref)
    x = torch.randn(2, 6, 30, dtype=torch.float64)
    out = ref(x.transpose(1, 2))[0]
    expected = (out[..., :6] + out[..., 6:]).transpose(1, 2)
    assert torch.allclose(skip(x), expected, atol=1e-12, rtol=0)


def test_skip_gru_is_time_symmetric():
    # swapping the direction weights and reversing time reverses the output: no built-in delay
    torch.manual_seed(3)
    ref = nn.GRU(4, 4, batch_first=True, bidirectional=True).double()
    skip = _skip_from_torch(ref)
    swapped = SkipGRU(4).double()
    with torch.no_grad():
        for name in ("weight_ih", "weight_hh", "bias_ih", "bias_hh"):
            getattr(swapped, name).copy_(getattr(skip, name + "_reverse"))
            getattr(swapped, name + "_reverse").copy_(getattr(skip, name))
    x = torch.randn(1, 4, 25, dtype=torch.float64)
    assert torch.allclose(swapped(x.flip(-1)), skip(x).flip(-1), atol=1e-12, rtol=0)


def test_gru_skips_add_closed_form_parameter_count():
    per_skip = lambda h: 2 * (3 * h * h + 3 * h * h + 6 * h)  # noqa: E731
    with_gru = count_parameters(build_models(CONFIGS["m09"], seed=0).g_xy)
    without = count_parameters(build_models(CONFIGS["m02"], seed=0).g_xy)
    assert with_gru - without == per_skip(16) + per_skip(32)


# -- checkpoints ---------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_checkpoint_round_trip_is_bit_exact(tmp_path, name):
    m = build_models(CONFIGS[name], seed=11)
    path = save_checkpoint(m, tmp_path / "m.ckpt", extra={"channels": [0, 1, 2]})
    back, extra = load_checkpoint(path)
    assert extra == {"channels": [0, 1, 2]}
    assert back.cfg == m.cfg
    sa, sb = m.state_dict(), back.state_dict()
    assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
    assert checkpoint_bytes(back, extra) == path.read_bytes()


def test_float64_checkpoint_keeps_precision(tmp_path):
    m = build_models(CONFIGS["m04"], seed=0).to(torch.float64)
    back, _ = load_checkpoint(save_checkpoint(m, tmp_path / "m.ckpt"))
    assert next(back.g_xy.parameters()).dtype == torch.float64


def test_damaged_checkpoints_are_rejected(tmp_path):
    raw = checkpoint_bytes(build_models(CONFIGS["m04"], seed=0))
    p = tmp_path / "m.ckpt"
    for bad in (b"XXXXXXXX" + raw[8:], raw[:-3], raw + b"\0"):
        p.write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_checkpoint_config_mismatch_is_rejected(tmp_path):
    a = build_models(CONFIGS["m04"], seed=0)
    b = build_models(CONFIGS["m09"], seed=0)
    b.cfg = a.cfg
    p = tmp_path / "m.ckpt"
    p.write_bytes(checkpoint_bytes(b))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
