"""Interpolation baseline, input assembly and the U-Net downscaler."""
import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from latcomp.codec import CodecConfig
from latcomp.downscale import (CHANNEL_ORDER_HASH, FORECAST_CHANNELS, UNet, UNetConfig,
                               DownscaleSchedule, assemble_input, bilinear_resize, downscale,
                               interp_baseline, resize_array, resize_baseline, train_downscaler,
                               unet_forward)
from latcomp.errors import ConfigError, FingerprintError, MissingVariableError, ShapeError
from latcomp.grid import GridField, NormStats, zscore_fit_all
from latcomp.metrics import mse
from latcomp.synthetic import PairSpec, SyntheticSpec, gen_forecast_pair
from latcomp.training import init_params

from gradcheck import directional_check

MICRO = UNetConfig(in_channels=40, stages=2, base_channels=8, channel_mult=(1, 2), out_channels=4,
                   norm_groups=4)
MICRO_RAW = UNetConfig(in_channels=40, stages=2, base_channels=8, channel_mult=(1, 2), out_channels=1,
                       mode="raw", norm_groups=4)
CODEC = CodecConfig(base_channels=8, stage_channels=(8, 16, 32, 32), norm_groups=8)


# --- bilinear ---------------------------------------------------------------------

def test_resize_identity():
    a = np.random.default_rng(0).normal(size=(2, 7, 9))
    assert np.abs(resize_array(a, (7, 9)) - a).max() == 0.0


def test_resize_midpoint_example():
    out = resize_array(np.array([[0.0, 1.0], [2.0, 3.0]]), (3, 3))
    np.testing.assert_allclose(out, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), th=st.integers(1, 40), tw=st.integers(1, 40),
       c=st.floats(-1e3, 1e3))
def test_resize_preserves_constants(h, w, th, tw, c):
    out = resize_array(np.full((h, w), c), (th, tw))
    assert out.shape == (th, tw)
    np.testing.assert_allclose(out, c, rtol=1e-12, atol=1e-12)


def test_resize_matches_pointwise_oracle():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 6))
    out = resize_array(a, (9, 4))
    for i in range(9):
        for j in range(4):
            y, x = i * 4 / 8, j * 5 / 3
            y0, x0 = min(int(y), 3), min(int(x), 4)
            fy, fx = y - y0, x - x0
            want = (a[y0, x0] * (1 - fy) * (1 - fx) + a[y0 + 1, x0] * fy * (1 - fx)
                    + a[y0, x0 + 1] * (1 - fy) * fx + a[y0 + 1, x0 + 1] * fy * fx)
            assert out[i, j] == pytest.approx(want, abs=1e-12)


def test_resize_rejects_empty_target():
    with pytest.raises(ShapeError):
        resize_array(np.zeros((3, 3)), (0, 3))


def test_field_resize_and_baselines():
    f = GridField(np.full((1, 64, 64), 7.0, np.float32), ("T2M",), lat_range=(10.0, 20.0))
    assert bilinear_resize(f, (8, 8)).lat_range == (10.0, 20.0)
    np.testing.assert_allclose(resize_baseline(f).values, 7.0, rtol=1e-6)
    low = GridField(np.full((3, 8, 8), 2.0, np.float32), ("T2M", "mix00", "aux00"))
    out = interp_baseline(low, "T2M", (64, 64))
    assert out.dims == (64, 64) and out.variables == ("T2M",)
    np.testing.assert_allclose(out.values, 2.0, rtol=1e-6)
    stats = NormStats.from_json({"T2M": {"mean": 280.0, "std": 5.0, "count": 9}})
    np.testing.assert_allclose(interp_baseline(low, "T2M", (64, 64), stats).values, 290.0, rtol=1e-6)


# --- input assembly -----------------------------------------------------------------

def forecast(rng, names=FORECAST_CHANNELS):
    return {n: rng.normal(size=(6, 8)) for n in names}


def test_channel_listing():
    assert len(FORECAST_CHANNELS) == 40
    assert FORECAST_CHANNELS[:7] == ("U50", "U200", "U500", "U700", "U850", "U925", "U1000")
    assert FORECAST_CHANNELS[35:] == ("T2M", "TP", "U10M", "V10M", "MSL")
    # frozen so that any reordering is a visible change
    assert CHANNEL_ORDER_HASH == "ffce5271a272ff55"


def test_assemble_order_and_scaling():
    rng = np.random.default_rng(2)
    fc = forecast(rng)
    stats = NormStats.from_json({n: {"mean": 1.0, "std": 2.0, "count": 4} for n in FORECAST_CHANNELS})
    x = assemble_input(fc, stats)
    assert x.shape == (40, 6, 8)
    np.testing.assert_allclose(x[35], (fc["T2M"] - 1.0) / 2.0, rtol=1e-6)
    shuffled = dict(sorted(fc.items(), key=lambda kv: rng.random()))
    np.testing.assert_array_equal(assemble_input(shuffled, stats), x)


def test_assemble_missing_channel_named():
    rng = np.random.default_rng(3)
    names = FORECAST_CHANNELS[:-1]
    stats = NormStats.from_json({n: {"mean": 0.0, "std": 1.0, "count": 4} for n in FORECAST_CHANNELS})
    with pytest.raises(MissingVariableError, match="MSL"):
        assemble_input(forecast(rng, names), stats)


# --- network --------------------------------------------------------------------------

def test_unet_shapes():
    lat = init_params("unet", MICRO, seed=0)
    raw = init_params("unet", MICRO_RAW, seed=0)
    x = np.random.default_rng(0).normal(size=(40, 64, 64)).astype(np.float32)
    assert unet_forward(x, lat).shape == (4, 64, 64)
    assert unet_forward(x, raw).shape == (1, 64, 64)


def test_unet_rejects_odd_dims():
    params = init_params("unet", UNetConfig(base_channels=8, channel_mult=(1, 2, 2, 2), norm_groups=4))
    with pytest.raises(ShapeError):
        unet_forward(np.zeros((40, 63, 63), np.float32), params)


def test_default_unet_shape():
    params = init_params("unet", UNetConfig(), seed=0)
    assert unet_forward(np.zeros((40, 64, 64), np.float32), params).shape == (4, 64, 64)


@settings(max_examples=8, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6))
def test_unet_preserves_dims(h, w):
    params = _micro()
    x = np.zeros((40, 2 * h, 2 * w), np.float32)
    assert unet_forward(x, params).shape == (4, 2 * h, 2 * w)


_MICRO = []


def _micro():
    if not _MICRO:
        _MICRO.append(init_params("unet", MICRO, seed=0))
    return _MICRO[0]


@pytest.mark.parametrize("kwargs", [{"stages": 0, "channel_mult": ()}, {"channel_mult": (1, 2)},
                                    {"mode": "pixel"}, {"base_channels": 12, "norm_groups": 8}])
def test_unet_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        UNetConfig(**kwargs)


def test_unet_gradients_float64():
    torch.manual_seed(0)
    net = UNet(MICRO).double()
    x = torch.randn(2, 40, 8, 8, dtype=torch.float64)
    y = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    errs = directional_check(net, lambda: F.mse_loss(net(x), y))
    assert len(errs) == len(list(net.parameters()))
    assert max(errs.values()) <= 1e-4, max(errs.items(), key=lambda kv: kv[1])


# --- training and inference ------------------------------------------------------------

def pairs(n, dims=(64, 64), seed=0):
    lows, highs = [], []
    for i in range(n):
        lo, hi = gen_forecast_pair(PairSpec(SyntheticSpec(dims, beta=2.5, amplitude=8.0,
                                                           mean_offset=285.0, seed=seed + i)))
        lows.append(lo)
        highs.append(hi)
    return lows, highs


@pytest.fixture(scope="module")
def setup():
    lows, highs = pairs(16)
    in_stats = zscore_fit_all(lows)
    out_stats = zscore_fit_all(highs)
    codec = init_params("codec", CODEC, seed=2, variables=("T2M",), norm_stats={"input": out_stats})
    x = np.stack([(l.values - in_stats.vectors(l.variables)[0]) / in_stats.vectors(l.variables)[1]
                  for l in lows]).astype(np.float32)
    y = np.stack([(h.values - out_stats["T2M"].mean) / out_stats["T2M"].std for h in highs]).astype(np.float32)
    return lows, highs, in_stats, out_stats, codec, x, y


SCHED = DownscaleSchedule(batch_size=4, epochs=4, learning_rate=2e-3, seed=3, raw_patch=32)


def train(setup, mode, **kw):
    lows, _, in_stats, out_stats, codec, x, y = setup
    cfg = MICRO if mode == "latent" else MICRO_RAW
    return train_downscaler((x, y), kw.pop("schedule", SCHED), mode, cfg, codec=codec,
                            input_stats=in_stats, output_stats=out_stats,
                            input_variables=lows[0].variables, output_variables=("T2M",), **kw)


def test_zero_epochs_is_init(setup):
    params, history = train(setup, "latent", schedule=DownscaleSchedule(epochs=0, seed=5))
    assert history == []
    assert params.param_hash == init_params("unet", MICRO, seed=5).param_hash


@pytest.fixture(scope="module")
def latent_runs(setup):
    return train(setup, "latent"), train(setup, "latent")


def test_latent_training_progress(latent_runs):
    (_, history), _ = latent_runs
    assert len(history) == 4
    assert history[-1]["loss"] < history[0]["loss"]


def test_latent_training_deterministic(latent_runs):
    (p1, h1), (p2, h2) = latent_runs
    assert h1 == h2 and p1.param_hash == p2.param_hash


def test_raw_training_progress(setup):
    params, history = train(setup, "raw")
    assert history[-1]["loss"] < history[0]["loss"]
    assert params.provenance["raw_patch"] == 32


def test_mode_must_match_config(setup):
    lows, _, in_stats, out_stats, codec, x, y = setup
    with pytest.raises(ConfigError):
        train_downscaler((x, y), SCHED, "raw", MICRO, codec=codec)
    with pytest.raises(ConfigError):
        train_downscaler((x, y), SCHED, "latent", MICRO)


def test_latent_downscale_shape(setup, latent_runs):
    lows, highs, _, _, codec, _, _ = setup
    (unet, _), _ = latent_runs
    out = downscale(lows[0], unet, codec)
    assert out.shape == (1, 64, 64) and out.variables == ("T2M",) and out.is_finite()
    big_low, _ = gen_forecast_pair(PairSpec(SyntheticSpec((256, 256), seed=1)))
    assert downscale(big_low, unet, codec, target_dims=(256, 256)).shape == (1, 256, 256)


def test_untrained_outputs_finite(setup):
    lows, _, in_stats, out_stats, codec, _, _ = setup
    for cfg, c in ((MICRO, codec), (MICRO_RAW, None)):
        unet = init_params("unet", cfg, seed=0, variables=lows[0].variables,
                           norm_stats={"input": in_stats, "output": out_stats},
                           provenance={"factor": 8, "raw_patch": 32})
        out = downscale(lows[0], unet, c)
        assert out.shape == (1, 64, 64) and out.is_finite()


def test_codec_fingerprint_checked(setup, latent_runs):
    lows, *_ = setup
    (unet, _), _ = latent_runs
    other = init_params("codec", CodecConfig(base_channels=8, stage_channels=(8, 8, 16, 16), norm_groups=8),
                        variables=("T2M",))
    with pytest.raises(FingerprintError):
        downscale(lows[0], unet, other)


def test_interp_baseline_is_imperfect(setup):
    lows, highs, *_ = setup
    errs = [mse(h, interp_baseline(l, "T2M", h.dims), "T2M") for l, h in zip(lows, highs)]
    assert min(errs) > 0
