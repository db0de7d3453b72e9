"""Acceptance criteria 1-10, one PASS/FAIL line each.

Criteria 6, 7, 8 and 10 train small models on synthetic data and take tens of
minutes on one CPU core; they are marked ``slow``.
"""
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from latcomp.archive import REFERENCE_RATIO, ArchiveMeta, SourceMeta, compression_ratio
from latcomp.codec import (VAE, CodecConfig, LatentRepr, PhaseSpec, TrainSchedule, charbonnier,
                           decode_array, decoded_shape, encode_array, kl_gaussian, latent_shape,
                           reconstruct, traced_shapes, train_vae, vae_loss)
from latcomp.downscale import (DownscaleSchedule, UNet, UNetConfig, downscale, interp_baseline,
                               resize_baseline, train_downscaler)
from latcomp.grid import GridField, patch_offsets, patchify, unpatchify, zscore_fit, zscore_fit_all
from latcomp.metrics import (mse, rmse, row_dft_power, seam_check, ssim, zonal_power_spectrum)
from latcomp.synthetic import PairSpec, SyntheticSpec, gen_forecast_pair, gen_grf
from latcomp.training import init_params

from conftest import VERDICTS
from gradcheck import directional_check
from oracles import loop_mse, loop_spectrum, loop_ssim


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


# --- 1. shapes ------------------------------------------------------------------------

def test_criterion_1_shape_contracts():
    full = CodecConfig()
    # tracing the real modules first also warms up torch's meta device (about 1 s, once)
    traced = traced_shapes(full, (4384, 6880))
    joint = traced_shapes(CodecConfig(in_channels=3), (4384, 6880))[2]

    t0 = time.perf_counter()
    lat = latent_shape(full, (4384, 6880))
    dec = decoded_shape(full, lat)
    meta_ok = (lat == (4, 548, 860) and dec == (1, 4384, 6880) and traced == (lat, lat, dec)
               and joint == (3, 4384, 6880))

    params = init_params("codec", CodecConfig(base_channels=16, stage_channels=(16, 32, 64, 64),
                                              norm_groups=8), seed=0)
    x = np.random.default_rng(0).normal(size=(1, 1, 256, 256)).astype(np.float32)
    mu, log_var = encode_array(x, params)
    back = decode_array(mu, params)
    run_ok = mu.shape == log_var.shape == (1, 4, 32, 32) and back.shape == (1, 1, 256, 256)
    elapsed = time.perf_counter() - t0
    verdict(1, meta_ok and run_ok and elapsed < 1.0,
            f"meta {lat}->{dec}, executed (1, 256, 256)->{mu.shape[1:]}->{back.shape[1:]}, {elapsed:.2f}s")


# --- 2. closed-form values ---------------------------------------------------------------

def test_criterion_2_unit_values():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 16, 16))
    checks = {}
    checks["charbonnier"] = math.isclose(float(charbonnier(x, x, eps=1e-3)), 1e-3, rel_tol=1e-9)
    zero = np.zeros((4, 5, 5))
    checks["kl_standard"] = float(kl_gaussian(LatentRepr(zero, zero))) == 0.0
    one = np.ones((1, 1, 1))
    checks["kl_mu1"] = math.isclose(float(kl_gaussian(LatentRepr(one, np.zeros_like(one)))), 0.5,
                                    rel_tol=1e-9)
    t = rng.normal(280.0, 5.0, size=(1, 32, 32))
    checks["rmse_offset"] = math.isclose(rmse(t, t + 2.0), 2.0, rel_tol=1e-9)
    checks["ssim_self"] = math.isclose(ssim(t, t), 1.0, rel_tol=1e-9)
    L, k0 = 64, 7
    spec = zonal_power_spectrum(np.tile(np.cos(2 * np.pi * k0 * np.arange(L) / L), (4, 1)))
    checks["cosine_peak"] = math.isclose(spec.power[k0 - 1], 0.5, rel_tol=1e-9)
    leak = float(np.abs(np.delete(spec.power, k0 - 1)).max())
    checks["cosine_leak"] = leak <= 1e-12
    elapsed = time.perf_counter() - t0
    bad = [k for k, ok in checks.items() if not ok]
    verdict(2, not bad and elapsed < 1.0,
            f"{len(checks) - len(bad)}/{len(checks)} closed forms hold, leakage {leak:.1e}, "
            f"{elapsed:.2f}s" + (f", failing {bad}" if bad else ""))


# --- 3. loop oracles ------------------------------------------------------------------------

def test_criterion_3_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(11, 17, size=2)
        t = rng.normal(size=(h, w))
        p = t + rng.normal(scale=0.5, size=(h, w))
        pairs = [(mse(t, p), loop_mse(t, p)), (rmse(t, p), math.sqrt(loop_mse(t, p))),
                 (ssim(t, p), loop_ssim(t, p))]
        pairs += list(zip(zonal_power_spectrum(t).power, loop_spectrum(t)))
        for got, want in pairs:
            worst = max(worst, abs(got - want) / abs(want))
        P = row_dft_power(t)
        half = w // 2
        if w % 2:
            total = P[:, 0] + 2 * P[:, 1:half + 1].sum(axis=1)
        else:
            total = P[:, 0] + 2 * P[:, 1:half].sum(axis=1) + P[:, half]
        worst = max(worst, float(np.max(np.abs(total - (t ** 2).mean(axis=1)) / (t ** 2).mean(axis=1))))
    elapsed = time.perf_counter() - t0
    verdict(3, worst <= 1e-9 and elapsed < 10.0,
            f"worst relative deviation {worst:.1e} over 100 fields, {elapsed:.1f}s")


# --- 4. gradients ----------------------------------------------------------------------------

def test_criterion_4_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = CodecConfig(base_channels=8, stage_channels=(8, 8, 8, 8), norm_groups=4, kl_weight=0.1)
    vae = VAE(cfg).double()
    x = torch.randn(2, 1, 8, 8, dtype=torch.float64)

    def vae_objective():
        rec, mu, lv = vae(x, generator=torch.Generator().manual_seed(5))
        return vae_loss(x, rec, LatentRepr(mu, lv), cfg)[0]

    net = UNet(UNetConfig(in_channels=40, stages=2, base_channels=8, channel_mult=(1, 2),
                          out_channels=4, norm_groups=4)).double()
    xi = torch.randn(2, 40, 8, 8, dtype=torch.float64)
    yi = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    errs = directional_check(vae, vae_objective)
    errs.update({f"unet.{k}": v for k, v in directional_check(net, lambda: F.mse_loss(net(xi), yi)).items()})
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    elapsed = time.perf_counter() - t0
    verdict(4, worst <= 1e-4 and elapsed < 120,
            f"{len(errs)} tensors, worst relative error {worst:.1e} ({name}), {elapsed:.1f}s")


# --- 5. patching ------------------------------------------------------------------------------

def test_criterion_5_patch_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(50):
        h, w = (int(v) for v in rng.integers(1, 300, size=2))
        ph, pw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        f = GridField(rng.normal(size=(2, h, w)).astype(np.float32), ("a", "b"))
        ps = patchify(f, (ph, pw), ("shift", "even")[i % 2])
        back = unpatchify(ps, blend=("feather", "average")[(i // 2) % 2])
        worst = max(worst, float(np.abs(back.values - f.values).max()))
    tiles = len(patch_offsets((4384, 6880), (1000, 1000)))
    elapsed = time.perf_counter() - t0
    verdict(5, worst <= 1e-6 and tiles == 35 and elapsed < 30,
            f"max round-trip error {worst:.1e} over 50 cases, {tiles} tiles at 4384x6880, {elapsed:.1f}s")


# --- desk-scale training runs -------------------------------------------------------------------

DESK_CODEC = CodecConfig(base_channels=16, stage_channels=(16, 32, 64, 64), norm_groups=8)
DESK_SCHEDULE = TrainSchedule(pretrain=PhaseSpec(32, 10), finetune=PhaseSpec(64, 5), batch_size=8,
                              learning_rate=1e-3, seed=0)
DESK_UNET = UNetConfig(in_channels=40, stages=2, base_channels=32, channel_mult=(1, 2), out_channels=4,
                       norm_groups=8)
DESK_DOWN = DownscaleSchedule(batch_size=16, epochs=40, learning_rate=1e-3, seed=0)
N_TRAIN, N_TEST = 500, 100


def desk_field(seed, beta=2.5, dims=(64, 64)):
    return gen_grf(SyntheticSpec(dims, beta=beta, amplitude=8.0, mean_offset=285.0, seed=seed))


def desk_pair(seed, beta=2.5, dims=(64, 64)):
    return gen_forecast_pair(PairSpec(SyntheticSpec(dims, beta=beta, amplitude=8.0, mean_offset=285.0,
                                                    seed=seed)))


def run_codec():
    train = [desk_field(i) for i in range(N_TRAIN)]
    stats = zscore_fit(train, "T2M")
    data = np.stack([(f.values - stats["T2M"].mean) / stats["T2M"].std for f in train]).astype(np.float32)
    snaps = {}
    params, history = train_vae(data, DESK_SCHEDULE, DESK_CODEC, variables=("T2M",), norm_stats=stats,
                                on_phase_end=lambda name, p: snaps.setdefault(name, p))
    return params, snaps["pretrain"], history


def normalize(fields, stats):
    names = fields[0].variables
    mean, std = stats.vectors(names)
    return np.stack([(f.values - mean) / std for f in fields]).astype(np.float32)


def run_downscaler(codec):
    lows, highs = zip(*(desk_pair(100_000 + i) for i in range(N_TRAIN)))
    in_stats = zscore_fit_all(lows)
    out_stats = codec.stats("input")
    x, y = normalize(lows, in_stats), normalize(highs, out_stats)
    return train_downscaler((x, y), DESK_DOWN, "latent", DESK_UNET, codec=codec, input_stats=in_stats,
                            output_stats=out_stats, input_variables=lows[0].variables,
                            output_variables=("T2M",))


@pytest.fixture(scope="module")
def codec_run():
    t0 = time.perf_counter()
    out = run_codec()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def down_run(codec_run):
    t0 = time.perf_counter()
    out = run_downscaler(codec_run[0][0])
    return out, time.perf_counter() - t0


def pooled_rmse(truths, preds):
    return math.sqrt(np.mean([mse(t, p, "T2M") for t, p in zip(truths, preds)]))


@pytest.mark.slow
def test_criterion_6_codec_ordering(codec_run):
    (final, pretrain, _), elapsed = codec_run
    test = [desk_field(50_000 + i) for i in range(N_TEST)]
    r_final = pooled_rmse(test, [reconstruct(f, final) for f in test])
    r_pre = pooled_rmse(test, [reconstruct(f, pretrain) for f in test])
    r_resize = pooled_rmse(test, [resize_baseline(f) for f in test])
    ok = r_final < r_resize and r_final <= r_pre and elapsed <= 3600
    verdict(6, ok, f"RMSE fine-tuned {r_final:.4f} K, pretrain-only {r_pre:.4f} K, "
                   f"resize {r_resize:.4f} K, training {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_downscaling_ordering(codec_run, down_run):
    codec = codec_run[0][0]
    (unet, _), elapsed = down_run
    mse_net, mse_int, wins = [], [], 0
    for i in range(N_TEST):
        low, high = desk_pair(150_000 + i)
        pred = downscale(low, unet, codec)
        base = interp_baseline(low, "T2M", high.dims)
        mse_net.append(mse(high, pred, "T2M"))
        mse_int.append(mse(high, base, "T2M"))
        wins += ssim(high, pred, "T2M") > ssim(high, base, "T2M")
    gain = 1.0 - np.mean(mse_net) / np.mean(mse_int)
    ok = gain >= 0.20 and wins >= 0.9 * N_TEST and elapsed <= 3600
    verdict(7, ok, f"MSE improvement over interpolation {gain:.1%}, SSIM higher on {wins}/{N_TEST}, "
                   f"training {elapsed / 60:.1f} min")


RAW_UNET = UNetConfig(in_channels=40, stages=2, base_channels=16, channel_mult=(1, 2), out_channels=1,
                      mode="raw", norm_groups=8)
RAW_DOWN = DownscaleSchedule(batch_size=16, epochs=5, learning_rate=1e-3, seed=0, raw_patch=32)


@pytest.mark.slow
def test_criterion_8_seams(codec_run, down_run):
    t0 = time.perf_counter()
    codec = codec_run[0][0]
    (unet, _), _ = down_run
    lows, highs = zip(*(desk_pair(200_000 + i) for i in range(200)))
    in_stats, out_stats = zscore_fit_all(lows), zscore_fit_all(highs)
    raw, _ = train_downscaler((normalize(lows, in_stats), normalize(highs, out_stats)), RAW_DOWN, "raw",
                              RAW_UNET, input_stats=in_stats, output_stats=out_stats,
                              input_variables=lows[0].variables, output_variables=("T2M",))
    latent_worst, raw_reports = 0.0, []
    for i in range(3):
        low, _ = desk_pair(250_000 + i, beta=4.0, dims=(256, 256))
        latent_out = downscale(low, unet, codec)
        rep = seam_check(latent_out.values, RAW_DOWN.raw_patch)
        latent_worst = max(latent_worst, rep.ratio)
        raw_reports.append(seam_check(downscale(low, raw, blend="average").values, RAW_DOWN.raw_patch))
    raw_flag = any(r.spike for r in raw_reports)
    raw_worst = max(r.ratio for r in raw_reports)
    elapsed = time.perf_counter() - t0
    verdict(8, latent_worst <= 1.0 and elapsed < 300,
            f"latent seam/interior ratio {latent_worst:.2f}; raw average-blend ratio {raw_worst:.2f}"
            f" ({'SEAM SPIKE FLAGGED' if raw_flag else 'no spike'}), {elapsed:.0f}s")


# --- 9. compression ratio ----------------------------------------------------------------------

def test_criterion_9_compression_accounting():
    rep = compression_ratio(SourceMeta((4384, 6880)), ArchiveMeta((4, 548, 860), "float16", "mu_only"))
    oracle = (4384 * 6880 * 4) / (4 * 548 * 860 * 2)
    print(rep.assumptions)
    ok = rep.ratio == oracle == 32.0 and "42.2" in rep.assumptions \
        and REFERENCE_RATIO == pytest.approx(42.2, abs=0.05)
    verdict(9, ok, f"{rep.ratio:.1f}x from {rep.source_bytes} / {rep.archived_bytes} bytes; "
                   f"reference {REFERENCE_RATIO:.1f}x")


# --- 10. determinism ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_determinism(codec_run, down_run):
    (final, _, hist), _ = codec_run
    (unet, dhist), _ = down_run
    final2, _, hist2 = run_codec()
    unet2, dhist2 = run_downscaler(final2)
    same = hist == hist2 and dhist == dhist2
    same_params = final.param_hash == final2.param_hash and unet.param_hash == unet2.param_hash
    verdict(10, same and same_params,
            f"codec history {len(hist)} rows and U-Net history {len(dhist)} rows "
            f"{'bit-identical' if same else 'DIFFER'}; parameter hashes "
            f"{'match' if same_params else 'differ'}")
