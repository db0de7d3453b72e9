"""U-Net downscaling of coarse forecast fields, in latent or raw target space,
plus the bilinear interpolation baseline."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import _check_codec, decode_array, encode_array, phase_patches, res_stage
from .errors import ConfigError, FingerprintError, MissingVariableError, ShapeError
from .grid import GridField, NormStats, patchify, unpatchify, zscore_apply, zscore_invert
from .training import ModelParams, Phase, fit, init_params, register, set_determinism

PRESSURE_LEVELS = (50, 200, 500, 700, 850, 925, 1000)
PRESSURE_VARIABLES = ("U", "V", "Z", "T", "Q")
SURFACE_VARIABLES = ("T2M", "TP", "U10M", "V10M", "MSL")
FORECAST_CHANNELS = tuple(f"{v}{lev}" for v in PRESSURE_VARIABLES for lev in PRESSURE_LEVELS) \
    + SURFACE_VARIABLES
CHANNEL_ORDER_HASH = hashlib.sha256(",".join(FORECAST_CHANNELS).encode()).hexdigest()[:16]
MODES = ("latent", "raw")


# --- interpolation ----------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape ``[n_out, n_in]``."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def resize_array(a: np.ndarray, target) -> np.ndarray:
    """Separable bilinear resize of the last two axes (corner-aligned)."""
    a = np.asarray(a, dtype=np.float64)
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise ShapeError(f"target dims must be >= 1, got {target}")
    h, w = a.shape[-2:]
    if (h, w) == (th, tw):
        return a.copy()
    ry = _interp_matrix(h, th)
    rx = _interp_matrix(w, tw)
    return np.einsum("ij,...jk,lk->...il", ry, a, rx)


def bilinear_resize(field: GridField, target) -> GridField:
    return field.with_values(resize_array(field.values, target).astype(np.float32))


def resize_baseline(field: GridField, factor: int = 8) -> GridField:
    """Bilinear down by ``factor`` then back up: the codec's naive competitor."""
    h, w = field.dims
    small = resize_array(field.values, (h // factor, w // factor))
    return field.with_values(resize_array(small, (h, w)).astype(np.float32))


def interp_baseline(low: GridField, variable: str, target_dims, stats: NormStats | None = None) -> GridField:
    """Bilinear upsampling of the low-res channel named ``variable``.

    Pass ``stats`` when ``low`` is z-scored; the result is then denormalized.
    """
    chan = low.select([variable])
    out = bilinear_resize(chan, target_dims)
    return zscore_invert(out, stats) if stats is not None else out


def assemble_input(forecast, stats: NormStats, channels=FORECAST_CHANNELS) -> np.ndarray:
    """Stack forecast channels in the fixed canonical order, each z-scored.

    ``forecast`` is a mapping ``name -> 2-D array | GridField`` or a multi-variable
    ``GridField``; input order is irrelevant.
    """
    if isinstance(forecast, GridField):
        forecast = {v: forecast.channel(v) for v in forecast.variables}
    out = []
    for name in channels:
        if name not in forecast:
            raise MissingVariableError(name, "forecast input")
        a = forecast[name]
        a = a.channel(name) if isinstance(a, GridField) else np.asarray(a)
        s = stats[name]
        out.append((np.asarray(a, dtype=np.float64) - s.mean) / s.std)
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise ShapeError(f"forecast channels have mixed shapes {shapes}")
    return np.stack(out).astype(np.float32)


# --- network ----------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 40
    stages: int = 4
    res_blocks_per_stage: int = 2
    base_channels: int = 128
    channel_mult: tuple = (1, 2, 4, 4)
    out_channels: int = 4
    mode: str = "latent"
    norm_groups: int = 32

    ARCH = ("in_channels", "stages", "res_blocks_per_stage", "base_channels", "channel_mult",
            "out_channels", "norm_groups")

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if len(self.channel_mult) != self.stages:
            raise ConfigError(f"channel_mult needs {self.stages} entries")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        bad = [c for c in self.channels if c % self.norm_groups]
        if bad:
            raise ConfigError(f"stage channels {bad} not divisible by norm_groups={self.norm_groups}")

    @property
    def channels(self):
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def divisor(self):
        return 2 ** (self.stages - 1)

    def fingerprint(self) -> str:
        arch = {k: getattr(self, k) for k in self.ARCH}
        arch["channel_mult"] = list(self.channel_mult)
        blob = json.dumps({"model": "unet", **arch}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown unet config keys {sorted(unknown)}")
        return cls(**d)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        chans = cfg.channels
        n, g = cfg.res_blocks_per_stage, cfg.norm_groups
        self.stem = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.down = nn.ModuleList()
        prev = cfg.base_channels
        for ch in chans:
            self.down.append(nn.Sequential(*res_stage(prev, ch, n, g)))
            prev = ch
        self.pools = nn.ModuleList(nn.Conv2d(ch, ch, 3, stride=2, padding=1) for ch in chans[:-1])
        self.up = nn.ModuleList()
        for ch in reversed(chans[:-1]):
            self.up.append(nn.Sequential(*res_stage(prev + ch, ch, n, g)))
            prev = ch
        self.out = nn.Conv2d(prev, cfg.out_channels, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        skips = []
        for i, stage in enumerate(self.down):
            h = stage(h)
            if i < len(self.pools):
                skips.append(h)
                h = self.pools[i](h)
        for stage in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = stage(torch.cat([h, skip], dim=1))
        return self.out(h)


register("unet", UNetConfig, UNet)


def _check_unet(params: ModelParams, config=None) -> UNetConfig:
    if params.kind != "unet":
        raise ConfigError(f"expected unet parameters, got {params.kind!r}")
    params.check(config)
    return params.config


def _check_dims(cfg: UNetConfig, dims):
    h, w = dims
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"U-Net input dims {(h, w)} not divisible by {cfg.divisor}")


@torch.no_grad()
def unet_forward(x, params: ModelParams, config: UNetConfig | None = None, batch_size=16) -> np.ndarray:
    """``[C, h, w]`` (or batched ``[N, C, h, w]``) -> ``[out_channels, h, w]``."""
    cfg = _check_unet(params, config)
    x = np.array(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"U-Net expects {cfg.in_channels} channels, got {x.shape[1]}")
    _check_dims(cfg, x.shape[-2:])
    net = params.module
    out = np.concatenate([net(torch.from_numpy(x[s:s + batch_size])).numpy()
                          for s in range(0, len(x), batch_size)])
    return out[0] if single else out


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class DownscaleSchedule:
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 3.2e-5
    seed: int = 0
    raw_patch: int = 256
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0 or self.raw_patch < 1:
            raise ConfigError(f"invalid downscale schedule {self}")

    def to_dict(self):
        return asdict(self)


def working_inputs(low: np.ndarray, dims) -> np.ndarray:
    return resize_array(low, dims).astype(np.float32)


def train_downscaler(pairs, schedule: DownscaleSchedule, mode: str, config: UNetConfig, *,
                     codec: ModelParams | None = None, input_stats: NormStats | None = None,
                     output_stats: NormStats | None = None, input_variables=None,
                     output_variables=None, checkpoint_dir=None):
    """Fit the U-Net on ``pairs = (low, high)``, both z-scored ``[N, C, h, w]`` arrays.

    Latent mode regresses the codec's posterior means at the latent grid; raw
    mode regresses ``raw_patch``-sized tiles of the high-res truth. MSE loss.
    """
    low, high = (np.asarray(a, dtype=np.float32) for a in pairs)
    if len(low) == 0 or len(low) != len(high):
        raise ValueError(f"need matching non-empty pair arrays, got {len(low)} and {len(high)}")
    if mode not in MODES or mode != config.mode:
        raise ConfigError(f"mode {mode!r} does not match config mode {config.mode!r}")
    if low.shape[1] != config.in_channels:
        raise ShapeError(f"inputs have {low.shape[1]} channels, U-Net expects {config.in_channels}")
    H, W = high.shape[-2:]
    factor = H // low.shape[-2]
    provenance = {"schedule": schedule.to_dict(), "mode": mode, "n_samples": int(len(low)),
                  "factor": int(factor), "high_dims": [int(H), int(W)]}

    if mode == "latent":
        if codec is None:
            raise ConfigError("latent mode needs a trained codec")
        ccfg = _check_codec(codec)
        if config.out_channels != ccfg.latent_channels:
            raise ConfigError(f"latent mode needs out_channels={ccfg.latent_channels}")
        if high.shape[1] != ccfg.in_channels:
            raise ShapeError(f"codec encodes {ccfg.in_channels} channels, targets have {high.shape[1]}")
        targets, _ = encode_array(high, codec)
        inputs = working_inputs(low, targets.shape[-2:])
        provenance["codec_fingerprint"] = codec.fingerprint
        provenance["codec_hash"] = codec.param_hash
        output_variables = output_variables or codec.variables
        phase = Phase("train", inputs, targets, schedule.epochs)
    else:
        if config.out_channels != high.shape[1]:
            raise ConfigError(f"raw mode needs out_channels={high.shape[1]}")
        inputs = working_inputs(low, (H, W))
        both = np.concatenate([inputs, high], axis=1)
        tiles = phase_patches(both, schedule.raw_patch)
        provenance["raw_patch"] = schedule.raw_patch
        phase = Phase("train", tiles[:, :config.in_channels], tiles[:, config.in_channels:],
                      schedule.epochs)
    _check_dims(config, phase.inputs.shape[-2:])

    input_variables = tuple(input_variables or (f"in{i:02d}" for i in range(config.in_channels)))
    output_variables = tuple(output_variables or (f"out{i}" for i in range(high.shape[1])))
    provenance["output_variables"] = list(output_variables)
    stats = {}
    if input_stats is not None:
        stats["input"] = input_stats
    if output_stats is not None:
        stats["output"] = output_stats

    set_determinism(schedule.deterministic)
    module = init_params("unet", config, seed=schedule.seed).build()

    def make_params(mod, history, hashes):
        prov = dict(provenance, phase_hashes=hashes)
        if history:
            prov["final_loss"] = history[-1]["loss"]
        return ModelParams.from_module("unet", config, mod, variables=input_variables,
                                       norm_stats=stats, provenance=prov)

    def loss_fn(mod, xb, yb, _gen):
        loss = F.mse_loss(mod(xb), yb)
        return loss, {}

    module, history, _, hashes = fit(
        module, [phase], loss_fn, batch_size=schedule.batch_size,
        learning_rate=schedule.learning_rate, seed=schedule.seed, kind="unet", config=config,
        make_params=make_params, checkpoint_dir=checkpoint_dir,
        checkpoint_every=schedule.checkpoint_every)
    return make_params(module, history, hashes), history


# --- inference --------------------------------------------------------------

def _normalized_input(low: GridField, unet: ModelParams) -> np.ndarray:
    stats = unet.stats("input")
    if unet.variables and all(v in low.variables for v in unet.variables):
        low = low.select(unet.variables)
    if stats is None:
        return low.values
    return zscore_apply(low, stats).values


def downscale_normalized(x: np.ndarray, unet: ModelParams, codec: ModelParams | None, mode: str,
                         target_dims, blend="feather") -> np.ndarray:
    """Core of :func:`downscale` on z-scored ``[N, C, h, w]`` inputs; returns
    z-scored ``[N, V, H, W]`` outputs."""
    cfg = _check_unet(unet)
    if mode != cfg.mode:
        raise ConfigError(f"U-Net was trained in {cfg.mode!r} mode, not {mode!r}")
    H, W = target_dims
    if mode == "latent":
        if codec is None:
            raise ConfigError("latent mode needs the codec")
        ccfg = _check_codec(codec)
        want = unet.provenance.get("codec_fingerprint")
        if want and want != codec.fingerprint:
            raise FingerprintError(f"U-Net was trained against codec {want}, got {codec.fingerprint}")
        if H % ccfg.factor or W % ccfg.factor:
            raise ShapeError(f"target dims {target_dims} not divisible by {ccfg.factor}")
        work = working_inputs(x, (H // ccfg.factor, W // ccfg.factor))
        z = unet_forward(work, unet)
        return decode_array(z, codec)
    patch = int(unet.provenance.get("raw_patch", min(H, W)))
    patch = min(patch, H, W)
    full = working_inputs(x, (H, W))
    outs = []
    names = tuple(f"c{i}" for i in range(full.shape[1]))
    for sample in full:
        ps = patchify(GridField(sample, names), (patch, patch))
        pred = unet_forward(ps.arrays(), unet)
        outs.append(unpatchify(ps.with_arrays(pred), blend=blend).values)
    return np.stack(outs)


def downscale(low: GridField, unet: ModelParams, codec: ModelParams | None = None, mode=None,
              target_dims=None, blend="feather") -> GridField:
    """Physical low-res forecast -> physical high-res field.

    Latent mode runs the U-Net at the codec latent grid and decodes; raw mode
    runs it tile by tile at full resolution and blends the tiles.
    """
    cfg = _check_unet(unet)
    mode = mode or cfg.mode
    if target_dims is None:
        f = int(unet.provenance.get("factor", 8))
        target_dims = (low.dims[0] * f, low.dims[1] * f)
    x = _normalized_input(low, unet)
    out = downscale_normalized(x[None], unet, codec, mode, target_dims, blend)[0]
    stats = codec.stats("input") if mode == "latent" and codec is not None else unet.stats("output")
    names = tuple(unet.provenance.get("output_variables") or
                  (codec.variables if mode == "latent" and codec else ()) or
                  (stats.variables if stats is not None else ()))
    if len(names) != out.shape[0]:
        names = tuple(f"out{i}" for i in range(out.shape[0]))
    result = GridField(out, names, lat_range=low.lat_range, lon_range=low.lon_range,
                       timestamp=low.timestamp, lead_time=low.lead_time)
    return zscore_invert(result, stats) if stats is not None else result
