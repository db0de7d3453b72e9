"""Convolutional VAE codec: fields -> 4-channel latents at 1/8 resolution -> fields."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .grid import GridField, NormStats, patchify, zscore_apply, zscore_invert
from .training import ModelParams, Phase, fit, init_params, register, set_determinism

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
RECON_LOSSES = ("charbonnier", "charbonnier_global", "l1")


@dataclass(frozen=True)
class CodecConfig:
    in_channels: int = 1
    base_channels: int = 128
    stage_channels: tuple = (128, 256, 512, 512)
    res_blocks_per_stage: int = 2
    latent_channels: int = 4
    downsample_stages: int = 3
    norm_groups: int = 32
    charbonnier_eps: float = 1e-3
    kl_weight: float = 1e-6
    recon_loss: str = "charbonnier"

    ARCH = ("in_channels", "base_channels", "stage_channels", "res_blocks_per_stage",
            "latent_channels", "downsample_stages", "norm_groups")

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.latent_channels < 1 or self.in_channels < 1:
            raise ConfigError("latent_channels and in_channels must be >= 1")
        if len(self.stage_channels) != self.downsample_stages + 1:
            raise ConfigError(f"need {self.downsample_stages + 1} stage_channels entries, "
                              f"got {len(self.stage_channels)}")
        bad = [c for c in self.stage_channels if c % self.norm_groups]
        if bad:
            raise ConfigError(f"stage channels {bad} not divisible by norm_groups={self.norm_groups}")
        if self.charbonnier_eps <= 0:
            raise ConfigError("charbonnier_eps must be > 0")
        if self.recon_loss not in RECON_LOSSES:
            raise ConfigError(f"recon_loss must be one of {RECON_LOSSES}")

    @property
    def factor(self) -> int:
        return 2 ** self.downsample_stages

    def fingerprint(self) -> str:
        """Hash of the architecture fields only; loss settings may change freely."""
        arch = {k: getattr(self, k) for k in self.ARCH}
        arch["stage_channels"] = list(arch["stage_channels"])
        blob = json.dumps({"model": "vae", **arch}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "CodecConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown codec config keys {sorted(unknown)}")
        return cls(**d)


# --- network ----------------------------------------------------------------

class ResBlock(nn.Module):
    """Two (3x3 conv -> Swish -> GroupNorm) layers with a residual connection."""

    def __init__(self, cin, cout, groups):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.norm1(F.silu(self.conv1(x)))
        h = self.norm2(F.silu(self.conv2(h)))
        return h + self.skip(x)


class Upsample(nn.Module):
    def forward(self, x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def res_stage(cin, cout, n, groups):
    return [ResBlock(cin if i == 0 else cout, cout, groups) for i in range(n)]


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.stem = nn.Conv2d(cfg.in_channels, cfg.base_channels, 1)
        stages, prev = [], cfg.base_channels
        for i, ch in enumerate(cfg.stage_channels):
            layers = res_stage(prev, ch, cfg.res_blocks_per_stage, cfg.norm_groups)
            if i < cfg.downsample_stages:
                layers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            stages.append(nn.Sequential(*layers))
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(prev, 2 * cfg.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.head(self.stages(self.stem(x)))
        mu, log_var = h.chunk(2, dim=1)
        return mu, log_var.clamp(LOGVAR_MIN, LOGVAR_MAX)


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        chans = list(reversed(cfg.stage_channels))
        self.head = nn.Conv2d(cfg.latent_channels, chans[0], 3, padding=1)
        stages, prev = [], chans[0]
        first_up = len(chans) - cfg.downsample_stages
        for i, ch in enumerate(chans):
            layers = res_stage(prev, ch, cfg.res_blocks_per_stage, cfg.norm_groups)
            if i >= first_up:
                layers.append(Upsample())
            stages.append(nn.Sequential(*layers))
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.out = nn.Conv2d(prev, cfg.in_channels, 3, padding=1)

    def forward(self, z):
        return self.out(self.stages(self.head(z)))


class VAE(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x, generator=None, sample=True):
        mu, log_var = self.encoder(x)
        z = _sample(mu, log_var, generator) if sample else mu
        return self.decoder(z), mu, log_var


register("codec", CodecConfig, VAE)


# --- latent type and shape contracts ---------------------------------------

@dataclass(frozen=True, eq=False)
class LatentRepr:
    """Posterior mean and log-variance, each ``[latent_channels, h, w]``.

    Holds numpy arrays at the API boundary; torch tensors are accepted too so
    that losses can differentiate through it.
    """

    mu: object
    log_var: object

    def __post_init__(self):
        if tuple(self.mu.shape) != tuple(self.log_var.shape):
            raise ShapeError(f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} differ")

    @property
    def shape(self):
        return tuple(self.mu.shape)

    @property
    def sigma(self):
        if isinstance(self.log_var, torch.Tensor):
            return torch.exp(self.log_var / 2)
        return np.exp(np.asarray(self.log_var) / 2)


def latent_shape(config: CodecConfig, dims) -> tuple:
    """Latent shape for a ``(H, W)`` input, without running the network."""
    h, w = dims
    f = config.factor
    if h % f or w % f:
        raise ShapeError(f"input dims {(h, w)} not divisible by {f}")
    return (config.latent_channels, h // f, w // f)


def decoded_shape(config: CodecConfig, latent_dims) -> tuple:
    c, h, w = latent_dims
    if c != config.latent_channels:
        raise ShapeError(f"latent has {c} channels, codec expects {config.latent_channels}")
    return (config.in_channels, h * config.factor, w * config.factor)


def traced_shapes(config: CodecConfig, dims):
    """Run the real modules on the meta device and return (latent, decoded) shapes.

    No parameter memory is allocated, so this is usable at full operational size.
    """
    with torch.device("meta"):
        vae = VAE(config)
        x = torch.empty(1, config.in_channels, *dims)
        mu, log_var = vae.encoder(x)
        out = vae.decoder(mu)
    return tuple(mu.shape[1:]), tuple(log_var.shape[1:]), tuple(out.shape[1:])


# --- losses -----------------------------------------------------------------

def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _sample(mu, log_var, generator=None):
    eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(log_var / 2) * eta


def reparameterize(latent: LatentRepr, seed=None, generator=None):
    """Draw ``z = mu + exp(log_var/2) * eta`` with ``eta ~ N(0, 1)``.

    Tensors in, tensor out (differentiable); numpy in, numpy out.
    """
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else int(seed))
    mu, log_var = _t(latent.mu), _t(latent.log_var)
    z = _sample(mu, log_var, generator)
    return z if isinstance(latent.mu, torch.Tensor) else z.numpy()


def charbonnier(x, x_rec, eps=1e-3, reduction="mean"):
    """Charbonnier penalty ``sqrt(d**2 + eps**2)``.

    ``mean`` averages it per element; ``global`` applies it once to the
    Euclidean norm of the whole residual.
    """
    x, x_rec = _t(x), _t(x_rec)
    if x.shape != x_rec.shape:
        raise ShapeError(f"shapes differ: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d2 = (x - x_rec) ** 2
    if reduction == "mean":
        return torch.sqrt(d2 + eps ** 2).mean()
    if reduction == "global":
        return torch.sqrt(d2.sum() + eps ** 2)
    raise ValueError(f"unknown reduction {reduction!r}")


def l1(x, x_rec):
    x, x_rec = _t(x), _t(x_rec)
    if x.shape != x_rec.shape:
        raise ShapeError(f"shapes differ: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def kl_gaussian(latent: LatentRepr):
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)), averaged over elements."""
    mu, log_var = _t(latent.mu), _t(latent.log_var)
    return (0.5 * (mu ** 2 + torch.exp(log_var) - 1.0 - log_var)).mean()


def reconstruction_loss(x, x_rec, config: CodecConfig):
    if config.recon_loss == "l1":
        return l1(x, x_rec)
    reduction = "global" if config.recon_loss == "charbonnier_global" else "mean"
    return charbonnier(x, x_rec, config.charbonnier_eps, reduction)


def vae_loss(x, x_rec, latent: LatentRepr, config: CodecConfig):
    """Return ``(total, recon, kl)`` with ``total = recon + kl_weight * kl``."""
    recon = reconstruction_loss(x, x_rec, config)
    kl = kl_gaussian(latent)
    return recon + config.kl_weight * kl, recon, kl


# --- inference --------------------------------------------------------------

def _check_codec(params: ModelParams, config=None):
    if params.kind != "codec":
        raise ConfigError(f"expected codec parameters, got {params.kind!r}")
    params.check(config)
    return params.config


@torch.no_grad()
def encode_array(x: np.ndarray, params: ModelParams, batch_size=16):
    """Batched ``[N, C, H, W]`` -> ``(mu, log_var)`` arrays."""
    cfg = _check_codec(params)
    x = np.array(x, dtype=np.float32)
    latent_shape(cfg, x.shape[-2:])
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"codec expects {cfg.in_channels} channels, got {x.shape[1]}")
    enc = params.module.encoder
    mus, lvs = [], []
    for s in range(0, len(x), batch_size):
        mu, lv = enc(torch.from_numpy(x[s:s + batch_size]))
        mus.append(mu.numpy())
        lvs.append(lv.numpy())
    return np.concatenate(mus), np.concatenate(lvs)


@torch.no_grad()
def decode_array(z: np.ndarray, params: ModelParams, batch_size=16) -> np.ndarray:
    cfg = _check_codec(params)
    z = np.array(z, dtype=np.float32)
    decoded_shape(cfg, z.shape[1:])
    dec = params.module.decoder
    return np.concatenate([dec(torch.from_numpy(z[s:s + batch_size])).numpy()
                           for s in range(0, len(z), batch_size)])


def encode(field: GridField, params: ModelParams, config: CodecConfig | None = None) -> LatentRepr:
    """Encode a z-scored field; returns the posterior ``LatentRepr``."""
    _check_codec(params, config)
    mu, lv = encode_array(field.values[None], params)
    return LatentRepr(mu[0], lv[0])


def decode(z, params: ModelParams, like: GridField | None = None) -> GridField:
    """Decode ``[latent_channels, h, w]`` to a normalized ``[Cin, 8h, 8w]`` field."""
    cfg = _check_codec(params)
    z = np.asarray(z.mu if isinstance(z, LatentRepr) else z, dtype=np.float32)
    if z.ndim != 3:
        raise ShapeError(f"latent must be [c, h, w], got {z.shape}")
    out = decode_array(z[None], params)[0]
    variables = params.variables or tuple(f"ch{i}" for i in range(cfg.in_channels))
    if like is not None:
        return like.with_values(out, variables=variables)
    return GridField(out, variables)


def reconstruct(field: GridField, params: ModelParams, stats: NormStats | None = None) -> GridField:
    """Normalize -> encode -> take mu -> decode -> denormalize."""
    stats = stats or params.stats("input")
    if stats is None:
        raise ConfigError("reconstruct needs NormStats (none stored with the codec)")
    if params.variables:
        field = field.select(params.variables)
    norm = zscore_apply(field, stats)
    latent = encode(norm, params)
    return zscore_invert(decode(latent.mu, params, like=norm), stats)


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class PhaseSpec:
    patch: int
    epochs: int


@dataclass(frozen=True)
class TrainSchedule:
    pretrain: PhaseSpec = PhaseSpec(256, 10)
    finetune: PhaseSpec = PhaseSpec(1000, 5)
    batch_size: int = 8
    learning_rate: float = 1.6e-5
    seed: int = 0
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        for name in ("pretrain", "finetune"):
            ph = getattr(self, name)
            if isinstance(ph, dict):
                ph = PhaseSpec(**ph)
                object.__setattr__(self, name, ph)
            if ph.epochs < 0 or ph.patch < 1:
                raise ConfigError(f"invalid {name} phase {ph}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")

    def to_dict(self):
        return asdict(self)


def phase_patches(data: np.ndarray, patch: int) -> np.ndarray:
    """Cut every ``[C, H, W]`` sample into overlap-tiled ``patch x patch`` tiles."""
    n, c, h, w = data.shape
    if patch > min(h, w):
        raise ConfigError(f"patch size {patch} exceeds training field dims {(h, w)}")
    if patch == h == w:
        return data
    names = tuple(f"c{i}" for i in range(c))
    tiles = [patchify(GridField(x, names), (patch, patch)).arrays() for x in data]
    return np.concatenate(tiles)


def _as_array(dataset):
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.float32, copy=False)
    fields_ = list(dataset)
    if not fields_:
        raise ValueError("empty dataset")
    return np.stack([f.values if isinstance(f, GridField) else np.asarray(f) for f in fields_])


def train_vae(dataset, schedule: TrainSchedule, config: CodecConfig, *, variables=None,
              norm_stats: NormStats | None = None, checkpoint_dir=None,
              on_phase_end: Callable | None = None, init: ModelParams | None = None):
    """Two-phase training: small patches first, then large patches resuming the
    same parameters and optimizer state.

    ``dataset`` is a normalized ``[N, C, H, W]`` array (or sequence of fields).
    Returns ``(ModelParams, history)``.
    """
    data = _as_array(dataset)
    if data.size == 0 or len(data) == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != config.in_channels:
        raise ShapeError(f"dataset has {data.shape[1]} channels, config expects {config.in_channels}")
    variables = tuple(variables or (f"ch{i}" for i in range(config.in_channels)))
    stats = {"input": norm_stats, "output": norm_stats} if norm_stats is not None else {}
    set_determinism(schedule.deterministic)
    base = init or init_params("codec", config, seed=schedule.seed)
    base.check(config)
    module = base.build()

    provenance = {"schedule": schedule.to_dict(), "n_samples": int(len(data)),
                  "sample_dims": list(data.shape[1:])}

    def make_params(mod, history, hashes):
        prov = dict(provenance, phase_hashes=hashes)
        if history:
            prov["final_losses"] = {k: v for k, v in history[-1].items() if isinstance(v, float)}
        return ModelParams.from_module("codec", config, mod, variables=variables,
                                       norm_stats=stats, provenance=prov)

    phases = []
    for name, spec in (("pretrain", schedule.pretrain), ("finetune", schedule.finetune)):
        if spec.epochs > 0:
            phases.append(Phase(name, phase_patches(data, spec.patch), None, spec.epochs))
    for p in phases:
        latent_shape(config, p.inputs.shape[-2:])

    def loss_fn(mod, xb, _yb, gen):
        x_rec, mu, lv = mod(xb, generator=gen)
        total, recon, kl = vae_loss(xb, x_rec, LatentRepr(mu, lv), config)
        return total, {"recon": recon.detach(), "kl": kl.detach()}

    module, history, _, hashes = fit(
        module, phases, loss_fn, batch_size=schedule.batch_size,
        learning_rate=schedule.learning_rate, seed=schedule.seed, kind="codec", config=config,
        make_params=make_params, checkpoint_dir=checkpoint_dir,
        checkpoint_every=schedule.checkpoint_every, on_phase_end=on_phase_end)
    return make_params(module, history, hashes), history


def train_vae_per_variable(fields_array: np.ndarray, variables, schedule: TrainSchedule,
                           config: CodecConfig, norm_stats: NormStats | None = None, **kw):
    """One single-channel codec per variable; returns ``{variable: (params, history)}``."""
    cfg = replace(config, in_channels=1)
    out = {}
    for i, v in enumerate(variables):
        stats = NormStats({v: norm_stats[v]}) if norm_stats is not None else None
        out[v] = train_vae(fields_array[:, i:i + 1], schedule, cfg, variables=(v,),
                           norm_stats=stats, **kw)
    return out
