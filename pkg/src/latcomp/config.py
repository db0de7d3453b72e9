"""Run configuration: YAML files layered over named experiment presets."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .codec import CodecConfig, TrainSchedule
from .downscale import DownscaleSchedule, UNetConfig
from .errors import ConfigError

PRESETS = ("resize", "vae_l1", "vae_charbonnier", "vae_single_var", "vae_finetune",
           "down_inter", "down_raw", "down_latent")
CODEC_PRESETS = PRESETS[1:5]
DOWN_PRESETS = ("down_raw", "down_latent")


@dataclass(frozen=True)
class VariableSpec:
    name: str
    beta: float = 2.5
    amplitude: float = 1.0
    mean_offset: float = 0.0


@dataclass(frozen=True)
class DataConfig:
    """Where samples come from and how they are split.

    ``kind`` is ``fields`` (codec experiments) or ``pairs`` (downscaling).
    """

    kind: str = "fields"
    path: str | None = None
    dims: tuple = (64, 64)
    variables: tuple = (VariableSpec("T2M", 2.5, 8.0, 285.0),
                        VariableSpec("U10M", 2.5, 3.0, 0.0),
                        VariableSpec("V10M", 2.5, 3.0, 0.0))
    n_train: int = 500
    n_test: int = 100
    downsample_factor: int = 8
    input_channels: int = 40
    codec_checkpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        specs = tuple(v if isinstance(v, VariableSpec) else VariableSpec(**v) for v in self.variables)
        object.__setattr__(self, "variables", specs)
        if self.kind not in ("fields", "pairs"):
            raise ConfigError(f"data.kind must be 'fields' or 'pairs', got {self.kind!r}")
        for v in specs:
            if v.beta < 0:
                raise ConfigError(f"variable {v.name}: spectral slope beta must be >= 0")
            if v.amplitude <= 0:
                raise ConfigError(f"variable {v.name}: amplitude must be > 0")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("split sizes must be >= 0")
        if self.kind == "pairs" and len(specs) != 1:
            raise ConfigError("pair datasets have exactly one target variable")

    @property
    def variable_names(self):
        return tuple(v.name for v in self.variables)


@dataclass(frozen=True)
class RunConfig:
    preset: str
    seed: int = 0
    deterministic: bool = True
    out: str = "runs/latcomp"
    per_variable: bool = False
    codec: CodecConfig | None = None
    schedule: TrainSchedule | None = None
    unet: UNetConfig | None = None
    down_schedule: DownscaleSchedule | None = None
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.preset in CODEC_PRESETS and (self.codec is None or self.schedule is None):
            raise ConfigError(f"preset {self.preset} needs codec and schedule sections")
        if self.preset in DOWN_PRESETS and (self.unet is None or self.down_schedule is None):
            raise ConfigError(f"preset {self.preset} needs unet and down_schedule sections")
        if self.preset.startswith("down") and self.data.kind != "pairs":
            raise ConfigError(f"preset {self.preset} needs data.kind = 'pairs'")
        if self.preset in CODEC_PRESETS and not self.per_variable \
                and self.codec.in_channels != len(self.data.variables):
            raise ConfigError(f"joint codec has {self.codec.in_channels} input channels but "
                              f"{len(self.data.variables)} variables are configured")
        if self.deterministic and self.seed is None:
            raise ConfigError("determinism requires a seed")

    def to_dict(self) -> dict:
        d = {"preset": self.preset, "seed": self.seed, "deterministic": self.deterministic,
             "out": self.out, "per_variable": self.per_variable}
        for name in ("codec", "schedule", "unet", "down_schedule"):
            section = getattr(self, name)
            if section is not None:
                d[name] = section.to_dict()
        data = asdict(self.data)
        data["dims"] = list(self.data.dims)
        data["variables"] = [asdict(v) for v in self.data.variables]
        d["data"] = data
        return _plain(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            if d.get("codec") is not None:
                d["codec"] = CodecConfig.from_dict(d["codec"])
            if d.get("schedule") is not None:
                d["schedule"] = TrainSchedule(**d["schedule"])
            if d.get("unet") is not None:
                d["unet"] = UNetConfig.from_dict(d["unet"])
            if d.get("down_schedule") is not None:
                d["down_schedule"] = DownscaleSchedule(**d["down_schedule"])
            if d.get("data") is not None:
                d["data"] = DataConfig(**d["data"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def preset_dict(name: str) -> dict:
    """Full-size published defaults for each experiment of the comparison matrix."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    d: dict = {"preset": name}
    pretrain_only = {"pretrain": {"patch": 256, "epochs": 10}, "finetune": {"patch": 1000, "epochs": 0}}
    if name == "vae_l1":
        d["codec"] = CodecConfig(in_channels=3, recon_loss="l1").to_dict()
        d["schedule"] = TrainSchedule(**pretrain_only).to_dict()
    elif name == "vae_charbonnier":
        d["codec"] = CodecConfig(in_channels=3).to_dict()
        d["schedule"] = TrainSchedule(**pretrain_only).to_dict()
    elif name == "vae_single_var":
        d["codec"] = CodecConfig(in_channels=1).to_dict()
        d["schedule"] = TrainSchedule(**pretrain_only).to_dict()
        d["per_variable"] = True
    elif name == "vae_finetune":
        d["codec"] = CodecConfig(in_channels=1).to_dict()
        d["schedule"] = TrainSchedule().to_dict()
        d["per_variable"] = True
    elif name in DOWN_PRESETS:
        mode = "latent" if name == "down_latent" else "raw"
        d["unet"] = UNetConfig(mode=mode, out_channels=4 if mode == "latent" else 1).to_dict()
        d["down_schedule"] = DownscaleSchedule().to_dict()
    if name.startswith("down"):
        d["data"] = {"kind": "pairs", "variables": [asdict(VariableSpec("T2M", 2.5, 8.0, 285.0))]}
    return d


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, preset=None, **overrides) -> RunConfig:
    """Merge preset defaults, then the YAML file, then non-None ``overrides``."""
    doc = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    name = preset or doc.get("preset")
    if name is None:
        raise ConfigError("no preset given (use --preset or a 'preset' key)")
    merged = deep_merge(preset_dict(name), doc)
    merged["preset"] = name
    for k, v in overrides.items():
        if v is not None:
            merged[k] = v
    if merged.get("seed") is not None:
        for sec in ("schedule", "down_schedule"):
            if isinstance(merged.get(sec), dict):
                merged[sec]["seed"] = merged["seed"]
    if "deterministic" in merged:
        for sec in ("schedule", "down_schedule"):
            if isinstance(merged.get(sec), dict):
                merged[sec]["deterministic"] = merged["deterministic"]
    return RunConfig.from_dict(merged)


def with_data(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, data=replace(cfg.data, **kw))
