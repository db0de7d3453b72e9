"""Gridded field container, z-score statistics and overlap-tiled patching."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MissingVariableError, ShapeError, StructuralError

EPS_STD = 1e-6


def _utc(ts):
    if ts is None:
        return datetime(1970, 1, 1, tzinfo=timezone.utc)
    if isinstance(ts, str):
        ts = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True, eq=False)
class GridField:
    """A ``[C, H, W]`` float32 field plus coordinate and variable metadata.

    ``lead_time`` is an optional label (hours) carried for evaluation
    grouping; it never feeds a model.
    """

    values: np.ndarray
    variables: tuple
    lat_range: tuple = (0.0, 1.0)
    lon_range: tuple = (0.0, 1.0)
    timestamp: datetime = None
    lead_time: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise ShapeError(f"GridField values must be [C, H, W], got shape {values.shape}")
        variables = tuple(str(v) for v in self.variables)
        c, h, w = values.shape
        if h < 1 or w < 1:
            raise ShapeError(f"empty spatial dims {(h, w)}")
        if len(variables) != c:
            raise ShapeError(f"{len(variables)} variable names for {c} channels")
        if len(set(variables)) != c:
            raise ShapeError(f"duplicate variable names in {variables}")
        lat = tuple(float(x) for x in self.lat_range)
        lon = tuple(float(x) for x in self.lon_range)
        if not (lat[0] < lat[1] and lon[0] < lon[1]):
            raise ValueError(f"coordinate ranges must be strictly ordered: lat={lat} lon={lon}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "lat_range", lat)
        object.__setattr__(self, "lon_range", lon)
        object.__setattr__(self, "timestamp", _utc(self.timestamp))

    @property
    def shape(self):
        return self.values.shape

    @property
    def dims(self):
        return self.values.shape[1:]

    def index(self, variable):
        try:
            return self.variables.index(variable)
        except ValueError:
            raise MissingVariableError(variable, f"field {self.variables}") from None

    def channel(self, variable) -> np.ndarray:
        return self.values[self.index(variable)]

    def select(self, variables: Sequence[str]) -> "GridField":
        idx = [self.index(v) for v in variables]
        return self.with_values(self.values[idx], variables=tuple(variables))

    def with_values(self, values, variables=None) -> "GridField":
        kw = {"values": values}
        if variables is not None:
            kw["variables"] = tuple(variables)
        return replace(self, **kw)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


@dataclass(frozen=True)
class VariableStats:
    mean: float
    std: float
    count: int
    degenerate: bool = False


@dataclass(frozen=True)
class NormStats:
    """Per-variable population mean/std used for z-scoring."""

    stats: Mapping[str, VariableStats] = field(default_factory=dict)

    def __getitem__(self, variable) -> VariableStats:
        try:
            return self.stats[variable]
        except KeyError:
            raise MissingVariableError(variable, "NormStats") from None

    def __contains__(self, variable):
        return variable in self.stats

    def __or__(self, other: "NormStats") -> "NormStats":
        return NormStats({**self.stats, **other.stats})

    @property
    def variables(self):
        return tuple(self.stats)

    def to_json(self) -> dict:
        return {v: {"mean": s.mean, "std": s.std, "count": s.count} for v, s in self.stats.items()}

    @classmethod
    def from_json(cls, doc: Mapping) -> "NormStats":
        return cls({
            v: VariableStats(float(d["mean"]), float(d["std"]), int(d["count"]),
                             degenerate=float(d["std"]) <= EPS_STD)
            for v, d in doc.items()
        })

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        import hashlib
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def vectors(self, variables):
        """Mean and std arrays shaped ``[C, 1, 1]`` for broadcasting."""
        mean = np.array([self[v].mean for v in variables], dtype=np.float64)[:, None, None]
        std = np.array([self[v].std for v in variables], dtype=np.float64)[:, None, None]
        return mean, std


def zscore_fit(fields: Iterable[GridField], variable: str) -> NormStats:
    """Population mean/std of ``variable`` pooled over every pixel of ``fields``."""
    chans = []
    for f in fields:
        chans.append(np.asarray(f.channel(variable), dtype=np.float64).ravel())
    n = sum(c.size for c in chans)
    if n < 2:
        raise ValueError(f"need at least 2 pixels to fit {variable!r}, got {n}")
    mean = math.fsum(float(c.sum()) for c in chans) / n
    var = math.fsum(float(((c - mean) ** 2).sum()) for c in chans) / n
    std = math.sqrt(var)
    degenerate = std < EPS_STD
    if degenerate:
        std = EPS_STD
    return NormStats({variable: VariableStats(mean, std, n, degenerate)})


def zscore_fit_all(fields: Sequence[GridField], variables=None) -> NormStats:
    fields = list(fields)
    variables = variables or fields[0].variables
    out = NormStats()
    for v in variables:
        out = out | zscore_fit(fields, v)
    return out


def zscore_apply(field: GridField, stats: NormStats) -> GridField:
    mean, std = stats.vectors(field.variables)
    return field.with_values(((field.values - mean) / std).astype(np.float32))


def zscore_invert(field: GridField, stats: NormStats) -> GridField:
    mean, std = stats.vectors(field.variables)
    return field.with_values((field.values * std + mean).astype(np.float32))


# --- patching ---------------------------------------------------------------

def axis_offsets(n: int, p: int, strategy: str = "shift") -> list[int]:
    """Patch start positions along one axis of length ``n`` for patch length ``p``.

    ``shift`` lays ``ceil(n/p)`` patches on a regular grid and pulls the last one
    inward; ``even`` spreads the same number of patches with equal overlaps.
    """
    if p > n:
        raise ShapeError(f"patch length {p} exceeds axis length {n}")
    if p < 1:
        raise ShapeError(f"patch length must be positive, got {p}")
    count = math.ceil(n / p)
    if count == 1:
        return [0]
    if strategy == "shift":
        return [i * p for i in range(count - 1)] + [n - p]
    if strategy == "even":
        return [int(round(i * (n - p) / (count - 1))) for i in range(count)]
    raise ValueError(f"unknown overlap strategy {strategy!r}")


def patch_offsets(dims, patch_size, strategy="shift") -> list[tuple[int, int]]:
    rows = axis_offsets(dims[0], patch_size[0], strategy)
    cols = axis_offsets(dims[1], patch_size[1], strategy)
    return [(r, c) for r in rows for c in cols]


def coverage_map(dims, patch_size, offsets) -> np.ndarray:
    cov = np.zeros(dims, dtype=np.int32)
    ph, pw = patch_size
    for r, c in offsets:
        cov[r:r + ph, c:c + pw] += 1
    return cov


@dataclass(frozen=True, eq=False)
class PatchSet:
    patches: list
    patch_size: tuple
    source_dims: tuple
    coverage: np.ndarray
    template: GridField | None = None

    @property
    def offsets(self):
        return [(r, c) for r, c, _ in self.patches]

    def arrays(self) -> np.ndarray:
        return np.stack([a for _, _, a in self.patches])

    def with_arrays(self, arrays) -> "PatchSet":
        """Same tiling with new patch contents (e.g. model outputs)."""
        arrays = list(arrays)
        if len(arrays) != len(self.patches):
            raise StructuralError(f"{len(arrays)} arrays for {len(self.patches)} patches")
        new = [(r, c, np.asarray(a)) for (r, c, _), a in zip(self.patches, arrays)]
        return replace(self, patches=new)


def patchify(field: GridField, patch_size, strategy: str = "shift") -> PatchSet:
    ph, pw = patch_size
    h, w = field.dims
    if ph > h or pw > w:
        raise ShapeError(f"patch {patch_size} larger than field {(h, w)}")
    offsets = patch_offsets((h, w), (ph, pw), strategy)
    patches = [(r, c, field.values[:, r:r + ph, c:c + pw]) for r, c in offsets]
    return PatchSet(patches, (ph, pw), (h, w), coverage_map((h, w), (ph, pw), offsets), field)


def _axis_ramp(offset, p, starts, n):
    """1-D feather weight for a patch at ``offset`` among patches at ``starts``."""
    w = np.ones(p, dtype=np.float64)
    left = [s + p - offset for s in starts if s < offset < s + p]
    right = [offset + p - s for s in starts if offset < s < offset + p]
    if left:
        ov = max(left)
        w[:ov] = np.minimum(w[:ov], np.arange(1, ov + 1) / (ov + 1))
    if right:
        ov = max(right)
        w[p - ov:] = np.minimum(w[p - ov:], np.arange(ov, 0, -1) / (ov + 1))
    return w


def unpatchify(patchset: PatchSet, blend: str = "feather", variables=None) -> GridField:
    """Reassemble patches; overlapping pixels get weights that sum to one."""
    if blend not in ("average", "feather"):
        raise ValueError(f"unknown blend {blend!r}")
    h, w = patchset.source_dims
    ph, pw = patchset.patch_size
    cov = coverage_map((h, w), (ph, pw), patchset.offsets)
    if cov.min() < 1:
        holes = int((cov == 0).sum())
        raise StructuralError(f"patch set leaves {holes} uncovered pixels")
    channels = np.asarray(patchset.patches[0][2]).shape[0]
    acc = np.zeros((channels, h, w), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    rows = sorted({r for r, _ in patchset.offsets})
    cols = sorted({c for _, c in patchset.offsets})
    for r, c, arr in patchset.patches:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[1:] != (ph, pw):
            raise StructuralError(f"patch at {(r, c)} has shape {arr.shape}, expected {(ph, pw)}")
        if blend == "average":
            wt = np.ones((ph, pw))
        else:
            wt = np.outer(_axis_ramp(r, ph, rows, h), _axis_ramp(c, pw, cols, w))
        acc[:, r:r + ph, c:c + pw] += arr * wt
        wsum[r:r + ph, c:c + pw] += wt
    out = (acc / wsum).astype(np.float32)
    tmpl = patchset.template
    if variables is None:
        if tmpl is not None and len(tmpl.variables) == channels:
            variables = tmpl.variables
        else:
            variables = tuple(f"ch{i}" for i in range(channels))
    if tmpl is None:
        return GridField(out, variables)
    return replace(tmpl, values=out, variables=tuple(variables))
