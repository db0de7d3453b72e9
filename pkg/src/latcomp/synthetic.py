"""Desk-scale surrogate data and container ingestion.

Synthetic fields are spectral-synthesis Gaussian random fields whose zonal
power spectrum decays like ``k**-beta``. Forecast pairs add a coarse,
40-channel "forecast" view of each high-resolution field.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, MissingVariableError, ShapeError
from .grid import GridField


@dataclass(frozen=True)
class SyntheticSpec:
    dims: tuple = (256, 256)
    beta: float = 2.0
    amplitude: float = 1.0
    mean_offset: float = 0.0
    seed: int = 0
    variable: str = "T2M"

    def __post_init__(self):
        h, w = self.dims
        if h < 8 or w < 8:
            raise ConfigError(f"dims must be >= 8, got {self.dims}")
        if self.beta < 0:
            raise ConfigError(f"spectral slope must be >= 0, got {self.beta}")
        if self.amplitude <= 0:
            raise ConfigError(f"amplitude must be > 0, got {self.amplitude}")


@dataclass(frozen=True)
class PairSpec:
    high_spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    downsample_factor: int = 8
    input_channels: int = 40
    mixing_seed: int = 0
    noise_level: float = 0.01

    def __post_init__(self):
        if self.downsample_factor < 2:
            raise ConfigError("downsample_factor must be >= 2")
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")


def _spectral_exponent(beta: float) -> float:
    # The zonal spectrum of an isotropic field with 2-D power k**-a decays like
    # k**(1 - a) for a > 1, so a = beta + 1 gives zonal slope -beta.  Below
    # beta = 1 the exponent blends to 2*beta so beta = 0 stays exactly white.
    return beta + min(beta, 1.0)


def gen_grf(spec: SyntheticSpec) -> GridField:
    f = _grf(spec.dims, spec.beta, spec.seed) * spec.amplitude + spec.mean_offset
    return GridField(f[None].astype(np.float32), (spec.variable,))


def _grf(dims, beta, seed) -> np.ndarray:
    """Unit-variance, zero-mean float64 field; no size limit."""
    h, w = dims
    rng = np.random.default_rng(seed)
    noise = np.fft.rfft2(rng.standard_normal((h, w)))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.rfftfreq(w)[None, :]
    k = np.hypot(kx, ky)
    k[0, 0] = 1.0
    amp = k ** (-_spectral_exponent(beta) / 2.0)
    amp[0, 0] = 0.0
    f = np.fft.irfft2(noise * amp, s=(h, w))
    return f / f.std()


def block_mean(a: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter then subsample the last two axes by ``factor``."""
    *lead, h, w = a.shape
    return a.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def _sub_block_means(hi: np.ndarray, factor: int) -> np.ndarray:
    """Means of every ``s x s`` sub-box inside each coarse cell, ``s = factor // 4``.

    Returns ``[(factor/s)**2, H/factor, W/factor]``.
    """
    s = max(1, factor // 4)
    m = factor // s
    fine = block_mean(hi, s)
    hh, ww = fine.shape
    cells = fine.reshape(hh // m, m, ww // m, m).transpose(1, 3, 0, 2)
    return cells.reshape(m * m, hh // m, ww // m)


def low_channel_names(variable: str, input_channels: int) -> tuple:
    n_mix = (input_channels - 1) // 2
    n_aux = input_channels - 1 - n_mix
    return (variable,) + tuple(f"mix{i:02d}" for i in range(n_mix)) + tuple(f"aux{i:02d}" for i in range(n_aux))


def gen_forecast_pair(pair: PairSpec):
    """Return ``(low, high)``: a ``[C, H/f, W/f]`` forecast view and the ``[1, H, W]`` truth.

    Channel 0 is the block-averaged truth; the next ``(C-1)//2`` channels are
    random linear mixtures of sub-cell box means (they carry sub-grid detail
    a model can unmix); the rest are independent GRF distractors. Every
    channel gets a small independent noise term.
    """
    hs = pair.high_spec
    f = pair.downsample_factor
    h, w = hs.dims
    if h % f or w % f:
        raise ShapeError(f"dims {hs.dims} not divisible by factor {f}")
    high = gen_grf(hs)
    hi = high.values[0].astype(np.float64)
    lh, lw = h // f, w // f
    rng = np.random.default_rng([pair.mixing_seed, hs.seed])
    names = low_channel_names(hs.variable, pair.input_channels)
    n_mix = sum(n.startswith("mix") for n in names)
    n_aux = sum(n.startswith("aux") for n in names)
    scale = hs.amplitude

    chans = [block_mean(hi, f)]
    if n_mix:
        subs = _sub_block_means(hi, f) - hs.mean_offset
        # mixing matrix depends only on mixing_seed so it is shared across samples
        mix = np.random.default_rng(pair.mixing_seed).standard_normal((n_mix, subs.shape[0]))
        mix /= np.sqrt(subs.shape[0])
        chans.extend(np.tensordot(mix, subs, axes=1))
    for i in range(n_aux):
        aux_seed = int(rng.integers(2**63 - 1))
        chans.append(_grf((lh, lw), hs.beta, aux_seed) * scale)
    low = np.stack(chans)
    low = low + pair.noise_level * scale * rng.standard_normal(low.shape)
    low_field = GridField(low.astype(np.float32), names, lat_range=high.lat_range,
                          lon_range=high.lon_range, timestamp=high.timestamp)
    return low_field, high


# --- ingestion --------------------------------------------------------------

RAW_SUFFIXES = (".f32", ".bin", ".raw")


def _check_finite(values, variables, path):
    bad = ~np.isfinite(values)
    n = int(bad.sum())
    if n:
        c, r, col = (int(i) for i in np.argwhere(bad)[0])
        raise IngestionError(
            f"{path}: {n} non-finite cells (count={n}); first at variable "
            f"{variables[c]!r} row {r} col {col}")


def _parse_time(value, units):
    if units and " since " in units:
        step, origin = units.split(" since ", 1)
        origin = datetime.fromisoformat(origin.strip().replace(" ", "T", 1).replace("Z", "+00:00"))
        if origin.tzinfo is None:
            origin = origin.replace(tzinfo=timezone.utc)
        step = step.strip().lower()
        key = {"hour": "hours", "hours": "hours", "minutes": "minutes", "minute": "minutes",
               "seconds": "seconds", "second": "seconds", "days": "days", "day": "days"}.get(step)
        if key:
            return origin + timedelta(**{key: float(value)})
    return None


def _read_raw(path: Path, variables, time_index):
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise IngestionError(f"missing JSON sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    dims = [int(d) for d in meta["dims"]]
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise IngestionError(f"{path}: {data.size} values but sidecar dims {dims}")
    data = data.reshape(dims)
    if data.ndim == 3:
        data = data[None]
    elif data.ndim != 4:
        raise IngestionError(f"{path}: dims must be [C,H,W] or [T,C,H,W], got {dims}")
    names = list(meta["variables"])
    for v in variables:
        if v not in names:
            raise MissingVariableError(v, str(path))
    frame = data[time_index]
    values = np.stack([frame[names.index(v)] for v in variables])
    ts = meta.get("timestamp")
    if isinstance(ts, list):
        ts = ts[time_index]
    return (values, meta.get("lat_range", (0.0, 1.0)), meta.get("lon_range", (0.0, 1.0)), ts,
            meta.get("lead_time"))


def _coord_range(arr):
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    return (lo, hi) if lo < hi else (lo, lo + 1.0)


def _read_netcdf(path: Path, variables, time_index):
    try:
        from scipy.io import netcdf_file
        nc = netcdf_file(path, "r", mmap=False)
    except Exception:
        return _read_hdf5(path, variables, time_index)
    with nc:
        return _extract(nc.variables, lambda v: dict(v._attributes), variables, time_index, path)


def _read_hdf5(path: Path, variables, time_index):
    import h5py
    with h5py.File(path, "r") as hf:
        def attrs(ds):
            out = {}
            for k, v in ds.attrs.items():
                out[k] = v.decode() if isinstance(v, bytes) else v
            return out
        return _extract(hf, attrs, variables, time_index, path)


def _extract(table, attrs, variables, time_index, path):
    arrays = []
    shape = None
    for v in variables:
        if v not in table:
            raise MissingVariableError(v, str(path))
        ds = table[v]
        a = np.asarray(ds[time_index] if len(ds.shape) == 3 else ds[()], dtype=np.float64)
        meta = attrs(ds)
        fill = meta.get("_FillValue", meta.get("missing_value"))
        if fill is not None:
            fill = np.asarray(fill).ravel()[0]
            a = np.where(a == fill, np.nan, a)
        a = a * float(np.asarray(meta.get("scale_factor", 1.0)).ravel()[0]) \
            + float(np.asarray(meta.get("add_offset", 0.0)).ravel()[0])
        if shape is not None and a.shape != shape:
            raise IngestionError(f"{path}: variable {v!r} has shape {a.shape}, expected {shape}")
        shape = a.shape
        arrays.append(a)
    lat = next((table[n][()] for n in ("lat", "latitude") if n in table), None)
    lon = next((table[n][()] for n in ("lon", "longitude") if n in table), None)
    ts = None
    if "time" in table:
        t = table["time"]
        tv = np.asarray(t[()]).ravel()
        units = attrs(t).get("units")
        if isinstance(units, bytes):
            units = units.decode()
        ts = _parse_time(tv[time_index if tv.size > 1 else 0], units)
    return (np.stack(arrays),
            _coord_range(lat) if lat is not None else (0.0, 1.0),
            _coord_range(lon) if lon is not None else (0.0, 1.0), ts)


def ingest_container(path, variables, time_index: int = 0) -> GridField:
    """Read ``variables`` at ``time_index`` from a NetCDF/HDF5 file or a raw
    float32 file with a JSON sidecar, validating that every cell is finite."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    variables = list(variables)
    lead = None
    if path.suffix in RAW_SUFFIXES:
        values, lat, lon, ts, lead = _read_raw(path, variables, time_index)
    else:
        values, lat, lon, ts = _read_netcdf(path, variables, time_index)
    _check_finite(values, variables, path)
    return GridField(values.astype(np.float32), tuple(variables), lat_range=tuple(lat),
                     lon_range=tuple(lon), timestamp=ts, lead_time=lead)


def write_raw(field: GridField, path) -> Path:
    """Write ``field`` in the raw container format (``.f32`` + ``.json``)."""
    path = Path(path)
    if path.suffix not in RAW_SUFFIXES:
        path = path.with_suffix(".f32")
    np.ascontiguousarray(field.values, dtype="<f4").tofile(path)
    meta = {
        "dims": list(field.shape),
        "variables": list(field.variables),
        "lat_range": list(field.lat_range),
        "lon_range": list(field.lon_range),
        "timestamp": field.timestamp.isoformat(),
    }
    if field.lead_time is not None:
        meta["lead_time"] = field.lead_time
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path
