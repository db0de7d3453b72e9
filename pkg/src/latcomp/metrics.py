"""Verification metrics: MSE/RMSE, zonal power spectrum, SSIM, densities and
box-whisker aggregation, plus CSV/JSON report emission."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError, ShapeError
from .grid import GridField, axis_offsets


def _pair(truth, pred, variable):
    if isinstance(truth, GridField):
        truth = truth.channel(variable) if variable is not None else truth.values
    if isinstance(pred, GridField):
        pred = pred.channel(variable) if variable is not None else pred.values
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"truth {t.shape} and prediction {p.shape} differ")
    return t, p


def mse(truth, pred, variable=None) -> float:
    t, p = _pair(truth, pred, variable)
    return float(np.mean((p - t) ** 2))


def rmse(truth, pred, variable=None) -> float:
    return math.sqrt(mse(truth, pred, variable))


# --- spectrum ---------------------------------------------------------------

@dataclass(frozen=True)
class SpectrumResult:
    k: np.ndarray
    power: np.ndarray
    wavelength_km: np.ndarray
    n_rows: int

    def slope(self, kmin=None, kmax=None) -> float:
        """Least-squares log-log slope of ``power`` over ``[kmin, kmax]``.

        Defaults to the decade centred (geometrically) on the resolved band.
        """
        kmax_all = float(self.k[-1])
        centre = math.sqrt(kmax_all)
        kmin = centre / math.sqrt(10) if kmin is None else kmin
        kmax = centre * math.sqrt(10) if kmax is None else kmax
        m = (self.k >= kmin) & (self.k <= kmax) & (self.power > 0)
        if m.sum() < 2:
            raise ValueError("fewer than two wavenumbers in the fit band")
        return float(np.polyfit(np.log(self.k[m]), np.log(self.power[m]), 1)[0])


def row_dft_power(rows: np.ndarray) -> np.ndarray:
    """``|F_k|**2`` for k = 0..L//2 of each row, with ``F = fft / L``."""
    rows = np.asarray(rows, dtype=np.float64)
    L = rows.shape[-1]
    F = np.fft.rfft(rows, axis=-1) / L
    return np.abs(F) ** 2


def zonal_power_spectrum(field, variable=None, dx_km: float = 1.0) -> SpectrumResult:
    """Row-wise DFT power ``S_k = 2|F_k|^2`` (k = 1..L/2) averaged over latitudes."""
    if isinstance(field, GridField):
        f = field.channel(variable) if variable is not None else field.values[0]
    else:
        f = np.asarray(field)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        f = f[None]
    L = f.shape[-1]
    if L < 4:
        raise ShapeError(f"rows of length {L} are too short for a spectrum")
    half = L // 2
    power = 2.0 * row_dft_power(f)[:, 1:half + 1]
    k = np.arange(1, half + 1)
    return SpectrumResult(k, power.mean(axis=0), L * dx_km / k, f.shape[0])


# --- SSIM -------------------------------------------------------------------

SSIM_K1, SSIM_K2 = 0.01, 0.03
RANGE_EPS = 1e-12


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(a, g):
    n = len(g)
    out = correlate1d(correlate1d(a, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    lo = n // 2
    hi_r = a.shape[0] - (n - 1 - lo)
    hi_c = a.shape[1] - (n - 1 - lo)
    return out[lo:hi_r, lo:hi_c]


def ssim_map(truth, pred, variable=None, window=(11, 1.5), constants=(SSIM_K1, SSIM_K2),
             data_range=None) -> np.ndarray:
    t, p = _pair(truth, pred, variable)
    if t.ndim == 3:
        if t.shape[0] != 1:
            raise ShapeError("ssim needs a single variable")
        t, p = t[0], p[0]
    size, sigma = window
    if t.shape[0] < size or t.shape[1] < size:
        raise ShapeError(f"field {t.shape} smaller than the {size}x{size} window")
    R = float(t.max() - t.min()) if data_range is None else float(data_range)
    R = max(R, RANGE_EPS)
    c1 = (constants[0] * R) ** 2
    c2 = (constants[1] * R) ** 2
    g = gaussian_window(size, sigma)
    mu_t = _valid_filter(t, g)
    mu_p = _valid_filter(p, g)
    var_t = _valid_filter(t * t, g) - mu_t ** 2
    var_p = _valid_filter(p * p, g) - mu_p ** 2
    cov = _valid_filter(t * p, g) - mu_t * mu_p
    num = (2 * mu_t * mu_p + c1) * (2 * cov + c2)
    den = (mu_t ** 2 + mu_p ** 2 + c1) * (var_t + var_p + c2)
    return num / den


def ssim(truth, pred, variable=None, window=(11, 1.5), constants=(SSIM_K1, SSIM_K2),
         data_range=None) -> float:
    """Mean SSIM over all fully-contained Gaussian windows.

    ``data_range`` defaults to the truth's value range (floored at 1e-12).
    """
    return float(ssim_map(truth, pred, variable, window, constants, data_range).mean())


# --- density ----------------------------------------------------------------

@dataclass(frozen=True)
class DensityHistogram:
    edges: np.ndarray
    counts: np.ndarray
    log10_counts: np.ndarray  # NaN marks an empty bin


def density_histogram(fields, variable=None, bins: int = 100, value_range=None) -> DensityHistogram:
    arrays = []
    for f in fields:
        if isinstance(f, GridField):
            f = f.channel(variable) if variable is not None else f.values
        arrays.append(np.asarray(f, dtype=np.float64).ravel())
    if not arrays:
        raise DataError("density_histogram needs at least one field")
    if bins < 2:
        raise ValueError("need at least two bins")
    data = np.concatenate(arrays)
    if value_range is None:
        lo, hi = float(data.min()), float(data.max())
        value_range = (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)
    counts, edges = np.histogram(data, bins=bins, range=value_range)
    logc = np.full(counts.shape, np.nan)
    nz = counts > 0
    logc[nz] = np.log10(counts[nz])
    return DensityHistogram(edges, counts, logc)


# --- aggregation ------------------------------------------------------------

@dataclass(frozen=True)
class BoxStats:
    count: int
    mean: float
    min: float
    q25: float
    median: float
    q75: float
    max: float

    @classmethod
    def of(cls, values) -> "BoxStats":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise DataError("cannot summarise an empty group")
        q = np.percentile(v, [0, 25, 50, 75, 100])  # linear interpolation
        return cls(int(v.size), float(v.mean()), *(float(x) for x in q))


METRICS = ("mse", "rmse", "ssim")


@dataclass
class MetricReport:
    cells: dict = field(default_factory=dict)  # (variable, lead_time, method) -> {metric: BoxStats}

    def methods(self):
        return sorted({k[2] for k in self.cells})

    def get(self, variable, lead_time, method, metric) -> BoxStats:
        return self.cells[(variable, lead_time, method)][metric]

    def to_json(self) -> dict:
        groups = defaultdict(lambda: defaultdict(dict))
        for (var, lead, method), metrics in sorted(self.cells.items(), key=lambda kv: str(kv[0])):
            groups[var]["all" if lead is None else str(lead)][method] = {m: asdict(s) for m, s in metrics.items()}
        return {"variables": {k: dict(v) for k, v in groups.items()}}


def aggregate_report(rows) -> MetricReport:
    """Group per-sample rows by (variable, lead_time, method) into box stats.

    Each row is a mapping with ``variable``, ``lead_time``, ``method`` and any
    of ``mse``/``rmse``/``ssim``.
    """
    grouped = defaultdict(lambda: defaultdict(list))
    for r in rows:
        key = (r["variable"], r.get("lead_time"), r["method"])
        for m in METRICS:
            if r.get(m) is not None:
                grouped[key][m].append(r[m])
    if not grouped:
        raise DataError("no metric rows to aggregate")
    report = MetricReport()
    for key, metrics in grouped.items():
        report.cells[key] = {m: BoxStats.of(v) for m, v in metrics.items()}
    return report


def evaluate_sample(truth: GridField, pred: GridField, variable) -> dict:
    return {
        "mse": mse(truth, pred, variable),
        "rmse": rmse(truth, pred, variable),
        "ssim": ssim(truth, pred, variable),
    }


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_rows_csv(rows, path):
    """Long format: one line per sample x metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "variable", "lead_time", "method", "metric", "value"])
    for r in rows:
        for m in METRICS:
            if r.get(m) is not None:
                w.writerow([r.get("sample", ""), r["variable"], r.get("lead_time", ""),
                            r["method"], m, repr(float(r[m]))])
    _atomic_write(Path(path), buf.getvalue())


def write_report_json(report: MetricReport, path):
    _atomic_write(Path(path), json.dumps(report.to_json(), indent=2, sort_keys=True))


def write_spectrum_csv(spec: SpectrumResult, path):
    lines = ["k,wavelength_km,power"]
    lines += [f"{k},{wl!r},{p!r}" for k, wl, p in zip(spec.k.tolist(), spec.wavelength_km.tolist(),
                                                     spec.power.tolist())]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


# --- tiling seams -------------------------------------------------------------

@dataclass(frozen=True)
class SeamReport:
    seam_max: float
    interior_p999: float
    seams: int

    @property
    def ratio(self) -> float:
        return self.seam_max / max(self.interior_p999, 1e-12)

    @property
    def spike(self) -> bool:
        return self.seam_max > self.interior_p999


def seam_lines(n: int, patch: int, strategy: str = "shift") -> list[int]:
    """Indices ``s`` where the step ``s-1 -> s`` crosses a tile edge."""
    offs = axis_offsets(n, patch, strategy)
    edges = {o for o in offs[1:]} | {o + patch for o in offs[:-1]}
    return sorted(s for s in edges if 0 < s < n)


def seam_check(values, patch_size, strategy: str = "shift") -> SeamReport:
    """Compare cross-seam jumps with ordinary neighbour differences.

    Each seam line is scored by its mean absolute step; the reference is the
    99.9th percentile of per-pixel absolute steps away from any seam.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 3:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"seam check needs a 2-D field, got {a.shape}")
    ph, pw = (patch_size, patch_size) if np.isscalar(patch_size) else patch_size
    scores, interior = [], []
    for arr, p in ((a, ph), (a.T, pw)):
        steps = np.abs(np.diff(arr, axis=0))  # steps[s-1] is the jump into row s
        lines = seam_lines(arr.shape[0], p, strategy)
        mask = np.ones(len(steps), bool)
        for s in lines:
            scores.append(steps[s - 1].mean())
            mask[s - 1] = False
        interior.append(steps[mask].ravel())
    ref = float(np.percentile(np.concatenate(interior), 99.9))
    return SeamReport(float(max(scores)) if scores else 0.0, ref, len(scores))
