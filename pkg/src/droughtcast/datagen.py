"""Synthetic gridded climate and PDSI fields.

Random numbers come from Philox4x64-10 (numpy's ``Philox`` bit generator),
keyed by ``(seed, stream_id)`` with the counter starting at zero. Each raw
64-bit word ``u`` becomes a uniform ``((u >> 11) + 0.5) * 2**-53`` and pairs of
uniforms become standard normals by Box-Muller:
``z0 = sqrt(-2 ln u1) cos(2 pi u2)``, ``z1 = sqrt(-2 ln u1) sin(2 pi u2)``.
Normals are consumed in C order of the requested shape. Stream ids:
temperature innovations 1, precipitation innovations 2.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .grid import GridSeries
from .indices import DEFAULT_AWC_MM, pdsi_grid

STREAM_TEMP = 1
STREAM_PRECIP = 2


def philox_normals(seed: int, stream: int, shape) -> np.ndarray:
    n = int(np.prod(shape))
    bitgen = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    raw = bitgen.random_raw(2 * ((n + 1) // 2))
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(u.size)
    z[0::2] = rad * np.cos(2.0 * np.pi * u2)
    z[1::2] = rad * np.sin(2.0 * np.pi * u2)
    return z[:n].reshape(shape)


def box_smooth(field: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 box on the last two axes, renormalized at the edges."""
    if radius <= 0:
        return field.copy()
    H, W = field.shape[-2:]

    def axis_sum(a, axis, n):
        c = np.cumsum(a, axis=axis)
        pad = [(0, 0)] * a.ndim
        pad[axis] = (1, 0)
        c = np.pad(c, pad)
        idx = np.arange(n)
        hi = np.minimum(idx + radius + 1, n)
        lo = np.maximum(idx - radius, 0)
        return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)

    total = axis_sum(axis_sum(field, field.ndim - 2, H), field.ndim - 1, W)
    ones = np.ones((H, W))
    count = axis_sum(axis_sum(ones, 0, H), 1, W)
    return total / count


@dataclass(frozen=True)
class SynthConfig:
    H: int = 9
    W: int = 16
    T: int = 600
    seed: int = 0
    temp_mean: float = 10.0          # C
    temp_amplitude: float = 12.0     # C, half the annual peak-to-peak
    precip_mean: float = 70.0        # mm / month
    precip_amplitude: float = 25.0   # mm
    rho: int = 2                     # smoothing radius, cells
    phi: float = 0.8                 # AR(1) coefficient of anomalies
    noise_std: float = 1.5           # C, stationary std of temperature anomalies (interior cells)
    precip_noise_std: float = 40.0   # mm, same for precipitation
    latitude: float = 42.0           # of row 0
    lat_step: float = 0.25           # degrees per row, southward
    awc: float = DEFAULT_AWC_MM
    start_year: int = 1958
    start_month: int = 1

    def __post_init__(self):
        if min(self.H, self.W) < 1:
            raise ValueError("H and W must be positive")
        if self.T < 24:
            raise ValueError(f"T must be at least 24 months, got {self.T}")
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must lie in [0, 1), got {self.phi}")
        if self.rho < 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")
        if self.noise_std < 0 or self.precip_noise_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 1 <= self.start_month <= 12:
            raise ValueError("start_month must be in 1..12")
        if self.awc <= 0:
            raise ValueError("awc must be positive")
        for r in (0, self.H - 1):
            if not -90.0 <= self.row_latitudes()[r] <= 90.0:
                raise ValueError("row latitudes leave [-90, 90]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row_latitudes(self) -> np.ndarray:
        return self.latitude - self.lat_step * np.arange(self.H)


def ar1_anomalies(cfg: SynthConfig, stream: int, std: float) -> np.ndarray:
    """Spatially smoothed AR(1) anomalies, T x H x W, stationary from month 0."""
    shape = (cfg.T, cfg.H, cfg.W)
    if std == 0.0:
        return np.zeros(shape)
    # rescaled so interior cells keep unit innovation variance
    eps = box_smooth(philox_normals(cfg.seed, stream, shape), cfg.rho) * (2 * cfg.rho + 1)
    innov_scale = std * np.sqrt(1.0 - cfg.phi**2)
    out = np.empty(shape)
    out[0] = std * eps[0]
    for t in range(1, cfg.T):
        out[t] = cfg.phi * out[t - 1] + innov_scale * eps[t]
    return out


def _season(cfg: SynthConfig, phase_month: float) -> np.ndarray:
    months = (np.arange(cfg.T) + cfg.start_month - 1) % 12
    return np.sin(2.0 * np.pi * (months - phase_month) / 12.0)[:, None, None]


def synth_climate(cfg: SynthConfig) -> tuple[GridSeries, GridSeries]:
    """Monthly ``(precip, temps)`` grids: seasonal cycle plus smoothed AR(1) anomalies."""
    start = (cfg.start_year, cfg.start_month)
    # temperature peaks in July, precipitation in June
    temps = cfg.temp_mean + cfg.temp_amplitude * _season(cfg, 3.0) + ar1_anomalies(cfg, STREAM_TEMP, cfg.noise_std)
    precip = cfg.precip_mean + cfg.precip_amplitude * _season(cfg, 2.0) \
        + ar1_anomalies(cfg, STREAM_PRECIP, cfg.precip_noise_std)
    precip = np.maximum(precip, 0.0)
    shape = (cfg.T, cfg.H, cfg.W)
    return GridSeries(np.broadcast_to(precip, shape), start), GridSeries(np.broadcast_to(temps, shape), start)


def synth_pdsi_field(cfg: SynthConfig) -> GridSeries:
    precip, temps = synth_climate(cfg)
    return pdsi_grid(precip, temps, cfg.row_latitudes(), cfg.awc)


def lag1_autocorrelation(series: np.ndarray) -> float:
    """Mean over cells of the lag-1 autocorrelation along axis 0."""
    x = series - series.mean(axis=0)
    num = (x[1:] * x[:-1]).sum(axis=0)
    den = (x * x).sum(axis=0)
    return float(np.mean(num / den))
