"""Drought indices: Selyaninov's hydrothermal coefficient and the Palmer index.

PDSI follows the classic Palmer procedure: Thornthwaite PET, a two-layer
soil water balance, CAFEC coefficients and climatic characteristic K
calibrated on the whole record, the Z moisture anomaly, and the basic
recursion ``X[i] = 0.897 * X[i-1] + Z[i] / 3`` (no spell backtracking).

Water balance quantities are kept in millimetres; departures are converted to
inches before the K weighting because Palmer's empirical constants assume
inches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GridSeries

HTC_THRESHOLD_C = 10.0
DEFAULT_AWC_MM = 152.4
SURFACE_LAYER_MM = 25.4
MM_PER_INCH = 25.4
PDSI_PERSISTENCE = 0.897
PDSI_Z_WEIGHT = 1.0 / 3.0
# mean |d| floor (inches); keeps K finite when a calendar month has no departure at all
_MIN_MEAN_ABS_DEPARTURE_IN = 1e-3

_MONTH_DAYS = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])


class NoGrowingSeason(ValueError):
    """No day with mean temperature above the HTC threshold."""


@dataclass(frozen=True)
class DailyClimate:
    temps: np.ndarray
    precip: np.ndarray

    def __post_init__(self):
        temps = np.asarray(self.temps, dtype=np.float64)
        precip = np.asarray(self.precip, dtype=np.float64)
        if temps.ndim != 1 or temps.shape != precip.shape or temps.size < 1:
            raise ValueError("temps and precip must be 1-D sequences of equal non-zero length")
        if (precip < 0).any():
            raise ValueError("precipitation must be non-negative")
        object.__setattr__(self, "temps", temps)
        object.__setattr__(self, "precip", precip)


@dataclass(frozen=True)
class MonthlyClimate:
    precip: np.ndarray
    temps: np.ndarray
    latitude: float
    awc: float = DEFAULT_AWC_MM
    start_month: int = 1

    def __post_init__(self):
        precip = np.asarray(self.precip, dtype=np.float64)
        temps = np.asarray(self.temps, dtype=np.float64)
        if precip.ndim != 1 or precip.shape != temps.shape:
            raise ValueError("precip and temps must be 1-D sequences of equal length")
        if precip.size < 12:
            raise ValueError(f"need at least 12 months, got {precip.size}")
        if not (np.isfinite(precip).all() and np.isfinite(temps).all()):
            raise ValueError("monthly climate contains non-finite values")
        if (precip < 0).any():
            raise ValueError("precipitation must be non-negative")
        if not self.awc > 0:
            raise ValueError(f"awc must be positive, got {self.awc}")
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude outside [-90, 90]: {self.latitude}")
        if not 1 <= self.start_month <= 12:
            raise ValueError(f"start_month must be in 1..12, got {self.start_month}")
        object.__setattr__(self, "precip", precip)
        object.__setattr__(self, "temps", temps)


@dataclass
class PdsiState:
    """Every intermediate of one PDSI run, per month unless noted."""

    X: np.ndarray
    Z: np.ndarray
    d: np.ndarray       # departure P - P_hat, mm
    pet: np.ndarray
    et: np.ndarray
    pr: np.ndarray      # potential recharge
    r: np.ndarray
    pro: np.ndarray     # potential runoff
    ro: np.ndarray
    pl: np.ndarray      # potential loss
    loss: np.ndarray
    cafec_et: np.ndarray
    cafec_r: np.ndarray
    cafec_ro: np.ndarray
    cafec_loss: np.ndarray
    cafec_p: np.ndarray
    # per calendar month, index 0 = January
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    K: np.ndarray


def htc(dc: DailyClimate) -> float:
    """Hydrothermal coefficient ``10 * sum(P) / sum(T)`` over days warmer than 10 C."""
    warm = dc.temps > HTC_THRESHOLD_C
    if not warm.any():
        raise NoGrowingSeason("no growing season: no day with mean temperature above 10 C")
    return 10.0 * float(dc.precip[warm].sum()) / float(dc.temps[warm].sum())


def _calendar_months(n: int, start_month: int) -> np.ndarray:
    """0-based calendar month index of each of ``n`` consecutive months."""
    return (np.arange(n) + start_month - 1) % 12


def mean_daylight_hours(latitude: float) -> np.ndarray:
    """Mean day length (hours) of each calendar month for a non-leap year."""
    if not -90.0 <= latitude <= 90.0:
        raise ValueError(f"latitude outside [-90, 90]: {latitude}")
    lat = math.radians(latitude)
    doy = np.arange(1, 366)
    decl = 0.409 * np.sin(2.0 * np.pi / 365.0 * doy - 1.39)
    cos_ws = np.clip(-math.tan(lat) * np.tan(decl), -1.0, 1.0)
    daylight = 24.0 / np.pi * np.arccos(cos_ws)
    edges = np.concatenate([[0], np.cumsum(_MONTH_DAYS)])
    return np.array([daylight[edges[m]:edges[m + 1]].mean() for m in range(12)])


def pet_thornthwaite(temps, latitude: float, start_month: int = 1) -> np.ndarray:
    """Monthly Thornthwaite potential evapotranspiration in mm.

    The heat index uses the climatological mean of each calendar month over the
    whole record, with sub-freezing temperatures counted as zero.
    """
    temps = np.asarray(temps, dtype=np.float64)
    if temps.ndim != 1 or temps.size < 12:
        raise ValueError("need a 1-D series of at least 12 monthly temperatures")
    if not 1 <= start_month <= 12:
        raise ValueError(f"start_month must be in 1..12, got {start_month}")
    daylight = mean_daylight_hours(latitude)
    months = _calendar_months(temps.size, start_month)
    warm = np.maximum(temps, 0.0)
    clim = np.array([warm[months == m].mean() for m in range(12)])
    heat_index = float(np.sum((clim / 5.0) ** 1.514))
    pet = np.zeros_like(temps)
    if heat_index <= 0.0:
        return pet
    a = 6.75e-7 * heat_index**3 - 7.71e-5 * heat_index**2 + 1.792e-2 * heat_index + 0.49239
    pos = temps > 0.0
    pet[pos] = (
        16.0
        * (daylight[months[pos]] / 12.0)
        * (_MONTH_DAYS[months[pos]] / 30.0)
        * (10.0 * temps[pos] / heat_index) ** a
    )
    return pet


def water_balance(precip: np.ndarray, pet: np.ndarray, awc: float) -> dict[str, np.ndarray]:
    """Palmer two-layer bucket, starting from field capacity.

    The surface layer holds 25.4 mm (or all of ``awc`` when smaller); the
    underlying layer holds the rest. Underlying-layer loss is proportional to
    its fraction of total capacity.
    """
    n = precip.size
    ss_cap = min(SURFACE_LAYER_MM, awc)
    su_cap = awc - ss_cap
    ss, su = ss_cap, su_cap
    out = {key: np.zeros(n) for key in ("et", "pr", "r", "pro", "ro", "pl", "loss")}
    for i in range(n):
        p, pe = precip[i], pet[i]
        s = ss + su
        out["pr"][i] = awc - s
        out["pro"][i] = s
        pl_s = min(pe, ss)
        pl_u = min((pe - pl_s) * su / awc, su)
        out["pl"][i] = pl_s + pl_u
        if p >= pe:
            excess = p - pe
            rs = min(ss_cap - ss, excess)
            ru = min(su_cap - su, excess - rs)
            out["r"][i] = rs + ru
            out["ro"][i] = excess - rs - ru
            out["et"][i] = pe
            ss += rs
            su += ru
        else:
            deficit = pe - p
            ls = min(ss, deficit)
            lu = min((deficit - ls) * su / awc, su)
            out["loss"][i] = ls + lu
            out["et"][i] = p + ls + lu
            ss -= ls
            su -= lu
    return out


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    return num / den


def pdsi_recursion(z) -> np.ndarray:
    """``X[0] = Z[0]/3``, then ``X[i] = 0.897 X[i-1] + Z[i]/3``."""
    z = np.asarray(z, dtype=np.float64)
    x = np.empty_like(z)
    prev = 0.0
    for i, zi in enumerate(z):
        prev = PDSI_PERSISTENCE * prev + zi * PDSI_Z_WEIGHT
        x[i] = prev
    return x


def pdsi(mc: MonthlyClimate) -> PdsiState:
    n = mc.precip.size
    months = _calendar_months(n, mc.start_month)
    pet = pet_thornthwaite(mc.temps, mc.latitude, mc.start_month)
    wb = water_balance(mc.precip, pet, mc.awc)
    p = mc.precip
    n_cal = (n // 12) * 12
    cal = np.arange(n) < n_cal

    alpha, beta, gamma, delta = (np.empty(12) for _ in range(4))
    for m in range(12):
        sel = cal & (months == m)
        alpha[m] = _ratio(wb["et"][sel].mean(), pet[sel].mean())
        beta[m] = _ratio(wb["r"][sel].mean(), wb["pr"][sel].mean())
        gamma[m] = _ratio(wb["ro"][sel].mean(), wb["pro"][sel].mean())
        delta[m] = _ratio(wb["loss"][sel].mean(), wb["pl"][sel].mean())

    cafec_et = alpha[months] * pet
    cafec_r = beta[months] * wb["pr"]
    cafec_ro = gamma[months] * wb["pro"]
    cafec_loss = delta[months] * wb["pl"]
    cafec_p = cafec_et + cafec_r + cafec_ro - cafec_loss
    d = p - cafec_p
    d_in = d / MM_PER_INCH

    k_hat = np.empty(12)
    mean_abs_d = np.empty(12)
    for m in range(12):
        sel = cal & (months == m)
        supply = p[sel].mean() + wb["loss"][sel].mean()
        demand = pet[sel].mean() + wb["r"][sel].mean() + wb["ro"][sel].mean()
        t_hat = demand / supply if supply > 0 else 0.0
        mean_abs_d[m] = max(np.abs(d_in[sel]).mean(), _MIN_MEAN_ABS_DEPARTURE_IN)
        k_hat[m] = 1.5 * math.log10((t_hat + 2.8) / mean_abs_d[m]) + 0.5
    K = 17.67 * k_hat / float(np.sum(mean_abs_d * k_hat))

    z = K[months] * d_in
    return PdsiState(
        X=pdsi_recursion(z), Z=z, d=d, pet=pet,
        et=wb["et"], pr=wb["pr"], r=wb["r"], pro=wb["pro"], ro=wb["ro"], pl=wb["pl"], loss=wb["loss"],
        cafec_et=cafec_et, cafec_r=cafec_r, cafec_ro=cafec_ro, cafec_loss=cafec_loss, cafec_p=cafec_p,
        alpha=alpha, beta=beta, gamma=gamma, delta=delta, K=K,
    )


def pdsi_grid(precip: GridSeries, temps: GridSeries, lat_per_row, awc=DEFAULT_AWC_MM) -> GridSeries:
    """Per-cell PDSI; cells invalid in either input stay invalid.

    ``lat_per_row`` is a scalar or one latitude per row; ``awc`` is a scalar or
    an H x W array.
    """
    if precip.shape != temps.shape:
        raise ValueError(f"precip grid {precip.shape} and temperature grid {temps.shape} differ")
    if precip.start != temps.start:
        raise ValueError(f"start months differ: {precip.start} vs {temps.start}")
    T, H, W = precip.shape
    lats = np.broadcast_to(np.asarray(lat_per_row, dtype=np.float64), (H,))
    awcs = np.broadcast_to(np.asarray(awc, dtype=np.float64), (H, W))
    mask = precip.mask & temps.mask
    out = np.full((T, H, W), np.nan)
    for r in range(H):
        for c in range(W):
            if not mask[r, c]:
                continue
            mc = MonthlyClimate(precip.values[:, r, c], temps.values[:, r, c], float(lats[r]),
                                float(awcs[r, c]), precip.start[1])
            out[:, r, c] = pdsi(mc).X
    return GridSeries(out, precip.start, mask)


def read_value_csv(path) -> np.ndarray:
    """Single-column CSV with header ``value``."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != "value":
        raise ValueError(f"{path}: expected header 'value'")
    try:
        return np.array([float(ln) for ln in lines[1:]])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def write_value_csv(values, path) -> None:
    rows = ["value"] + ["%.17g" % v for v in np.atleast_1d(values)]
    Path(path).write_text("\n".join(rows) + "\n")
