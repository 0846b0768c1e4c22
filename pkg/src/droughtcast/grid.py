"""Gridded monthly time series: data model, GSV1 text format, splits and windows.

Grid orientation is fixed: row 0 is the northernmost row, column 0 the
westernmost column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GSV1_MAGIC = "GSV1"


class GridFormatError(ValueError):
    """Raised when a GSV1 file or an in-memory grid violates the format rules."""


@dataclass(frozen=True)
class GridSeries:
    """T x H x W monthly values with a start month and a validity mask.

    Cells whose mask entry is False carry NaN at every timestep.
    """

    values: np.ndarray
    start: tuple[int, int] = (2000, 1)
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise GridFormatError(f"values must be a non-empty T x H x W array, got shape {values.shape}")
        year, month = self.start
        if not 1 <= int(month) <= 12:
            raise GridFormatError(f"start month must be in 1..12, got {month}")
        finite = np.isfinite(values)
        if self.mask is None:
            mask = finite.all(axis=0)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape[1:]:
                raise GridFormatError(f"mask shape {mask.shape} does not match grid {values.shape[1:]}")
        if not finite[:, mask].all():
            raise GridFormatError("non-finite value at a valid cell")
        values = values.copy()
        values[:, ~mask] = np.nan
        values.flags.writeable = False
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "start", (int(year), int(month)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def H(self) -> int:
        return self.values.shape[1]

    @property
    def W(self) -> int:
        return self.values.shape[2]

    def month_of(self, t: int) -> tuple[int, int]:
        """Calendar (year, month) of timestep ``t``."""
        year, month = self.start
        total = year * 12 + (month - 1) + t
        return total // 12, total % 12 + 1

    def slice(self, t_from: int, t_to: int) -> GridSeries:
        """Sub-series covering timesteps ``[t_from, t_to)``."""
        if not 0 <= t_from < t_to <= self.T:
            raise ValueError(f"invalid time slice [{t_from}, {t_to}) for T={self.T}")
        return GridSeries(self.values[t_from:t_to], self.month_of(t_from), self.mask)

    def __eq__(self, other):
        if not isinstance(other, GridSeries):
            return NotImplemented
        return (
            self.start == other.start
            and self.values.shape == other.values.shape
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")

    def boundaries(self, T: int) -> tuple[int, int]:
        """Cumulative floor boundaries ``(train_end, val_end)``."""
        b1 = math.floor(self.train_frac * T + 1e-9)
        b2 = math.floor((self.train_frac + self.val_frac) * T + 1e-9)
        return b1, b2


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray   # L x H x W
    target: np.ndarray  # H x W
    t0: int


def _format_value(v: float) -> str:
    if math.isnan(v):
        return "nan"
    return "%.17g" % v


def _parse_value(tok: str, lineno: int) -> float:
    tok = tok.strip()
    if tok == "nan":
        return math.nan
    try:
        v = float(tok)
    except ValueError:
        raise GridFormatError(f"line {lineno}: cannot parse value {tok!r}") from None
    if not math.isfinite(v):
        raise GridFormatError(f"line {lineno}: non-finite literal {tok!r}")
    return v


def load_grid_series(path) -> GridSeries:
    text = Path(path).read_text(encoding="ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise GridFormatError("empty file")
    header = lines[0].split(" ")
    if len(header) != 6 or header[0] != GSV1_MAGIC:
        raise GridFormatError(f"malformed header: {lines[0]!r}")
    try:
        T, H, W, year, month = (int(tok) for tok in header[1:])
    except ValueError:
        raise GridFormatError(f"malformed header: {lines[0]!r}") from None
    if min(T, H, W) < 1 or not 1 <= month <= 12:
        raise GridFormatError(f"invalid header values: {lines[0]!r}")
    body = lines[1:]
    if len(body) != T * H:
        raise GridFormatError(f"expected {T * H} data lines, found {len(body)}")
    values = np.empty((T, H, W))
    for n, line in enumerate(body):
        toks = line.split(",")
        if len(toks) != W:
            raise GridFormatError(f"line {n + 2}: expected {W} values, found {len(toks)}")
        values[n // H, n % H] = [_parse_value(tok, n + 2) for tok in toks]
    finite = np.isfinite(values)
    all_missing = ~finite.any(axis=0)
    mixed = ~finite.all(axis=0) & ~all_missing
    if mixed.any():
        r, c = np.argwhere(mixed)[0]
        raise GridFormatError(f"cell ({r}, {c}) mixes finite and missing values")
    return GridSeries(values, (year, month), ~all_missing)


def save_grid_series(gs: GridSeries, path) -> None:
    T, H, W = gs.shape
    year, month = gs.start
    out = [f"{GSV1_MAGIC} {T} {H} {W} {year} {month}"]
    for t in range(T):
        for r in range(H):
            out.append(",".join(_format_value(v) for v in gs.values[t, r]))
    Path(path).write_text("\n".join(out) + "\n", encoding="ascii", newline="\n")


def temporal_split(gs: GridSeries, spec: SplitSpec | None = None) -> tuple[GridSeries, GridSeries, GridSeries]:
    """Chronological train/val/test partition of ``gs``."""
    spec = spec or SplitSpec()
    b1, b2 = spec.boundaries(gs.T)
    if not 0 < b1 < b2 < gs.T:
        raise ValueError(f"split of T={gs.T} with {spec} leaves an empty segment")
    return gs.slice(0, b1), gs.slice(b1, b2), gs.slice(b2, gs.T)


def n_windows(T: int, L: int, k: int) -> int:
    return T - L - k + 1


def make_windows(gs: GridSeries, L: int, k: int) -> list[WindowSample]:
    if L < 1 or k < 1:
        raise ValueError(f"L and k must be >= 1, got L={L}, k={k}")
    if gs.T < L + k:
        raise ValueError(f"series of length {gs.T} too short for L={L}, k={k}")
    return [
        WindowSample(gs.values[t0:t0 + L], gs.values[t0 + L - 1 + k], t0)
        for t0 in range(n_windows(gs.T, L, k))
    ]


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


def compute_stats(gs: GridSeries) -> NormStats:
    if not gs.mask.any():
        raise ValueError("no valid cells to normalize over")
    vals = gs.values[:, gs.mask]
    mean = float(vals.mean())
    std = float(vals.std())
    return NormStats(mean, std if std > 0 else 1.0)


def normalize(gs: GridSeries, stats: NormStats | None = None) -> tuple[GridSeries, NormStats]:
    """Standardize ``gs``; pass ``stats`` from the training split to reuse them."""
    if stats is None:
        stats = compute_stats(gs)
    return GridSeries((gs.values - stats.mean) / stats.std, gs.start, gs.mask), stats


def denormalize(gs: GridSeries, stats: NormStats) -> GridSeries:
    return GridSeries(gs.values * stats.std + stats.mean, gs.start, gs.mask)
