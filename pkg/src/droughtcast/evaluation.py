"""R² scoring, per-cell skill maps, horizon curves and report artifacts."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Reference scores from the original study. They depend on the authors'
# private data extraction and are not reproducible here; nothing enforces them.
REFERENCE_SCORES = {
    "convlstm_mean_r2": 0.90,
    "gbt_mean_r2": 0.85,
    "gbt_spatial_mean_r2": 0.85,
    "horizon_curve_shape": ((1, 0.95), (6, 0.75)),
}
REFERENCE_REPRODUCIBLE = False


class ZeroVariance(ValueError):
    pass


def r2(y_true, y_pred) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    y = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} truths vs {p.size} predictions")
    if y.size < 2:
        raise ValueError("need at least two values")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0.0:
        raise ZeroVariance("y_true has zero variance; R² undefined")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def r2_map(truth: np.ndarray, preds: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-cell R² over the time axis of aligned ``(n, H, W)`` stacks.

    Masked or zero-variance cells are NaN.
    """
    truth = np.asarray(truth, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if truth.shape != preds.shape or truth.ndim != 3:
        raise ValueError(f"misaligned stacks {truth.shape} vs {preds.shape}")
    if truth.shape[0] < 2:
        raise ValueError("need at least two evaluation months")
    if mask is None:
        mask = np.all(np.isfinite(truth), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ss_res = np.sum((truth - preds) ** 2, axis=0)
        ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2, axis=0)
        out = 1.0 - ss_res / ss_tot
    out[~mask | (ss_tot == 0.0) | ~np.isfinite(out)] = np.nan
    return out


@dataclass
class EvalReport:
    r2_map: np.ndarray
    horizon_curve: list[tuple[int, float]] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ks = [k for k, _ in self.horizon_curve]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("horizon curve keys must be strictly increasing")

    @property
    def valid(self) -> np.ndarray:
        return self.r2_map[np.isfinite(self.r2_map)]

    @property
    def mean_r2(self) -> float:
        return float(self.valid.mean()) if self.valid.size else float("nan")

    @property
    def std_r2(self) -> float:
        return float(self.valid.std()) if self.valid.size else float("nan")

    @property
    def min_r2(self) -> float:
        return float(self.valid.min()) if self.valid.size else float("nan")

    @property
    def max_r2(self) -> float:
        return float(self.valid.max()) if self.valid.size else float("nan")

    def summary(self) -> dict[str, str]:
        out = dict(self.metadata)
        out["n_cells"] = str(self.valid.size)
        for name in ("mean_r2", "std_r2", "min_r2", "max_r2"):
            out[name] = "%.17g" % getattr(self, name)
        return out


def horizon_sweep(train_eval_fn, ks) -> list[tuple[int, float]]:
    """Call ``train_eval_fn(k)`` (returning test mean R²) for each horizon.

    A failure is re-raised as ``HorizonFailure`` naming the horizon.
    """
    ks = list(ks)
    if not ks or any(int(k) != k or k < 1 for k in ks):
        raise ValueError(f"horizons must be positive integers, got {ks}")
    if sorted(set(ks)) != ks:
        raise ValueError("horizons must be strictly increasing")
    curve = []
    for k in ks:
        try:
            curve.append((k, float(train_eval_fn(k))))
        except Exception as exc:
            raise HorizonFailure(k, exc) from exc
    return curve


class HorizonFailure(RuntimeError):
    def __init__(self, k: int, cause: Exception):
        super().__init__(f"horizon k={k} failed: {cause}")
        self.k = k
        self.cause = cause


def pgm_pixels(map_: np.ndarray) -> np.ndarray:
    """R² clipped to [0, 1] and scaled to 0..255; non-values become 0."""
    v = np.where(np.isfinite(map_), np.clip(map_, 0.0, 1.0), 0.0)
    return np.rint(v * 255.0).astype(int)


def write_map_csv(map_: np.ndarray, path) -> None:
    rows = [",".join("nan" if not np.isfinite(v) else "%.17g" % v for v in row) for row in map_]
    Path(path).write_text("\n".join(rows) + "\n")


def read_map_csv(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line]
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)


def write_pgm(map_: np.ndarray, path) -> None:
    H, W = map_.shape
    px = pgm_pixels(map_)
    lines = ["P2", f"{W} {H}", "255"] + [" ".join(str(v) for v in row) for row in px]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    toks = Path(path).read_text().split()
    if toks[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    W, H = int(toks[1]), int(toks[2])
    return np.array(toks[4:4 + W * H], dtype=int).reshape(H, W)


def write_horizon_csv(curve, path) -> None:
    lines = ["k,mean_r2"] + ["%d,%.17g" % (k, v) for k, v in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def read_horizon_csv(path) -> list[tuple[int, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "k,mean_r2":
        raise ValueError(f"{path}: missing 'k,mean_r2' header")
    return [(int(a), float(b)) for a, b in (line.split(",") for line in lines[1:] if line)]


def write_summary(summary: dict[str, str], path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in summary.items()))


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line:
            key, _, val = line.partition("=")
            out[key] = val
    return out


def write_report(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "r2_map.csv", out / "r2_map.pgm", out / "summary.txt"]
    write_map_csv(report.r2_map, paths[0])
    write_pgm(report.r2_map, paths[1])
    write_summary(report.summary(), paths[2])
    if report.horizon_curve:
        paths.append(out / "horizon.csv")
        write_horizon_csv(report.horizon_curve, paths[-1])
    return paths
