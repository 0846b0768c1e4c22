"""Run configuration, model training/loading and split evaluation shared by the CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import SynthConfig
from .evaluation import EvalReport, r2_map
from .forecaster import (
    ConvLSTMForecaster,
    TrainConfig,
    build_window_set,
    load_forecaster,
    read_meta,
    save_forecaster,
    train,
    write_meta,
)
from .gbt import GridGBT, TreeParams, load_grid_gbt, predict_grid_gbt, save_grid_gbt, train_grid_gbt
from .grid import GridSeries, SplitSpec, normalize, temporal_split

MODELS = ("convlstm", "gbt", "gbt-spatial", "persistence")
PATH_KEYS = ("data", "out", "out_dir")


class ConfigError(ValueError):
    pass


def parse_key_values(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


def _coerce(name: str, typ, raw: str):
    try:
        if typ is bool:
            if raw.lower() not in ("0", "1", "true", "false"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true")
        return typ(raw)
    except ValueError:
        raise ConfigError(f"key {name!r}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class RunConfig:
    model: str = "convlstm"
    L: int = 12
    k: int = 1
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    patience: int = 5
    seed: int = 0
    n_trees: int = 200
    shrinkage: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 5
    lags: int = 12
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    data: str | None = None
    out: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"key 'model': {self.model!r} not one of {', '.join(MODELS)}")
        for name in ("L", "k", "epochs", "batch_size", "patience", "lags", "max_depth", "min_samples_leaf"):
            if getattr(self, name) < 1:
                raise ConfigError(f"key {name!r} must be >= 1")
        if self.n_trees < 0:
            raise ConfigError("key 'n_trees' must be >= 0")
        if not 0 < self.shrinkage <= 1:
            raise ConfigError("key 'shrinkage' must lie in (0, 1]")
        if not self.lr > 0:
            raise ConfigError("key 'lr' must be positive")
        try:
            self.split_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_mapping(cls, values: dict[str, str], base_dir=None) -> RunConfig:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            typ = {"int": int, "float": float}.get(types[key], str)
            val = _coerce(key, typ, raw)
            if key in PATH_KEYS and base_dir is not None:
                val = str(Path(base_dir, val))
            kwargs[key] = val
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> RunConfig:
        return cls.from_mapping(parse_key_values(path), Path(path).parent)

    def override(self, **kwargs) -> RunConfig:
        return dataclasses.replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.L, self.k, self.batch_size, self.seed, self.patience)

    def tree_params(self) -> TreeParams:
        return TreeParams(self.n_trees, self.shrinkage, self.max_depth, self.min_samples_leaf)


def synth_config_from_file(path) -> SynthConfig:
    """SynthConfig from key=value lines; ``seed`` is required, other keys default."""
    values = parse_key_values(path)
    types = {f.name: f.type for f in dataclasses.fields(SynthConfig)}
    if "seed" not in values:
        raise ConfigError("missing key 'seed'")
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        kwargs[key] = _coerce(key, {"int": int, "float": float}[types[key]], raw)
    try:
        return SynthConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


class PersistenceModel:
    """Predicts month ``t``'s grid for month ``t + k``."""

    name = "persistence"

    def __init__(self, k: int = 1, context: int = 1):
        self.horizon = k
        self.context = context

    def predict_many(self, gs: GridSeries, ts) -> np.ndarray:
        return gs.values[np.asarray(ts)]


class ConvLSTMModel:
    name = "convlstm"

    def __init__(self, net: ConvLSTMForecaster, dims: tuple[int, int] | None = None):
        self.net = net
        self.dims = dims
        self.horizon = net.horizon
        self.context = net.seq_len
        self.seed = net.seed

    def predict_many(self, gs: GridSeries, ts, batch: int = 64) -> np.ndarray:
        ts = np.asarray(ts)
        L, stats = self.context, self.net.stats
        z = np.where(gs.mask, (gs.values - stats.mean) / stats.std, 0.0)
        out = np.empty((ts.size, gs.H, gs.W))
        for s in range(0, ts.size, batch):
            chunk = ts[s:s + batch]
            seq = np.stack([z[t - L + 1:t + 1] for t in chunk])[:, :, None]
            out[s:s + batch] = self.net.forward(seq) * stats.std + stats.mean
        out[:, ~gs.mask] = np.nan
        return out


class GBTGridModel:
    def __init__(self, grid: GridGBT):
        self.grid = grid
        self.name = "gbt-spatial" if grid.spatial else "gbt"
        self.horizon = grid.k
        self.context = grid.p

    def predict_many(self, gs: GridSeries, ts) -> np.ndarray:
        return np.stack([predict_grid_gbt(self.grid, gs, int(t)) for t in ts])


@dataclass
class TrainResult:
    model: object
    log_header: str
    log_rows: list[tuple]


def train_model(cfg: RunConfig, gs: GridSeries) -> TrainResult:
    """Fit ``cfg.model`` on the training split (validation split for early stopping)."""
    tr, va, _ = temporal_split(gs, cfg.split_spec())
    if cfg.model == "persistence":
        return TrainResult(PersistenceModel(cfg.k, cfg.L), "", [])
    if cfg.model == "convlstm":
        ntr, stats = normalize(tr)
        nva, _ = normalize(va, stats)
        net = ConvLSTMForecaster(seed=cfg.seed)
        net.stats = stats
        net, hist = train(net, build_window_set(ntr, cfg.L, cfg.k), build_window_set(nva, cfg.L, cfg.k),
                          cfg.train_config())
        rows = list(zip(range(len(hist.train_loss)), hist.train_loss, hist.val_loss))
        return TrainResult(ConvLSTMModel(net), "epoch,train_loss,val_loss", rows)
    grid = train_grid_gbt(tr, cfg.model == "gbt-spatial", cfg.lags, cfg.k, cfg.tree_params())
    n = max(len(m.train_mse) for m in grid.models.values())
    # cells that stopped early keep their final error
    curve = np.mean([m.train_mse + [m.train_mse[-1]] * (n - len(m.train_mse)) for m in grid.models.values()],
                    axis=0)
    return TrainResult(GBTGridModel(grid), "tree,train_mse", list(enumerate(curve)))


def save_model(model, path, H: int, W: int) -> None:
    if isinstance(model, ConvLSTMModel):
        save_forecaster(model.net, path, H, W)
    elif isinstance(model, GBTGridModel):
        save_grid_gbt(model.grid, path)
        g = model.grid
        write_meta(f"{path}.meta", {"model": model.name, "L": g.p, "k": g.k, "lags": g.p,
                                    "n_features": (9 if g.spatial else 1) * g.p, "H": g.H, "W": g.W})
    else:
        raise ConfigError(f"model {model.name!r} has no checkpoint")


def load_model(path):
    meta_path = Path(f"{path}.meta")
    if not meta_path.exists():
        raise ConfigError(f"{path}: missing metadata sidecar {meta_path.name}")
    meta = read_meta(meta_path)
    kind = meta.get("model")
    if kind == "convlstm":
        dims = (int(meta.get("H", 0)), int(meta.get("W", 0)))
        # 0 x 0 means the grid size was not recorded
        return ConvLSTMModel(load_forecaster(path), dims if min(dims) > 0 else None)
    if kind in ("gbt", "gbt-spatial"):
        return GBTGridModel(load_grid_gbt(path, int(meta["k"])))
    raise ConfigError(f"{meta_path}: unknown model kind {kind!r}")


def model_dims(model) -> tuple[int, int] | None:
    if isinstance(model, GBTGridModel):
        return model.grid.H, model.grid.W
    return getattr(model, "dims", None)


def forecast_times(T: int, bounds: tuple[int, int], context: int, k: int) -> np.ndarray:
    """Issue months whose inputs and target both lie in ``[start, stop)``."""
    start, stop = bounds
    ts = np.arange(start + context - 1, stop - k)
    if ts.size < 2:
        raise ValueError(f"segment {start}..{stop} too short for context {context} at horizon {k}")
    return ts


def split_bounds(T: int, spec: SplitSpec, split: str) -> tuple[int, int]:
    b1, b2 = spec.boundaries(T)
    try:
        return {"train": (0, b1), "val": (b1, b2), "test": (b2, T)}[split]
    except KeyError:
        raise ConfigError(f"unknown split {split!r}") from None


def evaluate_model(model, gs: GridSeries, spec: SplitSpec, split: str = "test",
                   metadata: dict | None = None) -> EvalReport:
    ts = forecast_times(gs.T, split_bounds(gs.T, spec, split), model.context, model.horizon)
    preds = model.predict_many(gs, ts)
    truth = gs.values[ts + model.horizon]
    meta = {"model": model.name, "split": split, "k": str(model.horizon), "n_months": str(ts.size),
            "seed": str(getattr(model, "seed", "none"))}
    meta.update(metadata or {})
    return EvalReport(r2_map(truth, preds, gs.mask), metadata=meta)


def train_and_score(cfg: RunConfig, gs: GridSeries, split: str = "test") -> EvalReport:
    model = train_model(cfg, gs).model
    return evaluate_model(model, gs, cfg.split_spec(), split, {"seed": str(cfg.seed)})
