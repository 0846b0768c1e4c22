"""ConvLSTM grid-to-grid forecaster.

Each month's grid goes through a 3x3 convolutional embedding (16 channels), a
ConvLSTM cell with 32-channel hidden and cell states, and after the last month
a 1x1 convolution maps the hidden state to one value per cell. One model is
trained per horizon ``k``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSeries, NormStats, make_windows
from .nn import (
    AdamState,
    CheckpointError,
    Conv2dLayer,
    ConvLSTMCell,
    _conv_backward,
    _conv_forward,
    _lstm_step,
    _lstm_step_backward,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

EMBED_CHANNELS = 16
HIDDEN_CHANNELS = 32


class TrainingDiverged(FloatingPointError):
    pass


class ConvLSTMForecaster:
    def __init__(self, c_x: int = 1, seed: int = 0, embed_channels: int = EMBED_CHANNELS,
                 hidden_channels: int = HIDDEN_CHANNELS):
        rng = np.random.default_rng(seed)
        self.c_x = c_x
        self.embed = Conv2dLayer.init(c_x, embed_channels, 3, rng)
        self.cell = ConvLSTMCell.init(embed_channels, hidden_channels, rng)
        self.head = Conv2dLayer.init(hidden_channels, 1, 1, rng)
        # filled in by the training pipeline
        self.seq_len: int | None = None
        self.horizon: int | None = None
        self.stats: NormStats | None = None
        self.seed = seed

    @property
    def embed_channels(self) -> int:
        return self.embed.c_out

    @property
    def hidden_channels(self) -> int:
        return self.cell.c_h

    def _layers(self):
        return (("embed", self.embed), ("cell", self.cell.conv), ("head", self.head))

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers():
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers():
            out[f"{name}.weight"] = layer.grad_weight
            out[f"{name}.bias"] = layer.grad_bias
        return out

    def zero_grad(self):
        for _, layer in self._layers():
            layer.zero_grad()

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def set_state(self, state: dict[str, np.ndarray]):
        for name, arr in self.parameters().items():
            arr[...] = np.asarray(state[name]).reshape(arr.shape)

    def _check_input(self, seq: np.ndarray) -> tuple[np.ndarray, bool]:
        seq = np.asarray(seq, dtype=np.float64)
        single = seq.ndim == 4
        if single:
            seq = seq[None]
        if seq.ndim != 5 or seq.shape[2] != self.c_x:
            raise ValueError(f"expected L x {self.c_x} x H x W (or batched) input, got {seq.shape}")
        if not np.isfinite(seq).all():
            raise ValueError("input sequence contains non-finite values")
        return seq, single

    def _forward(self, seq: np.ndarray):
        n, L, _, h, w = seq.shape
        hs = np.zeros((n, self.hidden_channels, h, w))
        cs = np.zeros_like(hs)
        caches = []
        for t in range(L):
            e, e_cols = _conv_forward(seq[:, t], self.embed)
            hs, cs, step = _lstm_step(e, hs, cs, self.cell)
            caches.append((seq[:, t].shape, e_cols, step))
        out, head_cols = _conv_forward(hs, self.head)
        return out[:, 0], (caches, hs.shape, head_cols)

    def _backward(self, cache, grad_out: np.ndarray):
        caches, h_shape, head_cols = cache
        gh, gw, gb = _conv_backward(head_cols, h_shape, self.head, grad_out[:, None])
        self.head.grad_weight += gw
        self.head.grad_bias += gb
        gc = np.zeros(h_shape)
        for x_shape, e_cols, step in reversed(caches):
            ge, gh, gc, gw, gb = _lstm_step_backward(step, gh, gc, self.cell)
            self.cell.conv.grad_weight += gw
            self.cell.conv.grad_bias += gb
            _, gw, gb = _conv_backward(e_cols, x_shape, self.embed, ge)
            self.embed.grad_weight += gw
            self.embed.grad_bias += gb

    def forward(self, seq: np.ndarray) -> np.ndarray:
        """``L x C_x x H x W`` -> ``H x W`` (a leading batch axis is kept)."""
        seq, single = self._check_input(seq)
        out, _ = self._forward(seq)
        return out[0] if single else out

    def loss(self, x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
        x, _ = self._check_input(x)
        pred, _ = self._forward(x)
        return _masked_mse(pred, y, mask)[0]

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
        """Masked MSE of a batch; gradients are written to the layer buffers."""
        x, _ = self._check_input(x)
        pred, cache = self._forward(x)
        value, grad = _masked_mse(pred, y, mask)
        self.zero_grad()
        self._backward(cache, grad)
        return value


def _masked_mse(pred: np.ndarray, y: np.ndarray, mask: np.ndarray):
    y = np.reshape(y, pred.shape)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("no valid cells in loss")
    diff = np.where(m, pred - np.where(m, y, 0.0), 0.0)
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def forward(model: ConvLSTMForecaster, sequence: np.ndarray) -> np.ndarray:
    return model.forward(sequence)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    L: int = 12
    k: int = 1
    batch_size: int = 8
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        if self.L < 1 or self.k < 1 or self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")


@dataclass
class WindowSet:
    """Stacked windows: ``x`` is N x L x C_x x H x W, ``y`` is N x H x W."""

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    t0: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.x[idx], self.y[idx], self.mask, self.t0[idx])


def build_window_set(series: GridSeries | list[GridSeries], L: int, k: int) -> WindowSet:
    """Windows for one target series plus optional exogenous channels.

    ``series[0]`` is both the first input channel and the target. Values at
    invalid cells are zero-filled in the inputs.
    """
    if isinstance(series, GridSeries):
        series = [series]
    mask = series[0].mask.copy()
    for extra in series[1:]:
        if extra.shape != series[0].shape:
            raise ValueError("exogenous series must match the target grid")
        mask &= extra.mask
    windows = [make_windows(gs, L, k) for gs in series]
    x = np.stack([np.stack([w.input for w in ws]) for ws in windows], axis=2)
    x = np.where(np.isfinite(x), x, 0.0)
    y = np.stack([w.target for w in windows[0]])
    t0 = np.array([w.t0 for w in windows[0]])
    return WindowSet(x, y, mask, t0)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf

    def best_so_far(self) -> list[float]:
        return list(np.minimum.accumulate(self.val_loss))


def evaluate_loss(model: ConvLSTMForecaster, data: WindowSet, batch_size: int = 64) -> float:
    total = 0.0
    n_valid = int(data.mask.sum())
    for s in range(0, len(data), batch_size):
        xb = data.x[s:s + batch_size]
        pred, _ = model._forward(xb)
        total += _masked_mse(pred, data.y[s:s + batch_size], data.mask)[0] * xb.shape[0] * n_valid
    return total / (len(data) * n_valid)


# divergence is reported through the explicit finiteness checks below
@np.errstate(over="ignore", invalid="ignore")
def train(model: ConvLSTMForecaster, train_set: WindowSet, val_set: WindowSet,
          cfg: TrainConfig) -> tuple[ConvLSTMForecaster, TrainHistory]:
    """Adam on masked MSE; returns the model restored to its best validation epoch."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr)
    params = model.parameters()
    hist = TrainHistory()
    best_state = model.get_state()
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        running = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = model.loss_and_grad(train_set.x[idx], train_set.y[idx], train_set.mask)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch starting {s}")
            adam_step(params, model.gradients(), opt)
            running += loss * idx.size
        hist.train_loss.append(running / len(order))
        val = evaluate_loss(model, val_set)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        hist.val_loss.append(val)
        log.info("epoch %d train %.6g val %.6g", epoch, hist.train_loss[-1], val)
        if val < hist.best_val:
            hist.best_val, hist.best_epoch = val, epoch
            best_state = model.get_state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.set_state(best_state)
    model.seq_len, model.horizon = cfg.L, cfg.k
    return model, hist


@np.errstate(over="ignore", invalid="ignore")
def fit_steps(model: ConvLSTMForecaster, x: np.ndarray, y: np.ndarray, mask: np.ndarray,
              steps: int, lr: float = 1e-3) -> list[float]:
    """Plain full-batch Adam for a fixed number of steps; returns the loss before each step."""
    opt = AdamState(lr=lr)
    params = model.parameters()
    losses = []
    for _ in range(steps):
        loss = model.loss_and_grad(x, y, mask)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss after {len(losses)} steps")
        losses.append(loss)
        adam_step(params, model.gradients(), opt)
    losses.append(model.loss(x, y, mask))
    return losses


def predict_horizon(model: ConvLSTMForecaster, gs: GridSeries, t: int, k: int | None = None,
                    exogenous: list[GridSeries] = ()) -> np.ndarray:
    """Forecast for month ``t + k`` from the ``L`` months ending at ``t``, in data units.

    Invalid cells come back as NaN.
    """
    if model.seq_len is None or model.stats is None:
        raise ValueError("model has no sequence length / normalization attached; train or load it first")
    if k is not None and model.horizon is not None and k != model.horizon:
        raise ValueError(f"model was trained for horizon {model.horizon}, asked for {k}")
    L = model.seq_len
    if t < L - 1 or t >= gs.T:
        raise ValueError(f"need months {t - L + 1}..{t} of a series with T={gs.T}")
    chans = [gs, *exogenous]
    frames = []
    mask = gs.mask.copy()
    for ch in chans:
        mask &= ch.mask
        z = (ch.values[t - L + 1:t + 1] - model.stats.mean) / model.stats.std
        frames.append(np.where(np.isfinite(z), z, 0.0))
    seq = np.stack(frames, axis=1)
    pred = model.forward(seq) * model.stats.std + model.stats.mean
    return np.where(mask, pred, np.nan)


@dataclass
class ForecasterMeta:
    L: int
    k: int
    C_x: int
    mean: float
    std: float
    seed: int
    H: int = 0
    W: int = 0


def write_meta(path, meta: dict) -> None:
    lines = []
    for key, val in meta.items():
        lines.append(f"{key}={'%.17g' % val if isinstance(val, float) else val}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed metadata line {line!r}")
        out[key.strip()] = val.strip()
    return out


def save_forecaster(model: ConvLSTMForecaster, path, H: int = 0, W: int = 0) -> None:
    """DCNN1 checkpoint at ``path`` plus ``path.meta`` key=value sidecar."""
    save_checkpoint(path, model.parameters(), model.c_x, model.hidden_channels)
    meta = ForecasterMeta(model.seq_len or 0, model.horizon or 0, model.c_x,
                          model.stats.mean if model.stats else 0.0,
                          model.stats.std if model.stats else 1.0, model.seed, H, W)
    write_meta(f"{path}.meta", {"model": "convlstm", **asdict(meta)})


def load_forecaster(path) -> ConvLSTMForecaster:
    c_x, c_h, flat = load_checkpoint(path)
    if "embed.bias" not in flat:
        raise CheckpointError(f"{path}: missing embed.bias")
    model = ConvLSTMForecaster(c_x, embed_channels=flat["embed.bias"].size, hidden_channels=c_h)
    params = model.parameters()
    if set(flat) != set(params):
        raise CheckpointError(f"{path}: parameter names {sorted(flat)} do not match model")
    for name, arr in params.items():
        if flat[name].size != arr.size:
            raise CheckpointError(f"{path}: {name} has {flat[name].size} values, expected {arr.size}")
    model.set_state(flat)
    meta_path = Path(f"{path}.meta")
    if meta_path.exists():
        meta = read_meta(meta_path)
        model.seq_len = int(meta["L"]) or None
        model.horizon = int(meta["k"]) or None
        model.stats = NormStats(float(meta["mean"]), float(meta["std"]))
        model.seed = int(meta["seed"])
    return model


def _perturbed_losses(model: ConvLSTMForecaster, x: np.ndarray, y: np.ndarray, mask: np.ndarray,
                      target: str, flat_idx: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Loss of one window under ``len(deltas)`` single-entry parameter perturbations.

    Copy ``b`` sees parameter ``target`` with entry ``flat_idx[b]`` shifted by
    ``deltas[b]``. A shifted conv weight ``(o, q)`` adds ``delta * cols[q]`` to
    output channel ``o``, so all copies share one matmul per layer.
    """
    layer_name, kind = target.split(".")
    layer = dict(model._layers())[layer_name]
    B = deltas.size
    rows = np.arange(B)
    if kind == "weight":
        o_idx, q_idx = np.divmod(flat_idx, layer.weight[0].size)
    else:
        o_idx, q_idx = flat_idx, None

    def conv(inp, lyr):
        out, cols = _conv_forward(inp, lyr)
        if lyr is not layer:
            return out
        n, co, hh, ww = out.shape
        out = np.broadcast_to(out, (B, co, hh, ww)).reshape(B, co, hh * ww).copy()
        if kind == "weight":
            cols = cols.reshape(cols.shape[0], -1, hh * ww)
            src = cols[q_idx, rows if cols.shape[1] == B else 0]
            out[rows, o_idx] += deltas[:, None] * src
        else:
            out[rows, o_idx] += deltas[:, None]
        return out.reshape(B, co, hh, ww)

    seq = x[None] if x.ndim == 4 else x
    _, L, _, h, w = seq.shape
    hs = np.zeros((1, model.hidden_channels, h, w))
    cs = np.zeros_like(hs)
    ch = model.hidden_channels
    for t in range(L):
        e = conv(seq[:, t], model.embed)
        n = max(e.shape[0], hs.shape[0])
        xh = np.concatenate([np.broadcast_to(e, (n,) + e.shape[1:]),
                             np.broadcast_to(hs, (n,) + hs.shape[1:])], axis=1)
        z = conv(xh, model.cell.conv)
        i = 0.5 * (1.0 + np.tanh(0.5 * z[:, :ch]))
        f = 0.5 * (1.0 + np.tanh(0.5 * z[:, ch:2 * ch]))
        g = np.tanh(z[:, 2 * ch:3 * ch])
        o = 0.5 * (1.0 + np.tanh(0.5 * z[:, 3 * ch:]))
        cs = f * cs + i * g
        hs = o * np.tanh(cs)
    pred = np.broadcast_to(conv(hs, model.head)[:, 0], (B, h, w))
    m = np.asarray(mask, dtype=bool)
    diff = (pred - np.reshape(y, (1, h, w)))[:, m]
    return np.sum(diff * diff, axis=1) / m.sum()


def finite_difference_gradients(model: ConvLSTMForecaster, x: np.ndarray, y: np.ndarray,
                                mask: np.ndarray, eps: float = 1e-5,
                                chunk: int = 512) -> dict[str, np.ndarray]:
    """Central differences of the single-window masked MSE for every parameter."""
    out = {}
    for name, arr in model.parameters().items():
        numeric = np.empty(arr.size)
        for s in range(0, arr.size, chunk):
            idx = np.arange(s, min(s + chunk, arr.size))
            both = np.concatenate([idx, idx])
            deltas = np.concatenate([np.full(idx.size, eps), np.full(idx.size, -eps)])
            losses = _perturbed_losses(model, x, y, mask, name, both, deltas)
            numeric[idx] = (losses[:idx.size] - losses[idx.size:]) / (2.0 * eps)
        out[name] = numeric.reshape(arr.shape)
    return out


def relative_gradient_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(err.max()))
    return worst
