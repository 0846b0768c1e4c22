"""Small dense-array neural network kernel in float64.

Only what the forecaster needs: same-padded 2D convolution, a ConvLSTM cell,
hand-written reverse-mode gradients for both, Adam, a central-difference
gradient checker and the DCNN1 checkpoint format.

Feature maps are ``(N, C, H, W)`` arrays; single maps ``(C, H, W)`` are
accepted by the public functions and returned in the same rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# fused gate channel blocks, in this order
GATE_ORDER = ("input", "forget", "candidate", "output")


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Conv2dLayer:
    """Square-kernel convolution with zero same-padding (odd kernel sizes)."""

    weight: np.ndarray  # C_out x C_in x k x k
    bias: np.ndarray    # C_out
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        o, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.bias.shape != (o,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {o} output channels")
        self.zero_grad()

    @classmethod
    def init(cls, c_in: int, c_out: int, kernel: int, rng: np.random.Generator) -> Conv2dLayer:
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        return cls(rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)), np.zeros(c_out))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def zero_grad(self):
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a C x H x W or N x C x H x W array, got shape {x.shape}")


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(C*k*k, N*H*W)`` patches with zero same-padding."""
    n, c, h, w = x.shape
    if kernel == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    p = kernel // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))  # N C H W k k
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kernel * kernel, n * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kernel: int) -> np.ndarray:
    n, c, h, w = shape
    if kernel == 1:
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    p = kernel // 2
    cols = cols.reshape(c, kernel, kernel, n, h, w)
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p))
    for di in range(kernel):
        for dj in range(kernel):
            xp[:, :, di:di + h, dj:dj + w] += cols[:, di, dj]
    return xp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)


def _conv_forward(x: np.ndarray, layer: Conv2dLayer) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    if c != layer.c_in:
        raise ValueError(f"input has {c} channels, layer expects {layer.c_in}")
    cols = _im2col(x, layer.kernel)
    out = layer.weight.reshape(layer.c_out, -1) @ cols + layer.bias[:, None]
    return out.reshape(layer.c_out, n, h, w).transpose(1, 0, 2, 3), cols


def _conv_backward(cols: np.ndarray, x_shape, layer: Conv2dLayer, grad_out: np.ndarray):
    n, _, h, w = x_shape
    if grad_out.shape != (n, layer.c_out, h, w):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {(n, layer.c_out, h, w)}")
    g = grad_out.transpose(1, 0, 2, 3).reshape(layer.c_out, n * h * w)
    grad_b = g.sum(axis=1)
    grad_w = (g @ cols.T).reshape(layer.weight.shape)
    gcols = layer.weight.reshape(layer.c_out, -1).T @ g
    grad_x = _col2im(gcols, x_shape, layer.kernel)
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, layer: Conv2dLayer) -> np.ndarray:
    xb, single = _as_batch(x)
    out, _ = _conv_forward(xb, layer)
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, layer: Conv2dLayer, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)``; does not touch the layer's buffers."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    cols = _im2col(xb, layer.kernel)
    grad_x, grad_w, grad_b = _conv_backward(cols, xb.shape, layer, gb)
    return (grad_x[0] if single else grad_x), grad_w, grad_b


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ConvLSTMCell:
    conv: Conv2dLayer  # (C_x + C_h) -> 4 * C_h, gate blocks in GATE_ORDER
    c_x: int
    c_h: int

    @classmethod
    def init(cls, c_x: int, c_h: int, rng: np.random.Generator, kernel: int = 3,
             forget_bias: float = 1.0) -> ConvLSTMCell:
        conv = Conv2dLayer.init(c_x + c_h, 4 * c_h, kernel, rng)
        conv.bias[c_h:2 * c_h] = forget_bias
        return cls(conv, c_x, c_h)


@dataclass
class StepCache:
    x_shape: tuple
    cols: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def _lstm_step(x, h, c, cell: ConvLSTMCell):
    if x.shape[1] != cell.c_x or h.shape[1] != cell.c_h or c.shape != h.shape:
        raise ValueError(f"state/input shapes {x.shape}, {h.shape}, {c.shape} inconsistent with cell "
                         f"(C_x={cell.c_x}, C_h={cell.c_h})")
    if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ValueError(f"input {x.shape} and state {h.shape} disagree on batch or grid size")
    xh = np.concatenate([x, h], axis=1)
    z, cols = _conv_forward(xh, cell.conv)
    ch = cell.c_h
    i = sigmoid(z[:, :ch])
    f = sigmoid(z[:, ch:2 * ch])
    g = np.tanh(z[:, 2 * ch:3 * ch])
    o = sigmoid(z[:, 3 * ch:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, StepCache(xh.shape, cols, c, i, f, g, o, tanh_c)


def _lstm_step_backward(cache: StepCache, grad_h, grad_c, cell: ConvLSTMCell):
    """Gradients w.r.t. ``(x, h_prev, c_prev, weight, bias)``."""
    dc = grad_c + grad_h * cache.o * (1.0 - cache.tanh_c ** 2)
    do = grad_h * cache.tanh_c
    di = dc * cache.g
    df = dc * cache.c_prev
    dg = dc * cache.i
    dz = np.concatenate([
        di * cache.i * (1.0 - cache.i),
        df * cache.f * (1.0 - cache.f),
        dg * (1.0 - cache.g ** 2),
        do * cache.o * (1.0 - cache.o),
    ], axis=1)
    dxh, dw, db = _conv_backward(cache.cols, cache.x_shape, cell.conv, dz)
    return dxh[:, :cell.c_x], dxh[:, cell.c_x:], dc * cache.f, dw, db


def convlstm_step(x, h, c, cell: ConvLSTMCell):
    """One ConvLSTM update, returning ``(h_new, c_new)``."""
    xb, single = _as_batch(x)
    hb, _ = _as_batch(h)
    cb, _ = _as_batch(c)
    h_new, c_new, _ = _lstm_step(xb, hb, cb, cell)
    return (h_new[0], c_new[0]) if single else (h_new, c_new)


def convlstm_backward(x, h, c, cell: ConvLSTMCell, grad_h_new, grad_c_new):
    """Reverse pass of :func:`convlstm_step` at the given inputs.

    Returns ``(grad_x, grad_h, grad_c, grad_weight, grad_bias)``. Callers
    unrolling over time add ``grad_weight``/``grad_bias`` across steps and feed
    ``grad_h``/``grad_c`` into the previous step.
    """
    xb, single = _as_batch(x)
    hb, _ = _as_batch(h)
    cb, _ = _as_batch(c)
    gh, _ = _as_batch(grad_h_new)
    gc, _ = _as_batch(grad_c_new)
    _, _, cache = _lstm_step(xb, hb, cb, cell)
    if gh.shape != cache.c_prev.shape or gc.shape != cache.c_prev.shape:
        raise ValueError("upstream gradient shapes do not match the cell state")
    gx, gh_prev, gc_prev, gw, gb = _lstm_step_backward(cache, gh, gc, cell)
    if single:
        gx, gh_prev, gc_prev = gx[0], gh_prev[0], gc_prev[0]
    return gx, gh_prev, gc_prev, gw, gb


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction.

    Raises :class:`NonFiniteGradient` before touching anything if any gradient
    entry is NaN or infinite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def gradient_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic ``grads`` and central differences.

    ``loss_fn()`` must evaluate the scalar loss at the current contents of
    ``params``; entries are perturbed in place and restored.
    """
    worst = 0.0
    for name, theta in params.items():
        analytic = grads[name]
        flat = theta.reshape(-1)
        aflat = analytic.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_fn()
            flat[j] = orig - eps
            fm = loss_fn()
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{j}]")
            numeric = (fp - fm) / (2.0 * eps)
            a = float(aflat[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def save_checkpoint(path, params: dict[str, np.ndarray], c_x: int, c_h: int) -> None:
    lines = [f"DCNN1 {c_x} {c_h}"]
    for name, arr in params.items():
        flat = np.asarray(arr, dtype=np.float64).reshape(-1)
        lines.append(f"param {name} {flat.size}")
        lines.append(" ".join("%.17g" % v for v in flat))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[int, int, dict[str, np.ndarray]]:
    """Return ``(c_x, c_h, params)`` with params as flat arrays in file order."""
    toks = Path(path).read_text().split()
    if len(toks) < 3 or toks[0] != "DCNN1":
        raise CheckpointError(f"{path}: not a DCNN1 checkpoint")
    try:
        c_x, c_h = int(toks[1]), int(toks[2])
        params = {}
        pos = 3
        while pos < len(toks):
            if toks[pos] != "param":
                raise CheckpointError(f"{path}: expected 'param', found {toks[pos]!r}")
            name, n = toks[pos + 1], int(toks[pos + 2])
            vals = toks[pos + 3:pos + 3 + n]
            if len(vals) != n:
                raise CheckpointError(f"{path}: parameter {name} truncated")
            params[name] = np.array([float(v) for v in vals])
            pos += 3 + n
    except (IndexError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return c_x, c_h, params
