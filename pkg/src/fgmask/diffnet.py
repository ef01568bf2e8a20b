"""Small dense-tensor CNN engine with hand-written reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. All arithmetic
runs in float64; checkpoints store parameters as little-endian float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"MBNET1\n"


# --------------------------------------------------------------------------
# Layer descriptors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    kh: int
    kw: int
    in_ch: int
    out_ch: int
    stride: int = 1
    pad: int = 0

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise ValueError(f"expects input (C={self.in_ch}, H, W), got {tuple(shape)}")
        _, h, w = shape
        ho = (h + 2 * self.pad - self.kh) // self.stride + 1
        wo = (w + 2 * self.pad - self.kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"kernel {self.kh}x{self.kw} does not fit input {tuple(shape)}")
        return (self.out_ch, ho, wo)

    def param_shapes(self):
        return [(self.out_ch, self.in_ch, self.kh, self.kw), (self.out_ch,)]

    def fans(self):
        k = self.kh * self.kw
        return self.in_ch * k, self.out_ch * k

    def header(self):
        return f"conv {self.kh} {self.kw} {self.in_ch} {self.out_ch} {self.stride} {self.pad}"


@dataclass(frozen=True)
class ReLU:
    def out_shape(self, shape):
        return tuple(shape)

    def param_shapes(self):
        return []

    def header(self):
        return "relu"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ValueError(f"expects input (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"window {self.window} does not fit input {tuple(shape)}")
        return (c, ho, wo)

    def param_shapes(self):
        return []

    def header(self):
        return f"maxpool {self.window} {self.stride}"


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    def out_shape(self, shape):
        if int(np.prod(shape)) != self.n_in:
            raise ValueError(f"expects {self.n_in} input features, got shape {tuple(shape)}")
        return (self.n_out,)

    def param_shapes(self):
        return [(self.n_out, self.n_in), (self.n_out,)]

    def fans(self):
        return self.n_in, self.n_out

    def header(self):
        return f"dense {self.n_in} {self.n_out}"


Layer = Union[Conv2D, ReLU, MaxPool, Dense]


def _layer_name(i, layer):
    return f"layer {i} ({type(layer).__name__})"


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class Model:
    """An ordered stack of layers plus their parameter arrays.

    ``params[i]`` is a tuple of arrays for layer ``i`` (weights, bias) or an
    empty tuple for parameter-free layers. Callers treat a Model as
    immutable; training returns new instances.
    """

    def __init__(self, layers: Sequence[Layer], input_shape, params=None):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.out_shape(shapes[-1]))
            except ValueError as exc:
                raise ValueError(f"{_layer_name(i, layer)}: {exc}") from None
        self.shapes = shapes
        if params is None:
            params = [tuple(np.zeros(s, DTYPE) for s in layer.param_shapes()) for layer in self.layers]
        if len(params) != len(self.layers):
            raise ValueError("one parameter tuple per layer is required")
        checked = []
        for i, (layer, p) in enumerate(zip(self.layers, params)):
            want = layer.param_shapes()
            if len(p) != len(want) or any(a.shape != s for a, s in zip(p, want)):
                raise ValueError(f"{_layer_name(i, layer)}: parameter shapes do not match {want}")
            arrs = tuple(np.asarray(a, DTYPE) for a in p)
            if not all(np.isfinite(a).all() for a in arrs):
                raise ValueError(f"{_layer_name(i, layer)}: non-finite parameters")
            checked.append(arrs)
        self.params = checked

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def n_classes(self):
        if len(self.output_shape) != 1:
            raise ValueError(f"model output {self.output_shape} is not a logits vector")
        return self.output_shape[0]

    def flat_params(self):
        return [a for p in self.params for a in p]

    def n_params(self):
        return sum(a.size for a in self.flat_params())

    def with_params(self, params):
        return Model(self.layers, self.input_shape, params)

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (self.layers == other.layers and self.input_shape == other.input_shape
                and all(np.array_equal(a, b) for a, b in zip(self.flat_params(), other.flat_params())))

    def __repr__(self):
        return f"Model(input={self.input_shape}, layers={len(self.layers)}, params={self.n_params()})"


def init_model(layers: Sequence[Layer], input_shape, seed: int = 0) -> Model:
    """Glorot-uniform weights, zero biases, drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in layers:
        shapes = layer.param_shapes()
        if not shapes:
            params.append(())
            continue
        fan_in, fan_out = layer.fans()
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=shapes[0])
        params.append((w, np.zeros(shapes[1], DTYPE)))
    return Model(layers, input_shape, params)


def small_vgg(input_shape=(3, 32, 32), n_classes: int = 10, seed: int = 0,
              widths=(16, 16, 32), hidden: int = 64) -> Model:
    """conv-relu-conv-relu-pool-conv-relu-pool-dense-relu-dense, 3x3 'same' convs."""
    c, h, w = input_shape
    w1, w2, w3 = widths
    head = [Conv2D(3, 3, c, w1, 1, 1), ReLU(), Conv2D(3, 3, w1, w2, 1, 1), ReLU(), MaxPool(2, 2),
            Conv2D(3, 3, w2, w3, 1, 1), ReLU(), MaxPool(2, 2)]
    flat = w3 * ((h // 2) // 2) * ((w // 2) // 2)
    layers = head + [Dense(flat, hidden), ReLU(), Dense(hidden, n_classes)]
    return init_model(layers, input_shape, seed)


# --------------------------------------------------------------------------
# Layer kernels
# --------------------------------------------------------------------------

# Inside the engine spatial activations are channel-major (C, N, H, W), which
# keeps patch gathering and col2im as contiguous slice copies.

def _window(i, s, n):
    return slice(i, i + s * (n - 1) + 1, s)


def _conv_cols(x, layer):
    """im2col: (C, N, H, W) -> (C*kh*kw, N*Ho*Wo)."""
    c, n, h, w = x.shape
    p, s = layer.pad, layer.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    _, ho, wo = layer.out_shape((c, h, w))
    cols = np.empty((c, layer.kh, layer.kw, n, ho, wo), DTYPE)
    for i in range(layer.kh):
        for j in range(layer.kw):
            cols[:, i, j] = x[:, :, _window(i, s, ho), _window(j, s, wo)]
    return cols.reshape(c * layer.kh * layer.kw, n * ho * wo), (n, ho, wo)


def _conv_forward(x, layer, params):
    w, b = params
    cols, (n, ho, wo) = _conv_cols(x, layer)
    out = w.reshape(layer.out_ch, -1) @ cols
    out += b[:, None]
    return out.reshape(layer.out_ch, n, ho, wo), cols


def _conv_backward(dout, x_shape, layer, params, cols, want_params, want_input):
    w, _ = params
    f, n, ho, wo = dout.shape
    d2 = dout.reshape(f, -1)
    grads = None
    if want_params:
        grads = ((d2 @ cols.T).reshape(w.shape), d2.sum(axis=1))
    dx = None
    if want_input:
        dcols = (w.reshape(f, -1).T @ d2).reshape(layer.in_ch, layer.kh, layer.kw, n, ho, wo)
        c, _, h, wd = x_shape
        p, s = layer.pad, layer.stride
        dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), DTYPE)
        for i in range(layer.kh):
            for j in range(layer.kw):
                dxp[:, :, _window(i, s, ho), _window(j, s, wo)] += dcols[:, i, j]
        dx = dxp[:, :, p:p + h, p:p + wd]
    return dx, grads


def _pool_forward(x, layer):
    c, n, h, w = x.shape
    _, ho, wo = layer.out_shape((c, h, w))
    k, s = layer.window, layer.stride
    win = np.empty((k * k, c, n, ho, wo), DTYPE)
    for i in range(k):
        for j in range(k):
            win[i * k + j] = x[:, :, _window(i, s, ho), _window(j, s, wo)]
    # argmax returns the first maximum, i.e. row-major order inside the window
    arg = win.argmax(axis=0)
    out = np.take_along_axis(win, arg[None], axis=0)[0]
    return out, arg


def _pool_backward(dout, x_shape, layer, arg):
    _, _, ho, wo = dout.shape
    k, s = layer.window, layer.stride
    dx = np.zeros(x_shape, DTYPE)
    for i in range(k):
        for j in range(k):
            sel = np.where(arg == i * k + j, dout, 0.0)
            dx[:, :, _window(i, s, ho), _window(j, s, wo)] += sel
    return dx


def _check_batch(model, batch):
    x = np.asarray(batch, DTYPE)
    if x.shape[1:] != model.input_shape:
        name = _layer_name(0, model.layers[0]) if model.layers else "model input"
        raise ValueError(f"{name}: batch sample shape {x.shape[1:]} != model input shape {model.input_shape}")
    if not np.isfinite(x).all():
        raise ValueError("batch contains non-finite values")
    return x


def _to_engine(x):
    return x.transpose(1, 0, 2, 3) if x.ndim == 4 else x


def _from_engine(x):
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)) if x.ndim == 4 else x


def _run_forward(model, x, keep):
    x = _to_engine(x)
    caches = []
    for layer, params in zip(model.layers, model.params):
        if isinstance(layer, Conv2D):
            y, cols = _conv_forward(x, layer, params)
            cache = (x.shape, cols)
        elif isinstance(layer, ReLU):
            y = np.maximum(x, 0.0)
            cache = x > 0
        elif isinstance(layer, MaxPool):
            y, arg = _pool_forward(x, layer)
            cache = (x.shape, arg)
        else:
            xf = _from_engine(x)
            xf = xf.reshape(xf.shape[0], -1)
            y = xf @ params[0].T + params[1]
            cache = (x.ndim, xf)
        if keep:
            caches.append(cache)
        x = y
    return _from_engine(x), caches


def forward(model: Model, batch) -> np.ndarray:
    """Run ``batch`` (N, *input_shape) through the model and return the final activations."""
    x = _check_batch(model, batch)
    out, _ = _run_forward(model, x, keep=False)
    if not np.isfinite(out).all():
        raise FloatingPointError("forward produced non-finite outputs")
    return out


def predict(model: Model, batch, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(batch, DTYPE)
    parts = [forward(model, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts) if parts else np.zeros(0, int)


# --------------------------------------------------------------------------
# Loss and backprop
# --------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Per-sample softmax cross-entropy, computed with a shifted log-sum-exp."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    losses = logsum - z[np.arange(len(labels)), labels]
    return losses


@dataclass
class Gradients:
    """Per-layer parameter gradients mirroring ``Model.params``; optional input gradient."""

    params: list
    input: Optional[np.ndarray] = None

    def flat(self):
        return [a for p in self.params for a in p]


class Backprop(NamedTuple):
    losses: np.ndarray
    logits: np.ndarray
    grads: Gradients


def check_labels(model, labels, n):
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be {n} integers, got shape {y.shape} dtype {y.dtype}")
    k = model.n_classes
    if n and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def backprop(model: Model, batch, labels, want_params: bool = True,
             want_input: bool = False) -> Backprop:
    """Softmax cross-entropy forward pass plus the requested gradients of the mean loss."""
    x = _check_batch(model, batch)
    y = check_labels(model, labels, len(x))
    logits, caches = _run_forward(model, x, keep=True)
    if not np.isfinite(logits).all():
        raise FloatingPointError("forward produced non-finite logits")
    n = len(x)
    losses = cross_entropy(logits, y)
    d = softmax(logits)
    d[np.arange(n), y] -= 1.0
    d /= n

    pgrads = [()] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer, params, cache = model.layers[i], model.params[i], caches[i]
        need_dx = want_input or i > 0
        if isinstance(layer, Conv2D):
            d, g = _conv_backward(d, cache[0], layer, params, cache[1], want_params, need_dx)
            if want_params:
                pgrads[i] = g
        elif isinstance(layer, ReLU):
            d = d * cache
        elif isinstance(layer, MaxPool):
            d = _pool_backward(d, cache[0], layer, cache[1])
        else:
            ndim, xf = cache
            if want_params:
                pgrads[i] = (d.T @ xf, d.sum(axis=0))
            if need_dx:
                d = d @ params[0]
                if ndim == 4:
                    d = _to_engine(d.reshape((len(d),) + model.shapes[i]))
                elif ndim > 2:
                    d = d.reshape((len(d),) + model.shapes[i])
            else:
                d = None
        if d is None:
            break
    grads = Gradients(pgrads if want_params else [], _from_engine(d) if want_input else None)
    return Backprop(losses, logits, grads)


def loss_and_grads(model: Model, batch, labels, want_input_grad: bool = False):
    """Mean softmax cross-entropy and gradients for every parameter (and the input if asked)."""
    bp = backprop(model, batch, labels, want_params=True, want_input=want_input_grad)
    return float(bp.losses.mean()), bp.grads


def input_gradient(model: Model, batch, labels):
    """Per-sample losses and d(mean loss)/d(batch), skipping parameter gradients."""
    bp = backprop(model, batch, labels, want_params=False, want_input=True)
    return bp.losses, bp.grads.input, bp.logits


# --------------------------------------------------------------------------
# Finite-difference check
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: str = ""


def rel_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(model: Model, batch, labels, h: float = 1e-4, tol: float = 1e-3,
               max_coords: int = 1000, seed: int = 0) -> GradCheckReport:
    """Compare backprop against central differences on parameters and inputs.

    Above ``max_coords`` total coordinates a seeded random subsample is checked.
    """
    if h <= 0 or tol < 0:
        raise ValueError("h must be positive and tol non-negative")
    x = _check_batch(model, batch).copy()
    y = check_labels(model, labels, len(x))
    _, grads = loss_and_grads(model, x, y, want_input_grad=True)
    probe = model.with_params([tuple(a.copy() for a in p) for p in model.params])
    targets = [("param", k, a) for k, a in enumerate(probe.flat_params())] + [("input", 0, x)]
    analytic = grads.flat() + [grads.input]
    index = [(t, i) for t, (_, _, a) in enumerate(targets) for i in range(a.size)]
    if len(index) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(index), max_coords, replace=False))
        index = [index[i] for i in pick]

    def loss_at():
        return float(cross_entropy(_run_forward(probe, x, keep=False)[0], y).mean())

    worst, worst_at = 0.0, ""
    for t, i in index:
        kind, k, arr = targets[t]
        flat = arr.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_at()
        flat[i] = orig - h
        down = loss_at()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        err = rel_error(float(analytic[t].reshape(-1)[i]), numeric)
        if err > worst:
            worst, worst_at = err, f"{kind}[{k}] flat index {i}"
    return GradCheckReport(worst, worst <= tol, len(index), worst_at)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class MomentumState:
    velocity: list = field(default_factory=list)


def sgd_step(model: Model, grads: Gradients, lr: float, momentum: float = 0.0,
             state: Optional[MomentumState] = None):
    """Heavy-ball SGD: ``v = momentum * v + g``; ``p = p - lr * v``. Returns (model, state)."""
    if lr < 0 or not 0 <= momentum < 1:
        raise ValueError("need lr >= 0 and 0 <= momentum < 1")
    flat_p = model.flat_params()
    flat_g = grads.flat()
    if len(flat_g) != len(flat_p) or any(g.shape != p.shape for g, p in zip(flat_g, flat_p)):
        raise ValueError("gradient shapes do not mirror the model parameters")
    vel = state.velocity if state is not None and state.velocity else [np.zeros_like(p) for p in flat_p]
    new_v = [momentum * v + g for v, g in zip(vel, flat_g)]
    new_p = [p - lr * v for p, v in zip(flat_p, new_v)] if lr else [p.copy() for p in flat_p]
    it = iter(new_p)
    params = [tuple(next(it) for _ in p) for p in model.params]
    return model.with_params(params), MomentumState(new_v)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def checkpoint_bytes(model: Model) -> bytes:
    """Serialize as MBNET1: magic, header lines, 'end', float32-LE parameters."""
    lines = ["input " + " ".join(str(d) for d in model.input_shape)]
    lines += [layer.header() for layer in model.layers] + ["end"]
    out = CHECKPOINT_MAGIC + ("\n".join(lines) + "\n").encode("utf-8")
    return out + b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in model.flat_params())


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _parse_layer(line):
    kind, *nums = line.split()
    args = [int(v) for v in nums]
    if kind == "conv" and len(args) == 6:
        return Conv2D(*args)
    if kind == "relu" and not args:
        return ReLU()
    if kind == "maxpool" and len(args) == 2:
        return MaxPool(*args)
    if kind == "dense" and len(args) == 2:
        return Dense(*args)
    raise ValueError(f"unknown layer header {line!r}")


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an MBNET1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    input_shape, layers = None, []
    while True:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("utf-8")
        pos = end + 1
        if line == "end":
            break
        if line.startswith("input "):
            input_shape = tuple(int(v) for v in line.split()[1:])
        else:
            layers.append(_parse_layer(line))
    if input_shape is None:
        raise ValueError(f"{path}: missing input header")
    shapes = [s for layer in layers for s in layer.param_shapes()]
    need = sum(math.prod(s) for s in shapes) * 4
    if len(data) - pos != need:
        raise ValueError(f"{path}: expected {need} parameter bytes, found {len(data) - pos}")
    flat = np.frombuffer(data, dtype="<f4", offset=pos).astype(DTYPE)
    arrays, off = [], 0
    for s in shapes:
        size = math.prod(s)
        arrays.append(flat[off:off + size].reshape(s))
        off += size
    it = iter(arrays)
    params = [tuple(next(it) for _ in layer.param_shapes()) for layer in layers]
    return Model(layers, input_shape, params)

