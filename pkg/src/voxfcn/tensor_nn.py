"""Dense 3D convolution, tile transposed convolution, ReLU, and SGD.

Tensors are plain numpy arrays laid out channels-first without a batch axis:
``(C, D, H, W)``.  Parameters are stored as float32, and every reduction is
accumulated in float64.  Results come back in the wider of the input and
kernel dtypes, so a float64 network (used by gradient checks) stays float64
end to end.

Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, MutableMapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError

ACC = np.float64

_AXES = ("D", "H", "W")


@dataclass(eq=False)
class ConvLayer:
    kernel: np.ndarray  # (out_ch, in_ch, k, k, k)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 5 or min(self.kernel.shape) <= 0:
            raise ConfigurationError(f"conv kernel must be 5-D with positive extents, got {self.kernel.shape}")
        k = self.kernel.shape[2:]
        if not (k[0] == k[1] == k[2]):
            raise ConfigurationError(f"conv kernel must be cubic, got {k}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ConfigurationError(f"bias shape {self.bias.shape} does not match kernel")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError("stride must be >= 1 and padding >= 0")

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def output_dims(self, dims) -> tuple[int, int, int]:
        """floor((d + 2*pad - k) / stride) + 1 per axis; trailing rows that do not
        fill a whole stride are dropped."""
        out = []
        for axis, d in zip(_AXES, dims):
            span = d + 2 * self.padding - self.k
            if span < 0:
                raise DimensionError(
                    f"axis {axis}: extent {d} incompatible with k={self.k}, "
                    f"stride={self.stride}, padding={self.padding}"
                )
            out.append(span // self.stride + 1)
        return tuple(out)


@dataclass(eq=False)
class DeconvLayer:
    kernel: np.ndarray  # (in_ch, out_ch, k, k, k) with k == stride
    bias: np.ndarray  # (out_ch,)
    stride: int = 2

    def __post_init__(self):
        if self.kernel.ndim != 5 or min(self.kernel.shape) <= 0:
            raise ConfigurationError(f"deconv kernel must be 5-D with positive extents, got {self.kernel.shape}")
        k = self.kernel.shape[2:]
        if not (k[0] == k[1] == k[2] == self.stride):
            raise ConfigurationError(
                f"deconv kernel extent {k} must equal stride {self.stride} on every axis"
            )
        if self.bias.shape != (self.kernel.shape[1],):
            raise ConfigurationError(f"bias shape {self.bias.shape} does not match kernel")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[1]


def _out_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays], np.float32)


def _check_input(x, channels, what):
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected (C, D, H, W) input, got shape {x.shape}")
    if x.shape[0] != channels:
        raise DimensionError(f"{what}: axis C has {x.shape[0]} channels, layer expects {channels}")


def _im2col(x: np.ndarray, layer: ConvLayer, out_dims) -> np.ndarray:
    """Gather receptive fields into a (P, C*k^3) float64 matrix."""
    p, s, k = layer.padding, layer.stride, layer.k
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    win = win[:, : out_dims[0], : out_dims[1], : out_dims[2]]
    cols = np.empty((*out_dims, x.shape[0], k, k, k), dtype=ACC)
    cols[...] = win.transpose(1, 2, 3, 0, 4, 5, 6)
    return cols.reshape(-1, x.shape[0] * k ** 3)


def conv3d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """out[o, p] = bias[o] + sum_{i, d} kernel[o, i, d] * x[i, stride*p + d - pad]."""
    _check_input(x, layer.in_channels, "conv3d")
    out_dims = layer.output_dims(x.shape[1:])
    cols = _im2col(x, layer, out_dims)
    kmat = layer.kernel.reshape(layer.out_channels, -1).astype(ACC)
    out = cols @ kmat.T + layer.bias.astype(ACC)
    return out.T.reshape(layer.out_channels, *out_dims).astype(_out_dtype(x, layer.kernel))


def conv3d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray, need_input_grad=True):
    """Gradients of ``conv3d_forward`` w.r.t. input, kernel and bias.

    ``grad_input`` is None when ``need_input_grad`` is false.
    """
    _check_input(x, layer.in_channels, "conv3d_backward")
    out_dims = layer.output_dims(x.shape[1:])
    if grad_out.shape != (layer.out_channels, *out_dims):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward output {(layer.out_channels, *out_dims)}"
        )
    dtype = _out_dtype(x, layer.kernel)
    g = grad_out.reshape(layer.out_channels, -1).astype(ACC)
    cols = _im2col(x, layer, out_dims)
    grad_kernel = (g @ cols).reshape(layer.kernel.shape)
    grad_bias = g.sum(axis=1)
    grad_input = None
    if need_input_grad:
        kmat = layer.kernel.reshape(layer.out_channels, -1).astype(ACC)
        gcols = (g.T @ kmat).reshape(*out_dims, x.shape[0], layer.k, layer.k, layer.k)
        grad_input = _col2im(gcols, x.shape, layer)
        grad_input = grad_input.astype(dtype)
    return grad_input, grad_kernel.astype(dtype), grad_bias.astype(dtype)


def _col2im(gcols: np.ndarray, in_shape, layer: ConvLayer) -> np.ndarray:
    p, s, k = layer.padding, layer.stride, layer.k
    c = in_shape[0]
    od, oh, ow = gcols.shape[:3]
    padded = np.zeros((c, in_shape[1] + 2 * p, in_shape[2] + 2 * p, in_shape[3] + 2 * p), dtype=ACC)
    # (od, oh, ow, c, k, k, k) -> (k, k, k, c, od, oh, ow)
    g = gcols.transpose(4, 5, 6, 3, 0, 1, 2)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                padded[:, a : a + s * od : s, b : b + s * oh : s, e : e + s * ow : s] += g[a, b, e]
    return padded[:, p : p + in_shape[1], p : p + in_shape[2], p : p + in_shape[3]]


def deconv3d_forward(x: np.ndarray, layer: DeconvLayer) -> np.ndarray:
    """out[o, s*p + d] = bias[o] + sum_i kernel[i, o, d] * x[i, p]  (non-overlapping tiles)."""
    _check_input(x, layer.in_channels, "deconv3d")
    c, d, h, w = x.shape
    s, o = layer.stride, layer.out_channels
    xm = x.reshape(c, -1).astype(ACC)
    kmat = layer.kernel.reshape(c, -1).astype(ACC)
    tiles = (xm.T @ kmat).reshape(d, h, w, o, s, s, s)
    out = tiles.transpose(3, 0, 4, 1, 5, 2, 6).reshape(o, s * d, s * h, s * w)
    out += layer.bias.astype(ACC)[:, None, None, None]
    return out.astype(_out_dtype(x, layer.kernel))


def deconv3d_backward(x: np.ndarray, layer: DeconvLayer, grad_out: np.ndarray, need_input_grad=True):
    """Gradients of ``deconv3d_forward``.

    Coarse cells whose whole output tile has zero gradient are skipped, which
    matters for heads supervised on a handful of cells.
    """
    _check_input(x, layer.in_channels, "deconv3d_backward")
    c, d, h, w = x.shape
    s, o = layer.stride, layer.out_channels
    expect = (o, s * d, s * h, s * w)
    if grad_out.shape != expect:
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {expect}")
    dtype = _out_dtype(x, layer.kernel)

    g = grad_out.astype(ACC).reshape(o, d, s, h, s, w, s).transpose(1, 3, 5, 0, 2, 4, 6)
    g = g.reshape(d * h * w, o * s ** 3)
    grad_bias = grad_out.astype(ACC).reshape(o, -1).sum(axis=1)

    live = np.flatnonzero(np.any(g != 0.0, axis=1))
    xm = x.reshape(c, -1).astype(ACC)
    kmat = layer.kernel.reshape(c, -1).astype(ACC)
    if len(live) < g.shape[0]:
        g_live = g[live]
        grad_kernel = xm[:, live] @ g_live
    else:
        g_live = g
        grad_kernel = xm @ g
    grad_input = None
    if need_input_grad:
        gi = np.zeros((c, d * h * w), dtype=ACC)
        gi[:, live] = kmat @ g_live.T
        grad_input = gi.reshape(c, d, h, w).astype(dtype)
    return grad_input, grad_kernel.reshape(layer.kernel.shape).astype(dtype), grad_bias.astype(dtype)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Subgradient 0 at x == 0."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: MutableMapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
) -> MutableMapping[str, np.ndarray]:
    """In-place momentum SGD: v <- momentum*v - lr*g; p <- p + v.

    Missing velocity entries start at zero.  Returns ``velocity``.
    """
    if lr < 0:
        raise ConfigurationError(f"lr must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = (momentum * v - lr * g).astype(p.dtype)
        velocity[name] = v
        p += v
    return velocity


def grad_check_errors(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    step: float = 1e-3,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    skip: Callable[[np.ndarray, np.ndarray], bool] | None = None,
    floor: float = 1e-6,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """Per-coordinate relative error between analytic and central-difference gradients.

    ``fn(x)`` returns ``(value, grad)``.  When ``n_coords`` is smaller than
    ``x.size`` a random subset of that many coordinates is checked.  ``skip``
    receives the perturbed points and may veto a coordinate (e.g. when the
    perturbation crosses a ReLU kink); vetoed coordinates report NaN.
    ``coords`` gives explicit flat indices and overrides ``n_coords``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    flat = x.ravel()
    if coords is not None:
        coords = np.asarray(coords, dtype=np.int64)
    elif n_coords is not None and n_coords < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=n_coords, replace=False))
    else:
        coords = np.arange(flat.size)
    errors = np.empty(len(coords))
    for n, idx in enumerate(coords):
        plus = flat.copy()
        minus = flat.copy()
        plus[idx] += step
        minus[idx] -= step
        plus, minus = plus.reshape(x.shape), minus.reshape(x.shape)
        if skip is not None and skip(plus, minus):
            errors[n] = np.nan
            continue
        numeric = (fn(plus)[0] - fn(minus)[0]) / (2.0 * step)
        a = analytic[idx]
        errors[n] = abs(a - numeric) / max(abs(a), abs(numeric), floor)
    return errors


def grad_check(fn, x, step: float = 1e-3, **kwargs) -> float:
    """Maximum relative gradient error over the checked coordinates (NaNs skipped)."""
    errors = grad_check_errors(fn, x, step, **kwargs)
    errors = errors[~np.isnan(errors)]
    return float(errors.max()) if errors.size else 0.0
