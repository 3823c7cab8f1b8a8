"""The detection network: a three-layer stride-2 conv trunk with two stride-8
tile-deconvolution heads (objectness, 2 channels; corner offsets, 24 channels).

Objectness uses a softmax over *negated* logits,
``p(l) = exp(-o_l) / sum_m exp(-o_m)``, so a larger logit means a less
likely label.  The box loss is squared L2 on the 24 corner offsets, summed
over positive cells and weighted by ``w``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import CheckpointError, DimensionError, TrainingDivergedError
from .tensor_nn import (
    ConvLayer,
    DeconvLayer,
    conv3d_backward,
    conv3d_forward,
    deconv3d_backward,
    deconv3d_forward,
    relu_backward,
    relu_forward,
    sgd_step,
)
from .voxel import IGNORE, POSITIVE, TargetVolume, VoxelGrid

log = logging.getLogger(__name__)

LAYER_NAMES = ("conv1", "conv2", "conv3", "deconv4a", "deconv4b")
OBJ_CHANNELS = 2
BOX_CHANNELS = 24
MIN_NEGATIVES = 256


@dataclass(frozen=True)
class ArchConfig:
    """Channel widths and kernel extents.  Conv strides are fixed at 2 and
    deconv strides at 8; conv padding is (k - 1) // 2."""

    in_channels: int = 1
    channels: tuple[int, int, int] = (16, 32, 64)
    kernels: tuple[int, int, int] = (5, 5, 3)
    upsample: int = 8

    def __post_init__(self):
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError(f"conv kernels must be odd, got {self.kernels}")
        if self.upsample != 8:
            raise ValueError("three stride-2 convs require an 8x upsample")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter array shapes in checkpoint order."""
        out = {}
        prev = self.in_channels
        for n, (ch, k) in enumerate(zip(self.channels, self.kernels), start=1):
            out[f"conv{n}.kernel"] = (ch, prev, k, k, k)
            out[f"conv{n}.bias"] = (ch,)
            prev = ch
        s = self.upsample
        out["deconv4a.kernel"] = (prev, OBJ_CHANNELS, s, s, s)
        out["deconv4a.bias"] = (OBJ_CHANNELS,)
        out["deconv4b.kernel"] = (prev, BOX_CHANNELS, s, s, s)
        out["deconv4b.bias"] = (BOX_CHANNELS,)
        return out


class NetworkParams:
    """Named parameter arrays plus layer views over them.

    The arrays in ``arrays`` are updated in place by the optimizer; the layer
    objects share their memory.
    """

    def __init__(self, arrays: dict[str, np.ndarray], arch: ArchConfig = ArchConfig()):
        expect = arch.shapes()
        if list(arrays) != list(expect):
            raise ValueError(f"parameter names {list(arrays)} != {list(expect)}")
        for name, shape in expect.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {shape}")
        self.arch = arch
        self.arrays = arrays

    def layer(self, name: str):
        k, b = self.arrays[f"{name}.kernel"], self.arrays[f"{name}.bias"]
        if name.startswith("deconv"):
            return DeconvLayer(k, b, stride=self.arch.upsample)
        return ConvLayer(k, b, stride=2, padding=(k.shape[2] - 1) // 2)

    @property
    def conv1(self) -> ConvLayer:
        return self.layer("conv1")

    @property
    def conv2(self) -> ConvLayer:
        return self.layer("conv2")

    @property
    def conv3(self) -> ConvLayer:
        return self.layer("conv3")

    @property
    def deconv4a(self) -> DeconvLayer:
        return self.layer("deconv4a")

    @property
    def deconv4b(self) -> DeconvLayer:
        return self.layer("deconv4b")

    def copy(self, dtype=None) -> "NetworkParams":
        return NetworkParams(
            {n: a.astype(dtype or a.dtype, copy=True) for n, a in self.arrays.items()}, self.arch
        )

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.arrays.items())

    def equals(self, other: "NetworkParams") -> bool:
        return self.arch == other.arch and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.arrays.values(), other.arrays.values())
        )


@dataclass
class OutputMaps:
    objectness: np.ndarray  # (2, L, W, H); channel index is the label
    boxmap: np.ndarray  # (24, L, W, H), meters


@dataclass
class ForwardCache:
    input: np.ndarray
    pre: list[np.ndarray]  # pre-activations of conv1..3
    post: list[np.ndarray]  # post-ReLU activations of conv1..3


@dataclass
class TrainConfig:
    w: float = 0.1
    lr: float = 0.003
    momentum: float = 0.9
    epochs: int = 45
    neg_pos_ratio: float = 8.0
    seed: int = 0
    lr_decay: float = 0.95  # per-epoch multiplicative factor
    clip_norm: float = 50.0  # global gradient-norm cap; 0 disables
    augment_shift: int = 4  # max random x/y shift in cells per step; 0 disables
    augment_mirror: bool = True  # random mirror across the grid's y-center plane

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("w must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.augment_shift < 0:
            raise ValueError("augment_shift must be >= 0")


@dataclass
class LossParts:
    objectness: float
    box: float
    total: float


@dataclass
class EpochStats:
    epoch: int
    objectness: float
    box: float
    total: float


def init_params(seed: int = 0, arch: ArchConfig = ArchConfig()) -> NetworkParams:
    """Uniform Glorot kernels in +-sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in arch.shapes().items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
            continue
        k3 = int(np.prod(shape[2:]))
        if name.startswith("deconv"):
            fan_in, fan_out = shape[0] * k3, shape[1] * k3
        else:
            fan_in, fan_out = shape[1] * k3, shape[0] * k3
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return NetworkParams(arrays, arch)


def forward(grid, params: NetworkParams, relu_masks=None) -> tuple[OutputMaps, ForwardCache]:
    """Run the network.  ``grid`` is a VoxelGrid or a (C, L, W, H) array.

    ``relu_masks`` (one bool array per conv layer) replaces each ReLU by a
    fixed gate; gradient checks use it to step across kinks smoothly.
    """
    x = grid.as_input() if isinstance(grid, VoxelGrid) else np.asarray(grid)
    if x.ndim != 4:
        raise DimensionError(f"expected (C, L, W, H) input, got {x.shape}")
    for axis, d in zip("LWH", x.shape[1:]):
        if d % 8:
            raise DimensionError(f"axis {axis}: extent {d} is not divisible by 8")
    pre, post = [], []
    h = x
    for n, name in enumerate(("conv1", "conv2", "conv3")):
        z = conv3d_forward(h, params.layer(name))
        h = relu_forward(z) if relu_masks is None else z * relu_masks[n]
        pre.append(z)
        post.append(h)
    maps = OutputMaps(
        deconv3d_forward(h, params.deconv4a),
        deconv3d_forward(h, params.deconv4b),
    )
    return maps, ForwardCache(x, pre, post)


def backward(cache: ForwardCache, params: NetworkParams, grad_obj, grad_box) -> dict[str, np.ndarray]:
    """Parameter gradients for head gradients ``grad_obj`` and ``grad_box``."""
    top = cache.post[-1]
    spatial = tuple(d * params.arch.upsample for d in top.shape[1:])
    if grad_obj.shape[1:] != spatial or grad_box.shape[1:] != spatial:
        raise DimensionError(
            f"head gradients {grad_obj.shape}/{grad_box.shape} do not match cached activation "
            f"{top.shape} (stale cache?)"
        )
    grads = {}
    ga, grads["deconv4a.kernel"], grads["deconv4a.bias"] = deconv3d_backward(top, params.deconv4a, grad_obj)
    gb, grads["deconv4b.kernel"], grads["deconv4b.bias"] = deconv3d_backward(top, params.deconv4b, grad_box)
    g = ga + gb
    inputs = [cache.input] + cache.post[:-1]
    for n in (2, 1, 0):
        name = f"conv{n + 1}"
        g = relu_backward(cache.pre[n], g)
        gi, grads[f"{name}.kernel"], grads[f"{name}.bias"] = conv3d_backward(
            inputs[n], params.layer(name), g, need_input_grad=n > 0
        )
        g = gi
    return {name: grads[name] for name in params.arrays}


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def foreground_probability(o_a: np.ndarray) -> np.ndarray:
    """p(label 1) under the negated-logit softmax, per cell."""
    diff = o_a[1].astype(np.float64) - o_a[0].astype(np.float64)
    return 0.5 * (1.0 - np.tanh(0.5 * diff))


def objectness_loss(o_a: np.ndarray, targets: TargetVolume, cells: np.ndarray | None = None):
    """Sum over cells of -log p(label), with p the negated-logit softmax.

    ``cells`` (bool, L x W x H) restricts the sum; it defaults to every
    non-ignore cell, and ignore cells are always excluded.
    Returns ``(loss, grad)`` with ``grad`` shaped like ``o_a``.
    """
    labels = targets.labels
    if o_a.shape != (OBJ_CHANNELS, *labels.shape):
        raise DimensionError(f"objectness map {o_a.shape} does not match targets {labels.shape}")
    mask = labels != IGNORE
    if cells is not None:
        mask = mask & cells
    idx = np.nonzero(mask)
    z = -o_a[(slice(None), *idx)].astype(np.float64)  # (2, n)
    zmax = z.max(axis=0)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    lab = (labels[idx] == POSITIVE).astype(np.int64)
    n = np.arange(z.shape[1])
    loss = float(np.sum(lse - z[lab, n]))
    # d/do_j [lse(-o) + o_l] = [j == l] - softmax(-o)_j
    soft = np.exp(z - lse)
    g = -soft
    g[lab, n] += 1.0
    grad = np.zeros(o_a.shape, dtype=np.float64)
    grad[(slice(None), *idx)] = g
    return loss, grad


def box_loss(o_b: np.ndarray, targets: TargetVolume):
    """Sum over positive cells of the squared L2 offset residual."""
    if o_b.shape != (BOX_CHANNELS, *targets.labels.shape):
        raise DimensionError(f"box map {o_b.shape} does not match targets {targets.labels.shape}")
    i, j, k = targets.positive_cells.T
    resid = o_b[:, i, j, k].astype(np.float64) - targets.positive_offsets.T.astype(np.float64)
    grad = np.zeros(o_b.shape, dtype=np.float64)
    grad[:, i, j, k] = 2.0 * resid
    return float(np.sum(resid * resid)), grad


def total_loss(maps: OutputMaps, targets: TargetVolume, w: float, cells: np.ndarray | None = None):
    """Objectness loss plus ``w`` times box loss.

    Returns ``(LossParts, grad_objectness, grad_box)``.
    """
    lo, go = objectness_loss(maps.objectness, targets, cells)
    lb, gb = box_loss(maps.boxmap, targets)
    return LossParts(lo, lb, lo + w * lb), go, w * gb


def sample_objectness_cells(targets: TargetVolume, neg_pos_ratio: float, rng: np.random.Generator):
    """All positive cells plus a random subset of negatives.

    The subset has ``max(neg_pos_ratio * n_positive, 256)`` cells, or every
    negative when fewer exist.
    """
    flat = targets.labels.ravel()
    neg = np.flatnonzero(flat == 0)
    n_keep = max(int(round(neg_pos_ratio * targets.n_positive)), MIN_NEGATIVES)
    mask = flat == POSITIVE
    if n_keep >= len(neg):
        mask = mask | (flat == 0)
    else:
        mask = mask.copy()
        mask[rng.choice(neg, size=n_keep, replace=False)] = True
    return mask.reshape(targets.labels.shape)



# corner index with the width bit flipped: the image of each corner under a y mirror
_MIRROR_CORNERS = np.array([k ^ 2 for k in range(8)])


def _shift_axis(arr, axis, shift, fill):
    """Translate ``arr`` by ``shift`` along ``axis``; vacated cells get ``fill``."""
    out = np.full_like(arr, fill)
    n = arr.shape[axis]
    if abs(shift) >= n:
        return out
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    src[axis] = slice(max(0, -shift), n - max(0, shift))
    dst[axis] = slice(max(0, shift), n - max(0, -shift))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def augment_scene(grid: np.ndarray, targets: TargetVolume, shift=(0, 0), mirror=False):
    """Rigidly move a training scene by whole cells, optionally mirrored in y.

    ``grid`` is the (C, L, W, H) input.  Both transforms map cells onto
    cells, so the returned targets are exactly the targets of the moved
    scene (up to objects pushed across the grid edge).
    """
    labels = targets.labels
    cells = targets.positive_cells.copy()
    offsets = targets.positive_offsets
    if mirror:
        grid = grid[:, :, ::-1]
        labels = labels[:, ::-1]
        cells[:, 1] = labels.shape[1] - 1 - cells[:, 1]
        offsets = offsets.reshape(-1, 8, 3)[:, _MIRROR_CORNERS] * np.array([1.0, -1.0, 1.0], np.float32)
        offsets = offsets.reshape(-1, 24)
    for axis, d in enumerate(shift):
        if d:
            grid = _shift_axis(grid, axis + 1, d, 0)
            labels = _shift_axis(labels, axis, d, 0)
            cells[:, axis] += d
    keep = np.all((cells >= 0) & (cells < np.asarray(labels.shape)), axis=1)
    obj = targets.positive_object
    return np.ascontiguousarray(grid), TargetVolume(
        np.ascontiguousarray(labels), cells[keep], np.ascontiguousarray(offsets[keep]),
        None if obj is None else obj[keep],
    )


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def train_step(params, velocity, grid, targets, cfg: TrainConfig, rng, lr=None):
    if cfg.augment_shift or cfg.augment_mirror:
        x = grid.as_input() if isinstance(grid, VoxelGrid) else np.asarray(grid)
        shift = tuple(int(v) for v in rng.integers(-cfg.augment_shift, cfg.augment_shift + 1, 2))
        mirror = bool(cfg.augment_mirror and rng.random() < 0.5)
        grid, targets = augment_scene(x, targets, shift, mirror)
    cells = sample_objectness_cells(targets, cfg.neg_pos_ratio, rng)
    maps, cache = forward(grid, params)
    parts, go, gb = total_loss(maps, targets, cfg.w, cells)
    if not np.isfinite(parts.total):
        raise TrainingDivergedError(
            f"non-finite loss (objectness={parts.objectness}, box={parts.box})"
        )
    grads = backward(cache, params, go, gb)
    if cfg.clip_norm > 0:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.clip_norm:
            grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
    sgd_step(params.arrays, grads, velocity, cfg.lr if lr is None else lr, cfg.momentum)
    return parts


def train(
    scenes: Sequence[tuple[VoxelGrid, TargetVolume]],
    cfg: TrainConfig,
    arch: ArchConfig = ArchConfig(),
    params: NetworkParams | None = None,
    on_step: Callable[[int, int, LossParts], None] | None = None,
) -> tuple[NetworkParams, list[EpochStats]]:
    """Momentum SGD, one scene per step, scenes reshuffled every epoch.

    Deterministic for a fixed ``cfg.seed``.  Returns the trained parameters
    and per-epoch mean losses.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    params = params if params is not None else init_params(cfg.seed, arch)
    rng = np.random.default_rng(cfg.seed + 1)
    velocity: dict[str, np.ndarray] = {}
    history = []
    lr = cfg.lr
    step = 0
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for n in rng.permutation(len(scenes)):
            grid, targets = scenes[n]
            parts = train_step(params, velocity, grid, targets, cfg, rng, lr)
            sums += (parts.objectness, parts.box, parts.total)
            if on_step is not None:
                on_step(epoch, step, parts)
            step += 1
        mean = sums / len(scenes)
        history.append(EpochStats(epoch, *mean))
        log.info("epoch %d: objectness %.4f box %.4f total %.4f", epoch, *mean)
        lr *= cfg.lr_decay
    return params, history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"V3DFCN\0"
VERSION = 1


def _header(arch: ArchConfig) -> bytes:
    parts = ["x".join(str(d) for d in shape) for shape in arch.shapes().values()]
    return (",".join(parts) + "\n").encode("ascii")


def _arch_from_header(line: str) -> ArchConfig:
    shapes = [tuple(int(d) for d in p.split("x")) for p in line.strip().split(",")]
    if len(shapes) != 10:
        raise CheckpointError(f"header lists {len(shapes)} arrays, expected 10")
    c1, c2, c3, da = shapes[0], shapes[2], shapes[4], shapes[6]
    arch = ArchConfig(
        in_channels=c1[1],
        channels=(c1[0], c2[0], c3[0]),
        kernels=(c1[2], c2[2], c3[2]),
        upsample=da[2],
    )
    if list(arch.shapes().values()) != shapes:
        raise CheckpointError("header shapes are not a valid architecture")
    return arch


def save_checkpoint(params: NetworkParams, path) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += _header(params.arch)
    for arr in params.arrays.values():
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError(f"{path}: truncated before version")
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos += 4
    end = raw.find(b"\n", pos)
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        arch = _arch_from_header(raw[pos:end].decode("ascii"))
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    pos = end + 1
    arrays = {}
    for name, shape in arch.shapes().items():
        nbytes = 4 * int(np.prod(shape))
        if len(raw) < pos + nbytes:
            raise CheckpointError(f"{path}: truncated inside {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return NetworkParams(arrays, arch)
