"""Finite-difference checks of every hand-written gradient.

All checks run in float64.  Perturbations that flip the sign of any ReLU
pre-activation are skipped, because the loss is not differentiable across
the kink.
"""

from __future__ import annotations

import numpy as np

from . import fcn3d
from .tensor_nn import (
    ConvLayer,
    DeconvLayer,
    conv3d_backward,
    conv3d_forward,
    deconv3d_backward,
    deconv3d_forward,
    grad_check,
    grad_check_errors,
    relu_backward,
    relu_forward,
)
from .voxel import IGNORE, NEGATIVE, POSITIVE, TargetVolume


def random_targets(dims, rng, n_pos=6, ignore_frac=0.05) -> TargetVolume:
    labels = np.full(dims, NEGATIVE, dtype=np.int8)
    labels[rng.random(dims) < ignore_frac] = IGNORE
    flat = rng.choice(np.prod(dims), size=n_pos, replace=False)
    cells = np.column_stack(np.unravel_index(flat, dims)).astype(np.int64)
    labels[tuple(cells.T)] = POSITIVE
    offsets = rng.uniform(-2.5, 2.5, size=(n_pos, 24)).astype(np.float32)
    return TargetVolume(labels, cells, offsets, np.zeros(n_pos, dtype=np.int64))


def layer_checks(seed=0, step=1e-3, n_coords=64, inject_fault=False) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    fault = 1.01 if inject_fault else 1.0
    out = {}

    x = rng.standard_normal((2, 8, 8, 8))
    layer = ConvLayer(rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3), stride=2, padding=1)
    # scalar probe f = <r, out>, whose gradient w.r.t. out is r
    r = rng.standard_normal((3, 4, 4, 4))

    def conv_wrt(which):
        def fn(v):
            lay = ConvLayer(
                v if which == "kernel" else layer.kernel,
                v if which == "bias" else layer.bias,
                layer.stride, layer.padding,
            )
            inp = v if which == "input" else x
            val = float(np.sum(r * conv3d_forward(inp, lay)))
            gi, gk, gb = conv3d_backward(inp, lay, r)
            return val, {"input": gi, "kernel": gk, "bias": gb}[which] * fault
        return fn

    for which, point in (("input", x), ("kernel", layer.kernel), ("bias", layer.bias)):
        out[f"conv3d.{which}"] = grad_check(conv_wrt(which), point, step, n_coords=n_coords, rng=rng)

    xd = rng.standard_normal((3, 2, 2, 2))
    dl = DeconvLayer(rng.standard_normal((3, 2, 2, 2, 2)), rng.standard_normal(2), stride=2)
    rd = rng.standard_normal((2, 4, 4, 4))

    def deconv_wrt(which):
        def fn(v):
            lay = DeconvLayer(
                v if which == "kernel" else dl.kernel, v if which == "bias" else dl.bias, dl.stride
            )
            inp = v if which == "input" else xd
            val = float(np.sum(rd * deconv3d_forward(inp, lay)))
            gi, gk, gb = deconv3d_backward(inp, lay, rd)
            return val, {"input": gi, "kernel": gk, "bias": gb}[which] * fault
        return fn

    for which, point in (("input", xd), ("kernel", dl.kernel), ("bias", dl.bias)):
        out[f"deconv3d.{which}"] = grad_check(deconv_wrt(which), point, step, n_coords=n_coords, rng=rng)

    xr = rng.standard_normal(200)
    xr = np.where(np.abs(xr) < 1e-2, 0.5, xr)
    rr = rng.standard_normal(200)

    def relu_fn(v):
        return float(np.sum(rr * relu_forward(v))), relu_backward(v, rr) * fault

    out["relu"] = grad_check(relu_fn, xr, step)
    return out


def network_checks(
    seed=0, grid_dims=(16, 16, 16), arch=fcn3d.ArchConfig(), step=1e-3, n_coords=64,
    w=1.0, inject_fault=False, stats=None,
) -> dict[str, float]:
    """Full objectness + box loss against every parameter array.

    Coordinates whose perturbation flips a ReLU gate are re-checked with the
    gates frozen at the base point.  ``stats``, when a dict, receives the
    number of such coordinates per array.
    """
    rng = np.random.default_rng(seed)
    params = fcn3d.init_params(seed, arch).copy(np.float64)
    # non-zero biases so that every bias gradient is exercised
    for name, arr in params:
        if name.endswith(".bias"):
            arr[...] = rng.uniform(-0.05, 0.05, arr.shape)
    grid = (rng.random((1, *grid_dims)) < 0.15).astype(np.float64)
    targets = random_targets(tuple(grid_dims), rng)
    fault = 1.01 if inject_fault else 1.0
    _, base_cache = fcn3d.forward(grid, params)
    base_masks = [z > 0 for z in base_cache.pre]

    def masks(p):
        _, cache = fcn3d.forward(grid, p)
        return [z > 0 for z in cache.pre]

    out = {}
    for name in params.arrays:
        def with_value(v, name=name):
            p = params.copy()
            p.arrays[name][...] = v
            return p

        def make_fn(frozen):
            def fn(v, name=name):
                p = with_value(v)
                maps, cache = fcn3d.forward(grid, p, base_masks if frozen else None)
                parts, go, gb = fcn3d.total_loss(maps, targets, w)
                grads = fcn3d.backward(cache, p, go, gb)
                return parts.total, grads[name] * fault
            return fn

        def crosses_kink(plus, minus):
            return any(
                np.any(a != b) for a, b in zip(masks(with_value(plus)), masks(with_value(minus)))
            )

        point = params.arrays[name]
        size = point.size
        coords = np.arange(size)
        if n_coords < size:
            coords = np.sort(rng.choice(size, size=n_coords, replace=False))
        errors = grad_check_errors(make_fn(False), point, step, coords=coords, skip=crosses_kink)
        kinked = np.isnan(errors)
        if kinked.any():
            errors[kinked] = grad_check_errors(make_fn(True), point, step, coords=coords[kinked])
        if stats is not None:
            stats[name] = int(kinked.sum())
        out[f"network.{name}"] = float(errors.max())
    return out


def run(seed=0, grid_dims=(16, 16, 16), arch=fcn3d.ArchConfig(), step=1e-3, n_coords=64,
        inject_fault=False) -> dict[str, float]:
    """Layer-wise and full-network checks; maps check name to max relative error."""
    results = layer_checks(seed, step, n_coords, inject_fault)
    results.update(network_checks(seed, grid_dims, arch, step, n_coords, inject_fault=inject_fault))
    return results
