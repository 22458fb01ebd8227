"""Central-difference verification of every layer's backward pass.

Checks run in double precision with step 1e-4.  Relative error is
|ga - gn| / max(|ga|, |gn|, 1e-8).  Coordinates whose perturbation flips a
ReLU sign or a pooling argmax between the two one-sided evaluations are
excluded (the function is not differentiable there) and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import conv3d_backward, conv3d_forward
from . import layers
from .loss import bce_loss
from .unet import UNet, UNetConfig

FD_STEP = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    n_excluded: int

    def __str__(self):
        return (f"{self.name}: max rel err {self.max_rel_err:.3e} "
                f"({self.n_checked} coords, {self.n_excluded} excluded)")


def _sample_coords(rng, arr, k):
    flat = arr.size
    if flat <= k:
        return np.arange(flat)
    return rng.choice(flat, size=k, replace=False)


def _max_rel_err(ga, gn):
    return float(np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8))


def check_function(name, f, tensors, analytic, rng, coords_per_tensor=20):
    """Compare analytic gradients of scalar-valued ``f`` to central differences.

    ``f()`` evaluates the scalar from the current contents of ``tensors`` and
    returns (value, pattern) where ``pattern`` captures any non-smooth
    branching (ReLU masks, argmax indices) or None.  ``analytic`` maps tensor
    index -> gradient array.
    """
    worst = 0.0
    n_checked = 0
    n_excluded = 0
    for ti, arr in enumerate(tensors):
        ga_full = analytic[ti]
        for flat in _sample_coords(rng, arr, coords_per_tensor):
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + FD_STEP
            f_hi, pat_hi = f()
            arr[idx] = orig - FD_STEP
            f_lo, pat_lo = f()
            arr[idx] = orig
            if pat_hi is not None and not _patterns_equal(pat_hi, pat_lo):
                n_excluded += 1
                continue
            gn = (f_hi - f_lo) / (2 * FD_STEP)
            worst = max(worst, _max_rel_err(ga_full[idx], gn))
            n_checked += 1
    return GradCheckResult(name, worst, n_checked, n_excluded)


def _patterns_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _rand(rng, shape):
    return rng.standard_normal(shape).astype(np.float64)


def check_all_layers(seed: int = 0) -> list[GradCheckResult]:
    """Gradient-check each layer type in isolation; returns one result each."""
    rng = np.random.default_rng(seed)
    results = []

    # conv 3x3x3 (linear): check input, kernel, bias
    x = _rand(rng, (1, 2, 5, 4, 6))
    k = _rand(rng, (3, 2, 3, 3, 3))
    b = _rand(rng, (3,))
    w = _rand(rng, (1, 3, 5, 4, 6))

    def f_conv():
        return float((conv3d_forward(x, k, b) * w).sum()), None

    gx, gk, gb = conv3d_backward(x, k, w)
    results.append(check_function("conv3d", f_conv, [x, k, b], [gx, gk, gb], rng))

    # conv 1x1x1 (linear)
    k1 = _rand(rng, (2, 2, 1, 1, 1))
    b1 = _rand(rng, (2,))
    w1 = _rand(rng, (1, 2, 5, 4, 6))
    x1 = _rand(rng, (1, 2, 5, 4, 6))

    def f_conv1():
        return float((conv3d_forward(x1, k1, b1) * w1).sum()), None

    gx, gk, gb = conv3d_backward(x1, k1, w1)
    results.append(check_function("conv1x1x1", f_conv1, [x1, k1, b1], [gx, gk, gb], rng))

    # up-convolution (linear)
    xu = _rand(rng, (1, 3, 3, 2, 4))
    ku = _rand(rng, (3, 2, 2, 2, 2))
    bu = _rand(rng, (2,))
    wu = _rand(rng, (1, 2, 6, 4, 8))

    def f_up():
        return float((layers.upconv2_forward(xu, ku, bu) * wu).sum()), None

    gx, gk, gb = layers.upconv2_backward(xu, ku, wu)
    results.append(check_function("upconv2", f_up, [xu, ku, bu], [gx, gk, gb], rng))

    # max pooling (argmax flips excluded)
    xp = _rand(rng, (1, 2, 4, 6, 4))
    wp = _rand(rng, (1, 2, 2, 3, 2))

    def f_pool():
        y, idx = layers.maxpool2_forward(xp)
        return float((y * wp).sum()), (idx,)

    _, idx = layers.maxpool2_forward(xp)
    gx = layers.maxpool2_backward(idx, wp, xp.shape)
    results.append(check_function("maxpool2", f_pool, [xp], [gx], rng))

    # ReLU (kink coords excluded)
    xr = _rand(rng, (1, 2, 4, 4, 4))
    wr = _rand(rng, (1, 2, 4, 4, 4))

    def f_relu():
        y, mask = layers.relu_forward(xr)
        return float((y * wr).sum()), (mask,)

    _, mask = layers.relu_forward(xr)
    results.append(check_function("relu", f_relu, [xr], [layers.relu_backward(mask, wr)], rng))

    # batch norm, train and eval modes
    for mode in ("train", "eval"):
        xb = _rand(rng, (1, 3, 4, 4, 2))
        scale = _rand(rng, (3,))
        shift = _rand(rng, (3,))
        rm = _rand(rng, (3,)) * 0.1
        rv = np.abs(_rand(rng, (3,))) + 0.5
        wb = _rand(rng, (1, 3, 4, 4, 2))

        def f_bn(xb=xb, scale=scale, shift=shift, rm=rm, rv=rv, wb=wb, mode=mode):
            y, _ = layers.batchnorm_forward(xb, scale, shift, rm, rv, mode,
                                            update_running=False)
            return float((y * wb).sum()), None

        _, cache = layers.batchnorm_forward(xb, scale, shift, rm, rv, mode,
                                            update_running=False)
        gx, gs, gsh = layers.batchnorm_backward(cache, wb)
        results.append(check_function(f"batchnorm[{mode}]", f_bn,
                                      [xb, scale, shift], [gx, gs, gsh], rng))

    # BCE loss wrt logits
    zl = _rand(rng, (1, 1, 4, 4, 4))
    tl = (rng.random((1, 1, 4, 4, 4)) > 0.5).astype(np.float64)

    def f_bce():
        loss, _ = bce_loss(zl, tl)
        return loss, None

    _, dz = bce_loss(zl, tl)
    results.append(check_function("bce_loss", f_bce, [zl], [dz], rng))

    return results


def check_tiny_unet(seed: int = 0, spatial=(16, 16, 8), base_channels: int = 2,
                    coords_per_tensor: int = 6) -> GradCheckResult:
    """Finite-difference check of the composed network's BCE gradient."""
    rng = np.random.default_rng(seed)
    cfg = UNetConfig(base_channels=base_channels)
    net = UNet.initialized(cfg, seed=seed, dtype=np.float64)
    x = rng.standard_normal((1, 1) + tuple(spatial))
    target = (rng.random((1, 1) + tuple(spatial)) > 0.5).astype(np.float64)

    def f():
        tape = []
        logits = net.forward(x, mode="train", tape=tape, update_running=False)
        loss, _ = bce_loss(logits, target)
        pattern = tuple(
            payload if kind == "relu" else payload[0]
            for kind, _, payload in tape
            if kind in ("relu", "pool")
        )
        return loss, pattern

    loss, grads = net.loss_and_grads(x, target, update_running=False)
    names = net.trainable_names()
    tensors = [net.params[n] for n in names]
    analytic = [grads[n] for n in names]
    return check_function("tiny_unet", f, tensors, analytic, rng,
                          coords_per_tensor=coords_per_tensor)


LINEAR_LAYERS = ("conv3d", "conv1x1x1", "upconv2")
