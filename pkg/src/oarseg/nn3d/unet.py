"""3D U-Net: analysis/synthesis paths with skip connections.

Topology per resolution level on the way down: two 3x3x3 convs, each
followed by batch norm and ReLU, then 2x2x2 max pooling.  On the way up:
2x2x2 stride-2 up-convolution, concatenation with the equal-resolution skip,
then two conv-BN-ReLU pairs.  A final 1x1x1 convolution maps to the output
logits.  Channels double per level down and halve per level up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import layers
from .kernels import check_tensor5, conv3d_backward, conv3d_forward
from .loss import bce_loss


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.levels < 2:
            raise ShapeError("need at least 2 resolution levels")

    @property
    def divisor(self) -> int:
        """Spatial dims of the input must be divisible by this (8 at 4 levels)."""
        return 2 ** (self.levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)


def _param_specs(cfg: UNetConfig):
    """Ordered (name, shape, kind) for every tensor a model owns.

    kind is 'weight' (He-init), 'bias'/'shift'/'mean' (zero-init), or
    'scale'/'var' (one-init).  Running stats are the non-trainable ones.
    """
    specs = []

    def conv_block(prefix, ci, co, ksize=3):
        specs.append((f"{prefix}.kernel", (co, ci, ksize, ksize, ksize), "weight"))
        specs.append((f"{prefix}.bias", (co,), "bias"))

    def bn_block(prefix, c):
        specs.append((f"{prefix}.scale", (c,), "scale"))
        specs.append((f"{prefix}.shift", (c,), "shift"))
        specs.append((f"{prefix}.running_mean", (c,), "mean"))
        specs.append((f"{prefix}.running_var", (c,), "var"))

    prev = cfg.in_channels
    for lv in range(cfg.levels):
        c = cfg.channels(lv)
        conv_block(f"enc{lv}.conv1", prev, c)
        bn_block(f"enc{lv}.bn1", c)
        conv_block(f"enc{lv}.conv2", c, c)
        bn_block(f"enc{lv}.bn2", c)
        prev = c
    for lv in range(cfg.levels - 2, -1, -1):
        c = cfg.channels(lv)
        c_below = cfg.channels(lv + 1)
        specs.append((f"dec{lv}.up.kernel", (c_below, c, 2, 2, 2), "weight"))
        specs.append((f"dec{lv}.up.bias", (c,), "bias"))
        conv_block(f"dec{lv}.conv1", 2 * c, c)
        bn_block(f"dec{lv}.bn1", c)
        conv_block(f"dec{lv}.conv2", c, c)
        bn_block(f"dec{lv}.bn2", c)
    conv_block("out.conv", cfg.base_channels, cfg.out_channels, ksize=1)
    return specs


NON_TRAINABLE_SUFFIXES = (".running_mean", ".running_var")


class UNet:
    """Parameter container plus forward/backward passes."""

    def __init__(self, config: UNetConfig, params: dict | None = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.specs = _param_specs(config)
        if params is None:
            self.params = {
                name: np.zeros(shape, dtype=self.dtype) for name, shape, _ in self.specs
            }
        else:
            self._validate(params)
            self.params = params

    def _validate(self, params: dict) -> None:
        for name, shape, _ in self.specs:
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            if tuple(params[name].shape) != tuple(shape):
                raise ShapeError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        if len(params) != len(self.specs):
            extra = set(params) - {n for n, _, _ in self.specs}
            raise ShapeError(f"unexpected parameters: {sorted(extra)}")

    @classmethod
    def initialized(cls, config: UNetConfig, seed: int, dtype=np.float32) -> "UNet":
        """He-normal conv kernels, zero biases, identity batch norm."""
        net = cls(config, dtype=dtype)
        rng = np.random.default_rng(seed)
        for name, shape, kind in net.specs:
            if kind == "weight":
                if name.endswith("up.kernel"):  # (ci, co, 2, 2, 2)
                    fan_in = shape[0] * 8
                else:  # (co, ci, k, k, k)
                    fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in)
                net.params[name] = rng.normal(0.0, std, size=shape).astype(net.dtype)
            elif kind in ("scale", "var"):
                net.params[name] = np.ones(shape, dtype=net.dtype)
            # bias / shift / mean stay zero
        return net

    def trainable_names(self) -> list[str]:
        return [n for n, _, _ in self.specs if not n.endswith(NON_TRAINABLE_SUFFIXES)]

    def check_input(self, x: np.ndarray) -> None:
        check_tensor5(x, "network input")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        d = self.config.divisor
        if any(s % d for s in x.shape[2:]):
            raise ShapeError(
                f"input spatial dims {x.shape[2:]} must each be a multiple of {d}"
            )

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval", tape: list | None = None,
                update_running: bool | None = None) -> np.ndarray:
        """Run the network; returns logits with the input's spatial shape.

        When ``tape`` is a list the forward pass records everything backward
        needs.  ``update_running`` defaults to True in train mode.
        """
        self.check_input(x)
        if update_running is None:
            update_running = mode == "train"
        p = self.params
        cfg = self.config
        x = x.astype(self.dtype, copy=False)
        rec = tape.append if tape is not None else (lambda item: None)

        def conv(name, h):
            k, b = p[f"{name}.kernel"], p[f"{name}.bias"]
            y = conv3d_forward(h, k, b)
            rec(("conv", name, h))
            return y

        def bn(name, h):
            y, cache = layers.batchnorm_forward(
                h, p[f"{name}.scale"], p[f"{name}.shift"],
                p[f"{name}.running_mean"], p[f"{name}.running_var"],
                mode, update_running,
            )
            rec(("bn", name, cache))
            return y

        def relu(h):
            y, mask = layers.relu_forward(h)
            rec(("relu", None, mask))
            return y

        h = x
        skips = []
        for lv in range(cfg.levels):
            if lv > 0:
                y, idx = layers.maxpool2_forward(h)
                rec(("pool", None, (idx, h.shape)))
                h = y
            h = relu(bn(f"enc{lv}.bn1", conv(f"enc{lv}.conv1", h)))
            h = relu(bn(f"enc{lv}.bn2", conv(f"enc{lv}.conv2", h)))
            if lv < cfg.levels - 1:
                skips.append(h)
                rec(("skip_out", lv, None))
        for lv in range(cfg.levels - 2, -1, -1):
            k, b = p[f"dec{lv}.up.kernel"], p[f"dec{lv}.up.bias"]
            y = layers.upconv2_forward(h, k, b)
            rec(("upconv", f"dec{lv}.up", h))
            h = y
            h = np.concatenate([skips[lv], h], axis=1)
            rec(("concat", lv, skips[lv].shape[1]))
            h = relu(bn(f"dec{lv}.bn1", conv(f"dec{lv}.conv1", h)))
            h = relu(bn(f"dec{lv}.bn2", conv(f"dec{lv}.conv2", h)))
        logits = conv("out.conv", h)
        return logits

    def backward(self, tape: list, gout: np.ndarray) -> dict:
        """Walk the tape in reverse; returns grads for every trainable tensor."""
        p = self.params
        grads = {}
        skip_grads = {}
        g = gout
        for kind, name, payload in reversed(tape):
            if kind == "conv":
                gx, gk, gb = conv3d_backward(payload, p[f"{name}.kernel"], g)
                grads[f"{name}.kernel"] = gk
                grads[f"{name}.bias"] = gb
                g = gx
            elif kind == "bn":
                gx, gs, gsh = layers.batchnorm_backward(payload, g)
                grads[f"{name}.scale"] = gs
                grads[f"{name}.shift"] = gsh
                g = gx
            elif kind == "relu":
                g = layers.relu_backward(payload, g)
            elif kind == "pool":
                idx, in_shape = payload
                g = layers.maxpool2_backward(idx, g, in_shape)
            elif kind == "upconv":
                gx, gk, gb = layers.upconv2_backward(payload, p[f"{name}.kernel"], g)
                grads[f"{name}.kernel"] = gk
                grads[f"{name}.bias"] = gb
                g = gx
            elif kind == "concat":
                c_skip = payload
                skip_grads[name] = g[:, :c_skip]
                g = g[:, c_skip:]
            elif kind == "skip_out":
                g = g + skip_grads.pop(name)
            else:  # pragma: no cover
                raise RuntimeError(f"unknown tape entry {kind}")
        return grads

    def loss_and_grads(self, x: np.ndarray, target: np.ndarray,
                       update_running: bool = True):
        """One training forward/backward: returns (bce loss, grads dict)."""
        tape = []
        logits = self.forward(x, mode="train", tape=tape, update_running=update_running)
        loss, dlogits = bce_loss(logits, target)
        grads = self.backward(tape, dlogits.astype(self.dtype, copy=False))
        return loss, grads

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, mode="eval")
