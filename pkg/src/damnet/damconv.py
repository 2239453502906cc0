"""Depth-adaptive multiscale convolution.

The layer dilates its kernel taps per pixel and per input channel: the
dilation at (channel, row, col) is a per-channel millimeter scale divided by
the depth at that pixel, rounded half-up and clamped. Near pixels get wide
receptive fields, far pixels narrow ones, so activations at corresponding
object positions match across distances.

Forward and backward are hand-derived. Dilation is a deterministic integer
function of the depth data, so no gradient flows through it. Out-of-bounds
taps read zero in the forward pass and their gradient contributions are
discarded; in depth-difference mode an out-of-bounds tap contributes a zero
difference (not ``0 - center``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import DepthMap, FeatureMap, WeightTensor
from . import tensorio

DEFAULT_MAX_DILATION = 16


@dataclass
class MultiscaleParams:
    """Per-channel dilation scaling for one layer.

    ``channel_scales[r]`` is the scaling factor of input channel r; channels
    in the same contiguous group share a value. ``mean_depth_mm`` is the
    training-set mean depth, ``pool_product`` the product of pooling strides
    applied before this layer, and ``base_dilation`` the dilation inherited
    from the surrounding architecture.
    """

    channel_scales: np.ndarray
    mean_depth_mm: float
    pool_product: int = 1
    base_dilation: int = 1
    max_dilation: int = DEFAULT_MAX_DILATION

    def __post_init__(self):
        self.channel_scales = np.asarray(self.channel_scales, dtype=np.float64)
        if self.channel_scales.ndim != 1 or self.channel_scales.size == 0:
            raise ConfigError("channel_scales must be a non-empty vector")
        if np.any(self.channel_scales <= 0):
            raise ConfigError("channel scales must be positive")
        if self.mean_depth_mm <= 0:
            raise ConfigError("mean depth must be positive")
        if self.pool_product < 1 or self.base_dilation < 1 or self.max_dilation < 1:
            raise ConfigError("pool_product, base_dilation, max_dilation must be >= 1")

    @property
    def channels(self) -> int:
        return self.channel_scales.size


def expand_group_scales(group_values, channels: int) -> np.ndarray:
    """Spread group scale values over contiguous equal-sized channel groups."""
    values = np.asarray(group_values, dtype=np.float64)
    if channels % values.size != 0:
        raise ConfigError(
            f"{channels} channels not divisible into {values.size} scale groups"
        )
    return np.repeat(values, channels // values.size)


@dataclass
class SparsityMap:
    """Integer tap dilation per (input channel, row, col)."""

    dilations: np.ndarray

    def __post_init__(self):
        self.dilations = np.asarray(self.dilations, dtype=np.int64)
        if self.dilations.ndim != 3:
            raise ValueError("SparsityMap needs rank 3")
        if self.dilations.min() < 1:
            raise ValueError("dilations must be >= 1")

    @property
    def shape(self):
        return self.dilations.shape

    def save_dat1(self, path) -> None:
        tensorio.write_dat1(path, self.dilations.astype(np.float64))

    def save_pgm(self, path, channel: int = 0, max_dilation: int | None = None) -> None:
        top = max_dilation if max_dilation is not None else int(self.dilations.max())
        tensorio.write_pgm(path, self.dilations[channel].astype(np.float64),
                           max_value=float(top))


def multiscale_param_mm(params: MultiscaleParams, channel: int) -> float:
    """Millimeter dilation scale of one input channel:
    (scale / pool_product) * mean_depth * base_dilation."""
    return (float(params.channel_scales[channel]) / params.pool_product
            * params.mean_depth_mm * params.base_dilation)


def compute_sparsity(params: MultiscaleParams, depth: DepthMap) -> SparsityMap:
    """Per-pixel, per-channel integer dilation from depth.

    dilation = clamp(round_half_up(scale_mm / depth), 1, max_dilation); it
    never increases with depth for a fixed channel.
    """
    if depth.has_holes():
        raise ValueError("sparsity needs a hole-free depth map")
    if np.any(depth.depths <= 0):
        raise ValueError("sparsity needs strictly positive depths")
    scales = np.array([multiscale_param_mm(params, r) for r in range(params.channels)])
    raw = scales[:, None, None] / depth.depths[None, :, :]
    # round half up; np.round would round half to even
    dil = np.floor(raw + 0.5).astype(np.int64)
    np.clip(dil, 1, params.max_dilation, out=dil)
    return SparsityMap(dil)


def _kernel_offsets(k: int):
    half = k // 2
    return range(-half, -half + k)


class DamConvLayer:
    """One convolution layer with depth-adaptive per-pixel dilation.

    ``fixed_dilation`` bypasses the depth map and uses a constant dilation
    (1 = plain dense convolution), which is the fixed-receptive-field
    baseline. ``depth_diff`` makes every tap read its value minus the window
    center before weighting; only valid for a network's first layer.
    ``activation`` is "relu" or "identity".
    """

    def __init__(self, weights: WeightTensor, bias: np.ndarray,
                 params: MultiscaleParams | None = None,
                 fixed_dilation: int | None = None,
                 depth_diff: bool = False, activation: str = "relu"):
        if (params is None) == (fixed_dilation is None):
            raise ConfigError("need exactly one of params / fixed_dilation")
        if params is not None and params.channels != weights.in_channels:
            raise ConfigError(
                f"params cover {params.channels} channels, "
                f"weights expect {weights.in_channels}")
        if fixed_dilation is not None and fixed_dilation < 1:
            raise ConfigError("fixed_dilation must be >= 1")
        if activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {activation!r}")
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (weights.out_channels,):
            raise ValueError(f"bias shape {bias.shape} != ({weights.out_channels},)")
        self.weights = weights
        self.bias = bias
        self.params = params
        self.fixed_dilation = fixed_dilation
        self.depth_diff = bool(depth_diff)
        self.activation = activation
        self._cache = None

    # -- dilation ---------------------------------------------------------

    def sparsity_for(self, input_shape, depth: DepthMap | None) -> SparsityMap:
        channels = self.weights.in_channels
        if self.fixed_dilation is not None:
            return SparsityMap(np.full((channels,) + tuple(input_shape[1:]),
                                       self.fixed_dilation, dtype=np.int64))
        if depth is None:
            raise ValueError("depth-adaptive layer needs a depth map")
        if depth.shape != tuple(input_shape[1:]):
            raise ValueError(f"depth dims {depth.shape} != input dims {tuple(input_shape[1:])}")
        return compute_sparsity(self.params, depth)

    # -- forward ----------------------------------------------------------

    def forward(self, x: FeatureMap, depth: DepthMap | None = None,
                cache: bool = True) -> FeatureMap:
        w = self.weights
        if x.channels != w.in_channels:
            raise ValueError(f"input has {x.channels} channels, "
                             f"weights expect {w.in_channels}")
        sparsity = self.sparsity_for(x.shape, depth)
        dil = sparsity.dilations
        c, h, wd = x.shape
        kh, kw = w.kernel_h, w.kernel_w
        smax = int(dil.max())
        ph, pw = smax * (kh // 2), smax * (kw // 2)

        xv = x.values
        xpad = np.zeros((c, h + 2 * ph, wd + 2 * pw))
        xpad[:, ph:ph + h, pw:pw + wd] = xv

        distinct = [int(s) for s in np.unique(dil)]
        masks = {s: (dil == s).astype(np.float64) for s in distinct}

        pre = np.empty((w.out_channels, h, wd))
        pre[:] = self.bias[:, None, None]
        tap_values = []
        for iu, u in enumerate(_kernel_offsets(kh)):
            for iv, v in enumerate(_kernel_offsets(kw)):
                tap = self._gather_tap(xv, xpad, masks, u, v, ph, pw)
                tap_values.append(tap)
                pre += np.tensordot(w.values[:, :, iu, iv], tap, axes=(1, 0))

        out = np.maximum(pre, 0.0) if self.activation == "relu" else pre
        if cache:
            self._cache = {
                "input": xv, "sparsity": sparsity, "masks": masks,
                "tap_values": tap_values, "pre": pre,
                "pads": (ph, pw), "shape": (c, h, wd),
            }
        return FeatureMap(out)

    def _gather_tap(self, xv, xpad, masks, u, v, ph, pw):
        """Tap values for kernel offset (u, v) at every pixel's own dilation."""
        c, h, wd = xv.shape
        tap = None
        for s, mask in masks.items():
            shifted = xpad[:, ph + s * u: ph + s * u + h,
                           pw + s * v: pw + s * v + wd]
            if self.depth_diff:
                # valid rectangle = taps landing inside the unpadded map
                r0, r1 = max(0, -s * u), min(h, h - s * u)
                c0, c1 = max(0, -s * v), min(wd, wd - s * v)
                piece = np.zeros((c, h, wd))
                if r0 < r1 and c0 < c1:
                    piece[:, r0:r1, c0:c1] = (shifted[:, r0:r1, c0:c1]
                                              - xv[:, r0:r1, c0:c1])
                piece *= mask
            else:
                piece = shifted * mask
            tap = piece if tap is None else tap + piece
        return tap

    # -- backward ---------------------------------------------------------

    def _require_cache(self):
        if self._cache is None:
            raise ValueError("backward called before forward")
        return self._cache

    def backward_weights(self, grad_pre: FeatureMap, lam: float = 0.0):
        """Gradients of the loss w.r.t. weights and bias.

        ``grad_pre`` is the gradient at the pre-activation (the transfer
        function's derivative is applied by ``backward``). The decay term
        ``lam * W`` is folded in here, matching the weight-gradient formula.
        """
        cache = self._require_cache()
        g = grad_pre.values
        w = self.weights
        grad_w = np.empty_like(w.values)
        i = 0
        for iu in range(w.kernel_h):
            for iv in range(w.kernel_w):
                grad_w[:, :, iu, iv] = np.tensordot(
                    g, cache["tap_values"][i], axes=([1, 2], [1, 2]))
                i += 1
        if lam:
            grad_w += lam * w.values
        grad_b = g.sum(axis=(1, 2))
        return grad_w, grad_b

    def backward_input(self, grad_pre: FeatureMap) -> FeatureMap:
        """Gradient of the loss w.r.t. the layer input.

        Scatter-accumulates grad * weight at each pixel's own dilated tap
        positions; accumulations that land outside the map are discarded. In
        depth-difference mode every valid tap also pushes the negated
        contribution onto the window center.
        """
        cache = self._require_cache()
        g = grad_pre.values
        w = self.weights
        c, h, wd = cache["shape"]
        ph, pw = cache["pads"]
        grad_pad = np.zeros((c, h + 2 * ph, wd + 2 * pw))
        center = grad_pad[:, ph:ph + h, pw:pw + wd]
        for iu, u in enumerate(_kernel_offsets(w.kernel_h)):
            for iv, v in enumerate(_kernel_offsets(w.kernel_w)):
                contrib = np.tensordot(w.values[:, :, iu, iv], g, axes=(0, 0))
                for s, mask in cache["masks"].items():
                    piece = contrib * mask
                    grad_pad[:, ph + s * u: ph + s * u + h,
                             pw + s * v: pw + s * v + wd] += piece
                    if self.depth_diff:
                        r0, r1 = max(0, -s * u), min(h, h - s * u)
                        c0, c1 = max(0, -s * v), min(wd, wd - s * v)
                        if r0 < r1 and c0 < c1:
                            center[:, r0:r1, c0:c1] -= piece[:, r0:r1, c0:c1]
        return FeatureMap(grad_pad[:, ph:ph + h, pw:pw + wd].copy())

    def backward(self, grad_out: FeatureMap, lam: float = 0.0):
        """Full backward: activation derivative, then weight/bias/input grads.

        Returns (grad_input, grad_weights, grad_bias).
        """
        cache = self._require_cache()
        if self.activation == "relu":
            grad_pre = FeatureMap(grad_out.values * (cache["pre"] > 0))
        else:
            grad_pre = grad_out
        grad_w, grad_b = self.backward_weights(grad_pre, lam)
        grad_in = self.backward_input(grad_pre)
        return grad_in, grad_w, grad_b

    @property
    def cached_input(self):
        return None if self._cache is None else self._cache["input"]

    @property
    def cached_sparsity(self) -> SparsityMap | None:
        return None if self._cache is None else self._cache["sparsity"]
