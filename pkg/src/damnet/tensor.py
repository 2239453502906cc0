"""Dense array types for activations, weights, depth and label maps.

Layout is channel-major, row-major (numpy C order), indices 0-based.
All arrays are float64 in memory; values must stay finite. Instances are
treated as immutable after construction: operations return new objects
and callers must not write into ``.values`` / ``.depths`` / ``.labels``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


def _as_f64(values, shape) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in array of shape {shape}")
    return arr


@dataclass
class FeatureMap:
    """Activations or gradients: (channels, height, width) float64."""

    values: np.ndarray

    def __post_init__(self):
        if np.ndim(self.values) != 3:
            raise ValueError(f"FeatureMap needs rank 3, got {np.shape(self.values)}")
        self.values = _as_f64(self.values, np.shape(self.values))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "FeatureMap":
        return cls(np.zeros((channels, height, width)))


@dataclass
class WeightTensor:
    """Convolution kernel bank: (out_channels, in_channels, kernel_h, kernel_w).

    Kernel dims must be odd so the center tap exists.
    """

    values: np.ndarray

    def __post_init__(self):
        if np.ndim(self.values) != 4:
            raise ValueError(f"WeightTensor needs rank 4, got {np.shape(self.values)}")
        self.values = _as_f64(self.values, np.shape(self.values))
        kh, kw = self.values.shape[2], self.values.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")

    @property
    def out_channels(self) -> int:
        return self.values.shape[0]

    @property
    def in_channels(self) -> int:
        return self.values.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.values.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.values.shape[3]


@dataclass
class DepthMap:
    """Depth in millimeters, (height, width). ``hole_value`` marks missing pixels.

    Every non-hole depth must be strictly positive.
    """

    depths: np.ndarray
    hole_value: float = 0.0

    def __post_init__(self):
        if np.ndim(self.depths) != 2:
            raise ValueError(f"DepthMap needs rank 2, got {np.shape(self.depths)}")
        self.depths = _as_f64(self.depths, np.shape(self.depths))
        bad = (self.depths != self.hole_value) & (self.depths <= 0)
        if np.any(bad):
            raise ValueError("non-hole depths must be strictly positive")

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def shape(self):
        return self.depths.shape

    def hole_mask(self) -> np.ndarray:
        return self.depths == self.hole_value

    def has_holes(self) -> bool:
        return bool(np.any(self.hole_mask()))

    @classmethod
    def constant(cls, height: int, width: int, depth_mm: float) -> "DepthMap":
        return cls(np.full((height, width), float(depth_mm)))


@dataclass
class LabelMap:
    """Per-pixel class indices, (height, width) int. ``ignore_label`` pixels
    are excluded from loss and metrics."""

    labels: np.ndarray
    ignore_label: int | None = None

    def __post_init__(self):
        if np.ndim(self.labels) != 2:
            raise ValueError(f"LabelMap needs rank 2, got {np.shape(self.labels)}")
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.labels.shape

    def counted_mask(self) -> np.ndarray:
        """True where the pixel participates in loss/metrics."""
        if self.ignore_label is None:
            return np.ones(self.labels.shape, dtype=bool)
        return self.labels != self.ignore_label

    def validate_range(self, num_classes: int) -> None:
        counted = self.labels[self.counted_mask()]
        if counted.size and (counted.min() < 0 or counted.max() >= num_classes):
            raise ValueError(
                f"labels outside [0, {num_classes}): "
                f"min {counted.min()}, max {counted.max()}"
            )


def index(fmap: FeatureMap, channel: int, row: int, col: int) -> float:
    """Read one activation with the zero-padding contract.

    Out-of-bounds (row, col) reads 0; an out-of-range channel is an error.
    This is the tap semantics the convolution uses at borders.
    """
    if not 0 <= channel < fmap.channels:
        raise ValueError(f"channel {channel} out of range [0, {fmap.channels})")
    if 0 <= row < fmap.height and 0 <= col < fmap.width:
        return float(fmap.values[channel, row, col])
    return 0.0


def fill_holes(depth: DepthMap, strategy: str = "nearest_valid",
               constant: float | None = None) -> DepthMap:
    """Repair hole pixels so every depth is strictly positive.

    ``nearest_valid`` copies the Euclidean-nearest valid pixel, ties broken
    toward the smaller linear (row-major) index. ``constant`` writes the
    given value. Idempotent; hole-free maps are returned unchanged
    (as a copy).
    """
    holes = depth.hole_mask()
    if not np.any(holes):
        return DepthMap(depth.depths.copy(), hole_value=depth.hole_value)

    out = depth.depths.copy()
    if strategy == "constant":
        if constant is None or constant <= 0:
            raise ValueError("constant fill needs a positive value")
        out[holes] = float(constant)
        return DepthMap(out, hole_value=depth.hole_value)
    if strategy != "nearest_valid":
        raise ValueError(f"unknown fill strategy {strategy!r}")

    valid = ~holes
    if not np.any(valid):
        raise ValueError("cannot nearest-fill an all-hole depth map")

    h, w = depth.shape
    vr, vc = np.nonzero(valid)           # row-major order -> smallest linear index first
    hr, hc = np.nonzero(holes)
    # Brute force in chunks; integer squared distances make ties exact and
    # argmin picks the first (= smallest linear index) among equals.
    vals = out[vr, vc]
    for start in range(0, hr.size, 1024):
        sl = slice(start, start + 1024)
        d2 = (hr[sl, None] - vr[None, :]) ** 2 + (hc[sl, None] - vc[None, :]) ** 2
        out[hr[sl], hc[sl]] = vals[np.argmin(d2, axis=1)]
    return DepthMap(out, hole_value=depth.hole_value)


def pooled_size(extent: int, window: int, stride: int) -> int:
    """Output extent of pooling: ceil((extent - window) / stride) + 1."""
    if window > extent:
        raise ValueError(f"pool window {window} larger than input {extent}")
    return -((extent - window) // -stride) + 1


def pool_depth(depth: DepthMap, window: int, stride: int) -> DepthMap:
    """Average-pool a hole-free depth map on the same grid as activation pooling.

    Windows that overhang the border are clipped and averaged over the pixels
    actually present.
    """
    if depth.has_holes():
        raise ValueError("pool_depth requires a hole-free depth map")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    h, w = depth.shape
    oh, ow = pooled_size(h, window, stride), pooled_size(w, window, stride)
    out = np.empty((oh, ow))
    for i in range(oh):
        r0 = i * stride
        for j in range(ow):
            c0 = j * stride
            out[i, j] = depth.depths[r0:min(r0 + window, h),
                                     c0:min(c0 + window, w)].mean()
    return DepthMap(out, hole_value=depth.hole_value)
