"""Non-convolutional layers: ReLU, max pooling, softmax, logistic loss.

The loss layer fuses softmax and the multinomial logistic loss so the
gradient w.r.t. the logits is (probability - onehot) / N, with N = h*w when
normalization is on and N = 1 otherwise. Ignored pixels contribute neither
loss nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DepthMap, FeatureMap, LabelMap, pool_depth, pooled_size


@dataclass
class LossConfig:
    normalize: bool = True
    lam: float = 0.0005
    ignore_label: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("decay factor must be >= 0")


def relu_forward(x: FeatureMap) -> FeatureMap:
    return FeatureMap(np.maximum(x.values, 0.0))


def relu_backward(grad: FeatureMap, cached_input: FeatureMap) -> FeatureMap:
    # ties at exactly 0 pass zero gradient
    return FeatureMap(grad.values * (cached_input.values > 0))


class MaxPoolLayer:
    """Per-channel window max with an argmax cache for the backward scatter.

    Border windows are clipped. Ties inside a window break to the smallest
    linear index (numpy argmax order). The paired depth map is average-pooled
    on the same grid.
    """

    def __init__(self, window: int, stride: int):
        if window < 1 or stride < 1:
            raise ValueError("window and stride must be >= 1")
        self.window = window
        self.stride = stride
        self._cache = None

    def forward(self, x: FeatureMap, depth: DepthMap | None = None,
                cache: bool = True):
        c, h, w = x.shape
        oh = pooled_size(h, self.window, self.stride)
        ow = pooled_size(w, self.window, self.stride)
        out = np.empty((c, oh, ow))
        argmax = np.empty((c, oh, ow, 2), dtype=np.int64)
        for i in range(oh):
            r0 = i * self.stride
            r1 = min(r0 + self.window, h)
            for j in range(ow):
                c0 = j * self.stride
                c1 = min(c0 + self.window, w)
                patch = x.values[:, r0:r1, c0:c1].reshape(c, -1)
                flat = patch.argmax(axis=1)
                out[:, i, j] = patch[np.arange(c), flat]
                argmax[:, i, j, 0] = r0 + flat // (c1 - c0)
                argmax[:, i, j, 1] = c0 + flat % (c1 - c0)
        if cache:
            self._cache = {"argmax": argmax, "in_shape": (c, h, w)}
        pooled = pool_depth(depth, self.window, self.stride) if depth is not None else None
        return FeatureMap(out), pooled

    def backward(self, grad: FeatureMap) -> FeatureMap:
        if self._cache is None:
            raise ValueError("backward called before forward")
        c, h, w = self._cache["in_shape"]
        argmax = self._cache["argmax"]
        out = np.zeros((c, h, w))
        gi, gj = argmax[..., 0], argmax[..., 1]
        ch = np.arange(c)[:, None, None]
        np.add.at(out, (np.broadcast_to(ch, gi.shape), gi, gj), grad.values)
        return FeatureMap(out)


def softmax(x: FeatureMap) -> FeatureMap:
    """Per-pixel class probabilities over the channel axis.

    Shifts by the per-pixel max before exponentiating; the result is
    unchanged mathematically and safe for large logits.
    """
    shifted = x.values - x.values.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return FeatureMap(e / e.sum(axis=0, keepdims=True))


def logistic_loss(prob: FeatureMap, labels: LabelMap, cfg: LossConfig):
    """Multinomial logistic loss and its fused gradient w.r.t. the logits.

    loss = -(1/N) * sum over counted pixels of log p[label]; N = h*w when
    cfg.normalize else 1. Gradient is (prob - onehot)/N on counted pixels and
    zero on ignored ones. Returns (loss, gradient FeatureMap).
    """
    if prob.values.shape[1:] != labels.shape:
        raise ValueError(f"probability dims {prob.values.shape[1:]} != "
                         f"label dims {labels.shape}")
    labels = LabelMap(labels.labels, ignore_label=cfg.ignore_label) \
        if labels.ignore_label != cfg.ignore_label else labels
    labels.validate_range(prob.channels)
    counted = labels.counted_mask()
    n = float(prob.values.shape[1] * prob.values.shape[2]) if cfg.normalize else 1.0

    safe_labels = np.where(counted, labels.labels, 0)
    rows, cols = np.indices(labels.shape)
    picked = prob.values[safe_labels, rows, cols]
    with np.errstate(divide="ignore"):
        logs = np.where(counted, np.log(picked), 0.0)
    loss = -float(logs.sum()) / n

    grad = prob.values.copy()
    grad[safe_labels, rows, cols] -= 1.0
    grad *= counted[None, :, :]
    grad /= n
    return loss, FeatureMap(grad)


def l2_penalty(weight_arrays, lam: float = 1.0) -> float:
    """Half sum of squared weights times the decay factor.

    The half makes the penalty's weight gradient exactly lam*W, the decay
    term the weight-gradient formula folds in.
    """
    total = sum(float(np.sum(np.square(w))) for w in weight_arrays)
    return lam * 0.5 * total
