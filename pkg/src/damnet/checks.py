"""Numerical verification harnesses: finite-difference gradient checks and
the two-layer depth-invariance replication with its fixed-dilation control.

Both are exposed through the CLI and reused by the test suites.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .damconv import DamConvLayer
from .errors import ConfigError
from .layers import logistic_loss, l2_penalty, softmax
from .network import Network, NetworkSpec, LayerEntry, build
from .tensor import DepthMap, FeatureMap, LabelMap

REL_ERR_FLOOR = 1e-6


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


def _central_diff(loss_of, array: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every array element."""
    grad = np.empty_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = loss_of()
        flat[i] = keep - eps
        lo = loss_of()
        flat[i] = keep
        out[i] = (hi - lo) / (2.0 * eps)
    return grad


# -- whole-network gradient check ---------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    worst_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.worst_rel_err for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'PASS' if e.passed else 'FAIL'}  {e.name:<22s} "
                f"worst rel err {e.worst_rel_err:.3e}" for e in self.entries]


def _activations_clear_of_kinks(net: Network, threshold: float = 1e-4) -> bool:
    """True when no cached pre-activation sits near the ReLU kink."""
    for layer in net.conv_layers():
        if layer.activation == "relu" and layer._cache is not None:
            if np.min(np.abs(layer._cache["pre"])) < threshold:
                return False
    return True


def random_problem(net: Network, rng: np.random.Generator,
                   height: int, width: int,
                   depth_range=(400.0, 2000.0)):
    """Random input, blockwise-varying depth, and labels for a network."""
    depth_vals = rng.uniform(*depth_range, size=(height, width))
    # coarse blocks give contiguous regions of equal dilation
    block = max(2, height // 3)
    for r0 in range(0, height, block):
        for c0 in range(0, width, block):
            depth_vals[r0:r0 + block, c0:c0 + block] = rng.uniform(*depth_range)
    depth = DepthMap(depth_vals)
    x = FeatureMap(rng.uniform(-1.0, 1.0,
                               size=(net.spec.input_channels, height, width)))
    offset, step = net.output_grid()
    oh = len(range(offset, height, step))
    ow = len(range(offset, width, step))
    labels = LabelMap(rng.integers(0, net.num_classes, size=(oh, ow)))
    return x, depth, labels


def network_gradcheck(net: Network, x: FeatureMap, depth: DepthMap,
                      labels: LabelMap, eps: float = 1e-5,
                      tol: float = 1e-4,
                      corrupt: bool = False) -> GradCheckReport:
    """Compare analytic gradients of the total loss against central
    differences, parameter by parameter and for the input map.

    ``corrupt`` perturbs one weight gradient before comparison — a negative
    control that must fail.
    """
    lam = net.loss_cfg.lam

    def total_loss() -> float:
        logits = net.forward_logits(x, depth, cache=False)
        data, _ = logistic_loss(softmax(logits), labels, net.loss_cfg)
        return data + l2_penalty(net.weight_arrays(), lam)

    logits = net.forward_logits(x, depth, cache=True)
    data, grad_logits = logistic_loss(softmax(logits), labels, net.loss_cfg)
    grads, grad_input = net.backward_all(grad_logits)
    for i, layer in enumerate(net.conv_layers()):
        grads[2 * i] = grads[2 * i] + lam * layer.weights.values
    if corrupt:
        grads[0].reshape(-1)[0] += 1e-2 * max(1.0, abs(grads[0].reshape(-1)[0]))

    report = GradCheckReport()
    names = []
    for i in range(len(net.conv_layers())):
        names += [f"conv{i}.weights", f"conv{i}.bias"]
    for name, array, analytic in zip(names, net.parameters(), grads):
        fd = _central_diff(total_loss, array, eps)
        worst = max(rel_err(a, f) for a, f in zip(analytic.reshape(-1), fd.reshape(-1)))
        report.entries.append(GradCheckEntry(name, worst, worst < tol))
    fd_in = _central_diff(total_loss, x.values, eps)
    worst = max(rel_err(a, f) for a, f in
                zip(grad_input.values.reshape(-1), fd_in.reshape(-1)))
    report.entries.append(GradCheckEntry("input", worst, worst < tol))
    return report


def run_gradcheck(spec: NetworkSpec, seed: int = 0, eps: float = 1e-5,
                  tol: float = 1e-4, height: int = 8, width: int = 8,
                  corrupt: bool = False, max_resample: int = 50) -> GradCheckReport:
    """Build a small network and gradcheck it on a kink-free random problem."""
    conv_count = len([e for e in spec.layers if e.kind in ("dam_conv", "conv_dense")])
    if conv_count > 3 or height > 8 or width > 8:
        raise ConfigError("gradcheck needs a small problem: <= 3 conv layers, <= 8x8")
    rng = np.random.default_rng(seed)
    net = build(spec, seed=seed)
    for _ in range(max_resample):
        x, depth, labels = random_problem(net, rng, height, width)
        net.forward_logits(x, depth, cache=True)
        if _activations_clear_of_kinks(net):
            return network_gradcheck(net, x, depth, labels, eps=eps, tol=tol,
                                     corrupt=corrupt)
    raise ConfigError("could not sample a problem clear of ReLU kinks")


def small_gradcheck_spec(mean_depth_mm: float = 1000.0) -> NetworkSpec:
    """Three-layer stack exercising depth-difference, mixed dilation groups,
    and the dense shorthand; small enough for finite differences."""
    return NetworkSpec(layers=[
        LayerEntry(kind="dam_conv", out_channels=3, kernel=(3, 3),
                   channel_scales=(1.5,), base_dilation=1, max_dilation=4,
                   depth_diff=True, activation="relu"),
        LayerEntry(kind="dam_conv", out_channels=4, kernel=(3, 3),
                   channel_scales=(0.75, 1.5, 2.25), base_dilation=1,
                   max_dilation=4, activation="relu"),
        LayerEntry(kind="conv_dense", out_channels=2, kernel=(3, 3),
                   activation="identity"),
        LayerEntry(kind="softmax_loss", normalize=True, lam=0.0005),
    ], input_channels=1, input_source="depth", mean_depth_mm=mean_depth_mm)


# -- depth-invariance replication ---------------------------------------------


@dataclass
class InvarianceReport:
    ratio: int
    dims: int
    adaptive_deviation: float
    control_deviation: float

    @property
    def passed(self) -> bool:
        if self.ratio == 1:
            return self.adaptive_deviation < 1e-12
        return self.adaptive_deviation < 1e-12 and self.control_deviation > 1e-3

    def lines(self) -> list[str]:
        out = [f"{self.dims}-D, distance ratio {self.ratio}:",
               f"  adaptive dilation  max deviation {self.adaptive_deviation:.3e}"
               f"  ({'PASS' if self.adaptive_deviation < 1e-12 else 'FAIL'} < 1e-12)"]
        if self.ratio > 1:
            ok = self.control_deviation > 1e-3
            out.append(f"  fixed dilation     max deviation {self.control_deviation:.3e}"
                       f"  ({'PASS' if ok else 'FAIL'} > 1e-3, must break invariance)")
        return out


def proof_stack_spec(one_dimensional: bool, mean_depth_mm: float = 1000.0,
                     channels: tuple[int, ...] = (1, 1, 1),
                     scale_groups=((1.0,), (1.0,))) -> NetworkSpec:
    """Two convolution layers with kernel 3 and ReLU, the stack the
    depth-invariance argument is stated for."""
    kernel = (1, 3) if one_dimensional else (3, 3)
    return NetworkSpec(layers=[
        LayerEntry(kind="dam_conv", out_channels=channels[1], kernel=kernel,
                   channel_scales=tuple(scale_groups[0]), activation="relu"),
        LayerEntry(kind="dam_conv", out_channels=channels[2], kernel=kernel,
                   channel_scales=tuple(scale_groups[1]), activation="relu"),
        LayerEntry(kind="softmax_loss"),
    ], input_channels=channels[0], mean_depth_mm=mean_depth_mm)


def _resampled_input(x: np.ndarray, ratio: int, reach: int,
                     one_dimensional: bool) -> np.ndarray:
    """Embed x on a ratio-spaced lattice: the image of the same scene at
    distance d/ratio, where everything spreads out by the ratio."""
    c = x.shape[0]
    center = reach
    big = reach * ratio
    if one_dimensional:
        out = np.zeros((c, 1, 2 * big + 1))
        for a in range(-reach, reach + 1):
            out[:, 0, big + ratio * a] = x[:, 0, center + a]
    else:
        out = np.zeros((c, 2 * big + 1, 2 * big + 1))
        for a in range(-reach, reach + 1):
            for b in range(-reach, reach + 1):
                out[:, big + ratio * a, big + ratio * b] = x[:, center + a, center + b]
    return out


def invariance_check(ratio: int, one_dimensional: bool = True,
                     seed: int = 0, multichannel: bool = False,
                     max_resample: int = 20) -> InvarianceReport:
    """Run the two-layer stack on a scene at distance d and on the same scene
    at d/ratio; with depth-adaptive dilation the center activations must
    match, with dilation pinned to 1 they must not.
    """
    if ratio < 1:
        raise ConfigError("distance ratio must be >= 1")
    base_depth = 1000.0
    if multichannel and not one_dimensional:
        channels = (2, 3, 2)
        groups = ((1.0, 2.0), (1.0, 1.0, 2.0))
        max_scale = 2
    else:
        channels = (1, 1, 1)
        groups = ((1.0,), (1.0,))
        max_scale = 1
    # per-layer dilation at the base distance is the scale value itself
    reach = 2 * max_scale   # two layers, kernel 3: each reaches scale*1
    rng = np.random.default_rng(seed)

    spec = proof_stack_spec(one_dimensional, mean_depth_mm=base_depth,
                            channels=channels, scale_groups=groups)
    control_dev = 0.0
    adaptive_dev = None
    for _ in range(max_resample):
        net = build(spec, seed=int(rng.integers(1 << 30)))
        size = 2 * reach + 1
        if one_dimensional:
            x = rng.uniform(-1.0, 1.0, size=(channels[0], 1, size))
        else:
            x = rng.uniform(-1.0, 1.0, size=(channels[0], size, size))
        x_hat = _resampled_input(x, ratio, reach, one_dimensional)

        near = base_depth / ratio
        out = net.forward_logits(
            FeatureMap(x), DepthMap.constant(x.shape[1], x.shape[2], base_depth),
            cache=False)
        out_hat = net.forward_logits(
            FeatureMap(x_hat),
            DepthMap.constant(x_hat.shape[1], x_hat.shape[2], near),
            cache=False)
        center = (x.shape[1] - 1) // 2, (x.shape[2] - 1) // 2
        center_hat = (x_hat.shape[1] - 1) // 2, (x_hat.shape[2] - 1) // 2
        adaptive_dev = float(np.max(np.abs(
            out_hat.values[:, center_hat[0], center_hat[1]]
            - out.values[:, center[0], center[1]])))

        # control: same weights, dilation clamped to 1 at every depth
        control = build(spec, seed=0)
        control.set_parameters(net.parameters())
        for layer in control.conv_layers():
            layer.params.channel_scales = layer.params.channel_scales * 0 + 1e-9
        c_out = control.forward_logits(
            FeatureMap(x), DepthMap.constant(x.shape[1], x.shape[2], base_depth),
            cache=False)
        c_hat = control.forward_logits(
            FeatureMap(x_hat),
            DepthMap.constant(x_hat.shape[1], x_hat.shape[2], near),
            cache=False)
        control_dev = float(np.max(np.abs(
            c_hat.values[:, center_hat[0], center_hat[1]]
            - c_out.values[:, center[0], center[1]])))
        if ratio == 1 or control_dev > 1e-3:
            break
    return InvarianceReport(ratio=ratio, dims=1 if one_dimensional else 2,
                            adaptive_deviation=adaptive_dev,
                            control_deviation=control_dev)
