"""Layer-stack assembly and training orchestration.

A network is described declaratively (usually from a JSON config): an ordered
list of convolution / pooling entries closed by one softmax-loss entry. The
depth map rides along the forward pass and is average-pooled whenever the
activations are max-pooled, so every depth-adaptive layer sees depth at its
own resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .damconv import (DamConvLayer, MultiscaleParams, expand_group_scales,
                      DEFAULT_MAX_DILATION)
from .errors import ConfigError, NumericalError
from .layers import LossConfig, MaxPoolLayer, logistic_loss, l2_penalty, softmax
from .optim import SgdState, schedule_from_dict
from .synth import intensity_input
from .tensor import DepthMap, FeatureMap, LabelMap, WeightTensor, fill_holes, pool_depth
from .tensorio import read_dat1, write_dat1

INPUT_SOURCES = ("depth", "synthetic-intensity")


@dataclass
class LayerEntry:
    kind: str                       # dam_conv | conv_dense | maxpool | softmax_loss
    out_channels: int = 0
    kernel: tuple[int, int] = (3, 3)
    channel_scales: tuple[float, ...] = (1.0,)   # s_r group values
    base_dilation: int = 1                        # q
    max_dilation: int = DEFAULT_MAX_DILATION      # s_max
    depth_diff: bool = False
    activation: str = "relu"
    window: int = 2
    stride: int = 2
    dilation: int = 1               # conv_dense fixed dilation
    normalize: bool = True
    lam: float = 0.0005
    ignore_label: int | None = None


@dataclass
class NetworkSpec:
    layers: list[LayerEntry]
    input_channels: int = 1
    input_source: str = "depth"
    mean_depth_mm: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.input_source not in INPUT_SOURCES:
            raise ConfigError(f"unknown input source {self.input_source!r}")
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        loss_entries = [i for i, e in enumerate(self.layers) if e.kind == "softmax_loss"]
        if loss_entries != [len(self.layers) - 1]:
            raise ConfigError("exactly one softmax_loss entry is required, last")
        convs = [i for i, e in enumerate(self.layers)
                 if e.kind in ("dam_conv", "conv_dense")]
        if not convs:
            raise ConfigError("network needs at least one convolution layer")
        for i, entry in enumerate(self.layers):
            if entry.kind in ("dam_conv", "conv_dense"):
                if entry.out_channels < 1:
                    raise ConfigError(f"layer {i}: out_channels must be >= 1")
                if entry.depth_diff and i != 0:
                    raise ConfigError(
                        f"layer {i}: depth_diff is only valid on the first "
                        "convolution layer")
            elif entry.kind == "maxpool":
                if entry.window < 1 or entry.stride < 1:
                    raise ConfigError(f"layer {i}: bad pooling window/stride")
            elif entry.kind != "softmax_loss":
                raise ConfigError(f"layer {i}: unknown kind {entry.kind!r}")
        # channel chaining and grouping
        channels = self.input_channels
        for i, entry in enumerate(self.layers):
            if entry.kind in ("dam_conv", "conv_dense"):
                if entry.kind == "dam_conv":
                    if channels % len(entry.channel_scales) != 0:
                        raise ConfigError(
                            f"layer {i}: {channels} input channels cannot form "
                            f"{len(entry.channel_scales)} contiguous scale groups")
                channels = entry.out_channels

    @property
    def num_classes(self) -> int:
        convs = [e for e in self.layers if e.kind in ("dam_conv", "conv_dense")]
        return convs[-1].out_channels

    @property
    def loss_entry(self) -> LayerEntry:
        return self.layers[-1]

    def needs_depth_scale(self) -> bool:
        return any(e.kind == "dam_conv" for e in self.layers)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for e in self.layers:
            if e.kind == "dam_conv":
                layers.append({"type": "dam_conv", "out_channels": e.out_channels,
                               "kernel": list(e.kernel), "s_r": list(e.channel_scales),
                               "q": e.base_dilation, "s_max": e.max_dilation,
                               "depth_diff": e.depth_diff, "activation": e.activation})
            elif e.kind == "conv_dense":
                layers.append({"type": "conv_dense", "out_channels": e.out_channels,
                               "kernel": list(e.kernel), "dilation": e.dilation,
                               "activation": e.activation})
            elif e.kind == "maxpool":
                layers.append({"type": "maxpool", "window": e.window,
                               "stride": e.stride})
            else:
                layers.append({"type": "softmax_loss", "normalize": e.normalize,
                               "lambda": e.lam, "ignore_label": e.ignore_label})
        return {"seed": self.seed,
                "input": {"channels": self.input_channels, "source": self.input_source},
                "mean_depth_mm": self.mean_depth_mm,
                "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            entries = []
            for raw in d["layers"]:
                kind = raw["type"]
                if kind == "dam_conv":
                    entries.append(LayerEntry(
                        kind=kind, out_channels=int(raw["out_channels"]),
                        kernel=_kernel_pair(raw.get("kernel", 3)),
                        channel_scales=tuple(float(v) for v in raw.get("s_r", [1.0])),
                        base_dilation=int(raw.get("q", 1)),
                        max_dilation=int(raw.get("s_max", DEFAULT_MAX_DILATION)),
                        depth_diff=bool(raw.get("depth_diff", False)),
                        activation=raw.get("activation", "relu")))
                elif kind == "conv_dense":
                    entries.append(LayerEntry(
                        kind=kind, out_channels=int(raw["out_channels"]),
                        kernel=_kernel_pair(raw.get("kernel", 3)),
                        dilation=int(raw.get("dilation", 1)),
                        activation=raw.get("activation", "relu")))
                elif kind == "maxpool":
                    entries.append(LayerEntry(kind=kind, window=int(raw["window"]),
                                              stride=int(raw["stride"])))
                elif kind == "softmax_loss":
                    ignore = raw.get("ignore_label")
                    entries.append(LayerEntry(
                        kind=kind, normalize=bool(raw.get("normalize", True)),
                        lam=float(raw.get("lambda", 0.0005)),
                        ignore_label=None if ignore is None else int(ignore)))
                else:
                    raise ConfigError(f"unknown layer type {kind!r}")
            inp = d.get("input", {})
            return cls(layers=entries,
                       input_channels=int(inp.get("channels", 1)),
                       input_source=inp.get("source", "depth"),
                       mean_depth_mm=d.get("mean_depth_mm"),
                       seed=int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad network config: {exc}") from exc


def _kernel_pair(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        kh, kw = int(value[0]), int(value[1])
    else:
        kh = kw = int(value)
    return kh, kw


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    data_loss: float
    decay_loss: float
    learning_rate: float
    val_score: float | None = None
    wall_time: float = 0.0

    def log_line(self) -> str:
        """Deterministic on-disk form; wall time stays out so reruns match."""
        val = "" if self.val_score is None else repr(self.val_score)
        return "\t".join([str(self.iteration), repr(self.loss),
                          repr(self.data_loss), repr(self.decay_loss),
                          repr(self.learning_rate), val])


class Network:
    """A built layer stack with shared depth plumbing."""

    def __init__(self, spec: NetworkSpec, layers: list, loss_cfg: LossConfig):
        self.spec = spec
        self.layers = layers
        self.loss_cfg = loss_cfg

    # -- access -----------------------------------------------------------

    def conv_layers(self) -> list[DamConvLayer]:
        return [l for l in self.layers if isinstance(l, DamConvLayer)]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.conv_layers():
            params.append(layer.weights.values)
            params.append(layer.bias)
        return params

    def weight_arrays(self) -> list[np.ndarray]:
        return [l.weights.values for l in self.conv_layers()]

    def set_parameters(self, arrays: list[np.ndarray]) -> None:
        own = self.parameters()
        if len(own) != len(arrays):
            raise ConfigError(f"checkpoint has {len(arrays)} parameter tensors, "
                              f"network needs {len(own)}")
        for dst, src in zip(own, arrays):
            if dst.shape != tuple(np.shape(src)):
                raise ConfigError(f"parameter shape {np.shape(src)} does not "
                                  f"match network shape {dst.shape}")
            dst[...] = src

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def output_grid(self) -> tuple[int, int]:
        """(offset, step) mapping output pixels to input-resolution pixels."""
        offset, step = 0, 1
        for entry in self.spec.layers:
            if entry.kind == "maxpool":
                offset += (entry.window // 2) * step
                step *= entry.stride
        return offset, step

    # -- forward / backward -------------------------------------------------

    def input_from_depth(self, depth: DepthMap) -> FeatureMap:
        return intensity_input(depth)

    def forward_logits(self, x: FeatureMap, depth: DepthMap,
                       cache: bool = True) -> FeatureMap:
        if x.channels != self.spec.input_channels:
            raise ConfigError(f"input has {x.channels} channels, network "
                              f"expects {self.spec.input_channels}")
        if depth.shape != (x.height, x.width):
            raise ValueError(f"depth dims {depth.shape} != input dims "
                             f"{(x.height, x.width)}")
        if depth.has_holes():
            depth = fill_holes(depth)
        current_depth = depth
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DamConvLayer):
                # depth handed to a conv layer always matches its input dims
                assert current_depth.shape == (x.height, x.width), \
                    f"layer {i}: depth {current_depth.shape} vs input {(x.height, x.width)}"
                need_depth = layer.fixed_dilation is None
                x = layer.forward(x, current_depth if need_depth else None,
                                  cache=cache)
            else:
                x, current_depth = layer.forward(x, current_depth, cache=cache)
        return x

    def forward_all(self, x: FeatureMap, depth: DepthMap,
                    cache: bool = True) -> FeatureMap:
        """Class probabilities at the output resolution."""
        return softmax(self.forward_logits(x, depth, cache=cache))

    def backward_all(self, grad_logits: FeatureMap):
        """Per-parameter data-term gradients plus the input gradient.

        Returns (grads ordered like parameters(), grad w.r.t. the network
        input). The decay term is not included; the batch step adds lam*W
        once.
        """
        grads: list[np.ndarray | None] = [None] * (2 * len(self.conv_layers()))
        conv_index = len(self.conv_layers()) - 1
        grad: FeatureMap = grad_logits
        for layer in reversed(self.layers):
            if isinstance(layer, DamConvLayer):
                grad, grad_w, grad_b = layer.backward(grad, lam=0.0)
                grads[2 * conv_index] = grad_w
                grads[2 * conv_index + 1] = grad_b
                conv_index -= 1
            else:
                grad = layer.backward(grad)
        return grads, grad  # type: ignore[return-value]

    def sample_loss_and_grads(self, depth: DepthMap, labels: LabelMap):
        """Data loss and parameter gradients for one sample."""
        x = self.input_from_depth(depth)
        logits = self.forward_logits(x, depth, cache=True)
        prob = softmax(logits)
        data_loss, grad_logits = logistic_loss(prob, labels, self.loss_cfg)
        grads, _ = self.backward_all(grad_logits)
        return data_loss, grads, prob

    def predict(self, depth: DepthMap) -> LabelMap:
        x = self.input_from_depth(depth)
        prob = self.forward_all(x, depth, cache=False)
        return LabelMap(np.argmax(prob.values, axis=0))

    def labels_at_output(self, labels: LabelMap) -> LabelMap:
        """Ground truth sampled on the network's output grid."""
        offset, step = self.output_grid()
        if step == 1:
            return labels
        sub = labels.labels[offset::step, offset::step]
        return LabelMap(sub, ignore_label=labels.ignore_label)

    # -- training -----------------------------------------------------------

    def train_step(self, batch, optimizer: SgdState) -> TrainRecord:
        """One optimizer step on a batch of (depth, labels) samples.

        Per-sample data gradients are averaged; the decay gradient lam*W is
        added once. Aborts on a non-finite loss.
        """
        if not batch:
            raise ValueError("empty batch")
        lam = self.loss_cfg.lam
        total: list[np.ndarray] | None = None
        data_loss = 0.0
        for depth, labels in batch:
            sample_loss, grads, _ = self.sample_loss_and_grads(depth, labels)
            data_loss += sample_loss
            if total is None:
                total = grads
            else:
                for acc, g in zip(total, grads):
                    acc += g
        assert total is not None
        scale = 1.0 / len(batch)
        data_loss *= scale
        for g in total:
            g *= scale
        if lam:
            for i, layer in enumerate(self.conv_layers()):
                total[2 * i] += lam * layer.weights.values
        decay_loss = l2_penalty(self.weight_arrays(), lam)
        loss = data_loss + decay_loss
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at iteration {optimizer.iter}")
        lr = optimizer.current_lr()
        optimizer.step(self.parameters(), total)
        return TrainRecord(iteration=optimizer.iter, loss=loss,
                           data_loss=data_loss, decay_loss=decay_loss,
                           learning_rate=lr)


def build(spec: NetworkSpec, seed: int | None = None) -> Network:
    """Instantiate a network with seeded uniform(-a, a), a = sqrt(3/fan_in).

    Deterministic for a given seed; biases start at zero. Pool products for
    the dilation scale are derived from the pooling entries in front of each
    convolution and checked against the spec.
    """
    if spec.needs_depth_scale() and (spec.mean_depth_mm is None
                                     or spec.mean_depth_mm <= 0):
        raise ConfigError("depth-adaptive layers need a positive mean_depth_mm "
                          "(usually injected from the dataset manifest)")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    layers: list = []
    channels = spec.input_channels
    pool_product = 1
    loss = spec.loss_entry
    loss_cfg = LossConfig(normalize=loss.normalize, lam=loss.lam,
                          ignore_label=loss.ignore_label)
    for entry in spec.layers[:-1]:
        if entry.kind == "maxpool":
            layers.append(MaxPoolLayer(entry.window, entry.stride))
            pool_product *= entry.stride
        else:
            kh, kw = entry.kernel
            fan_in = channels * kh * kw
            bound = np.sqrt(3.0 / fan_in)
            weights = WeightTensor(rng.uniform(-bound, bound,
                                               (entry.out_channels, channels, kh, kw)))
            bias = np.zeros(entry.out_channels)
            if entry.kind == "dam_conv":
                params = MultiscaleParams(
                    channel_scales=expand_group_scales(entry.channel_scales, channels),
                    mean_depth_mm=float(spec.mean_depth_mm),
                    pool_product=pool_product,
                    base_dilation=entry.base_dilation,
                    max_dilation=entry.max_dilation)
                assert params.pool_product == pool_product
                layers.append(DamConvLayer(weights, bias, params=params,
                                           depth_diff=entry.depth_diff,
                                           activation=entry.activation))
            else:
                layers.append(DamConvLayer(weights, bias,
                                           fixed_dilation=entry.dilation,
                                           activation=entry.activation))
            channels = entry.out_channels
    return Network(spec, layers, loss_cfg)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, net: Network, optimizer: SgdState,
                    best_score: float | None = None,
                    extra: dict | None = None) -> None:
    """Write parameters and optimizer state as DAT1 tensors plus a manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    params = net.parameters()
    param_files = []
    for i, arr in enumerate(params):
        name = f"param_{i:02d}.dat1"
        write_dat1(out / name, arr)
        param_files.append(name)
    delta_files = []
    for i, arr in enumerate(optimizer.state_arrays()):
        name = f"delta_{i:02d}.dat1"
        write_dat1(out / name, arr)
        delta_files.append(name)
    manifest = {
        "network": net.spec.to_dict(),
        "optimizer": {"mu": optimizer.mu, "gamma": optimizer.gamma,
                      "schedule": _schedule_to_dict(optimizer.schedule),
                      "iteration": optimizer.iter,
                      "plateau_drops": optimizer._drops},
        "params": param_files,
        "deltas": delta_files,
        "best_score": best_score,
        "extra": extra or {},
    }
    with open(out / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _schedule_to_dict(schedule) -> dict:
    d = {"kind": schedule.kind}
    if schedule.kind == "poly":
        d.update(max_iter=schedule.max_iter, power=schedule.power)
    elif schedule.kind == "plateau":
        d.update(factor=schedule.factor, patience=schedule.patience,
                 min_improve=schedule.min_improve)
    return d


def load_checkpoint(path) -> tuple[Network, SgdState, dict]:
    """Rebuild the network and optimizer exactly as saved."""
    base = Path(path)
    manifest_path = base / "checkpoint.json"
    if not manifest_path.exists():
        raise ConfigError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    spec = NetworkSpec.from_dict(manifest["network"])
    net = build(spec)
    net.set_parameters([read_dat1(base / name) for name in manifest["params"]])
    opt_info = manifest["optimizer"]
    optimizer = SgdState(mu=float(opt_info["mu"]), gamma=float(opt_info["gamma"]),
                         schedule=schedule_from_dict(opt_info["schedule"]))
    deltas = [read_dat1(base / name) for name in manifest["deltas"]]
    if deltas:
        optimizer.load_state(deltas, opt_info["iteration"],
                             drops=int(opt_info.get("plateau_drops", 0)))
    else:
        optimizer.iter = int(opt_info["iteration"])
    return net, optimizer, manifest
