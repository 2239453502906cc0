"""Throwaway: time a 4-layer forward+backward at candidate experiment scales."""
import time
import numpy as np
from damnet.network import NetworkSpec, LayerEntry, build
from damnet.tensor import DepthMap, FeatureMap, LabelMap


def make_spec(channels=(8, 12, 12), classes=4, dense=False, seed=0):
    kind = "conv_dense" if dense else "dam_conv"
    layers = [
        LayerEntry(kind=kind, out_channels=channels[0], kernel=(3, 3),
                   channel_scales=(2.0,), depth_diff=not dense, max_dilation=8,
                   activation="relu"),
        LayerEntry(kind=kind, out_channels=channels[1], kernel=(3, 3),
                   channel_scales=(0.5, 0.75, 1.0, 1.25), base_dilation=2,
                   max_dilation=8, activation="relu"),
        LayerEntry(kind=kind, out_channels=channels[2], kernel=(3, 3),
                   channel_scales=(0.5, 0.75, 1.0, 1.25), base_dilation=2,
                   max_dilation=8, activation="relu"),
        LayerEntry(kind=kind, out_channels=classes, kernel=(3, 3),
                   channel_scales=(0.5, 0.75, 1.0, 1.25), base_dilation=2,
                   max_dilation=8, activation="identity"),
        LayerEntry(kind="softmax_loss", normalize=True, lam=0.0005),
    ]
    return NetworkSpec(layers=layers, input_channels=1, mean_depth_mm=1700.0,
                       seed=seed)


for size in (48, 64):
    net = build(make_spec())
    rng = np.random.default_rng(1)
    depth = DepthMap(rng.uniform(800, 2400, (size, size)))
    labels = LabelMap(rng.integers(0, 4, (size, size)))
    # warmup
    net.sample_loss_and_grads(depth, labels)
    t0 = time.perf_counter()
    n = 20
    for _ in range(n):
        net.sample_loss_and_grads(depth, labels)
    dt = (time.perf_counter() - t0) / n
    print(f"{size}x{size}: {dt*1000:.1f} ms per sample fwd+bwd"
          f" -> batch4 x 2000 iters = {dt*4*2000/60:.1f} min")
