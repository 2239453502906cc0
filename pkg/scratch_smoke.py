"""Throwaway smoke test of damconv against naive loops + FD."""
import numpy as np
from damnet.damconv import DamConvLayer, MultiscaleParams, compute_sparsity
from damnet.tensor import DepthMap, FeatureMap, WeightTensor


def naive_forward(x, w, b, dil, depth_diff=False, relu=True):
    co, ci, kh, kw = w.shape
    _, h, wd = x.shape
    out = np.zeros((co, h, wd))
    for t in range(co):
        for m in range(h):
            for n in range(wd):
                acc = b[t]
                for r in range(ci):
                    s = dil[r, m, n]
                    for iu, u in enumerate(range(-(kh // 2), kh // 2 + 1)):
                        for iv, v in enumerate(range(-(kw // 2), kw // 2 + 1)):
                            mm, nn = m + s * u, n + s * v
                            if 0 <= mm < h and 0 <= nn < wd:
                                tap = x[r, mm, nn] - (x[r, m, n] if depth_diff else 0.0)
                            else:
                                tap = 0.0
                            acc += w[t, r, iu, iv] * tap
                out[t, m, n] = acc
    return np.maximum(out, 0) if relu else out


rng = np.random.default_rng(0)
for trial in range(10):
    ci, co, h, wd = 3, 2, 7, 6
    depth_diff = trial % 2 == 1
    x = rng.uniform(-1, 1, (ci, h, wd))
    w = rng.uniform(-0.5, 0.5, (co, ci, 3, 3))
    b = rng.uniform(-0.2, 0.2, co)
    depth = DepthMap(rng.choice([400.0, 800.0, 1600.0], size=(h, wd)))
    params = MultiscaleParams(channel_scales=rng.choice([0.5, 1.0, 1.5], ci),
                              mean_depth_mm=1000.0, max_dilation=4)
    layer = DamConvLayer(WeightTensor(w.copy()), b.copy(), params=params,
                         depth_diff=depth_diff, activation="relu")
    out = layer.forward(FeatureMap(x), depth)
    dil = compute_sparsity(params, depth).dilations
    ref = naive_forward(x, w, b, dil, depth_diff=depth_diff)
    err = np.max(np.abs(out.values - ref))
    assert err < 1e-12, (trial, err)
print("forward matches naive:", "OK")

# FD gradients through a linear functional of the relu output
for trial in range(6):
    ci, co, h, wd = 2, 2, 6, 5
    depth_diff = trial % 2 == 1
    while True:
        x = rng.uniform(-1, 1, (ci, h, wd))
        w = rng.uniform(-0.6, 0.6, (co, ci, 3, 3))
        b = rng.uniform(-0.2, 0.2, co)
        depth = DepthMap(rng.choice([500.0, 1000.0], size=(h, wd)))
        params = MultiscaleParams(channel_scales=np.array([1.0, 2.0]),
                                  mean_depth_mm=1000.0, max_dilation=4)
        layer = DamConvLayer(WeightTensor(w.copy()), b.copy(), params=params,
                             depth_diff=depth_diff, activation="relu")
        out = layer.forward(FeatureMap(x), depth)
        if np.min(np.abs(layer._cache["pre"])) > 1e-3:
            break
    g = rng.uniform(-1, 1, out.values.shape)

    def loss(xa=None, wa=None, ba=None):
        l2 = DamConvLayer(WeightTensor(w if wa is None else wa),
                          b if ba is None else ba, params=params,
                          depth_diff=depth_diff, activation="relu")
        o = l2.forward(FeatureMap(x if xa is None else xa), depth, cache=False)
        return float(np.sum(o.values * g))

    grad_in, grad_w, grad_b = layer.backward(FeatureMap(g), lam=0.0)
    eps = 1e-5
    worst = 0.0
    for arr, ana, kw_name in ((x, grad_in.values, "xa"), (w, grad_w, "wa"), (b, grad_b, "ba")):
        fd = np.empty_like(arr)
        flat, fdf = arr.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = loss(**{kw_name: arr})
            flat[i] = keep - eps
            lo = loss(**{kw_name: arr})
            flat[i] = keep
            fdf[i] = (hi - lo) / (2 * eps)
        err = np.max(np.abs(fd - ana) / np.maximum(1e-6, np.maximum(np.abs(fd), np.abs(ana))))
        worst = max(worst, err)
    assert worst < 1e-6, (trial, depth_diff, worst)
    print(f"trial {trial} (diff={depth_diff}): worst rel err {worst:.2e}")
print("gradients match FD: OK")
