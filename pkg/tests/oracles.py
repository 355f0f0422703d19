"""Independent reference computations used by the tests.

Nothing here calls the package's autodiff; every oracle is straight-line
numpy or plain Python loops.
"""
import numpy as np


def central_difference(f, x, h=1e-3, coords=None):
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-6):
    """Coordinate-wise |a-b| / max(|a|, |b|, floor * max|b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(b).max(), np.abs(a).max(), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor * scale)
    return np.abs(a - b) / denom


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for q in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[a, ch, i * stride + u, j * stride + v] * w[q, ch, u, v]
                    out[a, q, i, j] = s + (0.0 if b is None else b[q])
    return out


def two_pass_channel_stats(y):
    """Per-channel mean, second moment, and variance of an NCHW array, two-pass."""
    n, c, h, w = y.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    sq = np.zeros(c)
    for ch in range(c):
        vals = [float(v) for v in y[:, ch].reshape(-1)]
        m = sum(vals) / len(vals)
        mean[ch] = m
        var[ch] = sum((v - m) ** 2 for v in vals) / len(vals)
        sq[ch] = sum(v * v for v in vals) / len(vals)
    return mean, sq, var


def bns_scalar(stats, targets):
    """Sum over layers/channels of squared mean and variance gaps, plain loops."""
    total = 0.0
    for (m, v), (tm, tv) in zip(stats, targets):
        for i in range(len(m)):
            total += (float(m[i]) - float(tm[i])) ** 2 + (float(v[i]) - float(tv[i])) ** 2
    return total
