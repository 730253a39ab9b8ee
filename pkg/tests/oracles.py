"""Straight-loop reference implementations, independent of the package code."""
import math

import numpy as np


def conv2d_loop(x, k, b):
    h, w, cin = x.shape
    ks, _, _, cout = k.shape
    r = ks // 2
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = b[o]
                for u in range(ks):
                    for v in range(ks):
                        yy = min(max(i + u - r, 0), h - 1)
                        xx = min(max(j + v - r, 0), w - 1)
                        for c in range(cin):
                            acc += x[yy, xx, c] * k[u, v, c, o]
                out[i, j, o] = acc
    return out


def dense_loop(v, w, b):
    out = []
    for i in range(w.shape[0]):
        acc = b[i]
        for j in range(w.shape[1]):
            acc += w[i, j] * v[j]
        out.append(acc)
    return np.array(out)


def bilinear_loop(f, x, y):
    h, w, _ = f.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * f[y0, x0] + ax * (1 - ay) * f[y0, x1]
            + (1 - ax) * ay * f[y1, x0] + ax * ay * f[y1, x1])


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_loop(img, out_h, out_w):
    """Separable cubic convolution, half-pixel grid, clamped taps, weights
    widened by the scale factor when shrinking (antialiasing)."""
    def resample_axis(data, n_out, axis):
        n_in = data.shape[axis]
        scale = n_out / n_in
        support = 2.0 / scale if scale < 1 else 2.0
        stretch = scale if scale < 1 else 1.0
        out_shape = list(data.shape)
        out_shape[axis] = n_out
        out = np.zeros(out_shape)
        for i in range(n_out):
            center = (i + 0.5) / scale - 0.5
            lo = int(math.floor(center - support)) + 1
            hi = int(math.floor(center + support))
            weights, idxs = [], []
            for j in range(lo, hi + 1):
                wgt = keys_cubic((center - j) * stretch)
                if wgt != 0.0:
                    weights.append(wgt)
                    idxs.append(min(max(j, 0), n_in - 1))
            total = sum(weights)
            for wgt, j in zip(weights, idxs):
                src = np.take(data, j, axis=axis)
                dst = [slice(None)] * data.ndim
                dst[axis] = i
                out[tuple(dst)] += wgt / total * src
        return out

    return resample_axis(resample_axis(img, out_h, 0), out_w, 1)


def relu(x):
    return np.maximum(x, 0.0)


def crm_loop(feat, rate_x, rate_y, s, out_h, out_w, p):
    """Per-output-pixel CRM reference; ``p`` holds float64 arrays."""
    h, w, c = feat.shape
    k = p["experts"].shape[1]
    r = k // 2
    out = np.zeros((out_h, out_w, c))
    weights = np.zeros((out_h, out_w, p["experts"].shape[0]))
    for oy in range(out_h):
        for ox in range(out_w):
            qx, qy = (ox + 0.5) / rate_x, (oy + 0.5) / rate_y
            ix, iy = qx - 0.5, qy - 0.5
            rx, ry = qx - math.floor(qx) - 0.5, qy - math.floor(qy) - 0.5
            center = bilinear_loop(feat, ix, iy)
            v = np.concatenate([[s, rx, ry], center])
            a = relu(dense_loop(v, p["fc1_w"], p["fc1_b"]))
            a = relu(dense_loop(a, p["fc2_w"], p["fc2_b"]))
            delta = np.tanh(dense_loop(a, p["off_w"], p["off_b"]))
            logits = dense_loop(a, p["route_w"], p["route_b"])
            e = np.exp(logits - logits.max())
            wts = e / e.sum()
            weights[oy, ox] = wts
            kern = np.tensordot(wts, p["experts"], axes=1)
            acc = np.zeros(c)
            for u in range(k):
                for vv in range(k):
                    sample = bilinear_loop(feat, ix + delta[0] + (vv - r), iy + delta[1] + (u - r))
                    acc += kern[u, vv] * sample
                    if u == r and vv == r:
                        acc += sample
            out[oy, ox] = acc
    return out, weights


def crm_dict(params):
    return {
        "fc1_w": params.fc1.w, "fc1_b": params.fc1.b,
        "fc2_w": params.fc2.w, "fc2_b": params.fc2.b,
        "off_w": params.offset_head.w, "off_b": params.offset_head.b,
        "route_w": params.routing_head.w, "route_b": params.routing_head.b,
        "experts": params.experts,
    }


def extractor_loop(img, s, ext):
    x = conv2d_loop(img, ext.head.w, ext.head.b)
    for blk in ext.blocks:
        mod = dense_loop(np.array([s]), blk.scale_mod.w, blk.scale_mod.b)
        c = mod.shape[0] // 2
        r = conv2d_loop(relu(conv2d_loop(x, blk.conv1.w, blk.conv1.b)), blk.conv2.w, blk.conv2.b)
        x = x + mod[:c] * r + mod[c:]
    return x


def gaussian(size=11, sigma=1.5):
    g = [[math.exp(-((i - size // 2) ** 2 + (j - size // 2) ** 2) / (2 * sigma ** 2))
          for j in range(size)] for i in range(size)]
    g = np.array(g)
    return g / g.sum()


def ssim_loop(a, b, size=11, sigma=1.5):
    g = gaussian(size, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w, ch = a.shape
    per_channel = []
    for c in range(ch):
        vals = []
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                pa = a[i:i + size, j:j + size, c]
                pb = b[i:i + size, j:j + size, c]
                ma, mb = (g * pa).sum(), (g * pb).sum()
                va = (g * (pa - ma) ** 2).sum()
                vb = (g * (pb - mb) ** 2).sum()
                cov = (g * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def psnr_loop(a, b):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (float(x) - float(y)) ** 2
    mse = total / a.size
    return 10 * math.log10(1.0 / mse)
