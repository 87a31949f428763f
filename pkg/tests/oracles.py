"""Independent numpy reference implementations used as test oracles.

They share only the toy backend's parameter arrays with the package code.
"""

import math

import numpy as np


def toy_patches(backend, image, layer):
    """Toy forward pass on one ``(R, R, 3)`` image with explicit loops over patches."""
    prm = backend.params
    p = backend.patch_size
    r = image.shape[0]
    g = r // p
    out = []
    for row in range(g):
        for col in range(g):
            x = image[row * p:(row + 1) * p, col * p:(col + 1) * p, :].reshape(-1)
            h = prm["patchify"] @ x + prm["bias"]
            for a, b, c, d in prm["blocks"][: 2 * (layer + 1)]:
                h = h + a @ np.tanh(b @ h + c) + d
            out.append(h)
    return np.array(out)


def toy_grey_response(backend, layer):
    """Closed form: on grey every tanh argument is zero, so only the drifts accumulate."""
    prm = backend.params
    k = prm["patchify"].shape[1]
    h = prm["patchify"] @ np.full(k, 0.5) + prm["bias"]
    for _, _, _, d in prm["blocks"][: 2 * (layer + 1)]:
        h = h + d
    return h


def cos(a, b):
    na, nb = math.sqrt(float(np.dot(a, a))), math.sqrt(float(np.dot(b, b)))
    if na * nb <= 1e-12:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


def bilinear_resize(img, size):
    """Half-pixel-centre bilinear resize with edge clamping, ``(r, r, c)`` input."""
    r = img.shape[0]
    scale = r / size
    out = np.zeros((size, size, img.shape[2]))
    for i in range(size):
        for j in range(size):
            y = max((i + 0.5) * scale - 0.5, 0.0)
            x = max((j + 0.5) * scale - 0.5, 0.0)
            y0, x0 = min(int(y), r - 1), min(int(x), r - 1)
            y1, x1 = min(y0 + 1, r - 1), min(x0 + 1, r - 1)
            wy, wx = y - y0, x - x0
            out[i, j] = ((1 - wy) * (1 - wx) * img[y0, x0] + (1 - wy) * wx * img[y0, x1]
                         + wy * (1 - wx) * img[y1, x0] + wy * wx * img[y1, x1])
    return out


def central_difference(f, x, eps=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor * max|n|)``."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * np.abs(n).max())
    return float(np.max(np.abs(a - n) / denom))
