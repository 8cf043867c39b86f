"""Pure-numpy MLP kernels, used when the compiled extension is unavailable.

Both backends implement the same contract:

  mlp_forward(params, sizes, act, x)            -> (y, cache)
  mlp_backward(params, sizes, act, x, cache, g) -> (dparams, dx)

``params`` is a flat float64 vector holding, per layer, a row-major weight
matrix (fan_in, fan_out) followed by a bias (fan_out,).  ``sizes`` lists the
layer widths [d_in, h1, ..., d_out].  Hidden layers use the activation given
by ``act`` (ACT_RELU or ACT_SILU); the output layer is linear.  ``mlp_backward``
returns the exact gradient of sum_i <g_i, y_i> with respect to the parameters
and the input rows.
"""

import numpy as np

BACKEND = "numpy"

ACT_RELU = 0
ACT_SILU = 1


def param_count(sizes) -> int:
    return int(sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1)))


def _activate(z: np.ndarray, act: int) -> np.ndarray:
    if act == ACT_RELU:
        return np.maximum(z, 0.0)
    if act == ACT_SILU:
        return z / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation id {act}")


def _activate_grad(z: np.ndarray, act: int) -> np.ndarray:
    if act == ACT_RELU:
        return (z > 0.0).astype(np.float64)
    if act == ACT_SILU:
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    raise ValueError(f"unknown activation id {act}")


def _layer_views(params: np.ndarray, sizes):
    """Yield (W, b) views into the flat parameter vector, layer by layer."""
    off = 0
    for l in range(len(sizes) - 1):
        fi, fo = sizes[l], sizes[l + 1]
        w = params[off : off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = params[off : off + fo]
        off += fo
        yield w, b


def mlp_forward(params, sizes, act, x):
    n_layers = len(sizes) - 1
    h = x
    pre, hidden = [], []
    for l, (w, b) in enumerate(_layer_views(params, sizes)):
        z = h @ w + b
        if l < n_layers - 1:
            h = _activate(z, act)
            pre.append(z)
            hidden.append(h)
        else:
            h = z
    return h, (pre, hidden)


def mlp_backward(params, sizes, act, x, cache, upstream):
    pre, hidden = cache
    n_layers = len(sizes) - 1
    weights = [w for w, _ in _layer_views(params, sizes)]

    dparams = np.empty_like(params)
    offsets = []
    off = 0
    for l in range(n_layers):
        fi, fo = sizes[l], sizes[l + 1]
        offsets.append(off)
        off += (fi + 1) * fo

    g = upstream
    for l in range(n_layers - 1, -1, -1):
        fi, fo = sizes[l], sizes[l + 1]
        h_prev = x if l == 0 else hidden[l - 1]
        o = offsets[l]
        dparams[o : o + fi * fo] = (h_prev.T @ g).ravel()
        dparams[o + fi * fo : o + (fi + 1) * fo] = g.sum(axis=0)
        g = g @ weights[l].T
        if l > 0:
            g = g * _activate_grad(pre[l - 1], act)
    return dparams, g
