"""Hand-written layers for the micro codec (NHWC layout, 3x3 'same' convolutions).

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the cache. Arrays keep the dtype they arrive in.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, weight, bias):
    """Zero-padded 3x3 convolution.

    ``x`` is (B, H, W, Cin), ``weight`` is (3, 3, Cin, Cout), ``bias`` is (Cout,).
    """
    b, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (B, H, W, Cin, 3, 3) -> (B*H*W, 3*3*Cin) ordered (ky, kx, cin)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, 9 * cin)
    out = cols @ weight.reshape(9 * cin, -1) + bias
    return out.reshape(b, h, w, -1), (cols, x.shape, weight)


def conv3x3_backward(dout, cache, need_dx=True):
    cols, xshape, weight = cache
    cout = weight.shape[-1]
    d2 = dout.reshape(-1, cout)
    dweight = (cols.T @ d2).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    # input gradient = correlation of dout with the flipped, in/out-swapped kernel
    flipped = np.ascontiguousarray(weight[::-1, ::-1].transpose(0, 1, 3, 2))
    dx, _ = conv3x3_forward(dout, flipped, np.zeros(xshape[-1], dtype=dout.dtype))
    return dx, dweight, dbias


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
