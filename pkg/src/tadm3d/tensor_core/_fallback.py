"""Pure numpy implementations of the patch-extraction kernels.

Patch layout is ``(N, Do, Ho, Wo, C, k, k, k)`` flattened to
``(N * Do * Ho * Wo, C * k**3)``: one row per output voxel, so a conv
weight reshaped to ``(Cout, C * k**3)`` applies as ``patches @ W.T``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(xp, k, stride, out_shape):
    N, C = xp.shape[:2]
    Do, Ho, Wo = out_shape
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, :stride * (Do - 1) + 1:stride, :stride * (Ho - 1) + 1:stride,
              :stride * (Wo - 1) + 1:stride]
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(N * Do * Ho * Wo, C * k ** 3)


def col2im3d(patches, x_shape, k, stride, out_shape):
    N, C, Dp, Hp, Wp = x_shape
    Do, Ho, Wo = out_shape
    dp = patches.reshape(N, Do, Ho, Wo, C, k, k, k)
    dx = np.zeros((N, Dp, Hp, Wp, C), dtype=patches.dtype)
    ed, eh, ew = stride * (Do - 1) + 1, stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for a in range(k):
        for b in range(k):
            for c in range(k):
                dx[:, a:a + ed:stride, b:b + eh:stride, c:c + ew:stride] += dp[..., a, b, c]
    return dx.transpose(0, 4, 1, 2, 3)
