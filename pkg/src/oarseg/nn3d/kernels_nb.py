"""Numba implementations of the 3x3x3 convolution kernels.

The inner loops run over the contiguous z axis with the three z-taps
unrolled, which LLVM vectorizes well.  Parallelism is over output channels
only; each accumulator is owned by exactly one thread and summed in a fixed
order, so results are bitwise reproducible for any thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def conv3_fwd(xpad, k, b, out):
    # xpad: (n, ci, X+2, Y+2, Z+2) zero-padded; k: (co, ci, 3, 3, 3); out: (n, co, X, Y, Z)
    n, co, X, Y, Z = out.shape
    ci = xpad.shape[1]
    for oc in prange(co):
        acc = np.empty(Z, dtype=out.dtype)
        for ni in range(n):
            for ix in range(X):
                for iy in range(Y):
                    for iz in range(Z):
                        acc[iz] = b[oc]
                    for ic in range(ci):
                        for kx in range(3):
                            for ky in range(3):
                                xr = xpad[ni, ic, ix + kx, iy + ky]
                                w0 = k[oc, ic, kx, ky, 0]
                                w1 = k[oc, ic, kx, ky, 1]
                                w2 = k[oc, ic, kx, ky, 2]
                                for iz in range(Z):
                                    acc[iz] += w0 * xr[iz] + w1 * xr[iz + 1] + w2 * xr[iz + 2]
                    for iz in range(Z):
                        out[ni, oc, ix, iy, iz] = acc[iz]


@njit(cache=True, parallel=True)
def conv3_grad_k(xpad, gy, gk, gb):
    # gk: (co, ci, 3, 3, 3) and gb: (co,) are written, not accumulated into.
    # z-length vector accumulators keep the inner loop dependency-free; the
    # scalar reduction happens once per kernel tap.
    n, co, X, Y, Z = gy.shape
    ci = xpad.shape[1]
    for oc in prange(co):
        v0 = np.empty(Z, dtype=gy.dtype)
        v1 = np.empty(Z, dtype=gy.dtype)
        v2 = np.empty(Z, dtype=gy.dtype)
        sb = 0.0
        for ni in range(n):
            for ix in range(X):
                for iy in range(Y):
                    gr = gy[ni, oc, ix, iy]
                    for iz in range(Z):
                        sb += gr[iz]
        gb[oc] = sb
        for ic in range(ci):
            for kx in range(3):
                for ky in range(3):
                    for iz in range(Z):
                        v0[iz] = 0.0
                        v1[iz] = 0.0
                        v2[iz] = 0.0
                    for ni in range(n):
                        for ix in range(X):
                            for iy in range(Y):
                                gr = gy[ni, oc, ix, iy]
                                xr = xpad[ni, ic, ix + kx, iy + ky]
                                for iz in range(Z):
                                    g = gr[iz]
                                    v0[iz] += g * xr[iz]
                                    v1[iz] += g * xr[iz + 1]
                                    v2[iz] += g * xr[iz + 2]
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    for iz in range(Z):
                        a0 += v0[iz]
                        a1 += v1[iz]
                        a2 += v2[iz]
                    gk[oc, ic, kx, ky, 0] = a0
                    gk[oc, ic, kx, ky, 1] = a1
                    gk[oc, ic, kx, ky, 2] = a2
