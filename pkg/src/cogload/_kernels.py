"""Numba micro-kernels for the memory-bound inner loops of the autodiff ops.

Everything here has a numpy fallback of identical semantics; numba only
accelerates layout shuffles and fused elementwise passes. Kernels are pure
functions of their arguments, so caching and parallel execution keep results
deterministic.
"""

from __future__ import annotations

import numpy as np

try:
    import numba as _nb

    # The default TBB layer warns on older TBB builds; workqueue is always safe.
    _nb.config.THREADING_LAYER = "workqueue"
    _njit = _nb.njit(parallel=True, fastmath=False, cache=True)
    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is available in CI
    _nb = None
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @_njit
    def _permute_fmajor(xs, out):
        # xs [N, C, NB, F] -> out [F, N, NB, C]; tiled over (c, f) so both
        # sides of the transpose stay within cache lines.
        n, c, nb, f = xs.shape
        tile = 16
        nf_tiles = (f + tile - 1) // tile
        for ft in _nb.prange(nf_tiles):
            f0 = ft * tile
            f1 = min(f0 + tile, f)
            for ni in range(n):
                for bi in range(nb):
                    for c0 in range(0, c, tile):
                        c1 = min(c0 + tile, c)
                        for ci in range(c0, c1):
                            for fi in range(f0, f1):
                                out[fi, ni, bi, ci] = xs[ni, ci, bi, fi]

    @_njit
    def _relu_fwd_flat(x, out, mask):
        for i in _nb.prange(x.size):
            v = x[i]
            keep = v > 0.0
            out[i] = v if keep else 0.0
            mask[i] = keep

    @_njit
    def _permute_small(ws, out):
        # ws [A, B, F] -> out [F, B, A]
        a, b, f = ws.shape
        for fi in _nb.prange(f):
            for bi in range(b):
                for ai in range(a):
                    out[fi, bi, ai] = ws[ai, bi, fi]

    @_njit
    def _bn_stats(x, s1, s2):
        # per-channel sum and sum-of-squares with float64 accumulators
        n, c, l = x.shape
        for ci in _nb.prange(c):
            acc1 = 0.0
            acc2 = 0.0
            for ni in range(n):
                for li in range(l):
                    v = np.float64(x[ni, ci, li])
                    acc1 += v
                    acc2 += v * v
            s1[ci] = acc1
            s2[ci] = acc2

    @_njit
    def _bn_grad_stats(g, xhat, gsum, gxsum):
        n, c, l = g.shape
        for ci in _nb.prange(c):
            acc1 = 0.0
            acc2 = 0.0
            for ni in range(n):
                for li in range(l):
                    gv = np.float64(g[ni, ci, li])
                    acc1 += gv
                    acc2 += gv * np.float64(xhat[ni, ci, li])
            gsum[ci] = acc1
            gxsum[ci] = acc2

    @_njit
    def _permute_block(zm, out):
        # zm [F, N, NB, C] -> out [N, C, NB, F], tiled over (f, c)
        f, n, nb, c = zm.shape
        tile = 16
        for ni in _nb.prange(n):
            for bi in range(nb):
                for f0 in range(0, f, tile):
                    f1 = min(f0 + tile, f)
                    for c0 in range(0, c, tile):
                        c1 = min(c0 + tile, c)
                        for ci in range(c0, c1):
                            for fi in range(f0, f1):
                                out[ni, ci, bi, fi] = zm[fi, ni, bi, ci]

    @_njit
    def _scale_shift_relu(x, scale, shift, out, mask):
        n, c, l = x.shape
        for ni in _nb.prange(n):
            for ci in range(c):
                s = scale[ci]
                t = shift[ci]
                for li in range(l):
                    v = x[ni, ci, li] * s + t
                    keep = v > 0.0
                    out[ni, ci, li] = v if keep else 0.0
                    mask[ni, ci, li] = keep

    @_njit
    def _scale_shift(x, scale, shift, out):
        n, c, l = x.shape
        for ni in _nb.prange(n):
            for ci in range(c):
                s = scale[ci]
                t = shift[ci]
                for li in range(l):
                    out[ni, ci, li] = x[ni, ci, li] * s + t

    @_njit
    def _bn_backward_dx(g, xhat, scale, gsum, gxsum, inv_count, out):
        # dx = scale[c] * (g - gsum[c]/count - xhat * gxsum[c]/count)
        n, c, l = g.shape
        for ni in _nb.prange(n):
            for ci in range(c):
                s = scale[ci]
                a = gsum[ci] * inv_count
                b = gxsum[ci] * inv_count
                for li in range(l):
                    out[ni, ci, li] = s * (g[ni, ci, li] - a - xhat[ni, ci, li] * b)

    @_njit
    def _masked_scale(g, mask, out):
        flat_g = g.reshape(-1)
        flat_m = mask.reshape(-1)
        flat_o = out.reshape(-1)
        for i in _nb.prange(flat_g.size):
            flat_o[i] = flat_g[i] if flat_m[i] else 0.0

    @_njit
    def _add_into_flat(acc, src):
        for i in _nb.prange(acc.size):
            acc[i] += src[i]

    @_njit
    def _maxpool1d_fwd(x, y, first):
        n, c, l2 = y.shape
        for ni in _nb.prange(n):
            for ci in range(c):
                for li in range(l2):
                    a = x[ni, ci, 2 * li]
                    b = x[ni, ci, 2 * li + 1]
                    take_a = a >= b
                    y[ni, ci, li] = a if take_a else b
                    first[ni, ci, li] = take_a

    @_njit
    def _maxpool1d_bwd(g, first, dx):
        n, c, l2 = g.shape
        for ni in _nb.prange(n):
            for ci in range(c):
                for li in range(l2):
                    if first[ni, ci, li]:
                        dx[ni, ci, 2 * li] = g[ni, ci, li]
                    else:
                        dx[ni, ci, 2 * li + 1] = g[ni, ci, li]

    @_njit
    def _maxpool2d_fwd(x, y, arg):
        n, c, h2, w2 = y.shape
        for ni in _nb.prange(n):
            for ci in range(c):
                for hi in range(h2):
                    for wi in range(w2):
                        best = x[ni, ci, 2 * hi, 2 * wi]
                        bidx = 0
                        v = x[ni, ci, 2 * hi, 2 * wi + 1]
                        if v > best:
                            best, bidx = v, 1
                        v = x[ni, ci, 2 * hi + 1, 2 * wi]
                        if v > best:
                            best, bidx = v, 2
                        v = x[ni, ci, 2 * hi + 1, 2 * wi + 1]
                        if v > best:
                            best, bidx = v, 3
                        y[ni, ci, hi, wi] = best
                        arg[ni, ci, hi, wi] = bidx

    @_njit
    def _maxpool2d_bwd(g, arg, dx):
        n, c, h2, w2 = g.shape
        for ni in _nb.prange(n):
            for ci in range(c):
                for hi in range(h2):
                    for wi in range(w2):
                        a = arg[ni, ci, hi, wi]
                        dx[ni, ci, 2 * hi + a // 2, 2 * wi + a % 2] = g[ni, ci, hi, wi]


def permute_fmajor(xs: np.ndarray) -> np.ndarray:
    """[N, C, NB, F] spectra -> contiguous [F, N*NB, C] for batched GEMMs."""
    n, c, nb, f = xs.shape
    if HAVE_NUMBA:
        out = np.empty((f, n, nb, c), dtype=xs.dtype)
        _permute_fmajor(xs, out)
        return out.reshape(f, n * nb, c)
    return np.ascontiguousarray(xs.transpose(3, 0, 2, 1)).reshape(f, n * nb, c)


def relu_fwd(x: np.ndarray):
    """Elementwise max(x, 0) plus the keep mask, in one pass."""
    if HAVE_NUMBA and x.flags.c_contiguous:
        out = np.empty_like(x)
        mask = np.empty(x.shape, dtype=np.bool_)
        _relu_fwd_flat(x.reshape(-1), out.reshape(-1), mask.reshape(-1))
        return out, mask
    mask = x > 0
    return np.where(mask, x, 0), mask


def permute_small(ws: np.ndarray) -> np.ndarray:
    """[A, B, F] -> contiguous [F, B, A] (kernel spectra reorder)."""
    a, b, f = ws.shape
    if HAVE_NUMBA:
        out = np.empty((f, b, a), dtype=ws.dtype)
        _permute_small(ws, out)
        return out
    return np.ascontiguousarray(ws.transpose(2, 1, 0))


def bn_stats(x3: np.ndarray):
    """Per-channel (sum, sum of squares) with 64-bit accumulation."""
    c = x3.shape[1]
    if HAVE_NUMBA:
        s1 = np.empty(c, dtype=np.float64)
        s2 = np.empty(c, dtype=np.float64)
        _bn_stats(x3, s1, s2)
        return s1, s2
    return (
        x3.sum(axis=(0, 2), dtype=np.float64),
        np.einsum("ncl,ncl->c", x3, x3, dtype=np.float64),
    )


def bn_grad_stats(g3: np.ndarray, xhat: np.ndarray):
    """Per-channel (sum g, sum g*xhat) with 64-bit accumulation."""
    c = g3.shape[1]
    if HAVE_NUMBA:
        gsum = np.empty(c, dtype=np.float64)
        gxsum = np.empty(c, dtype=np.float64)
        _bn_grad_stats(g3, xhat, gsum, gxsum)
        return gsum, gxsum
    return (
        g3.sum(axis=(0, 2), dtype=np.float64),
        np.einsum("ncl,ncl->c", g3, xhat, dtype=np.float64),
    )


def permute_block(zm: np.ndarray, n: int, nb: int) -> np.ndarray:
    """[F, N*NB, C] GEMM results -> contiguous [N, C, NB, F] for the irfft."""
    f, m, c = zm.shape
    zv = zm.reshape(f, n, nb, c)
    if HAVE_NUMBA:
        out = np.empty((n, c, nb, f), dtype=zm.dtype)
        _permute_block(zv, out)
        return out
    return np.ascontiguousarray(zv.transpose(1, 3, 2, 0))


def scale_shift_relu(x3: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    """Fused y = relu(x * scale[c] + shift[c]); returns (y, keep_mask)."""
    if HAVE_NUMBA:
        out = np.empty_like(x3)
        mask = np.empty(x3.shape, dtype=np.bool_)
        _scale_shift_relu(x3, scale, shift, out, mask)
        return out, mask
    y = x3 * scale[None, :, None] + shift[None, :, None]
    mask = y > 0
    return np.where(mask, y, 0), mask


def scale_shift(x3: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        out = np.empty_like(x3)
        _scale_shift(x3, scale, shift, out)
        return out
    return x3 * scale[None, :, None] + shift[None, :, None]


def bn_backward_dx(g3, xhat, scale, gsum, gxsum, count):
    if HAVE_NUMBA:
        out = np.empty_like(g3)
        _bn_backward_dx(
            g3, xhat, scale.astype(g3.dtype), gsum.astype(g3.dtype),
            gxsum.astype(g3.dtype), g3.dtype.type(1.0 / count), out,
        )
        return out
    return scale[None, :, None] * (
        g3 - (gsum / count)[None, :, None] - xhat * (gxsum / count)[None, :, None]
    )


def masked_scale(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """g where mask else 0 (relu backward)."""
    if HAVE_NUMBA and g.flags.c_contiguous and mask.flags.c_contiguous:
        out = np.empty_like(g)
        _masked_scale(g, mask, out)
        return out
    return np.where(mask, g, 0)


def add_into(acc: np.ndarray, src: np.ndarray) -> None:
    """acc += src for same-shape contiguous arrays."""
    if HAVE_NUMBA and acc.flags.c_contiguous and src.flags.c_contiguous:
        _add_into_flat(acc.reshape(-1), src.reshape(-1))
    else:
        acc += src


def maxpool1d_fwd(x: np.ndarray):
    n, c, length = x.shape
    l2 = length // 2
    if HAVE_NUMBA:
        y = np.empty((n, c, l2), dtype=x.dtype)
        first = np.empty((n, c, l2), dtype=np.bool_)
        _maxpool1d_fwd(x, y, first)
        return y, first
    a = x[:, :, 0:2 * l2:2]
    b = x[:, :, 1:2 * l2:2]
    first = a >= b
    return np.where(first, a, b), first


def maxpool1d_bwd(g: np.ndarray, first: np.ndarray, length: int) -> np.ndarray:
    n, c, l2 = g.shape
    dx = np.zeros((n, c, length), dtype=g.dtype)
    if HAVE_NUMBA:
        _maxpool1d_bwd(g, first, dx)
        return dx
    dx[:, :, 0:2 * l2:2] = g * first
    dx[:, :, 1:2 * l2:2] = g * ~first
    return dx


def maxpool2d_fwd(x: np.ndarray):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if HAVE_NUMBA:
        y = np.empty((n, c, h2, w2), dtype=x.dtype)
        arg = np.empty((n, c, h2, w2), dtype=np.int8)
        _maxpool2d_fwd(x, y, arg)
        return y, arg
    win = (
        x[:, :, : h2 * 2, : w2 * 2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    arg = win.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def maxpool2d_bwd(g: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, h2, w2 = g.shape
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    if HAVE_NUMBA:
        _maxpool2d_bwd(g, arg, dx)
        return dx
    onehot = (np.arange(4, dtype=np.int8) == arg[..., None]).astype(g.dtype) * g[..., None]
    dx[:, :, : h2 * 2, : w2 * 2] = (
        onehot.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2 * 2, w2 * 2)
    )
    return dx
