"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Covers exactly the operations the dual-stream network needs: dense layers,
valid 1-D and same-padded 2-D cross-correlation, batch normalisation, 2x max
pooling, the usual activations, inverted dropout, and softmax cross-entropy.

Conventions (test-pinned):
  * storage follows the engine dtype (float32 by default; a float64 mode
    exists for gradient checking), explicit reductions accumulate in float64;
  * convolution means cross-correlation;
  * relu'(0) = 0 and max-pool ties route the gradient to the first index;
  * calling backward twice without resetting grads accumulates additively.

The long valid 1-D correlations are evaluated in the frequency domain with an
overlap-save block scheme, which keeps the per-frequency contraction matrices
large enough for BLAS to be efficient.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import _kernels as kern

_DTYPE = np.float32
_GRAD_ENABLED = True
_FFT_WORKERS = 2

CHECKPOINT_MAGIC = "COGLOAD-CKPT 1"


def set_fft_workers(n: int) -> None:
    """Bound the FFT thread count (1 when folds run as parallel processes)."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("engine dtype must be float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine dtype (float64 for gradient checks)."""
    global _DTYPE
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (evaluation mode forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, delta: np.ndarray, own: bool = False) -> None:
        """Add delta to the gradient. `own=True` lets a freshly allocated,
        correctly typed delta be adopted without a defensive copy."""
        if self.grad is None:
            if own and isinstance(delta, np.ndarray) and delta.dtype == self.data.dtype:
                self.grad = delta
            else:
                self.grad = np.array(delta, dtype=self.data.dtype, copy=True)
        else:
            self.grad += delta

    def backward(self) -> None:
        """Reverse sweep from a scalar output.

        Leaf gradients accumulate additively across calls; interior node
        gradients are scratch state and reset at the start of each sweep.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node._parents:
                node.grad = None
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"


def tensor(data) -> Tensor:
    return Tensor(data)


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum64(a: np.ndarray, axis) -> np.ndarray:
    """Reduction with 64-bit accumulation, cast back to the storage dtype."""
    return a.sum(axis=axis, dtype=np.float64).astype(a.dtype)


# --- elementwise and shape ops ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a.accumulate(g * s)

    return _make(a.data * s, (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def backward(g):
        a.accumulate(g)

    return _make(a.data + float(s), (a,), backward)


def one_minus(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(-g)

    return _make(1.0 - a.data, (a,), backward)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    split = a.data.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        a.accumulate(ga)
        b.accumulate(gb)

    return _make(np.concatenate([a.data, b.data], axis=axis), (a, b), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(_sum64(a.data, None).reshape(()), (a,), backward)


def relu(x: Tensor) -> Tensor:
    y, mask = kern.relu_fwd(x.data)  # relu'(0) = 0

    def backward(g):
        x.accumulate(kern.masked_scale(np.ascontiguousarray(g), mask), own=True)

    return _make(y, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x.accumulate(g * y * (1.0 - y))

    return _make(y, (x,), backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with prob p in training, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        def backward(g):
            x.accumulate(g)

        return _make(x.data, (x,), backward)
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        x.accumulate(g * keep)

    return _make(x.data * keep, (x,), backward)


# --- dense layer ---------------------------------------------------------------


def fc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x [N, in], w [in, out], b [out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"fc shape mismatch: x {x.shape}, w {w.shape}")
    if b.data.shape != (w.shape[1],):
        raise ValueError(f"fc bias must be ({w.shape[1]},), got {b.shape}")

    def backward(g):
        x.accumulate(g @ w.data.T)
        w.accumulate(x.data.T @ g)
        b.accumulate(_sum64(g, 0))

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


# --- 1-D valid cross-correlation (overlap-save block FFT) ----------------------


def _pick_block(l_out: int, k: int) -> int:
    # Target ~6 blocks so the per-frequency GEMMs get a large m dimension.
    return sfft.next_fast_len(max(2 * k, -(-l_out // 6) + k - 1))


def _pack_blocks(x: np.ndarray, block: int, step: int, nb: int, pad: int = 0) -> np.ndarray:
    """Copy overlapping length-`block` windows (stride `step`) of the last axis
    into a fresh axis, zero-filling `pad` virtual zeros on each side of x."""
    length = x.shape[-1]
    out = np.empty(x.shape[:-1] + (nb, block), dtype=x.dtype)
    for i in range(nb):
        s = i * step - pad
        src_lo, src_hi = max(0, s), min(length, s + block)
        dst_lo, dst_hi = src_lo - s, src_hi - s
        if dst_lo > 0:
            out[..., i, :dst_lo] = 0
        if src_lo < src_hi:
            out[..., i, dst_lo:dst_hi] = x[..., src_lo:src_hi]
        if dst_hi < block:
            out[..., i, dst_hi:] = 0
    return out


def _spectra_fmajor(blocks: np.ndarray) -> np.ndarray:
    """rfft the packed blocks and reorder to [F, N*nb, C] for batched GEMMs."""
    s = sfft.rfft(blocks, axis=-1, workers=_FFT_WORKERS)
    return kern.permute_fmajor(s)


def _corr1d_fft_apply(
    data: np.ndarray, wm: np.ndarray, block: int, step: int, pad: int, l_out: int
) -> tuple[np.ndarray, np.ndarray]:
    """Overlap-save valid correlation given f-major kernel spectra [F, C, C'].

    Returns (y [N, C', l_out], input spectra [F, N*nb, C] for reuse).
    """
    n = data.shape[0]
    nb = -(-l_out // step)
    xm = _spectra_fmajor(_pack_blocks(data, block, step, nb, pad=pad))
    co = wm.shape[2]
    zm = xm @ wm  # [F, N*nb, C']
    zb = kern.permute_block(zm, n, nb)
    yb = sfft.irfft(zb, n=block, axis=-1, workers=_FFT_WORKERS)
    y = np.empty((n, co, l_out), dtype=data.dtype)
    for i in range(nb):
        s = i * step
        take = min(step, l_out - s)
        y[:, :, s:s + take] = yb[:, :, i, :take]
    return y, xm


def _corr1d_fft_wgrad(
    xm: np.ndarray, g: np.ndarray, k: int, block: int, step: int
) -> np.ndarray:
    """dL/dw for the valid correlation, from cached input spectra.

    Needs conj(rfft(g blocks)); instead of a conjugation pass over the large
    spectra, the blocks are packed circularly time-reversed, which conjugates
    the transform of real data for free. The first k time samples of the
    result are recovered with a small DFT-matrix GEMM rather than a full
    irfft over the block length.
    """
    n, co, l_out = g.shape
    nb = -(-l_out // step)
    gb = np.zeros((n, co, nb, block), dtype=g.dtype)
    for i in range(nb):
        s = i * step
        take = min(step, l_out - s)
        gb[:, :, i, 0] = g[:, :, s]
        if take > 1:
            gb[:, :, i, block - take + 1:] = g[:, :, s + 1:s + take][:, :, ::-1]
    gs = sfft.rfft(gb, axis=-1, workers=_FFT_WORKERS)
    gm = kern.permute_fmajor(gs)
    zm = xm.transpose(0, 2, 1) @ gm  # [F, Ci, Co]
    nf, ci, _ = zm.shape
    cdtype = zm.dtype
    coef = np.full(nf, 2.0 / block)
    coef[0] = 1.0 / block
    if block % 2 == 0:
        coef[-1] = 1.0 / block
    f_idx = np.arange(nf)[:, None]
    dft = (coef[:, None] * np.exp(2j * np.pi * f_idx * np.arange(k)[None, :] / block)).astype(cdtype)
    dw_t = zm.reshape(nf, ci * co).T @ dft  # [Ci*Co, K]
    return np.ascontiguousarray(dw_t.real.reshape(ci, co, k).transpose(1, 0, 2))


def _corr1d_shift(x: np.ndarray, wp: np.ndarray) -> np.ndarray:
    """Valid cross-correlation as K shifted batched GEMMs (small inputs)."""
    k, co, ci = wp.shape
    l_out = x.shape[2] - k + 1
    y = np.matmul(wp[0], x[:, :, :l_out])
    tmp = np.empty_like(y)
    for j in range(1, k):
        np.matmul(wp[j], x[:, :, j:j + l_out], out=tmp)
        y += tmp
    return y


def _corr1d_shift_wgrad(x: np.ndarray, w: np.ndarray, g: np.ndarray) -> np.ndarray:
    l_out = g.shape[2]
    xt = np.ascontiguousarray(x.transpose(0, 2, 1))  # [N, L, Ci]
    dw = np.empty_like(w)
    for j in range(w.shape[2]):
        dw[:, :, j] = np.matmul(g, xt[:, j:j + l_out, :]).sum(axis=0, dtype=np.float64)
    return dw


def _corr1d_shift_xgrad(wp: np.ndarray, g: np.ndarray, length: int) -> np.ndarray:
    k, co, ci = wp.shape
    n, _, l_out = g.shape
    dx = np.zeros((n, ci, length), dtype=g.dtype)
    tmp = np.empty((n, ci, l_out), dtype=g.dtype)
    for j in range(k):
        np.matmul(np.ascontiguousarray(wp[j].T), g, out=tmp)
        dx[:, :, j:j + l_out] += tmp
    return dx


def conv1d(x: Tensor, k: Tensor) -> Tensor:
    """Valid stride-1 cross-correlation: x [N, Ci, L], k [Co, Ci, K]."""
    if x.data.ndim != 3 or k.data.ndim != 3:
        raise ValueError(f"conv1d expects 3-D input and kernel, got {x.shape}, {k.shape}")
    n, ci, length = x.shape
    co, ci_w, ksize = k.shape
    if ci != ci_w:
        raise ValueError(f"channel mismatch: input {ci}, kernel {ci_w}")
    if length < ksize:
        raise ValueError(f"input length {length} shorter than kernel {ksize}")
    l_out = length - ksize + 1
    fft_path = length >= 256
    if fft_path:
        # One block layout serves the forward pass and (via a spectral phase
        # shift of the same kernel transform) the input-gradient pass. The
        # short kernels are transformed with a small DFT-matrix GEMM, which
        # beats padding them out to the block length.
        block = _pick_block(length, ksize)
        step = block - ksize + 1
        nf = block // 2 + 1
        cdtype = np.complex64 if x.data.dtype == np.float32 else np.complex128
        dft = np.exp(
            -2j * np.pi * np.arange(ksize)[:, None] * np.arange(nf)[None, :] / block
        ).astype(cdtype)
        ws = (k.data.reshape(co * ci, ksize) @ dft).reshape(co, ci, nf)  # [Co, Ci, F]
        wm = kern.permute_small(np.conj(ws))  # [F, Ci, Co]
        y, xm = _corr1d_fft_apply(x.data, wm, block, step, 0, l_out)
    else:
        wp = np.ascontiguousarray(k.data.transpose(2, 0, 1))  # [K, Co, Ci]
        y = _corr1d_shift(x.data, wp)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            if fft_path:
                # dx is the full convolution of g with the flipped kernel: a
                # valid correlation of the (K-1)-padded g against a kernel
                # whose spectra are conj(ws) * phase, reusing ws.
                phase = np.exp(2j * np.pi * np.arange(nf) * (ksize - 1) / block).astype(cdtype)
                wsx = np.multiply(ws.transpose(1, 0, 2), phase, order="C")
                wm_dx = kern.permute_small(wsx)  # [F, Co, Ci]
                dx, _ = _corr1d_fft_apply(g, wm_dx, block, step, ksize - 1, length)
            else:
                dx = _corr1d_shift_xgrad(wp, g, length)
            x.accumulate(dx, own=True)
        if fft_path:
            k.accumulate(_corr1d_fft_wgrad(xm, g, ksize, block, step), own=True)
        else:
            k.accumulate(_corr1d_shift_wgrad(x.data, k.data, g), own=True)

    return _make(y, (x, k), backward)


# --- 2-D same-padded cross-correlation -------------------------------------------
#
# The padded input is flattened over (H, W+2P); each of the K*K kernel taps is
# then one shifted batched GEMM over contiguous views. Row-wrap terms only
# touch the padded columns, which are sliced away from the output.


def _conv2d_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (y [N, Co, H, W], padded input for the weight-gradient pass).

    Each kernel tap is one full-range batched GEMM over a shifted flat view
    of the padded input (one spare row above plus a small tail keep every
    shift inside the buffer). Tap garbage only ever lands in the padding
    columns, which the final slice discards.
    """
    n, ci, h, wid = x.shape
    co, _, kh, kw = w.shape
    p = kh // 2
    wp_cols = wid + 2 * p
    rows = h + 2 * p + 1
    buf = np.zeros((n, ci, rows * wp_cols + p), dtype=x.dtype)
    xp = buf[:, :, : rows * wp_cols].reshape(n, ci, rows, wp_cols)
    xp[:, :, 1 + p:1 + p + h, p:p + wid] = x
    flat = h * wp_cols
    ypad = np.zeros((n, co, flat), dtype=x.dtype)
    tmp = np.empty((n, co, flat), dtype=x.dtype)
    for dy in range(kh):
        for dk in range(kw):
            off = (1 + dy) * wp_cols + (dk - p)
            wmat = np.ascontiguousarray(w[:, :, dy, dk])
            np.matmul(wmat, buf[:, :, off:off + flat], out=tmp)
            kern.add_into(ypad, tmp)
    y = np.ascontiguousarray(ypad.reshape(n, co, h, wp_cols)[:, :, :, p:p + wid])
    return y, xp


def _conv2d_wgrad(xp: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # xp carries one spare top row (see _conv2d_same).
    n, co, h, wid = g.shape
    ci = xp.shape[1]
    p = kh // 2
    wp_cols = wid + 2 * p
    flat = h * wp_cols
    gpad = np.zeros((n, co, h, wp_cols), dtype=g.dtype)
    gpad[:, :, :, p:p + wid] = g
    gflat = gpad.reshape(n, co, flat)
    dw = np.empty((co, ci, kh, kw), dtype=g.dtype)
    for dy in range(kh):
        slab = xp[:, :, 1 + dy:1 + dy + h, :].reshape(n, ci, flat)
        for dk in range(kw):
            s = dk - p
            lo, hi = max(0, -s), flat - max(0, s)
            prod = np.matmul(gflat[:, :, lo:hi], slab[:, :, lo + s:hi + s].swapaxes(1, 2))
            dw[:, :, dy, dk] = prod.sum(axis=0, dtype=np.float64)
    return dw


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation: x [N, Ci, H, W], k [Co, Ci, kh, kw]."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {k.shape}")
    n, ci, h, wid = x.shape
    co, ci_w, kh, kw = k.shape
    if ci != ci_w:
        raise ValueError(f"channel mismatch: input {ci}, kernel {ci_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("same-padded conv2d needs odd kernel sizes")
    y, xp = _conv2d_same(x.data, k.data)

    def backward(g):
        g = np.ascontiguousarray(g)
        k.accumulate(_conv2d_wgrad(xp, g, kh, kw), own=True)
        if x.requires_grad:
            wflip = np.ascontiguousarray(k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx, _ = _conv2d_same(g, wflip)
            x.accumulate(dx, own=True)

    return _make(y, (x, k), backward)


# --- batch normalisation --------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics; mutated by training-mode forward passes."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    steps: int = 0

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=_DTYPE),
            running_var=np.ones(channels, dtype=_DTYPE),
        )


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalise over all axes except the channel axis (dim 1)."""
    orig_shape = x.shape
    n = orig_shape[0]
    c = orig_shape[1] if x.data.ndim > 1 else orig_shape[0]
    if x.data.ndim < 2:
        raise ValueError(f"batchnorm expects batched input, got shape {orig_shape}")
    xr = x.data.reshape(n, c, -1)
    count = xr.shape[0] * xr.shape[2]
    if train and count < 2:
        raise ValueError("batchnorm in train mode needs at least 2 values per channel")
    if train and n < 2:
        raise ValueError(f"batchnorm in train mode needs batch >= 2, got {n}")

    if train:
        s1, s2 = kern.bn_stats(xr)
        mean64 = s1 / count
        var64 = np.maximum(s2 / count - mean64 * mean64, 0.0)
        mean = mean64.astype(x.data.dtype)
        var = var64.astype(x.data.dtype)
        state.running_mean = (
            (1.0 - state.momentum) * state.running_mean + state.momentum * mean
        ).astype(x.data.dtype)
        state.running_var = (
            (1.0 - state.momentum) * state.running_var + state.momentum * var
        ).astype(x.data.dtype)
        state.steps += 1
    else:
        mean = state.running_mean
        var = state.running_var
    invstd = (1.0 / np.sqrt(var.astype(np.float64) + state.eps)).astype(x.data.dtype)
    scale_y = gamma.data * invstd
    shift_y = beta.data - mean * scale_y
    y = kern.scale_shift(xr, scale_y, shift_y).reshape(orig_shape)

    def backward(g):
        gr = np.ascontiguousarray(g.reshape(n, c, -1))
        xhat = kern.scale_shift(xr, invstd, -mean * invstd)
        dbeta, dgamma = kern.bn_grad_stats(gr, xhat)
        gamma.accumulate(dgamma.astype(g.dtype))
        beta.accumulate(dbeta.astype(g.dtype))
        if x.requires_grad:
            if train:
                dx = kern.bn_backward_dx(gr, xhat, scale_y, dbeta, dgamma, count)
            else:
                dx = kern.scale_shift(gr, scale_y, np.zeros_like(scale_y))
            x.accumulate(dx.reshape(orig_shape), own=True)

    return _make(y, (x, gamma, beta), backward)


def batchnorm_relu(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool
) -> Tensor:
    """Fused batchnorm + relu: same semantics as relu(batchnorm(...)) with one
    elementwise pass each way. The conv blocks always use the pair, so the
    fusion halves their activation memory traffic."""
    orig_shape = x.shape
    n = orig_shape[0]
    c = orig_shape[1] if x.data.ndim > 1 else orig_shape[0]
    if x.data.ndim < 2:
        raise ValueError(f"batchnorm expects batched input, got shape {orig_shape}")
    xr = x.data.reshape(n, c, -1)
    count = xr.shape[0] * xr.shape[2]
    if train and (count < 2 or n < 2):
        raise ValueError(f"batchnorm in train mode needs batch >= 2, got {n}")

    if train:
        s1, s2 = kern.bn_stats(xr)
        mean64 = s1 / count
        var64 = np.maximum(s2 / count - mean64 * mean64, 0.0)
        mean = mean64.astype(x.data.dtype)
        var = var64.astype(x.data.dtype)
        state.running_mean = (
            (1.0 - state.momentum) * state.running_mean + state.momentum * mean
        ).astype(x.data.dtype)
        state.running_var = (
            (1.0 - state.momentum) * state.running_var + state.momentum * var
        ).astype(x.data.dtype)
        state.steps += 1
    else:
        mean = state.running_mean
        var = state.running_var
    invstd = (1.0 / np.sqrt(var.astype(np.float64) + state.eps)).astype(x.data.dtype)
    scale_y = gamma.data * invstd
    shift_y = beta.data - mean * scale_y
    y, keep = kern.scale_shift_relu(xr, scale_y, shift_y)

    def backward(g):
        gr = kern.masked_scale(np.ascontiguousarray(g.reshape(n, c, -1)), keep)
        xhat = kern.scale_shift(xr, invstd, -mean * invstd)
        dbeta, dgamma = kern.bn_grad_stats(gr, xhat)
        gamma.accumulate(dgamma.astype(g.dtype))
        beta.accumulate(dbeta.astype(g.dtype))
        if x.requires_grad:
            if train:
                dx = kern.bn_backward_dx(gr, xhat, scale_y, dbeta, dgamma, count)
            else:
                dx = kern.scale_shift(gr, scale_y, np.zeros_like(scale_y))
            x.accumulate(dx.reshape(orig_shape), own=True)

    return _make(y.reshape(orig_shape), (x, gamma, beta), backward)


# --- pooling --------------------------------------------------------------------


def maxpool1d(x: Tensor) -> Tensor:
    """Non-overlapping window-2 stride-2 max; ties route gradient to index 0."""
    if x.data.ndim != 3:
        raise ValueError(f"maxpool1d expects [N, C, L], got {x.shape}")
    length = x.shape[2]
    if length < 2:
        raise ValueError("maxpool1d needs spatial length >= 2")
    y, first = kern.maxpool1d_fwd(x.data)

    def backward(g):
        x.accumulate(kern.maxpool1d_bwd(np.ascontiguousarray(g), first, length), own=True)

    return _make(y, (x,), backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; ties route gradient to the first index row-major."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError("maxpool2d needs spatial dims >= 2")
    y, arg = kern.maxpool2d_fwd(x.data)

    def backward(g):
        x.accumulate(kern.maxpool2d_bwd(np.ascontiguousarray(g), arg, h, w), own=True)

    return _make(y, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: [N, C, ...] -> [N, C]."""
    if x.data.ndim < 3:
        raise ValueError(f"global_avg_pool expects spatial input, got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    xr = x.data.reshape(n, c, -1)
    size = xr.shape[2]
    y = (xr.sum(axis=2, dtype=np.float64) / size).astype(x.data.dtype)

    def backward(g):
        x.accumulate(np.broadcast_to((g / size)[:, :, None], xr.shape).reshape(x.shape).copy())

    return _make(y, (x,), backward)


# --- loss -----------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch, max-subtracted for stability."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"bad shapes: logits {logits.shape}, labels {labels.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -float(logp[np.arange(n), labels].sum(dtype=np.float64)) / n

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        logits.accumulate(grad * (g / n))

    return _make(np.asarray(loss), (logits,), backward)


# --- checkpoint I/O ---------------------------------------------------------------


def save_checkpoint(entries, path: Path | str) -> None:
    """Write named arrays: text header (name, shape) + float32-LE payload each."""
    entries = list(entries)
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC}\n{len(entries)}\n".encode())
        for name, arr in entries:
            arr = np.asarray(arr)
            dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            f.write(f"{name} {dims}\n".encode())
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: Path | str) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    with open(path, "rb") as f:
        magic = f.readline().decode().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        count = int(f.readline().decode().strip())
        for _ in range(count):
            header = f.readline().decode().strip()
            name, _, dims = header.rpartition(" ")
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            n_items = int(np.prod(shape)) if shape else 1
            payload = f.read(4 * n_items)
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            entries.append((name, arr.copy()))
    return entries
