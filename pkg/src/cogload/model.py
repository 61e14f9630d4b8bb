"""The dual-stream network: a 1-D conv encoder over raw EEG, a 2-D conv
encoder over multi-spectral topography maps, sigmoid-gated fusion of the two
256-dim embeddings, a small classification head, and the cosine-based
orthogonality loss that shapes the fused space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .util import flag

EMBED_DIM = 256
RAW_CHANNELS = (64, 128, 256)
RAW_KERNELS = (32, 16, 8)
TOPO_CHANNELS = (64, 128, 256)
TOPO_KERNEL = 3
RAW_IN_CHANNELS = 4
TOPO_IN_CHANNELS = 15
DROPOUT_RATE = 0.5
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossTerms:
    l_ce: float
    l_oc: float
    beta: float
    l_total: float


def total_loss_terms(l_ce: float, l_oc: float, beta: float = 0.4) -> LossTerms:
    """Weighted sum of the classification and orthogonality terms."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return LossTerms(l_ce=l_ce, l_oc=l_oc, beta=beta, l_total=l_ce + beta * l_oc)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bn_relu(x: Tensor, bn, train: bool) -> Tensor:
    gamma, beta, state = bn
    return ad.batchnorm_relu(x, gamma, beta, state, train)


class _ConvBlock1d:
    """conv -> BN -> ReLU, twice, then 2x max pool."""

    def __init__(self, reg, prefix: str, c_in: int, c_out: int, k: int, rng):
        self.w1 = reg(f"{prefix}.conv1.w", _kaiming_uniform(rng, (c_out, c_in, k), c_in * k))
        self.bn1 = reg.bn(f"{prefix}.bn1", c_out)
        self.w2 = reg(f"{prefix}.conv2.w", _kaiming_uniform(rng, (c_out, c_out, k), c_out * k))
        self.bn2 = reg.bn(f"{prefix}.bn2", c_out)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        x = _bn_relu(ad.conv1d(x, self.w1), self.bn1, train)
        x = _bn_relu(ad.conv1d(x, self.w2), self.bn2, train)
        return ad.maxpool1d(x)


class _ConvBlock2d:
    def __init__(self, reg, prefix: str, c_in: int, c_out: int, k: int, rng):
        self.w1 = reg(f"{prefix}.conv1.w", _kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bn1 = reg.bn(f"{prefix}.bn1", c_out)
        self.w2 = reg(f"{prefix}.conv2.w", _kaiming_uniform(rng, (c_out, c_out, k, k), c_out * k * k))
        self.bn2 = reg.bn(f"{prefix}.bn2", c_out)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        x = _bn_relu(ad.conv2d(x, self.w1), self.bn1, train)
        x = _bn_relu(ad.conv2d(x, self.w2), self.bn2, train)
        return ad.maxpool2d(x)


class _Registry:
    """Keeps parameters and BN states in registration order for checkpoints."""

    def __init__(self):
        self.params: list[Tensor] = []
        self.bn_states: list[tuple[str, BatchNormState]] = []
        self._order: list[tuple[str, object]] = []

    def __call__(self, name: str, data: np.ndarray) -> Tensor:
        p = ad.param(data, name)
        self.params.append(p)
        self._order.append((name, p))
        return p

    def bn(self, prefix: str, channels: int):
        gamma = self(f"{prefix}.gamma", np.ones(channels))
        beta = self(f"{prefix}.beta", np.zeros(channels))
        state = BatchNormState.create(channels)
        self.bn_states.append((prefix, state))
        self._order.append((f"{prefix}.running_mean", state))
        self._order.append((f"{prefix}.running_var", state))
        return gamma, beta, state

    def checkpoint_entries(self):
        for name, obj in self._order:
            if isinstance(obj, Tensor):
                yield name, obj.data
            elif name.endswith("running_mean"):
                yield name, obj.running_mean
            else:
                yield name, obj.running_var

    def load_entries(self, entries) -> None:
        by_name = dict(entries)
        for name, obj in self._order:
            if name not in by_name:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            arr = by_name[name].astype(ad.default_dtype())
            if isinstance(obj, Tensor):
                if arr.shape != obj.data.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {obj.data.shape}")
                obj.data = arr
            elif name.endswith("running_mean"):
                obj.running_mean = arr
            else:
                obj.running_var = arr


@dataclass
class ForwardResult:
    logits: Tensor
    fused: Tensor | None
    gate: Tensor | None
    e_time: Tensor | None
    e_freq: Tensor | None


class DualStreamModel:
    """Both encoders, the gated fusion, and the classification head.

    `streams` selects the single-domain ablations; `attention=False` swaps the
    gate for plain concatenation followed by a 512->256 projection.
    """

    def __init__(
        self,
        seed: int = 0,
        attention: bool = True,
        streams: tuple[str, ...] = ("raw", "topo"),
        raw_channels: tuple[int, ...] = RAW_CHANNELS,
        raw_kernels: tuple[int, ...] = RAW_KERNELS,
        topo_channels: tuple[int, ...] = TOPO_CHANNELS,
        topo_kernel: int = TOPO_KERNEL,
        raw_in: int = RAW_IN_CHANNELS,
        topo_in: int = TOPO_IN_CHANNELS,
        class_hidden: int | None = None,
    ):
        if not streams or any(s not in ("raw", "topo") for s in streams):
            raise ValueError(f"streams must be a subset of ('raw','topo'), got {streams}")
        if raw_channels[-1] != topo_channels[-1]:
            raise ValueError("both encoders must emit the same embedding size")
        self.streams = tuple(streams)
        self.attention = bool(attention)
        self.embed_dim = raw_channels[-1]
        rng = np.random.default_rng(seed)
        reg = _Registry()
        self._reg = reg

        self.raw_blocks: list[_ConvBlock1d] = []
        if "raw" in streams:
            c_prev = raw_in
            for i, (c, k) in enumerate(zip(raw_channels, raw_kernels), start=1):
                self.raw_blocks.append(_ConvBlock1d(reg, f"enc_raw.b{i}", c_prev, c, k, rng))
                c_prev = c
        self.topo_blocks: list[_ConvBlock2d] = []
        if "topo" in streams:
            c_prev = topo_in
            for i, c in enumerate(topo_channels, start=1):
                self.topo_blocks.append(_ConvBlock2d(reg, f"enc_topo.b{i}", c_prev, c, topo_kernel, rng))
                c_prev = c

        m = self.embed_dim
        if len(self.streams) == 2:
            if self.attention:
                self.attn_w1 = reg("attn.fc1.w", _kaiming_uniform(rng, (2 * m, m), 2 * m))
                self.attn_b1 = reg("attn.fc1.b", np.zeros(m))
                self.attn_w2 = reg("attn.fc2.w", _kaiming_uniform(rng, (m, m), m))
                self.attn_b2 = reg("attn.fc2.b", np.zeros(m))
            else:
                self.fuse_w = reg("fuse.fc.w", _kaiming_uniform(rng, (2 * m, m), 2 * m))
                self.fuse_b = reg("fuse.fc.b", np.zeros(m))

        hidden = class_hidden if class_hidden is not None else max(m // 2, 2)
        self.cls_w1 = reg("cls.fc1.w", _kaiming_uniform(rng, (m, hidden), m))
        self.cls_b1 = reg("cls.fc1.b", np.zeros(hidden))
        self.cls_w2 = reg("cls.fc2.w", _kaiming_uniform(rng, (hidden, 2), hidden))
        self.cls_b2 = reg("cls.fc2.b", np.zeros(2))

    # -- pieces ------------------------------------------------------------

    @property
    def params(self) -> list[Tensor]:
        return self._reg.params

    def encode_raw(self, x: Tensor, train: bool) -> Tensor:
        """Filtered, z-scored raw batch [N, 4, L] -> embedding [N, M]."""
        for block in self.raw_blocks:
            x = block.forward(x, train)
        return ad.global_avg_pool(x)

    def encode_topo(self, x: Tensor, train: bool) -> Tensor:
        """Map batch [N, 15, 32, 32] -> embedding [N, M]."""
        for block in self.topo_blocks:
            x = block.forward(x, train)
        return ad.global_avg_pool(x)

    def attention_gate(self, e_time: Tensor, e_freq: Tensor) -> Tensor:
        h = ad.relu(ad.fc(ad.concat(e_time, e_freq, axis=1), self.attn_w1, self.attn_b1))
        return ad.sigmoid(ad.fc(h, self.attn_w2, self.attn_b2))

    def attention_fuse(
        self, e_time: Tensor, e_freq: Tensor, gate_override: np.ndarray | None = None
    ) -> tuple[Tensor, Tensor]:
        """Gated blend of the tanh-squashed embeddings; returns (fused, gate)."""
        if gate_override is not None:
            gate = Tensor(np.broadcast_to(gate_override, e_time.shape).copy())
        else:
            gate = self.attention_gate(e_time, e_freq)
        fused = ad.add(
            ad.mul(gate, ad.tanh(e_freq)),
            ad.mul(ad.one_minus(gate), ad.tanh(e_time)),
        )
        return fused, gate

    def classify(self, fused: Tensor, train: bool, rng: np.random.Generator) -> Tensor:
        h = ad.relu(ad.fc(fused, self.cls_w1, self.cls_b1))
        h = ad.dropout(h, DROPOUT_RATE, train, rng)
        return ad.fc(h, self.cls_w2, self.cls_b2)

    # -- full forward --------------------------------------------------------

    def forward(
        self,
        raw: np.ndarray | None,
        topo: np.ndarray | None,
        train: bool,
        rng: np.random.Generator | None = None,
        gate_override: np.ndarray | None = None,
    ) -> ForwardResult:
        rng = rng if rng is not None else np.random.default_rng(0)
        e_time = e_freq = None
        if "raw" in self.streams:
            if raw is None:
                raise ValueError("model uses the raw stream but raw input is None")
            e_time = self.encode_raw(Tensor(raw), train)
        if "topo" in self.streams:
            if topo is None:
                raise ValueError("model uses the topo stream but topo input is None")
            e_freq = self.encode_topo(Tensor(topo), train)

        gate = None
        if len(self.streams) == 2:
            if self.attention:
                fused, gate = self.attention_fuse(e_time, e_freq, gate_override)
            else:
                fused = ad.fc(ad.concat(e_time, e_freq, axis=1), self.fuse_w, self.fuse_b)
        else:
            fused = e_time if e_time is not None else e_freq
        logits = self.classify(fused, train, rng)
        return ForwardResult(logits=logits, fused=fused, gate=gate, e_time=e_time, e_freq=e_freq)

    def loss(
        self,
        result: ForwardResult,
        labels: np.ndarray,
        beta: float = 0.4,
        pair_mean: bool = False,
    ) -> tuple[Tensor, LossTerms]:
        ce = ad.softmax_cross_entropy(result.logits, labels)
        use_oc = beta > 0 and len(self.streams) == 2
        if use_oc:
            oc = orthogonality_loss(result.fused, labels, pair_mean=pair_mean)
            total = ad.add(ce, ad.scale(oc, beta))
            oc_val = float(oc.data)
        else:
            total = ce
            oc_val = 0.0
        terms = total_loss_terms(float(ce.data), oc_val, beta if use_oc else 0.0)
        return total, terms

    # -- persistence -----------------------------------------------------------

    def checkpoint_entries(self):
        return self._reg.checkpoint_entries()

    def load_entries(self, entries) -> None:
        self._reg.load_entries(entries)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def orthogonality_loss(fused: Tensor, labels: np.ndarray, pair_mean: bool = False) -> Tensor:
    """1 - sum of same-class cosines + sum of cross-class cosines (pairs i<j).

    Near-zero vectors are excluded from all pairs. With pair_mean each sum is
    divided by its pair count for batch-size-independent scale.
    """
    labels = np.asarray(labels)
    e = fused.data
    n = e.shape[0]
    if n < 2:
        raise ValueError(f"orthogonality loss needs a batch of >= 2, got {n}")
    norms = np.sqrt((e.astype(np.float64) ** 2).sum(axis=1))
    alive = norms > NORM_FLOOR
    if not np.all(alive):
        flag(f"orthogonality_loss: excluded {int((~alive).sum())} near-zero vector(s)")
    u = np.zeros_like(e, dtype=np.float64)
    u[alive] = e[alive] / norms[alive, None]

    same = labels[:, None] == labels[None, :]
    pair_ok = alive[:, None] & alive[None, :]
    np.fill_diagonal(pair_ok, False)
    sign = np.where(same, -1.0, 1.0) * pair_ok
    if pair_mean:
        n_same = int(np.sum(same & pair_ok)) // 2
        n_diff = int(np.sum(~same & pair_ok)) // 2
        if n_same:
            sign[same] /= n_same
        if n_diff:
            sign[~same] /= n_diff

    cos = u @ u.T
    value = 1.0 + 0.5 * float(np.sum(sign * cos))

    def backward(g):
        # dL/dU = S @ U (S symmetric, zero diagonal), chained through the
        # row normalisation U = E / ||E||.
        gu = sign @ u
        proj = (gu * u).sum(axis=1, keepdims=True)
        de = np.zeros_like(u)
        de[alive] = (gu[alive] - proj[alive] * u[alive]) / norms[alive, None]
        fused.accumulate((float(g) * de).astype(fused.data.dtype))

    out = Tensor(np.asarray(value))
    if fused.requires_grad:
        out.requires_grad = True
        out._parents = (fused,)
        out._backward = backward
    return out
