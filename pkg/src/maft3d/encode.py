"""Token features and positional encodings.

Holds the small per-token feature extractor standing in for a voxel U-Net,
the sinusoidal absolute encoding, and the contextual relative position
encoding: query-token displacements quantized to table indices, looked up
per axis, and dot-producted with query/key features to bias attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import numcore as nc
from .numcore import _kernels
from .scene import SceneTokens


@dataclass
class RpeTable:
    tables: nc.Tensor  # (3, L, d) learnable
    quant_size: float
    length: int

    def __post_init__(self):
        if self.length <= 0 or self.length % 2 != 0:
            raise ValueError(f"RPE table length must be even and positive, got {self.length}")
        if self.quant_size <= 0.0:
            raise ValueError(f"RPE quantization size must be positive, got {self.quant_size}")
        if self.tables.shape[:2] != (3, self.length):
            raise nc.DimensionError(
                f"RPE tables shape {self.tables.shape} does not match (3, {self.length}, d)"
            )


@dataclass
class BackboneParams:
    w1: nc.Tensor
    b1: nc.Tensor
    w2: nc.Tensor
    b2: nc.Tensor
    w_pool: nc.Tensor
    b_pool: nc.Tensor
    knn: int = 16

    @property
    def width(self) -> int:
        return self.w2.shape[1]


def init_backbone(in_dim: int, d: int, rng: np.random.Generator, knn: int = 16) -> BackboneParams:
    def xavier(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return nc.Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)

    return BackboneParams(
        w1=xavier(in_dim, d),
        b1=nc.zeros((d,), requires_grad=True),
        w2=xavier(d, d),
        b2=nc.zeros((d,), requires_grad=True),
        w_pool=xavier(2 * d, d),
        b_pool=nc.zeros((d,), requires_grad=True),
        knn=knn,
    )


def _knn_indices(tokens: SceneTokens, k: int) -> np.ndarray:
    k = min(k, tokens.n_tokens)
    cached = tokens.knn_cache.get(k)
    if cached is None:
        tree = cKDTree(tokens.positions)
        _, idx = tree.query(tokens.positions, k=k)
        cached = np.ascontiguousarray(np.atleast_2d(idx).reshape(tokens.n_tokens, k))
        tokens.knn_cache[k] = cached
    return cached


def _neighborhood_mean(feats: nc.Tensor, idx: np.ndarray) -> nc.Tensor:
    n_rows = feats.shape[0]
    data = _kernels.gather_mean(np.ascontiguousarray(feats.data), idx)

    def bwd(g):
        return (_kernels.gather_mean_grad(np.ascontiguousarray(g), idx, n_rows),)

    return nc.custom_op(data, (feats,), bwd, "neighborhood_mean")


def backbone(tokens: SceneTokens, params: BackboneParams) -> nc.Tensor:
    """Per-token features: MLP then k-NN mean pooling and projection."""
    if tokens.n_tokens < 1:
        raise nc.DimensionError("backbone needs at least one token")
    x = nc.Tensor(tokens.features)
    h = nc.linear(nc.relu(nc.linear(x, params.w1, params.b1)), params.w2, params.b2)
    idx = _knn_indices(tokens, params.knn)
    pooled = _neighborhood_mean(h, idx)
    return nc.linear(nc.concat([h, pooled], axis=1), params.w_pool, params.b_pool)


def ape_frequencies(d: int, temperature: float) -> np.ndarray:
    if d < 6:
        raise ValueError(f"absolute encoding needs width >= 6, got {d}")
    n_freq = d // 6
    j = np.arange(n_freq, dtype=np.float64)
    return np.power(temperature, -2.0 * j / (d / 3.0))


def fourier_ape(positions, d: int, temperature: float = 10000.0) -> nc.Tensor:
    """Sinusoidal encoding of normalized positions, interleaved sin/cos per axis.

    Inputs must lie in [0, 1] per coordinate (tolerance 1e-6). The tail is
    zero-padded when d is not a multiple of 6.
    """
    pos = positions if isinstance(positions, nc.Tensor) else nc.Tensor(positions)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise nc.DimensionError(f"positions must be (m, 3), got {pos.shape}")
    if pos.size and (pos.data.min() < -1e-6 or pos.data.max() > 1.0 + 1e-6):
        raise ValueError("positions must be normalized to [0, 1]")
    omega = ape_frequencies(d, temperature)
    n_freq = omega.size
    m = pos.shape[0]
    blocks = []
    for axis in range(3):
        sel = np.zeros((3, 1))
        sel[axis, 0] = 1.0
        phase = nc.matmul(nc.matmul(pos, nc.Tensor(sel)), nc.Tensor(omega[None, :]))
        s = nc.reshape(nc.sin(phase), (m, n_freq, 1))
        c = nc.reshape(nc.cos(phase), (m, n_freq, 1))
        blocks.append(nc.reshape(nc.concat([s, c], axis=2), (m, 2 * n_freq)))
    out = nc.concat(blocks, axis=1)
    pad = d - 6 * n_freq
    if pad:
        out = nc.concat([out, nc.zeros((m, pad))], axis=1)
    return out


def quantize_relative(q_abs: np.ndarray, positions: np.ndarray, quant_size: float, length: int) -> np.ndarray:
    """Displacement bucket indices: floor((q - p) / s) + L/2, clamped to [0, L-1]."""
    if quant_size <= 0.0:
        raise ValueError(f"quantization size must be positive, got {quant_size}")
    if length <= 0 or length % 2 != 0:
        raise ValueError(f"table length must be even and positive, got {length}")
    rel = q_abs[:, None, :] - positions[None, :, :]
    idx = np.floor(rel / quant_size).astype(np.int64) + length // 2
    return np.clip(idx, 0, length - 1)


def fast_quantize(
    q_abs: np.ndarray, positions: np.ndarray, quant_size: float, length: int
) -> np.ndarray:
    """Fused-kernel quantize_relative; identical semantics and layout."""
    return _kernels.quantize_idx(q_abs, positions, quant_size, length)


def rpe_bias(
    r_idx: np.ndarray,
    table: RpeTable,
    f_q: nc.Tensor,
    f_k: nc.Tensor,
    heads: int,
    checked: bool = False,
) -> nc.Tensor:
    """Per-head attention bias from table lookups dotted with query/key features.

    ``r_idx`` is (n, N, 3) from quantize_relative; features are full-width
    (n, d)/(N, d) whose columns are split across heads. Returns (heads, n, N).
    """
    n, big_n = r_idx.shape[0], r_idx.shape[1]
    d = f_q.shape[1]
    if d % heads != 0:
        raise nc.DimensionError(f"feature width {d} not divisible by {heads} heads")
    if f_k.shape[1] != d or table.tables.shape[2] != d:
        raise nc.DimensionError(
            f"rpe_bias: widths differ (f_q {f_q.shape}, f_k {f_k.shape}, tables {table.tables.shape})"
        )
    if not checked and (r_idx.min() < 0 or r_idx.max() >= table.length):
        raise nc.NumericError("rpe_bias: quantized index outside table range")
    idx3 = np.ascontiguousarray(r_idx)
    hd = d // heads
    length = table.length

    tab = table.tables
    # (3, heads, hd, L) view of the tables, one slice of hd columns per head
    tab_t = np.ascontiguousarray(tab.data.reshape(3, length, heads, hd).transpose(0, 2, 3, 1))
    fqh = np.ascontiguousarray(f_q.data.reshape(n, heads, hd).transpose(1, 0, 2))
    fkh = np.ascontiguousarray(f_k.data.reshape(big_n, heads, hd).transpose(1, 0, 2))
    # per-axis dot tables: tq[a,h,i,l] = f_q[i, h-slice] . tables[a, l, h-slice]
    tq = np.matmul(fqh[None], tab_t)  # (3, heads, n, L)
    tk = np.matmul(fkh[None], tab_t)  # (3, heads, N, L)
    data = _kernels.rpe_bias_forward(tq, tk, idx3)

    def bwd(g):
        dtq, dtk = _kernels.rpe_bias_backward(np.ascontiguousarray(g), idx3, n, big_n, length)
        fqh_t = np.ascontiguousarray(fqh.swapaxes(1, 2))  # (heads, hd, n)
        fkh_t = np.ascontiguousarray(fkh.swapaxes(1, 2))
        dtab_t = np.matmul(fqh_t[None], dtq) + np.matmul(fkh_t[None], dtk)  # (3, h, hd, L)
        dtab = dtab_t.transpose(0, 3, 1, 2).reshape(3, length, d)
        tab_back = tab_t.swapaxes(2, 3)  # (3, heads, L, hd)
        dfq = np.matmul(dtq, tab_back).sum(axis=0)  # (heads, n, hd)
        dfk = np.matmul(dtk, tab_back).sum(axis=0)
        return (
            dtab,
            dfq.transpose(1, 0, 2).reshape(n, d),
            dfk.transpose(1, 0, 2).reshape(big_n, d),
        )

    return nc.custom_op(data, (tab, f_q, f_k), bwd, "rpe_bias")
