"""Fused inner loops for the hot attention paths.

Every kernel is deterministic regardless of thread count: parallel ranges
partition disjoint output slices (or fixed blocks accumulated in a fixed
order), and each slice is reduced sequentially. Pure-numpy fallbacks keep
the package importable without numba; a given install always uses one path,
so run-to-run reproducibility holds either way.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_KSIDE_BLOCKS = 64  # fixed j-block decomposition keeps reductions deterministic


def set_threads(n: int) -> None:
    """Cap numba worker threads (BLAS caps are handled via env vars)."""
    if HAVE_NUMBA:
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# attention softmax: y = softmax(scale * qk + bias) over the last axis
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _attn_softmax_plain_nb(qk, scale, out):  # (R, C)
    rows, cols = qk.shape
    for r in prange(rows):
        m = -np.inf
        for c in range(cols):
            v = qk[r, c] * scale
            out[r, c] = v
            if v > m:
                m = v
        s = 0.0
        for c in range(cols):
            e = np.exp(out[r, c] - m)
            out[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(cols):
            out[r, c] *= inv


@njit(cache=True, parallel=True)
def _attn_softmax_bias_nb(qk, scale, bias, out):  # (R, C) with (R, C) bias
    rows, cols = qk.shape
    for r in prange(rows):
        m = -np.inf
        for c in range(cols):
            v = qk[r, c] * scale + bias[r, c]
            out[r, c] = v
            if v > m:
                m = v
        s = 0.0
        for c in range(cols):
            e = np.exp(out[r, c] - m)
            out[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(cols):
            out[r, c] *= inv


@njit(cache=True, parallel=True)
def _attn_softmax_mask_nb(qk, scale, blocked, out):  # blocked (R, C) uint8
    rows, cols = qk.shape
    for r in prange(rows):
        m = -np.inf
        for c in range(cols):
            if blocked[r, c]:
                continue
            v = qk[r, c] * scale
            if v > m:
                m = v
        s = 0.0
        for c in range(cols):
            if blocked[r, c]:
                out[r, c] = 0.0
            else:
                e = np.exp(qk[r, c] * scale - m)
                out[r, c] = e
                s += e
        inv = 1.0 / s
        for c in range(cols):
            out[r, c] *= inv


@njit(cache=True, parallel=True)
def _sigmoid_nb(x, out):  # flat arrays
    n = x.shape[0]
    for i in prange(n):
        v = x[i]
        if v >= 0.0:
            e = np.exp(-v)
            out[i] = 1.0 / (1.0 + e)
        else:
            e = np.exp(v)
            out[i] = e / (1.0 + e)


def sigmoid_stable(x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        out = np.empty(x.size, dtype=np.float64)
        _sigmoid_nb(np.ascontiguousarray(x).reshape(-1), out)
        return out.reshape(x.shape)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@njit(cache=True, parallel=True)
def _softmax_bwd_nb(y, dy, dx):  # (R, C) x3; masked entries have y == 0
    rows, cols = y.shape
    for r in prange(rows):
        s = 0.0
        for c in range(cols):
            s += y[r, c] * dy[r, c]
        for c in range(cols):
            dx[r, c] = y[r, c] * (dy[r, c] - s)


def attn_softmax_forward(qk2, scale, bias2=None, blocked2=None):
    out = np.empty_like(qk2)
    if HAVE_NUMBA:
        if bias2 is not None:
            _attn_softmax_bias_nb(qk2, scale, bias2, out)
        elif blocked2 is not None:
            _attn_softmax_mask_nb(qk2, scale, blocked2, out)
        else:
            _attn_softmax_plain_nb(qk2, scale, out)
        return out
    logits = qk2 * scale
    if bias2 is not None:
        logits = logits + bias2
    if blocked2 is not None:
        logits = np.where(blocked2.astype(bool), -np.inf, logits)
    m = logits.max(axis=1, keepdims=True)
    np.exp(logits - m, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax of a contiguous (R, C) float64 array."""
    return attn_softmax_forward(x, 1.0)


def softmax_rows_grad(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    dx = np.empty_like(y)
    if HAVE_NUMBA:
        _softmax_bwd_nb(y, dy, dx)
    else:
        s = (y * dy).sum(axis=1, keepdims=True)
        np.multiply(y, dy - s, out=dx)
    return dx


# ---------------------------------------------------------------------------
# relative-position bias: gather per-axis dot tables at bucket indices
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _quantize_idx_nb(q, pos, s, length, out):
    # q (n, 3), pos (N, 3) -> out (n, N, 3): floor((q - p)/s) + L/2, clamped
    n = q.shape[0]
    big_n = pos.shape[0]
    half = length // 2
    for i in prange(n):
        q0 = q[i, 0]
        q1 = q[i, 1]
        q2 = q[i, 2]
        for j in range(big_n):
            for a in range(3):
                qa = q0 if a == 0 else (q1 if a == 1 else q2)
                v = int(math.floor((qa - pos[j, a]) / s)) + half
                if v < 0:
                    v = 0
                elif v >= length:
                    v = length - 1
                out[i, j, a] = v


def quantize_idx(q: np.ndarray, pos: np.ndarray, s: float, length: int) -> np.ndarray:
    """(n, N, 3) clamped displacement bucket indices (int16; lengths < 32768)."""
    if HAVE_NUMBA:
        out = np.empty((q.shape[0], pos.shape[0], 3), dtype=np.int16)
        _quantize_idx_nb(q, pos, s, length, out)
        return out
    rel = q[:, None, :] - pos[None, :, :]
    idx = np.floor(rel / s).astype(np.int64) + length // 2
    return np.clip(idx, 0, length - 1).astype(np.int16)


@njit(cache=True, parallel=True)
def _rpe_fwd_nb(tq, tk, idx, out):
    # tq (3, h, n, L), tk (3, h, N, L), idx (n, N, 3) -> out (h, n, N)
    heads, n, big_n = out.shape
    for p in prange(heads * n):
        hh = p // n
        i = p % n
        for j in range(big_n):
            l0 = idx[i, j, 0]
            l1 = idx[i, j, 1]
            l2 = idx[i, j, 2]
            out[hh, i, j] = (
                tq[0, hh, i, l0]
                + tq[1, hh, i, l1]
                + tq[2, hh, i, l2]
                + tk[0, hh, j, l0]
                + tk[1, hh, j, l1]
                + tk[2, hh, j, l2]
            )


@njit(cache=True, parallel=True)
def _rpe_bwd_q_nb(dout, idx, dtq):
    heads, n, big_n = dout.shape
    for p in prange(heads * n):  # disjoint (a, hh, i, :) slices
        hh = p // n
        i = p % n
        for j in range(big_n):
            g = dout[hh, i, j]
            dtq[0, hh, i, idx[i, j, 0]] += g
            dtq[1, hh, i, idx[i, j, 1]] += g
            dtq[2, hh, i, idx[i, j, 2]] += g


@njit(cache=True, parallel=True)
def _rpe_bwd_k_nb(dout, idx, dtk):
    # fixed j-block decomposition: each (a, hh, j, :) cell is owned by one
    # block and accumulated in ascending i, independent of thread count
    heads, n, big_n = dout.shape
    for b in prange(_KSIDE_BLOCKS * heads):
        hh = b // _KSIDE_BLOCKS
        blk = b % _KSIDE_BLOCKS
        j0 = blk * big_n // _KSIDE_BLOCKS
        j1 = (blk + 1) * big_n // _KSIDE_BLOCKS
        for i in range(n):
            for j in range(j0, j1):
                g = dout[hh, i, j]
                dtk[0, hh, j, idx[i, j, 0]] += g
                dtk[1, hh, j, idx[i, j, 1]] += g
                dtk[2, hh, j, idx[i, j, 2]] += g


def rpe_bias_forward(tq: np.ndarray, tk: np.ndarray, idx: np.ndarray) -> np.ndarray:
    heads, n = tq.shape[1], tq.shape[2]
    big_n = tk.shape[2]
    out = np.empty((heads, n, big_n), dtype=np.float64)
    if HAVE_NUMBA:
        _rpe_fwd_nb(tq, tk, idx, out)
    else:
        out.fill(0.0)
        for a in range(3):
            out += np.take_along_axis(
                tq[a], np.broadcast_to(idx[None, :, :, a], (heads, n, big_n)), axis=2
            )
            kk = np.take_along_axis(
                tk[a],
                np.broadcast_to(idx[:, :, a].T[None], (heads, big_n, n)),
                axis=2,
            )
            out += kk.transpose(0, 2, 1)
    return out


def rpe_bias_backward(dout: np.ndarray, idx: np.ndarray, n: int, big_n: int, length: int):
    heads = dout.shape[0]
    dtq = np.zeros((3, heads, n, length), dtype=np.float64)
    dtk = np.zeros((3, heads, big_n, length), dtype=np.float64)
    if HAVE_NUMBA:
        _rpe_bwd_q_nb(dout, idx, dtq)
        _rpe_bwd_k_nb(dout, idx, dtk)
    else:
        rows_n = np.arange(n)[:, None]
        rows_big = np.arange(big_n)[None, :]
        for a in range(3):
            for hh in range(heads):
                np.add.at(dtq[a, hh], (rows_n, idx[:, :, a]), dout[hh])
                np.add.at(dtk[a, hh], (rows_big, idx[:, :, a]), dout[hh])
    return dtq, dtk


# ---------------------------------------------------------------------------
# k-NN mean pooling
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _gather_mean_fwd_nb(feats, idx, out):
    # feats (N, d), idx (n, k) -> out (n, d); mean taken in idx order
    n, k = idx.shape
    d = feats.shape[1]
    inv = 1.0 / k
    for i in prange(n):
        for c in range(d):
            acc = 0.0
            for t in range(k):
                acc += feats[idx[i, t], c]
            out[i, c] = acc * inv


@njit(cache=True, parallel=True)
def _gather_mean_bwd_nb(dout, idx, dfeats):
    n, k = idx.shape
    d = dfeats.shape[1]
    inv = 1.0 / k
    for c in prange(d):  # disjoint columns, deterministic accumulation
        for i in range(n):
            g = dout[i, c] * inv
            for t in range(k):
                dfeats[idx[i, t], c] += g


def gather_mean(feats: np.ndarray, idx: np.ndarray) -> np.ndarray:
    out = np.empty((idx.shape[0], feats.shape[1]), dtype=np.float64)
    if HAVE_NUMBA:
        _gather_mean_fwd_nb(feats, idx, out)
    else:
        np.mean(feats[idx], axis=1, out=out)
    return out


def gather_mean_grad(dout: np.ndarray, idx: np.ndarray, n_feats: int) -> np.ndarray:
    dfeats = np.zeros((n_feats, dout.shape[1]), dtype=np.float64)
    if HAVE_NUMBA:
        _gather_mean_bwd_nb(dout, idx, dfeats)
    else:
        np.add.at(dfeats, idx.ravel(), np.repeat(dout / idx.shape[1], idx.shape[1], axis=0))
    return dfeats


def warmup() -> None:
    """Compile the kernels once (tiny shapes) before worker threads start."""
    if not HAVE_NUMBA:
        return
    qk = np.zeros((2, 3))
    sigmoid_stable(qk)
    attn_softmax_forward(qk, 1.0)
    attn_softmax_forward(qk, 1.0, bias2=np.zeros((2, 3)))
    attn_softmax_forward(qk, 1.0, blocked2=np.zeros((2, 3), dtype=np.uint8))
    softmax_rows_grad(np.full((2, 3), 1.0 / 3.0), qk)
    idx = quantize_idx(np.zeros((2, 3)), np.zeros((3, 3)), 0.1, 4)
    tq = np.zeros((3, 1, 2, 4))
    tk = np.zeros((3, 1, 3, 4))
    dout = rpe_bias_forward(tq, tk, idx)
    rpe_bias_backward(dout, idx, 2, 3, 4)
    gather_mean_grad(gather_mean(np.zeros((3, 2)), np.zeros((3, 2), dtype=np.int64)), np.zeros((3, 2), dtype=np.int64), 3)
