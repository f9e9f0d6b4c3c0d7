"""Query-based decoder: learned position queries steering cross-attention.

Each layer runs cross-attention over scene tokens (optionally biased by
relative positions or hard-masked by the previous layer's predicted masks),
self-attention over queries, an FFN, the prediction heads, and an additive
position-query update that reuses the center head's offset.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import numcore as nc
from .encode import (
    RpeTable,
    backbone,
    fourier_ape,
    init_backbone,
    fast_quantize,
    rpe_bias,
)
from .scene import SceneBounds, SceneTokens

MODES = ("rpe", "mask_attention", "none")


@dataclass
class ModelConfig:
    layers: int = 6
    heads: int = 8
    d: int = 256
    ffn: int = 1024
    queries: int = 100
    classes: int = 18
    rpe_size: float = 0.1
    rpe_len: int = 48
    ape_temperature: float = 10000.0
    knn: int = 16
    feat_dim: int = 6
    rpe_init: float = 0.02

    def validate(self) -> None:
        if self.layers < 1 or self.heads < 1 or self.queries < 1 or self.classes < 1:
            raise ValueError("layers, heads, queries and classes must be positive")
        if self.d % self.heads != 0:
            raise ValueError(f"width {self.d} must be divisible by {self.heads} heads")
        if self.d < 6:
            raise ValueError("width must be at least 6 for the absolute encoding")
        if self.ffn < 1:
            raise ValueError("ffn width must be positive")
        if self.rpe_len <= 0 or self.rpe_len % 2 != 0:
            raise ValueError("rpe_len must be even and positive")
        if self.rpe_size <= 0 or self.ape_temperature <= 0:
            raise ValueError("rpe_size and ape_temperature must be positive")


@dataclass
class QueryState:
    qc: nc.Tensor  # (n, d) content queries
    qp_norm: nc.Tensor  # (n, 3) normalized positions
    qp_abs: nc.Tensor  # (n, 3) absolute positions in meters


@dataclass
class LayerPrediction:
    centers: nc.Tensor  # (n, 3) meters
    class_logits: nc.Tensor  # (n, K+1)
    mask_probs: nc.Tensor  # (n, N) in (0, 1)


_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class DecoderParams:
    """All learnable tensors, addressable by dotted name for checkpoints."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.params: dict[str, nc.Tensor] = {}
        d, ffn, k1 = config.d, config.ffn, config.classes + 1

        def xavier(name, fan_in, fan_out):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[name] = nc.Tensor(
                rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True
            )

        def zeros(name, shape):
            self.params[name] = nc.zeros(shape, requires_grad=True)

        def ones(name, shape):
            self.params[name] = nc.ones(shape, requires_grad=True)

        bb = init_backbone(config.feat_dim, d, rng, knn=config.knn)
        for key in ("w1", "b1", "w2", "b2", "w_pool", "b_pool"):
            self.params[f"backbone.{key}"] = getattr(bb, key)
        self.backbone = bb

        for li in range(config.layers):
            for block in ("cross", "self"):
                for key in ("wq", "wk", "wv", "wo"):
                    xavier(f"layer{li}.{block}.{key}", d, d)
                for key in ("bq", "bk", "bv", "bo"):
                    zeros(f"layer{li}.{block}.{key}", (d,))
            xavier(f"layer{li}.ffn.w1", d, ffn)
            zeros(f"layer{li}.ffn.b1", (ffn,))
            xavier(f"layer{li}.ffn.w2", ffn, d)
            zeros(f"layer{li}.ffn.b2", (d,))
            for norm in ("ln1", "ln2", "ln3"):
                ones(f"layer{li}.{norm}.g", (d,))
                zeros(f"layer{li}.{norm}.b", (d,))

        xavier("center.w1", d, d)
        zeros("center.b1", (d,))
        zeros("center.w2", (d, 3))  # zero offsets keep initial positions spread
        zeros("center.b2", (3,))
        xavier("cls.w1", d, d)
        zeros("cls.b1", (d,))
        xavier("cls.w2", d, k1)
        zeros("cls.b2", (k1,))
        xavier("mask.w1", d, d)
        zeros("mask.b1", (d,))
        xavier("mask.w2", d, d)
        zeros("mask.b2", (d,))

        self.params["qpos.logits"] = nc.Tensor(
            rng.normal(0.0, 1.0, size=(config.queries, 3)), requires_grad=True
        )
        self.params["rpe.tables"] = nc.Tensor(
            rng.normal(0.0, config.rpe_init, size=(3, config.rpe_len, d)),
            requires_grad=True,
        )
        self.rpe = RpeTable(self.params["rpe.tables"], config.rpe_size, config.rpe_len)

    def named(self) -> dict[str, nc.Tensor]:
        return self.params

    def layer(self, li: int, block: str) -> SimpleNamespace:
        return SimpleNamespace(
            **{k: self.params[f"layer{li}.{block}.{k}"] for k in _ATTN_KEYS}
        )

    def norm(self, li: int, which: str) -> tuple[nc.Tensor, nc.Tensor]:
        return self.params[f"layer{li}.{which}.g"], self.params[f"layer{li}.{which}.b"]

    def head(self, name: str) -> tuple[nc.Tensor, nc.Tensor, nc.Tensor, nc.Tensor]:
        return (
            self.params[f"{name}.w1"],
            self.params[f"{name}.b1"],
            self.params[f"{name}.w2"],
            self.params[f"{name}.b2"],
        )

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise nc.DimensionError(
                    f"parameter {name}: shape {arr.shape} does not match {p.shape}"
                )
            p.data = arr.copy()


def init_queries(params: DecoderParams, bounds: SceneBounds) -> QueryState:
    """Zero content queries plus sigmoid-normalized learnable positions."""
    cfg = params.config
    qp_norm = nc.sigmoid(params.params["qpos.logits"])
    qp_abs = denormalize(qp_norm, bounds)
    qc = nc.zeros((cfg.queries, cfg.d))
    return QueryState(qc, qp_norm, qp_abs)


def denormalize(qp_norm: nc.Tensor, bounds: SceneBounds) -> nc.Tensor:
    return nc.add(nc.mul(qp_norm, nc.Tensor(bounds.extent)), nc.Tensor(bounds.p_min))


def normalize(qp_abs: nc.Tensor, bounds: SceneBounds) -> nc.Tensor:
    return nc.mul(
        nc.sub(qp_abs, nc.Tensor(bounds.p_min)), nc.Tensor(1.0 / bounds.safe_extent())
    )


def _query_ape(state: QueryState, cfg: ModelConfig) -> nc.Tensor:
    # refined positions may exit the scene box; saturate before encoding
    return fourier_ape(nc.clip(state.qp_norm, 0.0, 1.0), cfg.d, cfg.ape_temperature)


def _attend(q, k, v, heads: int, wo, bo, bias=None, fill_mask=None) -> nc.Tensor:
    n, d = q.shape
    big_n = k.shape[0]
    hd = d // heads
    # scaling the small query matrix spares a full-size pass in backward
    qh = nc.transpose(nc.reshape(q * (1.0 / np.sqrt(hd)), (n, heads, hd)), (1, 0, 2))
    kh = nc.transpose(nc.reshape(k, (big_n, heads, hd)), (1, 2, 0))
    qk = nc.matmul(qh, kh)
    probs = nc.attn_softmax(qk, 1.0, bias=bias, blocked=fill_mask)
    vh = nc.transpose(nc.reshape(v, (big_n, heads, hd)), (1, 0, 2))
    ctx = nc.reshape(nc.transpose(nc.matmul(probs, vh), (1, 0, 2)), (n, d))
    return nc.linear(ctx, wo, bo)


def _attention_fill(prev_mask: np.ndarray) -> np.ndarray | None:
    """Hard-mask background tokens; a query with no foreground attends everywhere."""
    background = ~prev_mask
    all_background = background.all(axis=1)
    if all_background.any():
        background = background & ~all_background[:, None]
    if not background.any():
        return None
    return background


def cross_attention(
    params: DecoderParams,
    layer: int,
    state: QueryState,
    f_tokens: nc.Tensor,
    positions: np.ndarray,
    mode: str,
    prev_mask: np.ndarray | None = None,
    q_ape: nc.Tensor | None = None,
) -> nc.Tensor:
    """One token->query aggregation step; returns updated content queries."""
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    cfg = params.config
    lp = params.layer(layer, "cross")
    if q_ape is None:
        q_ape = _query_ape(state, cfg)
    q = nc.linear(nc.add(state.qc, q_ape), lp.wq, lp.bq)
    k = nc.linear(f_tokens, lp.wk, lp.bk)
    v = nc.linear(f_tokens, lp.wv, lp.bv)

    bias = None
    fill = None
    if mode == "rpe":
        r_idx = fast_quantize(state.qp_abs.data, positions, cfg.rpe_size, cfg.rpe_len)
        bias = rpe_bias(r_idx, params.rpe, q, k, cfg.heads, checked=True)
    elif mode == "mask_attention":
        if prev_mask is None:
            if layer > 0:
                raise nc.GraphError(
                    "mask_attention needs the previous layer's mask beyond layer 0"
                )
            # zero initial content queries give sigmoid(0) = 0.5 against any
            # mask feature, so the layer-0 mask is all-foreground: no fill
            fill = None
        else:
            fill = _attention_fill(prev_mask)

    attn = _attend(q, k, v, cfg.heads, lp.wo, lp.bo, bias=bias, fill_mask=fill)
    g, b = params.norm(layer, "ln1")
    return nc.layer_norm(nc.add(state.qc, attn), g, b)


def decoder_layer(
    params: DecoderParams,
    layer: int,
    state: QueryState,
    f_tokens: nc.Tensor,
    f_mask: nc.Tensor,
    positions: np.ndarray,
    bounds: SceneBounds,
    mode: str,
    prev_mask: np.ndarray | None = None,
    refine: bool = True,
) -> tuple[QueryState, LayerPrediction]:
    cfg = params.config
    q_ape = _query_ape(state, cfg)
    x = cross_attention(params, layer, state, f_tokens, positions, mode, prev_mask, q_ape)

    sp = params.layer(layer, "self")
    xq = nc.add(x, q_ape)
    q = nc.linear(xq, sp.wq, sp.bq)
    k = nc.linear(xq, sp.wk, sp.bk)
    v = nc.linear(x, sp.wv, sp.bv)
    sa = _attend(q, k, v, cfg.heads, sp.wo, sp.bo)
    g, b = params.norm(layer, "ln2")
    x = nc.layer_norm(nc.add(x, sa), g, b)

    ff = nc.mlp2(
        x,
        params.params[f"layer{layer}.ffn.w1"],
        params.params[f"layer{layer}.ffn.b1"],
        params.params[f"layer{layer}.ffn.w2"],
        params.params[f"layer{layer}.ffn.b2"],
    )
    g, b = params.norm(layer, "ln3")
    x = nc.layer_norm(nc.add(x, ff), g, b)
    if not np.all(np.isfinite(x.data)):
        raise nc.NumericError(f"non-finite activations in decoder layer {layer}")

    offset = nc.mlp2(x, *params.head("center"))
    centers = nc.add(offset, state.qp_abs)  # also serves as the refined position
    class_logits = nc.mlp2(x, *params.head("cls"))
    mask_probs = nc.sigmoid(nc.matmul(x, nc.transpose(f_mask)))

    new_abs = centers if refine else state.qp_abs
    new_state = QueryState(x, normalize(new_abs, bounds), new_abs)
    return new_state, LayerPrediction(centers, class_logits, mask_probs)


def forward(
    tokens: SceneTokens,
    params: DecoderParams,
    mode: str,
    refine: bool = True,
) -> tuple[list[LayerPrediction], list[np.ndarray]]:
    """Full pass: backbone, key encoding, then every decoder layer.

    Returns the per-layer predictions and the position-query trace
    (initial absolute positions followed by one entry per layer).
    """
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    cfg = params.config
    bounds = tokens.bounds
    feats = backbone(tokens, params.backbone)
    pos_norm = (tokens.positions - bounds.p_min) / bounds.safe_extent()
    key_ape = fourier_ape(nc.Tensor(pos_norm), cfg.d, cfg.ape_temperature)
    f_tokens = nc.add(feats, key_ape)
    f_mask = nc.mlp2(feats, *params.head("mask"))

    state = init_queries(params, bounds)
    prev_mask = None  # layer 0 in mask mode falls back to the initial (full) mask

    preds: list[LayerPrediction] = []
    trace = [state.qp_abs.data.copy()]
    for li in range(cfg.layers):
        state, pred = decoder_layer(
            params, li, state, f_tokens, f_mask, tokens.positions, bounds, mode,
            prev_mask=prev_mask, refine=refine,
        )
        preds.append(pred)
        trace.append(state.qp_abs.data.copy())
        if mode == "mask_attention":
            prev_mask = pred.mask_probs.data >= 0.5
    return preds, trace
