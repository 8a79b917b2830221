"""Sparse sliding-window attention: window schedules, masks, the dual-window
multi-head pass and the hierarchical multi-scale pass with cross-scale score
aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seqcore import MaskError, ShapeError, Tensor, as_tensor, concat, masked_softmax, mean_pool1d

__all__ = [
    "WindowSpec",
    "AttentionMask",
    "ScaleSet",
    "AttentionParams",
    "build_window_schedule",
    "build_sparse_mask",
    "dswa_forward",
    "hta_forward",
    "aggregate_scales",
    "attended_pairs_count",
    "dense_attention_oracle",
    "init_attention_params",
]


@dataclass(frozen=True)
class WindowSpec:
    """One sliding window: one-sided width in frames, a zero-based dilation
    rate (rate 0 = adjacent taps), causality and its role in the dual pair."""

    one_sided_width: int
    dilation_rate: int = 0
    causal: bool = False
    role: str = "expanding"

    def __post_init__(self):
        if self.one_sided_width < 1:
            raise ShapeError(f"window width must be >= 1, got {self.one_sided_width}")
        if self.dilation_rate < 0:
            raise ShapeError(f"dilation rate must be >= 0, got {self.dilation_rate}")

    @property
    def step(self) -> int:
        return self.dilation_rate + 1

    @property
    def receptive_span(self) -> int:
        return 2 * self.one_sided_width * self.step + 1


class AttentionMask:
    """Sparse per-query attention pattern over a sequence of length T.

    Stored as a padded band: ``key_index[q, j]`` with a validity flag, which
    keeps windowed masks O(T * window) instead of O(T^2).
    """

    def __init__(self, T: int, key_index: np.ndarray, valid: np.ndarray):
        if T < 1:
            raise ShapeError(f"mask needs T >= 1, got {T}")
        self.T = T
        self.key_index = key_index
        self.valid = valid
        if not valid.any(axis=1).all():
            q = int(np.argmin(valid.any(axis=1)))
            raise MaskError(f"query {q} has no allowed keys")

    @property
    def allowed(self) -> list:
        """Sorted allowed key indices per query."""
        return [np.unique(self.key_index[q][self.valid[q]]) for q in range(self.T)]

    def dense(self) -> np.ndarray:
        m = np.zeros((self.T, self.T), dtype=bool)
        rows = np.repeat(np.arange(self.T), self.valid.sum(axis=1))
        m[rows, self.key_index[self.valid]] = True
        return m


def build_window_schedule(
    n_layers: int,
    w_min: int = 16,
    w_max: int = 256,
    rate_max: int = 4,
    causal: bool = False,
    dilate_shrinking: bool = True,
) -> list[tuple[WindowSpec, WindowSpec]]:
    """Per-layer (expanding, shrinking) window pairs.

    Expanding widths double from w_min and clamp at w_max; shrinking widths
    are the reversed ladder. The dilation rate at layer l is min(l, rate_max).
    """
    if n_layers < 1:
        raise ShapeError(f"need n_layers >= 1, got {n_layers}")
    if w_min > w_max:
        raise ShapeError(f"w_min {w_min} exceeds w_max {w_max}")
    expanding = [min(w_min * 2 ** i, w_max) for i in range(n_layers)]
    if n_layers == 1:
        expanding, shrinking = [w_min], [w_max]
    else:
        shrinking = expanding[::-1]
    pairs = []
    for layer, (we, ws) in enumerate(zip(expanding, shrinking)):
        rate = min(layer, rate_max)
        pairs.append(
            (
                WindowSpec(we, rate, causal, "expanding"),
                WindowSpec(ws, rate if dilate_shrinking else 0, causal, "shrinking"),
            )
        )
    return pairs


def build_sparse_mask(T: int, spec: WindowSpec) -> AttentionMask:
    """Banded mask for one window: query i attends i + j*(rate+1) for
    j in [-w, w] (acausal) or [-w, 0] (causal), clipped to bounds."""
    if T < 1:
        raise ShapeError(f"need T >= 1, got {T}")
    w, step = spec.one_sided_width, spec.step
    lo = -w
    hi = 0 if spec.causal else w
    offsets = np.arange(lo, hi + 1) * step
    idx = np.arange(T)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < T)
    return AttentionMask(T, np.clip(idx, 0, T - 1), valid)


def attended_pairs_count(mask: AttentionMask) -> int:
    """Exact number of (query, key) pairs the mask allows."""
    return sum(len(a) for a in mask.allowed)


@dataclass
class ScaleSet:
    """Temporal scales for hierarchical attention: scale s pools by 2**s to
    length T_s = ceil(T / 2**s); w_s weights the per-scale scores."""

    T: int
    scales: list[int]
    weights: list[float]
    window: int = 8

    def __post_init__(self):
        for s in self.scales:
            if -(-self.T // (1 << s)) < 1:
                raise ShapeError(f"scale {s} collapses T={self.T} below one frame")

    @classmethod
    def build(
        cls, T: int, s_avg: int = 64, window: int = 8, weights=None, max_scales: int = 4
    ) -> "ScaleSet":
        # log2(T / S_avg) scales, capped so the coarsest span stays bounded
        # and the hierarchical pass stays sub-quadratic in T
        n = max(1, int(math.floor(math.log2(max(T / s_avg, 1.0)))))
        if max_scales:
            n = min(n, max_scales)
        scales = list(range(n))
        if weights is None:
            weights = [1.0 / n] * n
        return cls(T, scales, list(weights), window)

    def pooled_length(self, s: int) -> int:
        return -(-self.T // (1 << s))


@dataclass
class AttentionParams:
    """Shared q/k/v/output projections for one multi-head attention pass.

    Projections map d_model -> attn_dim (split across heads) and back.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int = 8

    def __post_init__(self):
        if self.attn_dim % self.heads != 0:
            raise ShapeError(
                f"head count {self.heads} must divide attention dim {self.attn_dim}"
            )

    @property
    def attn_dim(self) -> int:
        return self.wq.shape[1]

    def tensors(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


def init_attention_params(d_model: int, attn_dim: int, heads: int, rng) -> AttentionParams:
    def lin(n_in, n_out):
        w = Tensor(rng.standard_normal((n_in, n_out)) / math.sqrt(n_in), requires_grad=True)
        b = Tensor(np.zeros(n_out), requires_grad=True)
        return w, b

    wq, bq = lin(d_model, attn_dim)
    wk, bk = lin(d_model, attn_dim)
    wv, bv = lin(d_model, attn_dim)
    wo, bo = lin(attn_dim, d_model)
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, heads)


def _band_attention(
    q: Tensor, k: Tensor, v: Tensor, key_index: np.ndarray, valid: np.ndarray, heads: int
) -> Tensor:
    """Multi-head attention over a padded key band. q/k/v are [T, A]."""
    T, A = q.shape
    hd = A // heads
    K = key_index.shape[1]
    scale = 1.0 / math.sqrt(hd)
    kg = k.take_rows(key_index).reshape(T, K, heads, hd)
    scores = (q.reshape(T, 1, heads, hd) * kg).sum(axis=3) * scale
    alpha = masked_softmax(scores.transpose((0, 2, 1)), valid[:, None, :])
    vg = v.take_rows(key_index).reshape(T, K, heads, hd).transpose((0, 2, 1, 3))
    out = (alpha.reshape(T, heads, K, 1) * vg).sum(axis=2)
    return out.reshape(T, A)


def dswa_forward(
    x: Tensor,
    expanding: AttentionMask,
    shrinking: AttentionMask,
    params: AttentionParams,
) -> Tensor:
    """Dual sliding-window attention: the first half of the heads uses the
    expanding mask, the second half the shrinking mask."""
    if params.heads % 2 != 0:
        raise ShapeError(f"dual windows need an even head count, got {params.heads}")
    T = x.shape[0]
    if expanding.T != T or shrinking.T != T:
        raise ShapeError(
            f"masks built for T={expanding.T}/{shrinking.T} but input has T={T}"
        )
    q = x @ params.wq + params.bq
    k = x @ params.wk + params.bk
    v = x @ params.wv + params.bv
    half = params.attn_dim // 2
    hg = params.heads // 2
    out_e = _band_attention(
        q[:, :half], k[:, :half], v[:, :half], expanding.key_index, expanding.valid, hg
    )
    out_s = _band_attention(
        q[:, half:], k[:, half:], v[:, half:], shrinking.key_index, shrinking.valid, hg
    )
    return concat([out_e, out_s], axis=1) @ params.wo + params.bo


def _hta_band(T: int, scales: ScaleSet) -> tuple[np.ndarray, np.ndarray]:
    """Frame-level union neighborhood as a contiguous band.

    Per-scale neighborhoods nest (each contains the query frame and doubles
    in span), so the union is the coarsest scale's frame interval.
    """
    w = scales.window
    top = max(scales.scales)
    f = 1 << top
    i_pool = np.arange(T) // f
    lo = (i_pool - w) * f
    hi = (i_pool + w + 1) * f - 1
    K = int((hi - lo).max()) + 1
    idx = lo[:, None] + np.arange(K)[None, :]
    valid = (idx >= 0) & (idx < T) & (idx <= hi[:, None])
    return np.clip(idx, 0, T - 1), valid


def hta_forward(x: Tensor, scales: ScaleSet, params: AttentionParams) -> Tensor:
    """Hierarchical temporal attention.

    Per scale s the input is mean-pooled by 2**s, windowed scores are
    computed at pooled resolution and broadcast back to frames; scores are
    aggregated across scales (softmax over the union neighborhood) and
    applied to frame-resolution values.
    """
    T = x.shape[0]
    if scales.T != T:
        raise ShapeError(f"scale set built for T={scales.T}, input has T={T}")
    H = params.heads
    hd = params.attn_dim // H
    scale_qk = 1.0 / math.sqrt(hd)
    w = scales.window
    W = 2 * w + 1
    key_index, valid = _hta_band(T, scales)
    K = key_index.shape[1]
    v = x @ params.wv + params.bv

    combined = None
    union_valid = np.zeros((T, K), dtype=bool)
    for s, ws in zip(scales.scales, scales.weights):
        f = 1 << s
        xp = mean_pool1d(x, f)
        ts = xp.shape[0]
        qp = (xp @ params.wq + params.bq).reshape(ts, 1, H, hd)
        kp = xp @ params.wk + params.bk
        off = np.arange(-w, w + 1)
        pool_idx = np.arange(ts)[:, None] + off[None, :]
        pool_ok = (pool_idx >= 0) & (pool_idx < ts)
        kg = kp.take_rows(np.clip(pool_idx, 0, ts - 1)).reshape(ts, W, H, hd)
        band = (qp * kg).sum(axis=3) * scale_qk  # [ts, W, H]
        # broadcast pooled scores to the frame-level band
        i_pool = (np.arange(T) // f)[:, None]
        j_pool = key_index // f
        rel = j_pool - i_pool + w
        in_scale = valid & (rel >= 0) & (rel < W) & pool_ok[np.clip(i_pool, 0, ts - 1), np.clip(rel, 0, W - 1)]
        flat = np.clip(i_pool, 0, ts - 1) * W + np.clip(rel, 0, W - 1)
        contrib = band.reshape(ts * W, H).take_rows(flat) * in_scale[:, :, None].astype(float)
        combined = contrib * ws if combined is None else combined + contrib * ws
        union_valid |= in_scale
    alpha = masked_softmax(combined.transpose((0, 2, 1)), union_valid[:, None, :])
    vg = v.take_rows(key_index).reshape(T, K, H, hd).transpose((0, 2, 1, 3))
    out = (alpha.reshape(T, H, K, 1) * vg).sum(axis=2).reshape(T, params.attn_dim)
    return out @ params.wo + params.bo


def aggregate_scales(
    scores: list[np.ndarray], weights: list[float], neighborhoods: list[np.ndarray]
) -> np.ndarray:
    """Cross-scale score aggregation on dense [T, T] score maps.

    alpha_ij = exp(sum_s w_s e_ij^s) / sum_{k in union of neighborhoods}
    exp(sum_s w_s e_ik^s); a pair missing at a scale contributes 0.
    Rows of the result sum to 1 over the union; entries outside are 0.
    """
    if len(scores) != len(weights) or len(scores) != len(neighborhoods):
        raise ShapeError("scores, weights and neighborhoods must align")
    union = np.zeros_like(neighborhoods[0], dtype=bool)
    total = np.zeros_like(scores[0], dtype=float)
    for e, ws, nb in zip(scores, weights, neighborhoods):
        total = total + ws * np.where(nb, e, 0.0)
        union |= nb
    if not union.any(axis=1).all():
        q = int(np.argmin(union.any(axis=1)))
        raise MaskError(f"query {q} has an empty neighborhood union")
    shifted = np.where(union, total, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(union, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def dense_attention_oracle(
    x: np.ndarray, params: AttentionParams, mask: np.ndarray, head_slice: slice | None = None
) -> np.ndarray:
    """Plain O(T^2) multi-head masked attention on numpy arrays; reference
    for the sparse band implementation. Returns pre-output-projection head
    outputs over the given channel slice."""
    q = x @ params.wq.data + params.bq.data
    k = x @ params.wk.data + params.bk.data
    v = x @ params.wv.data + params.bv.data
    if head_slice is not None:
        q, k, v = q[:, head_slice], k[:, head_slice], v[:, head_slice]
    heads = params.heads if head_slice is None else params.heads // 2
    T, A = q.shape
    hd = A // heads
    out = np.zeros((T, A))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        scores = np.where(mask, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(scores), 0.0)
        alpha = e / e.sum(axis=1, keepdims=True)
        out[:, sl] = alpha @ v[:, sl]
    return out
