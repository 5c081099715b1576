"""Local spatial downsampling and the downsampling substitutes used in ablations.

LSD attends, per frame, from a learnable query owned by each output position
to the four tokens of its non-overlapping 2x2 window.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import (
    AttentionParams,
    PatchGrid,
    ShapeError,
    attention_core,
    attention_core_backward,
    ceil_div,
    linear,
    linear_backward,
    rect_mask,
)
from .params import ParamStore, uniform_init


class LsdParams(NamedTuple):
    queries: np.ndarray  # [h_max/2, w_max/2, d]
    attn: AttentionParams


def init_attention(store: ParamStore, prefix: str, d: int, seed: int, role: str) -> None:
    for n in ("wq", "wk", "wv"):
        store.add(f"{prefix}.{n}", uniform_init(seed, f"{prefix}.{n}", (d, d), d), role)


def attention_from_store(store: ParamStore, prefix: str) -> AttentionParams:
    return AttentionParams(store[f"{prefix}.wq"], store[f"{prefix}.wk"], store[f"{prefix}.wv"])


def init_params(store: ParamStore, h_max: int, w_max: int, d: int, seed: int) -> None:
    store.add("lsd.queries", uniform_init(seed, "lsd.queries", (h_max // 2, w_max // 2, d), d), "lsd")
    init_attention(store, "lsd.attn", d, seed, "lsd")


def from_store(store: ParamStore) -> LsdParams:
    return LsdParams(store["lsd.queries"], attention_from_store(store, "lsd.attn"))


def to_windows(x: np.ndarray) -> np.ndarray:
    """``[..., h, w, c] -> [..., h/2, w/2, 4, c]`` with window order (0,0),(0,1),(1,0),(1,1)."""
    *lead, h, w, c = x.shape
    nl = len(lead)
    y = x.reshape(*lead, h // 2, 2, w // 2, 2, c)
    perm = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return y.transpose(perm).reshape(*lead, h // 2, w // 2, 4, c)


def from_windows(x: np.ndarray) -> np.ndarray:
    *lead, hh, ww, _, c = x.shape
    nl = len(lead)
    y = x.reshape(*lead, hh, ww, 2, 2, c)
    perm = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return y.transpose(perm).reshape(*lead, hh * 2, ww * 2, c)


def _check_even(x):
    h, w = x.shape[-3:-1]
    if h % 2 or w % 2:
        raise ShapeError(f"LSD needs even grid sides, got {h}x{w}")


def halve_valid(valid) -> tuple[int, int]:
    return ceil_div(valid[0], 2), ceil_div(valid[1], 2)


def lsd_forward(x: np.ndarray, params: LsdParams, mask: np.ndarray | None = None):
    """``x [..., T, h, w, d] -> [..., T, h/2, w/2, d]``.

    Windows with no valid token produce zeros.
    """
    _check_even(x)
    h, w = x.shape[-3:-1]
    hh, ww = h // 2, w // 2
    if params.queries.shape[0] < hh or params.queries.shape[1] < ww:
        raise ShapeError(f"query grid {params.queries.shape[:2]} smaller than output {hh}x{ww}")
    q = params.queries[:hh, :ww, None, :]
    qp = linear(q, params.attn.wq, tag="lsd_q")
    kp = to_windows(linear(x, params.attn.wk, tag="lsd_k"))
    vp = to_windows(linear(x, params.attn.wv, tag="lsd_v"))
    wmask = None if mask is None else to_windows(mask[..., None])[..., 0]
    out, core = attention_core(qp, kp, vp, wmask, tag="lsd")
    out = out[..., 0, :]
    return out, (x, q, params, core)


def lsd_backward(dout, cache):
    x, q, params, core = cache
    dqp, dkp, dvp = attention_core_backward(dout[..., None, :], core)
    lead = dqp.ndim - q.ndim
    dqp = dqp.sum(axis=tuple(range(lead)))
    _, dwq, _ = linear_backward(dqp, q, params.attn.wq, need_bias=False)
    dq = dqp @ params.attn.wq.T
    dkp = from_windows(dkp)
    dvp = from_windows(dvp)
    dx_k, dwk, _ = linear_backward(dkp, x, params.attn.wk, need_bias=False)
    dx_v, dwv, _ = linear_backward(dvp, x, params.attn.wv, need_bias=False)
    dqueries = np.zeros_like(params.queries)
    dqueries[: dq.shape[0], : dq.shape[1]] = dq[:, :, 0, :]
    return dx_k + dx_v, LsdParams(dqueries, AttentionParams(dwq, dwk, dwv))


def lsd(grid: PatchGrid, params: LsdParams) -> PatchGrid:
    out, _ = lsd_forward(grid.data, params, grid.mask)
    return PatchGrid(out, halve_valid(grid.valid))


# ---------------------------------------------------------------------------
# ablation substitutes
# ---------------------------------------------------------------------------


def avg_pool_forward(x: np.ndarray, mask: np.ndarray | None = None):
    """Mean over the valid tokens of each 2x2 window."""
    _check_even(x)
    xw = to_windows(x)
    if mask is None:
        wts = np.full(xw.shape[-3:-1], 0.25)
    else:
        wm = to_windows(mask[..., None])[..., 0].astype(x.dtype)
        cnt = wm.sum(axis=-1, keepdims=True)
        wts = wm / np.where(cnt > 0, cnt, 1.0)
    out = (xw * wts[..., None]).sum(axis=-2)
    return out, wts


def avg_pool_backward(dout, wts):
    return from_windows(dout[..., None, :] * wts[..., None])


def decimate_pixels(video: np.ndarray) -> np.ndarray:
    """Halve frame resolution by averaging 2x2 pixel blocks (bilinear at exactly 1/2)."""
    *lead, T, H, W, C = video.shape
    if H % 2 or W % 2:
        raise ShapeError(f"cannot halve {H}x{W} frames")
    return video.reshape(*lead, T, H // 2, 2, W // 2, 2, C).mean(axis=(-4, -2))


def init_resampler(store: ParamStore, d: int, seed: int) -> None:
    store.add("lsd.resampler_query", uniform_init(seed, "lsd.resampler_query", (1, d), d), "lsd")
    init_attention(store, "lsd.resampler", d, seed, "lsd")


def resampler_forward(x: np.ndarray, query: np.ndarray, attn: AttentionParams, mask: np.ndarray | None = None):
    """One latent query per frame over all of that frame's tokens: ``[..., T, 1, 1, d]``."""
    *lead, h, w, d = x.shape
    flat = x.reshape(*lead, h * w, d)
    qp = linear(query, attn.wq, tag="resampler_q")
    kp = linear(flat, attn.wk, tag="resampler_k")
    vp = linear(flat, attn.wv, tag="resampler_v")
    fmask = None if mask is None else mask.reshape(-1)
    out, core = attention_core(qp, kp, vp, fmask, tag="resampler")
    return out.reshape(*lead, 1, 1, d), (flat, query, attn, core, x.shape)


def resampler_backward(dout, cache):
    flat, query, attn, core, xshape = cache
    *lead, _, _, d = dout.shape
    dqp, dkp, dvp = attention_core_backward(dout.reshape(*lead, 1, d), core)
    dqp = dqp.reshape(-1, d).sum(axis=0, keepdims=True)
    dquery = dqp @ attn.wq.T
    dwq = query.T @ dqp
    dx_k, dwk, _ = linear_backward(dkp, flat, attn.wk, need_bias=False)
    dx_v, dwv, _ = linear_backward(dvp, flat, attn.wv, need_bias=False)
    return (dx_k + dx_v).reshape(xshape), dquery, AttentionParams(dwq, dwk, dwv)


def window_mask(mask: np.ndarray) -> np.ndarray:
    return to_windows(mask[..., None])[..., 0].any(axis=-1)


def even_grid(hw) -> tuple[int, int]:
    return hw[0] + hw[0] % 2, hw[1] + hw[1] % 2


def valid_mask(hw, valid) -> np.ndarray:
    return rect_mask(hw, valid)
