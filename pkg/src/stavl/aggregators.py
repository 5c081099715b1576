"""Frame-wise and global token aggregation, and their learned fusion."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import (
    AttentionParams,
    MaskError,
    ShapeError,
    attention_core,
    attention_core_backward,
    linear,
    linear_backward,
)
from .lsd import attention_from_store, init_attention
from .params import ParamStore, uniform_init


class FsraParams(NamedTuple):
    frame_queries: np.ndarray  # [T_max, d]
    attn: AttentionParams


class GstraParams(NamedTuple):
    global_query: np.ndarray  # [1, d]
    attn: AttentionParams


class FusionParams(NamedTuple):
    alpha: np.ndarray | None  # [d]; None when one of the two paths is ablated
    proj_w: np.ndarray
    proj_b: np.ndarray


def init_fsra(store: ParamStore, T_max: int, d: int, seed: int) -> None:
    store.add("fsra.frame_queries", uniform_init(seed, "fsra.frame_queries", (T_max, d), d), "fsra")
    init_attention(store, "fsra.attn", d, seed, "fsra")


def init_gstra(store: ParamStore, d: int, seed: int) -> None:
    store.add("gstra.global_query", uniform_init(seed, "gstra.global_query", (1, d), d), "gstra")
    init_attention(store, "gstra.attn", d, seed, "gstra")


def init_fusion(store: ParamStore, d: int, seed: int, with_alpha: bool = True) -> None:
    if with_alpha:
        store.add("fusion.alpha", np.full(d, 0.5), "fusion")
    store.add("fusion.proj_w", uniform_init(seed, "fusion.proj_w", (d, d), d), "fusion")
    store.add("fusion.proj_b", np.zeros(d), "fusion")


def fsra_from_store(store: ParamStore) -> FsraParams:
    return FsraParams(store["fsra.frame_queries"], attention_from_store(store, "fsra.attn"))


def gstra_from_store(store: ParamStore) -> GstraParams:
    return GstraParams(store["gstra.global_query"], attention_from_store(store, "gstra.attn"))


def fusion_from_store(store: ParamStore) -> FusionParams:
    alpha = store["fusion.alpha"] if "fusion.alpha" in store else None
    return FusionParams(alpha, store["fusion.proj_w"], store["fusion.proj_b"])


def _check_mask(mask, n_per_frame):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != n_per_frame:
        raise ShapeError(f"mask has {mask.size} entries, frame has {n_per_frame} tokens")
    if not mask.any():
        raise MaskError("frame has no valid token")
    return mask


def fsra_forward(down: np.ndarray, params: FsraParams, mask=None):
    """Row t attends from ``frame_queries[t]`` over the valid tokens of frame t.

    ``down [..., T, h, w, d] -> [..., T, d]``.
    """
    *lead, T, h, w, d = down.shape
    if T > params.frame_queries.shape[0]:
        raise ShapeError(f"{T} frames but only {params.frame_queries.shape[0]} frame queries")
    mask = _check_mask(mask, h * w)
    flat = down.reshape(*lead, T, h * w, d)
    q = params.frame_queries[:T, None, :]
    qp = linear(q, params.attn.wq, tag="fsra_q")
    kp = linear(flat, params.attn.wk, tag="fsra_k")
    vp = linear(flat, params.attn.wv, tag="fsra_v")
    out, core = attention_core(qp, kp, vp, mask, tag="fsra")
    return out[..., 0, :], (flat, q, params, core, down.shape)


def fsra_backward(dout, cache):
    flat, q, params, core, shape = cache
    dqp, dkp, dvp = attention_core_backward(dout[..., None, :], core)
    lead = dqp.ndim - q.ndim
    if lead:
        dqp = dqp.sum(axis=tuple(range(lead)))
    dwq = q.reshape(-1, q.shape[-1]).T @ dqp.reshape(-1, dqp.shape[-1])
    dq = dqp @ params.attn.wq.T
    dx_k, dwk, _ = linear_backward(dkp, flat, params.attn.wk, need_bias=False)
    dx_v, dwv, _ = linear_backward(dvp, flat, params.attn.wv, need_bias=False)
    dfq = np.zeros_like(params.frame_queries)
    dfq[: dq.shape[0]] = dq[:, 0, :]
    return (dx_k + dx_v).reshape(shape), FsraParams(dfq, AttentionParams(dwq, dwk, dwv))


def gstra_forward(full: np.ndarray, params: GstraParams, mask=None):
    """A single query attends over every valid token of every frame.

    ``full [..., T, h, w, d] -> [..., 1, d]``; ``mask [h, w]`` is shared by all frames.
    """
    *lead, T, h, w, d = full.shape
    mask = _check_mask(mask, h * w)
    flat = full.reshape(*lead, T * h * w, d)
    fmask = None if mask is None else np.tile(mask, T)
    qp = linear(params.global_query, params.attn.wq, tag="gstra_q")
    kp = linear(flat, params.attn.wk, tag="gstra_k")
    vp = linear(flat, params.attn.wv, tag="gstra_v")
    out, core = attention_core(qp, kp, vp, fmask, tag="gstra")
    return out, (flat, params, core, full.shape)


def gstra_backward(dout, cache):
    flat, params, core, shape = cache
    dqp, dkp, dvp = attention_core_backward(dout, core)
    dqp = dqp.reshape(-1, dqp.shape[-1]).sum(axis=0, keepdims=True)
    dwq = params.global_query.T @ dqp
    dgq = dqp @ params.attn.wq.T
    dx_k, dwk, _ = linear_backward(dkp, flat, params.attn.wk, need_bias=False)
    dx_v, dwv, _ = linear_backward(dvp, flat, params.attn.wv, need_bias=False)
    return (dx_k + dx_v).reshape(shape), GstraParams(dgq, AttentionParams(dwq, dwk, dwv))


def fuse_forward(frame_summaries, global_ctx, params: FusionParams, n_frames: int | None = None):
    """``proj(alpha * F_s[t] + (1 - alpha) * G)`` for every frame t.

    Either input may be ``None`` (ablated path); the other is then used alone,
    the global context being repeated for ``n_frames`` rows.
    """
    if frame_summaries is None and global_ctx is None:
        raise ShapeError("fusion needs at least one of frame summaries / global context")
    if frame_summaries is None:
        if n_frames is None:
            raise ShapeError("n_frames is required when frame summaries are ablated")
        z = np.repeat(global_ctx, n_frames, axis=-2)
    elif global_ctx is None:
        z = frame_summaries
    else:
        if params.alpha is None:
            raise ShapeError("fusion of both paths needs alpha")
        z = params.alpha * frame_summaries + (1.0 - params.alpha) * global_ctx
    out = linear(z, params.proj_w, params.proj_b, tag="fusion")
    return out, (frame_summaries, global_ctx, z, params)


def fuse_backward(dout, cache):
    """Returns ``(d_frame_summaries, d_global_ctx, FusionParams-of-grads)``."""
    fs, g, z, params = cache
    dz, dw, db = linear_backward(dout, z, params.proj_w)
    dalpha = None
    if fs is None:
        dfs, dg = None, dz.sum(axis=-2, keepdims=True)
    elif g is None:
        dfs, dg = dz, None
    else:
        dfs = dz * params.alpha
        dg = (dz * (1.0 - params.alpha)).sum(axis=-2, keepdims=True)
        dalpha = (dz * (fs - g)).reshape(-1, dz.shape[-1]).sum(axis=0)
    return dfs, dg, FusionParams(dalpha, dw, db)


def fuse(frame_summaries, global_ctx, params: FusionParams, n_frames: int | None = None) -> np.ndarray:
    return fuse_forward(frame_summaries, global_ctx, params, n_frames)[0]
