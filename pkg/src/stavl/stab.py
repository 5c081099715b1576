"""The spatio-temporal alignment block: raw video in, LM-width visual tokens out.

Pipeline (default switches)::

    patchify -> crop to valid patches -> LSTE -> LSD -> FSRA (per frame)
                                                     -> GSTRA (whole clip)
             -> fuse -> [ctx_t, rows with <row>] -> MLP

Padded patches are removed by cropping to the valid rectangle. When the valid
patch count is odd it is padded back to even with masked zero tokens so that
2x2 windows stay aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aggregators as agg
from . import lsd as lsd_mod
from . import lste as lste_mod
from . import sequencer as seq_mod
from .config import ModelConfig
from .core import (PatchGrid, ShapeError, VideoClip, ceil_div, patchify_backward, patchify_forward, rect_mask,
                   zero_padding)
from .params import ParamStore, uniform_init
from .sequencer import Layout


def init_stab_params(cfg: ModelConfig, store: ParamStore | None = None) -> ParamStore:
    store = ParamStore() if store is None else store
    sw, d, seed = cfg.ablate, cfg.d, cfg.seed
    k = 3 * cfg.p * cfg.p
    store.add("patch.w", uniform_init(seed, "patch.w", (k, d), k), "patch")
    store.add("patch.b", np.zeros(d), "patch")
    if not sw.no_lste:
        lste_mod.init_params(store, d, cfg.r, seed)
    if sw.downsample == "lsd":
        lsd_mod.init_params(store, cfg.h_max, cfg.w_max, d, seed)
    elif sw.downsample == "resampler":
        lsd_mod.init_resampler(store, d, seed)
    if not sw.no_fsra:
        agg.init_fsra(store, cfg.T_max, d, seed)
    if not sw.no_gstra:
        agg.init_gstra(store, d, seed)
    agg.init_fusion(store, d, seed, with_alpha=not (sw.no_fsra or sw.no_gstra))
    seq_mod.init_params(store, d, cfg.mlp_width, cfg.d_lm, seed, with_row=not sw.no_row)
    return store


@dataclass
class StabOutput:
    tokens: np.ndarray  # [B, M, d_lm]
    layout: Layout
    down: np.ndarray  # [B, T, h', w', d]
    context: np.ndarray  # [B, T, d]
    block: int | None  # patches per down-token side, None = whole frame
    cache: tuple


def _as_batch(clip: VideoClip) -> VideoClip:
    if clip.data.ndim == 4:
        return VideoClip(clip.data[None], clip.valid_hw)
    return clip


def stab_forward(store: ParamStore, cfg: ModelConfig, clip: VideoClip) -> StabOutput:
    """Run the visual path on a batch ``[B, T, H, W, 3]`` sharing one valid extent."""
    clip = _as_batch(clip)
    sw = cfg.ablate
    if clip.T > cfg.T_max:
        raise ShapeError(f"clip has {clip.T} frames, T_max is {cfg.T_max}")
    if clip.data.shape[-3] > cfg.H_max or clip.data.shape[-2] > cfg.W_max:
        raise ShapeError(f"frame {clip.data.shape[-3:-1]} exceeds {cfg.H_max}x{cfg.W_max}")
    video, valid_hw = clip.data, clip.valid_hw
    if sw.downsample == "half_resolution":
        # zero the padding first so no 2x2 block straddles valid and padded pixels
        video = lsd_mod.decimate_pixels(zero_padding(video, valid_hw))
        valid_hw = (ceil_div(valid_hw[0], 2), ceil_div(valid_hw[1], 2))
    grid, patches = patchify_forward(VideoClip(video, valid_hw), store["patch.w"], store["patch.b"], cfg.p)
    hv, wv = grid.valid
    x = grid.data[..., :hv, :wv, :]
    mask = None
    if sw.downsample in ("lsd", "avg_pool") and (hv % 2 or wv % 2):
        he, we = lsd_mod.even_grid((hv, wv))
        x = np.pad(x, [(0, 0)] * (x.ndim - 3) + [(0, he - hv), (0, we - wv), (0, 0)])
        mask = rect_mask((he, we), (hv, wv))

    caches = {}

    def run_lste(inp, m):
        if sw.no_lste:
            return inp
        out, caches["lste"] = lste_mod.lste_forward(inp, lste_mod.from_store(store), m, cfg.lste_activation)
        return out

    def run_down(inp, m):
        if sw.downsample == "lsd":
            out, caches["down"] = lsd_mod.lsd_forward(inp, lsd_mod.from_store(store), m)
        elif sw.downsample == "avg_pool":
            out, caches["down"] = lsd_mod.avg_pool_forward(inp, m)
        elif sw.downsample == "resampler":
            attn = lsd_mod.attention_from_store(store, "lsd.resampler")
            out, caches["down"] = lsd_mod.resampler_forward(inp, store["lsd.resampler_query"], attn, m)
        else:
            out = inp
        return out

    if sw.position == "lsd_after_lste":
        pre = run_lste(x, mask)
        down = run_down(pre, mask)
    else:
        pre = None
        down = run_lste(run_down(x, mask), None)

    T = down.shape[-4]
    fs = g = None
    if not sw.no_fsra:
        fs, caches["fsra"] = agg.fsra_forward(down, agg.fsra_from_store(store))
    if not sw.no_gstra:
        if sw.gstra_pre_lsd and pre is not None:
            g, caches["gstra"] = agg.gstra_forward(pre, agg.gstra_from_store(store), mask)
        else:
            g, caches["gstra"] = agg.gstra_forward(down, agg.gstra_from_store(store))
    ctx, caches["fuse"] = agg.fuse_forward(fs, g, agg.fusion_from_store(store), n_frames=T)
    tokens, layout, caches["seq"] = seq_mod.build_sequence_forward(down, ctx, seq_mod.from_store(store))

    block = None if sw.downsample == "resampler" else 2
    cache = (caches, patches, grid.data.shape, (hv, wv), x.shape, pre is not None and sw.gstra_pre_lsd)
    return StabOutput(tokens, layout, down, ctx, block, cache)


def _attn_grads(prefix: str, g) -> dict:
    return {f"{prefix}.wq": g.wq, f"{prefix}.wk": g.wk, f"{prefix}.wv": g.wv}


def stab_backward(store: ParamStore, cfg: ModelConfig, out: StabOutput, dtokens: np.ndarray) -> dict:
    """Gradients of every visual-path parameter given ``dL/dtokens``."""
    caches, patches, grid_shape, (hv, wv), x_shape, g_pre = out.cache
    sw = cfg.ablate
    grads: dict[str, np.ndarray] = {}

    ddown, dctx, gs = seq_mod.build_sequence_backward(dtokens, caches["seq"])
    if gs.row_token is not None:
        grads["sequencer.row_token"] = gs.row_token
    grads.update({"sequencer.w1": gs.w1, "sequencer.b1": gs.b1, "sequencer.w2": gs.w2, "sequencer.b2": gs.b2})

    dfs, dg, gf = agg.fuse_backward(dctx, caches["fuse"])
    if gf.alpha is not None:
        grads["fusion.alpha"] = gf.alpha
    grads["fusion.proj_w"], grads["fusion.proj_b"] = gf.proj_w, gf.proj_b

    dpre = None
    if dg is not None:
        dkeys, gg = agg.gstra_backward(dg, caches["gstra"])
        grads["gstra.global_query"] = gg.global_query
        grads.update(_attn_grads("gstra.attn", gg.attn))
        if g_pre:
            dpre = dkeys
        else:
            ddown = ddown + dkeys
    if dfs is not None:
        dkeys, gfs = agg.fsra_backward(dfs, caches["fsra"])
        grads["fsra.frame_queries"] = gfs.frame_queries
        grads.update(_attn_grads("fsra.attn", gfs.attn))
        ddown = ddown + dkeys

    def back_lste(dy):
        if sw.no_lste:
            return dy
        dx, gl = lste_mod.lste_backward(dy, caches["lste"])
        grads.update(lste_mod.grads_to_dict(gl))
        return dx

    def back_down(dy):
        if sw.downsample == "lsd":
            dx, gd = lsd_mod.lsd_backward(dy, caches["down"])
            grads["lsd.queries"] = gd.queries
            grads.update(_attn_grads("lsd.attn", gd.attn))
            return dx
        if sw.downsample == "avg_pool":
            return lsd_mod.avg_pool_backward(dy, caches["down"])
        if sw.downsample == "resampler":
            dx, dq, ga = lsd_mod.resampler_backward(dy, caches["down"])
            grads["lsd.resampler_query"] = dq
            grads.update(_attn_grads("lsd.resampler", ga))
            return dx
        return dy

    if sw.position == "lsd_after_lste":
        dpre_total = back_down(ddown)
        if dpre is not None:
            dpre_total = dpre_total + dpre
        dx = back_lste(dpre_total)
    else:
        dx = back_down(back_lste(ddown))

    dgrid = np.zeros(grid_shape)
    dgrid[..., :hv, :wv, :] = dx[..., :hv, :wv, :]
    grads["patch.w"], grads["patch.b"] = patchify_backward(dgrid, patches, store["patch.w"])
    return grads


def encode(store: ParamStore, cfg: ModelConfig, clip: VideoClip):
    """Convenience wrapper: ``(tokens, layout)`` for one clip or a batch."""
    single = clip.data.ndim == 4
    out = stab_forward(store, cfg, clip)
    tokens = out.tokens[0] if single else out.tokens
    return tokens, out.layout


def visual_grid(store: ParamStore, cfg: ModelConfig, clip: VideoClip) -> PatchGrid:
    out = stab_forward(store, cfg, clip)
    return PatchGrid(out.down, out.down.shape[-3:-1])
