"""Local spatio-temporal encoding.

A bottleneck of three convolutions with kernels (1,1,1), (3,1,1), (1,1,1) and a
residual, followed by a depthwise (3,3,3) dynamic positional encoding with a
second residual. All convolutions are zero padded so shapes are preserved.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import ShapeError, count_macs, gelu, gelu_backward, linear, linear_backward
from .kernels import dwconv3_backward, dwconv3_forward, tconv3_backward, tconv3_forward
from .params import ParamStore, uniform_init


class LsteParams(NamedTuple):
    conv1_w: np.ndarray  # [d, d/r]
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # [3, d/r, d/r]
    conv2_b: np.ndarray
    conv3_w: np.ndarray  # [d/r, d]
    conv3_b: np.ndarray
    dpe_w: np.ndarray  # [3, 3, 3, d]
    dpe_b: np.ndarray


NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "dpe.w", "dpe.b")


def init_params(store: ParamStore, d: int, r: int, seed: int, prefix: str = "lste") -> None:
    c = d // r
    shapes = {
        "conv1.w": ((d, c), d),
        "conv2.w": ((3, c, c), 3 * c),
        "conv3.w": ((c, d), c),
        "dpe.w": ((3, 3, 3, d), 27),
    }
    for name in NAMES:
        full = f"{prefix}.{name}"
        if name.endswith(".b"):
            size = {"conv1.b": c, "conv2.b": c, "conv3.b": d, "dpe.b": d}[name]
            store.add(full, np.zeros(size), "lste")
        else:
            shape, fan_in = shapes[name]
            store.add(full, uniform_init(seed, full, shape, fan_in), "lste")


def from_store(store: ParamStore, prefix: str = "lste") -> LsteParams:
    return LsteParams(*(store[f"{prefix}.{n}"] for n in NAMES))


def grads_to_dict(g: LsteParams, prefix: str = "lste") -> dict:
    return {f"{prefix}.{n}": v for n, v in zip(NAMES, g)}


def lste_forward(x: np.ndarray, params: LsteParams, mask: np.ndarray | None = None, activation: bool = False):
    """``x`` is ``[B, T, h, w, d]``; ``mask [h, w]`` re-zeroes padded sites after each residual."""
    d = x.shape[-1]
    if params.conv1_w.shape[0] != d or params.conv3_w.shape[1] != d or params.dpe_w.shape[-1] != d:
        raise ShapeError(f"LSTE parameters do not match {d} input channels")
    m = None if mask is None else mask[..., None].astype(x.dtype)
    a1 = linear(x, params.conv1_w, params.conv1_b, tag="lste_conv1")
    g1 = gelu(a1) if activation else a1
    n_sites = x.size // d
    cb = params.conv2_w.shape[1]
    count_macs(n_sites * 3 * cb * params.conv2_w.shape[2], "lste_conv2")
    a2 = tconv3_forward(g1, params.conv2_w, params.conv2_b)
    g2 = gelu(a2) if activation else a2
    a3 = linear(g2, params.conv3_w, params.conv3_b, tag="lste_conv3")
    lp = a3 + x
    if m is not None:
        lp = lp * m
    count_macs(n_sites * 27 * d, "lste_dpe")
    dp = dwconv3_forward(lp, params.dpe_w, params.dpe_b)
    out = lp + dp
    if m is not None:
        out = out * m
    cache = (x, a1, g1, a2, g2, lp, m, params, activation)
    return out, cache


def lste_backward(dout, cache):
    x, a1, g1, a2, g2, lp, m, params, activation = cache
    if m is not None:
        dout = dout * m
    dlp_extra, ddpe_w, ddpe_b = dwconv3_backward(dout, lp, params.dpe_w)
    dlp = dout + dlp_extra
    if m is not None:
        dlp = dlp * m
    dx = dlp.copy()
    dg2, dw3, db3 = linear_backward(dlp, g2, params.conv3_w)
    da2 = gelu_backward(dg2, a2) if activation else dg2
    dg1, dw2, db2 = tconv3_backward(da2, g1, params.conv2_w)
    da1 = gelu_backward(dg1, a1) if activation else dg1
    dx1, dw1, db1 = linear_backward(da1, x, params.conv1_w)
    dx += dx1
    return dx, LsteParams(dw1, db1, dw2, db2, dw3, db3, ddpe_w, ddpe_b)


def lste(x: np.ndarray, params: LsteParams, mask=None, activation: bool = False) -> np.ndarray:
    return lste_forward(x, params, mask, activation)[0]
