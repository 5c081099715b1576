"""Tensor contracts, patch embedding and the shared attention primitive.

Every op comes in three flavours: a plain function returning the output, a
``*_forward`` returning ``(out, cache)`` and a ``*_backward`` taking the
upstream gradient and the cache.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised on dimension or channel mismatches."""


class MaskError(ValueError):
    """Raised when an attention has no unmasked key."""


@dataclass
class VideoClip:
    """``data`` is ``[T, H, W, 3]`` (optionally with a leading batch axis)."""

    data: np.ndarray
    valid_hw: tuple[int, int] | None = None

    def __post_init__(self):
        if self.data.ndim not in (4, 5) or self.data.shape[-1] != 3:
            raise ShapeError(f"expected [..., T, H, W, 3], got {self.data.shape}")
        if self.valid_hw is None:
            self.valid_hw = tuple(self.data.shape[-3:-1])
        hv, wv = self.valid_hw
        if not (0 < hv <= self.data.shape[-3] and 0 < wv <= self.data.shape[-2]):
            raise ShapeError(f"valid_hw {self.valid_hw} outside frame {self.data.shape[-3:-1]}")

    @property
    def T(self) -> int:
        return self.data.shape[-4]


@dataclass
class PatchGrid:
    """``data`` is ``[..., T, h, w, d]``; ``valid`` counts non-padded rows/cols."""

    data: np.ndarray
    valid: tuple[int, int]

    @property
    def mask(self) -> np.ndarray:
        return rect_mask(self.data.shape[-3:-1], self.valid)


class AttentionParams(NamedTuple):
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray


def rect_mask(hw, valid) -> np.ndarray:
    m = np.zeros(hw, dtype=bool)
    m[: valid[0], : valid[1]] = True
    return m


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation (used by the profiler audit)
# ---------------------------------------------------------------------------

_mac_counter: list | None = None


def count_macs(n: int, tag: str) -> None:
    if _mac_counter is not None:
        _mac_counter.append((tag, int(n)))


@contextmanager
def mac_counter():
    """Collect ``(tag, macs)`` records from every instrumented matmul."""
    global _mac_counter
    prev, _mac_counter = _mac_counter, []
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, tag: str = "linear") -> np.ndarray:
    count_macs(x.size // x.shape[-1] * w.shape[0] * w.shape[1], tag)
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, w, need_bias=True):
    """Returns ``(dx, dw, db)`` for ``y = x @ w + b`` over arbitrary leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if need_bias else None
    dx = dy @ w.T
    return dx, dw, db


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------


def extract_patches(video: np.ndarray, p: int) -> np.ndarray:
    """``[..., T, H, W, 3] -> [..., T, H/p, W/p, 3p^2]``, patch vectors in (y, x, c) order."""
    *lead, T, H, W, C = video.shape
    if H % p or W % p:
        raise ShapeError(f"frame {H}x{W} not divisible by patch size {p}")
    h, w = H // p, W // p
    x = video.reshape(*lead, T, h, p, w, p, C)
    nl = len(lead)
    perm = list(range(nl)) + [nl + i for i in (0, 1, 3, 2, 4, 5)]
    return x.transpose(perm).reshape(*lead, T, h, w, p * p * C)


def zero_padding(video: np.ndarray, valid_hw) -> np.ndarray:
    """Zero every pixel outside the valid extent so padded content never leaks."""
    hv, wv = valid_hw
    H, W = video.shape[-3:-1]
    if hv == H and wv == W:
        return video
    out = video.copy()
    out[..., hv:, :, :] = 0.0
    out[..., :, wv:, :] = 0.0
    return out


def patchify_forward(clip: VideoClip, w: np.ndarray, b: np.ndarray, p: int):
    if w.shape != (3 * p * p, b.shape[0]):
        raise ShapeError(f"patch embedding must be [{3 * p * p}, d], got {w.shape}")
    video = zero_padding(clip.data, clip.valid_hw)
    patches = extract_patches(video, p)
    out = linear(patches, w, b, tag="patchify")
    valid = (ceil_div(clip.valid_hw[0], p), ceil_div(clip.valid_hw[1], p))
    return PatchGrid(out, valid), patches


def patchify_backward(dout: np.ndarray, patches: np.ndarray, w: np.ndarray):
    _, dw, db = linear_backward(dout, patches, w)
    return dw, db


def patchify(clip: VideoClip, w: np.ndarray, b: np.ndarray, p: int) -> PatchGrid:
    return patchify_forward(clip, w, b, p)[0]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention_core(qp, kp, vp, mask=None, tag: str = "attn"):
    """Softmax attention on already projected inputs.

    ``qp [..., nq, a]``, ``kp [..., nk, a]``, ``vp [..., nk, a]``; ``mask``
    broadcasts against ``[..., nk]``. Rows with no valid key produce zeros.
    """
    scale = 1.0 / math.sqrt(qp.shape[-1])
    s = (qp @ np.swapaxes(kp, -1, -2)) * scale
    count_macs(s.size * qp.shape[-1], tag + "_scores")
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask)[..., None, :], s.shape)
        s = np.where(m, s, -np.inf)
        smax = s.max(axis=-1, keepdims=True)
        smax = np.where(np.isfinite(smax), smax, 0.0)
        e = np.exp(s - smax)
        z = e.sum(axis=-1, keepdims=True)
        a = e / np.where(z > 0, z, 1.0)
    else:
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
    count_macs(a.size * vp.shape[-1], tag + "_values")
    out = a @ vp
    return out, (qp, kp, vp, a, scale)


def attention_core_backward(dout, cache):
    qp, kp, vp, a, scale = cache
    da = dout @ np.swapaxes(vp, -1, -2)
    dvp = np.swapaxes(a, -1, -2) @ dout
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
    ds *= scale
    dqp = ds @ kp
    dkp = np.swapaxes(ds, -1, -2) @ qp
    return dqp, dkp, dvp


def attend_forward(query, keys, values, params: AttentionParams, mask=None, tag="attn"):
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != keys.shape[-2]:
            raise ShapeError(f"mask length {mask.shape[-1]} != number of keys {keys.shape[-2]}")
        if not mask.any(axis=-1).all():
            raise MaskError("attention with every key masked is undefined")
    qp = linear(query, params.wq, tag=tag + "_q")
    kp = linear(keys, params.wk, tag=tag + "_k")
    vp = linear(values, params.wv, tag=tag + "_v")
    out, core = attention_core(qp, kp, vp, mask, tag=tag)
    return out, (query, keys, values, params, core)


def attend_backward(dout, cache):
    """Returns ``(dquery, dkeys, dvalues, AttentionParams-of-grads)``."""
    query, keys, values, params, core = cache
    dqp, dkp, dvp = attention_core_backward(dout, core)
    dq, dwq, _ = linear_backward(dqp, query, params.wq, need_bias=False)
    dk, dwk, _ = linear_backward(dkp, keys, params.wk, need_bias=False)
    dv, dwv, _ = linear_backward(dvp, values, params.wv, need_bias=False)
    return dq, dk, dv, AttentionParams(dwq, dwk, dwv)


def attend(query, keys, values, params: AttentionParams, mask=None) -> np.ndarray:
    """Scaled dot-product attention with learnable q/k/v projections.

    Masked keys (``mask == False``) get exactly zero weight. Scores are scaled
    by ``1/sqrt(d_attn)``.
    """
    return attend_forward(query, keys, values, params, mask)[0]


def attention_weights(query, keys, params: AttentionParams, mask=None) -> np.ndarray:
    qp = query @ params.wq
    kp = keys @ params.wk
    ones = np.eye(kp.shape[-2])
    return attention_core(qp, kp, ones, mask)[0]


# ---------------------------------------------------------------------------
# elementwise nonlinearity
# ---------------------------------------------------------------------------

def gelu(x):
    """tanh-approximated GELU."""
    return kernels.gelu_forward(x)


def gelu_backward(dy, x):
    return kernels.gelu_backward(dy, x)
