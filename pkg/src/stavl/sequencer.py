"""Visual token sequence construction.

Per frame the layout is ``[context, row 0 tokens, <row>, row 1 tokens, <row>, ...]``.
Every token, context and ``<row>`` included, goes through the same two-layer
MLP into the language model width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ShapeError, gelu, gelu_backward, linear, linear_backward
from .params import ParamStore, uniform_init

CONTEXT, SPATIAL, ROW_SPLIT = 0, 1, 2
ROLE_NAMES = {CONTEXT: "context", SPATIAL: "spatial", ROW_SPLIT: "row_split"}


class SequencerParams(NamedTuple):
    row_token: np.ndarray | None  # [d]
    w1: np.ndarray  # [d, d_mlp]
    b1: np.ndarray
    w2: np.ndarray  # [d_mlp, d_lm]
    b2: np.ndarray


def init_params(store: ParamStore, d: int, d_mlp: int, d_lm: int, seed: int, with_row: bool = True) -> None:
    if with_row:
        store.add("sequencer.row_token", uniform_init(seed, "sequencer.row_token", (d,), d), "sequencer")
    store.add("sequencer.w1", uniform_init(seed, "sequencer.w1", (d, d_mlp), d), "sequencer")
    store.add("sequencer.b1", np.zeros(d_mlp), "sequencer")
    store.add("sequencer.w2", uniform_init(seed, "sequencer.w2", (d_mlp, d_lm), d_mlp), "sequencer")
    store.add("sequencer.b2", np.zeros(d_lm), "sequencer")


def from_store(store: ParamStore) -> SequencerParams:
    row = store["sequencer.row_token"] if "sequencer.row_token" in store else None
    return SequencerParams(row, store["sequencer.w1"], store["sequencer.b1"], store["sequencer.w2"], store["sequencer.b2"])


@dataclass(frozen=True)
class Layout:
    """Per-token metadata of a visual sequence.

    ``source`` indexes the stacked array ``[contexts (T), spatial (T*h*w), row token]``.
    """

    T: int
    h: int
    w: int
    role: np.ndarray
    frame: np.ndarray
    row: np.ndarray
    col: np.ndarray
    source: np.ndarray

    @property
    def M(self) -> int:
        return int(self.role.size)

    def manifest(self) -> str:
        lines = ["index\trole\tframe\trow\tcol"]
        for k in range(self.M):
            lines.append(f"{k}\t{ROLE_NAMES[int(self.role[k])]}\t{self.frame[k]}\t{self.row[k]}\t{self.col[k]}")
        return "\n".join(lines) + "\n"


def sequence_length(T: int, h: int, w: int, no_row: bool = False) -> int:
    return T * (1 + h * (w if no_row else w + 1))


def sequence_layout(T: int, h: int, w: int, no_row: bool = False) -> Layout:
    role, frame, row, col, source = [], [], [], [], []
    row_src = T + T * h * w
    for t in range(T):
        role.append(CONTEXT)
        frame.append(t)
        row.append(-1)
        col.append(-1)
        source.append(t)
        for i in range(h):
            for j in range(w):
                role.append(SPATIAL)
                frame.append(t)
                row.append(i)
                col.append(j)
                source.append(T + (t * h + i) * w + j)
            if not no_row:
                role.append(ROW_SPLIT)
                frame.append(t)
                row.append(i)
                col.append(-1)
                source.append(row_src)
    arr = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return Layout(T, h, w, arr(role), arr(frame), arr(row), arr(col), arr(source))


def build_sequence_forward(down: np.ndarray, ctx: np.ndarray, params: SequencerParams):
    """``down [..., T, h, w, d]`` and ``ctx [..., T, d]`` -> tokens ``[..., M, d_lm]``."""
    *lead, T, h, w, d = down.shape
    if ctx.shape[-2:] != (T, d) or tuple(ctx.shape[:-2]) != tuple(lead):
        raise ShapeError(f"context {ctx.shape} does not match grid {down.shape}")
    no_row = params.row_token is None
    layout = sequence_layout(T, h, w, no_row)
    parts = [ctx, down.reshape(*lead, T * h * w, d)]
    if not no_row:
        parts.append(np.broadcast_to(params.row_token, (*lead, 1, d)))
    src = np.concatenate(parts, axis=-2)
    x = src[..., layout.source, :]
    hid = linear(x, params.w1, params.b1, tag="mlp1")
    act = gelu(hid)
    out = linear(act, params.w2, params.b2, tag="mlp2")
    return out, layout, (x, hid, act, params, layout, src.shape, down.shape)


def build_sequence_backward(dout, cache):
    """Returns ``(d_down, d_ctx, SequencerParams-of-grads)``."""
    x, hid, act, params, layout, src_shape, down_shape = cache
    dact, dw2, db2 = linear_backward(dout, act, params.w2)
    dhid = gelu_backward(dact, hid)
    dx, dw1, db1 = linear_backward(dhid, x, params.w1)
    dsrc = np.zeros(src_shape)
    np.add.at(dsrc, (..., layout.source, slice(None)), dx)
    T = layout.T
    dctx = dsrc[..., :T, :]
    ddown = dsrc[..., T:T + T * layout.h * layout.w, :].reshape(down_shape)
    drow = None
    if params.row_token is not None:
        drow = dsrc[..., -1, :].reshape(-1, dsrc.shape[-1]).sum(axis=0)
    return ddown, dctx, SequencerParams(drow, dw1, db1, dw2, db2)


def build_sequence(down: np.ndarray, ctx: np.ndarray, params: SequencerParams):
    out, layout, _ = build_sequence_forward(down, ctx, params)
    return out, layout
