"""Tiny causal decoder standing in for the language model, the synthetic
vocabulary tokenizer, and a deterministic teacher feature stub.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .core import ceil_div, count_macs, extract_patches, gelu, gelu_backward, zero_padding
from .params import ParamStore, tensor_rng, uniform_init
from .sequencer import CONTEXT, ROW_SPLIT, SPATIAL, Layout

LN_EPS = 1e-5
POS_SCALE = 0.1


class ContextOverflow(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

SPECIALS = ["<pad>", "<eos>", "<unk>"]
WORDS = [
    "Q:", "A:", "?", "what", "which", "how", "many", "is", "the", "are", "there",
    "color", "of", "square", "squares", "direction", "does", "move", "flash",
    "flashes", "first", "in", "video",
    "red", "green", "blue", "yellow",
    "one", "two", "three", "four",
    "left", "right", "up", "down",
]


class Tokenizer:
    """Whitespace tokenizer over a fixed word list; line number in the vocab file is the id."""

    def __init__(self, words: list[str] | None = None):
        self.words = list(words) if words is not None else SPECIALS + WORDS
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def pad_id(self) -> int:
        return self.index["<pad>"]

    @property
    def eos_id(self) -> int:
        return self.index["<eos>"]

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        unk = self.index["<unk>"]
        return [self.index.get(w, unk) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(Path(path).read_text().splitlines())

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.words == other.words


# ---------------------------------------------------------------------------
# toy decoder
# ---------------------------------------------------------------------------


def init_lm_params(cfg: ModelConfig, store: ParamStore | None = None) -> ParamStore:
    store = ParamStore() if store is None else store
    D, V, seed = cfg.d_lm, cfg.vocab_size, cfg.seed
    F = 4 * D

    def rnd(name, shape, fan_in, scale=1.0):
        store.add(name, uniform_init(seed, name, shape, fan_in, scale), "lm")

    rnd("lm.tok_emb", (V, D), D)
    # small positions so visual content is not drowned out at init
    rnd("lm.pos_emb", (cfg.lm_context, D), D, POS_SCALE)
    for l in range(cfg.lm_layers):
        pre = f"lm.{l}"
        store.add(f"{pre}.ln1.g", np.ones(D), "lm")
        store.add(f"{pre}.ln1.b", np.zeros(D), "lm")
        for n in ("wq", "wk", "wv", "wo"):
            rnd(f"{pre}.attn.{n}", (D, D), D)
        store.add(f"{pre}.ln2.g", np.ones(D), "lm")
        store.add(f"{pre}.ln2.b", np.zeros(D), "lm")
        rnd(f"{pre}.ff.w1", (D, F), D)
        store.add(f"{pre}.ff.b1", np.zeros(F), "lm")
        rnd(f"{pre}.ff.w2", (F, D), F)
        store.add(f"{pre}.ff.b2", np.zeros(D), "lm")
    store.add("lm.lnf.g", np.ones(D), "lm")
    store.add("lm.lnf.b", np.zeros(D), "lm")
    rnd("lm.head.w", (D, V), D)
    store.add("lm.head.b", np.zeros(V), "lm")
    return store


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def layer_norm_backward(dy, cache):
    xh, inv, g = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xh.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, H):
    B, L, D = x.shape
    return x.reshape(B, L, H, D // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def causal_attention(x, wq, wk, wv, wo, H):
    B, L, D = x.shape
    count_macs(4 * B * L * D * D + 2 * B * L * L * D, "lm_attn")
    q, k, v = _split_heads(x @ wq, H), _split_heads(x @ wk, H), _split_heads(x @ wv, H)
    scale = 1.0 / math.sqrt(D // H)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = s + np.triu(np.full((L, L), -np.inf), k=1)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = _merge_heads(a @ v)
    return o @ wo, (x, q, k, v, a, o, scale, wq, wk, wv, wo, H)


def causal_attention_backward(dy, cache):
    x, q, k, v, a, o, scale, wq, wk, wv, wo, H = cache
    D = x.shape[-1]
    dwo = o.reshape(-1, D).T @ dy.reshape(-1, D)
    do = _split_heads(dy @ wo.T, H)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    x2 = x.reshape(-1, D)
    dwq = x2.T @ dq.reshape(-1, D)
    dwk = x2.T @ dk.reshape(-1, D)
    dwv = x2.T @ dv.reshape(-1, D)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, dwq, dwk, dwv, dwo


@dataclass
class OutputPartition:
    v_pred: np.ndarray  # [B, M, d_lm]
    other_logits: np.ndarray  # [B, N, vocab]
    text_targets: np.ndarray  # [B, N]


def lm_forward(store: ParamStore, cfg: ModelConfig, visual: np.ndarray, text_ids: np.ndarray):
    """Prepend ``visual [B, M, d_lm]`` to embedded ``text_ids [B, N]``.

    Returns the final normalised states at visual positions and, for every
    text position k, the logits predicting ``text_ids[:, k]`` (read at
    position ``M + k - 1``).
    """
    visual = np.asarray(visual)
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if visual.ndim == 2:
        visual, text_ids = visual[None], text_ids[None]
        part, cache = lm_forward(store, cfg, visual, text_ids)
        return OutputPartition(part.v_pred[0], part.other_logits[0], part.text_targets[0]), cache
    B, M, D = visual.shape
    N = text_ids.shape[1]
    L = M + N
    if L > cfg.lm_context:
        raise ContextOverflow(f"sequence of {L} tokens exceeds context {cfg.lm_context}")
    if M == 0:
        raise ValueError("at least one visual token is required")
    emb = store["lm.tok_emb"][text_ids]
    x = np.concatenate([visual, emb], axis=1) + store["lm.pos_emb"][:L]
    blocks = []
    for l in range(cfg.lm_layers):
        pre = f"lm.{l}"
        h1, ln1 = layer_norm(x, store[f"{pre}.ln1.g"], store[f"{pre}.ln1.b"])
        att, ac = causal_attention(h1, *(store[f"{pre}.attn.{n}"] for n in ("wq", "wk", "wv", "wo")), cfg.lm_heads)
        x = x + att
        h2, ln2 = layer_norm(x, store[f"{pre}.ln2.g"], store[f"{pre}.ln2.b"])
        count_macs(2 * h2.size * store[f"{pre}.ff.w1"].shape[1], "lm_ff")
        f1 = h2 @ store[f"{pre}.ff.w1"] + store[f"{pre}.ff.b1"]
        f1a = gelu(f1)
        f2 = f1a @ store[f"{pre}.ff.w2"] + store[f"{pre}.ff.b2"]
        x = x + f2
        blocks.append((ln1, ac, ln2, h2, f1, f1a))
    hf, lnf = layer_norm(x, store["lm.lnf.g"], store["lm.lnf.b"])
    read = hf[:, M - 1:M + N - 1]
    logits = read @ store["lm.head.w"] + store["lm.head.b"]
    part = OutputPartition(hf[:, :M], logits, text_ids)
    cache = (M, N, text_ids, blocks, lnf, read)
    return part, cache


def lm_backward(store: ParamStore, cfg: ModelConfig, cache, dv_pred, dlogits):
    """Returns ``(d_visual, grads)``; either upstream gradient may be ``None``."""
    M, N, text_ids, blocks, lnf, read = cache
    xh = lnf[0]
    B, L, D = xh.shape
    grads = {}
    dhf = np.zeros((B, L, D))
    if dv_pred is not None:
        dhf[:, :M] += dv_pred
    if dlogits is not None and N > 0:
        grads["lm.head.w"] = read.reshape(-1, D).T @ dlogits.reshape(-1, dlogits.shape[-1])
        grads["lm.head.b"] = dlogits.reshape(-1, dlogits.shape[-1]).sum(axis=0)
        dhf[:, M - 1:M + N - 1] += dlogits @ store["lm.head.w"].T
    else:
        grads["lm.head.w"] = np.zeros_like(store["lm.head.w"])
        grads["lm.head.b"] = np.zeros_like(store["lm.head.b"])
    dx, grads["lm.lnf.g"], grads["lm.lnf.b"] = layer_norm_backward(dhf, lnf)
    for l in reversed(range(cfg.lm_layers)):
        pre = f"lm.{l}"
        ln1, ac, ln2, h2, f1, f1a = blocks[l]
        w1, w2 = store[f"{pre}.ff.w1"], store[f"{pre}.ff.w2"]
        F = w1.shape[1]
        grads[f"{pre}.ff.w2"] = f1a.reshape(-1, F).T @ dx.reshape(-1, D)
        grads[f"{pre}.ff.b2"] = dx.reshape(-1, D).sum(axis=0)
        df1 = gelu_backward(dx @ w2.T, f1)
        grads[f"{pre}.ff.w1"] = h2.reshape(-1, D).T @ df1.reshape(-1, F)
        grads[f"{pre}.ff.b1"] = df1.reshape(-1, F).sum(axis=0)
        dh2 = df1 @ w1.T
        dln, grads[f"{pre}.ln2.g"], grads[f"{pre}.ln2.b"] = layer_norm_backward(dh2, ln2)
        dx = dx + dln
        dh1, dwq, dwk, dwv, dwo = causal_attention_backward(dx, ac)
        grads[f"{pre}.attn.wq"], grads[f"{pre}.attn.wk"] = dwq, dwk
        grads[f"{pre}.attn.wv"], grads[f"{pre}.attn.wo"] = dwv, dwo
        dln, grads[f"{pre}.ln1.g"], grads[f"{pre}.ln1.b"] = layer_norm_backward(dh1, ln1)
        dx = dx + dln
    dpos = np.zeros_like(store["lm.pos_emb"])
    dpos[:L] = dx.sum(axis=0)
    grads["lm.pos_emb"] = dpos
    dtok = np.zeros_like(store["lm.tok_emb"])
    np.add.at(dtok, text_ids.reshape(-1), dx[:, M:].reshape(-1, D))
    grads["lm.tok_emb"] = dtok
    return dx[:, :M], grads


# ---------------------------------------------------------------------------
# teacher stub
# ---------------------------------------------------------------------------


class TeacherStub:
    """Frozen feature generator keyed to the student's token layout.

    ``linear_probe``: pooled raw patch pixels through a fixed random linear map.
    ``frozen_random``: the same followed by ``tanh`` (a fixed random nonlinear
    feature). Spatial tokens pool their source window, context tokens the whole
    frame and ``<row>`` tokens the whole clip (valid patches only).
    """

    def __init__(self, p: int, d_out: int, seed: int, mode: str = "linear_probe", bias: bool = False):
        if mode not in ("linear_probe", "frozen_random"):
            raise ValueError(f"unknown teacher mode {mode!r}")
        k = 3 * p * p
        rng = tensor_rng(seed, "teacher")
        self.p, self.mode = p, mode
        self.weight = rng.uniform(-1.0, 1.0, size=(k, d_out)) * math.sqrt(3.0 / k)
        self.bias = rng.uniform(-0.1, 0.1, size=d_out) if bias else np.zeros(d_out)
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "TeacherStub":
        return cls(cfg.p, cfg.d_lm, cfg.seed + 7919, cfg.teacher_mode)

    def pooled_pixels(self, video, valid_hw, layout: Layout, block: int | None):
        video = np.asarray(video)
        single = video.ndim == 4
        if single:
            video = video[None]
        patches = extract_patches(zero_padding(video, valid_hw), self.p)
        hv, wv = ceil_div(valid_hw[0], self.p), ceil_div(valid_hw[1], self.p)
        patches = patches[:, : layout.T, :hv, :wv]
        B, T, _, _, k = patches.shape
        frame_mean = patches.mean(axis=(2, 3))
        clip_mean = patches.mean(axis=(1, 2, 3))
        if block is None:
            cells = frame_mean[:, :, None, None, :]
        else:
            hh, ww = ceil_div(hv, block), ceil_div(wv, block)
            padded = np.zeros((B, T, hh * block, ww * block, k))
            padded[:, :, :hv, :wv] = patches
            cnt = np.zeros((hh * block, ww * block))
            cnt[:hv, :wv] = 1.0
            sums = padded.reshape(B, T, hh, block, ww, block, k).sum(axis=(3, 5))
            n = cnt.reshape(hh, block, ww, block).sum(axis=(1, 3))
            cells = sums / n[..., None]
        if cells.shape[2:4] != (layout.h, layout.w):
            raise ValueError(f"teacher grid {cells.shape[2:4]} does not match layout {(layout.h, layout.w)}")
        out = np.empty((B, layout.M, k))
        r = layout.role
        out[:, r == CONTEXT] = frame_mean[:, layout.frame[r == CONTEXT]]
        sp = r == SPATIAL
        out[:, sp] = cells[:, layout.frame[sp], layout.row[sp], layout.col[sp]]
        out[:, r == ROW_SPLIT] = clip_mean[:, None, :]
        return out[0] if single else out

    def tokens(self, video, valid_hw, layout: Layout, block: int | None = 2) -> np.ndarray:
        pooled = self.pooled_pixels(video, valid_hw, layout, block)
        feats = pooled @ self.weight + self.bias
        if self.mode == "frozen_random":
            feats = np.tanh(feats)
        return feats


def teacher_tokens(teacher: TeacherStub, clip, layout: Layout, block: int | None = 2) -> np.ndarray:
    return teacher.tokens(clip.data, clip.valid_hw, layout, block)
