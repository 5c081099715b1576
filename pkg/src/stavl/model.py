"""Full model: visual path + toy LM + losses, with one combined backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .config import ModelConfig
from .core import VideoClip
from .lm import TeacherStub, init_lm_params, lm_backward, lm_forward
from .params import ParamStore
from .sequencer import SPATIAL
from .stab import init_stab_params, stab_backward, stab_forward


def init_params(cfg: ModelConfig) -> ParamStore:
    store = init_stab_params(cfg)
    init_lm_params(cfg, store)
    return store


@dataclass
class Batch:
    video: np.ndarray  # [B, T, H, W, 3]
    valid_hw: tuple[int, int]
    text_ids: np.ndarray  # [B, N]
    loss_weights: np.ndarray  # [B, N]
    tasks: list[str] = field(default_factory=list)

    @property
    def clip(self) -> VideoClip:
        return VideoClip(self.video, self.valid_hw)


def make_batch(samples, pad_id: int, answer_only: bool = False) -> Batch:
    """Right-pads ``question + answer`` ids; weights select which tokens count in the text loss."""
    video = np.stack([np.asarray(s.clip, dtype=np.float64) for s in samples])
    N = max(len(s.question) + len(s.answer) for s in samples)
    ids = np.full((len(samples), N), pad_id, dtype=np.int64)
    wts = np.zeros((len(samples), N))
    for b, s in enumerate(samples):
        seq = list(s.question) + list(s.answer)
        ids[b, : len(seq)] = seq
        start = len(s.question) if answer_only else 0
        wts[b, start: len(seq)] = 1.0
    return Batch(video, tuple(video.shape[2:4]), ids, wts, [s.task for s in samples])


@dataclass
class LossParts:
    total: float
    text: float
    distill: float | None


def forward_loss(store: ParamStore, cfg: ModelConfig, batch: Batch, teacher: TeacherStub | None,
                 use_distill: bool = True, need_grads: bool = True):
    """Returns ``(LossParts, grads | None)``; grads cover every tensor in ``store``."""
    sw = cfg.ablate
    vis = stab_forward(store, cfg, batch.clip)
    part, lm_cache = lm_forward(store, cfg, vis.tokens, batch.text_ids)
    text, tcache = losses.text_loss_forward(part.other_logits, part.text_targets, batch.loss_weights)
    total = text
    dist = None
    dcache = None
    distill_on = use_distill and sw.distill != "none" and teacher is not None
    if distill_on:
        target = teacher.tokens(batch.video, batch.valid_hw, vis.layout, vis.block)
        rows = (vis.layout.role == SPATIAL) if sw.distill_spatial_only else None
        if sw.distill == "mse":
            dist, dcache = losses.distill_loss_mse_forward(part.v_pred, target, rows)
        else:
            dist, dcache = losses.distill_loss_forward(part.v_pred, target, rows)
        total = text + cfg.distill_weight * dist
    parts = LossParts(total, text, dist)
    if not need_grads:
        return parts, None
    dlogits = losses.text_loss_backward(tcache)
    dv = None
    if distill_on:
        if sw.distill == "mse":
            dv = losses.distill_loss_mse_backward(dcache, cfg.distill_weight)
        else:
            dv = losses.distill_loss_backward(dcache, cfg.distill_weight)
    dvis, grads = lm_backward(store, cfg, lm_cache, dv, dlogits)
    grads.update(stab_backward(store, cfg, vis, dvis))
    return parts, grads


def greedy_answer(store: ParamStore, cfg: ModelConfig, clips: np.ndarray, valid_hw, questions: np.ndarray,
                  n_tokens: int = 1, candidates: np.ndarray | None = None) -> np.ndarray:
    """Greedy decoding of ``n_tokens`` after each question (questions share one length).

    ``candidates`` restricts the first decoded token to a closed answer set.
    """
    vis = stab_forward(store, cfg, VideoClip(np.asarray(clips, dtype=np.float64), valid_hw))
    ids = np.asarray(questions, dtype=np.int64)
    out = []
    for k in range(n_tokens):
        probe = np.concatenate([ids, np.zeros((ids.shape[0], 1), dtype=np.int64)], axis=1)
        part, _ = lm_forward(store, cfg, vis.tokens, probe)
        logits = part.other_logits[:, -1]
        if candidates is not None and k == 0:
            masked = np.full_like(logits, -np.inf)
            masked[:, candidates] = logits[:, candidates]
            logits = masked
        nxt = logits.argmax(axis=-1)
        out.append(nxt)
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return np.stack(out, axis=1)
