"""Three-stage training: alignment with the LM frozen, then end-to-end, then answer tuning.

Checkpoint directory::

    manifest.tsv   name, dtype, shape, offset, role, frozen
    params.bin     tensors back to back, little-endian float64
    config.cfg     model config (key=value)
    vocab.txt      tokenizer words
    state.json     stage, seed, step count, generator state
    losses.tsv     per-step total / text / distill loss and lr
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .lm import TeacherStub, Tokenizer
from .model import LossParts, forward_loss, init_params, make_batch
from .params import ParamStore

PEAK_LR = {1: 4e-4, 2: 4e-5, 3: 2e-5}
WARMUP = {1: 0.03, 2: 0.01, 3: 0.01}


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    data: str | None = None
    batch_size: int = 8
    lr: float | None = None
    warmup_ratio: float | None = None
    weight_decay: float = 0.0
    epochs: int = 1
    lr_scale: float = 1.0
    distill: bool | None = None
    answer_only: bool | None = None
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @property
    def freeze_lm(self) -> bool:
        return self.stage == 1

    @property
    def peak_lr(self) -> float:
        base = PEAK_LR[self.stage] if self.lr is None else self.lr
        return base * self.lr_scale

    @property
    def warmup(self) -> float:
        return WARMUP[self.stage] if self.warmup_ratio is None else self.warmup_ratio

    @property
    def use_distill(self) -> bool:
        return self.stage < 3 if self.distill is None else self.distill

    @property
    def answers_only(self) -> bool:
        return self.stage == 3 if self.answer_only is None else self.answer_only


def warmup_steps(total: int, ratio: float) -> int:
    return max(1, math.ceil(ratio * total))


def lr_schedule(step: int, total: int, peak: float, warmup_ratio: float) -> float:
    """Linear 0 -> peak over the warmup steps, then cosine down to 0 at ``total - 1``."""
    W = warmup_steps(total, warmup_ratio)
    if step < W:
        return peak * step / W
    span = total - 1 - W
    if span <= 0:
        return peak
    prog = min(1.0, (step - W) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * prog))


class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, grads: dict[str, np.ndarray], lr: float, names) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in names:
            g = grads[n]
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            v = self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            w = store[n]
            if self.wd:
                upd = upd + self.wd * w
            store[n] = w - lr * upd


def clip_grads(grads: dict[str, np.ndarray], names, max_norm: float) -> float:
    """Scales ``grads[names]`` in place to global norm ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in names))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for n in names:
            grads[n] = grads[n] * s
    return total


@dataclass
class TrainReport:
    stage: int
    losses: list[LossParts]
    lrs: list[float]
    store: ParamStore
    rng_state: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.losses)


def run_stage(scfg: StageConfig, store: ParamStore, cfg: ModelConfig, samples, tokenizer: Tokenizer,
              teacher: TeacherStub | None = None, log=None) -> TrainReport:
    """Train ``store`` in place for ``scfg.epochs`` shuffled passes over ``samples``."""
    if not samples:
        raise ValueError("stage dataset is empty")
    teacher = teacher or TeacherStub.for_config(cfg)
    store.frozen.clear()
    if scfg.freeze_lm:
        store.freeze_role("lm")
    names = store.trainable()
    rng = np.random.default_rng([scfg.seed, scfg.stage])
    per_epoch = math.ceil(len(samples) / scfg.batch_size)
    total = per_epoch * scfg.epochs
    opt = AdamW(scfg.betas, scfg.adam_eps, scfg.weight_decay)
    losses: list[LossParts] = []
    lrs: list[float] = []
    step = 0
    for _ in range(scfg.epochs):
        order = rng.permutation(len(samples))
        for k in range(per_epoch):
            idx = order[k * scfg.batch_size:(k + 1) * scfg.batch_size]
            batch = make_batch([samples[i] for i in idx], tokenizer.pad_id, scfg.answers_only)
            parts, grads = forward_loss(store, cfg, batch, teacher, scfg.use_distill)
            if not np.isfinite(parts.total):
                raise NumericalError(
                    f"non-finite loss at stage {scfg.stage} step {step}: "
                    f"text={parts.text} distill={parts.distill}")
            clip_grads(grads, names, scfg.clip_norm)
            # position 0 of the schedule is the untrained state, update k sits at k + 1
            lr = lr_schedule(step + 1, total + 1, scfg.peak_lr, scfg.warmup)
            opt.step(store, grads, lr, names)
            losses.append(parts)
            lrs.append(lr)
            if log is not None:
                log(scfg.stage, step, total, parts, lr)
            step += 1
    return TrainReport(scfg.stage, losses, lrs, store, rng.bit_generator.state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    store: ParamStore
    cfg: ModelConfig
    tokenizer: Tokenizer
    state: dict
    losses: list[tuple[float, float, float | None, float]] = field(default_factory=list)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows = ["name\tdtype\tshape\toffset\trole\tfrozen"]
    offset = 0
    with open(path / "params.bin", "wb") as fh:
        for name, value in ckpt.store.items():
            raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
            shape = "x".join(map(str, value.shape)) or "scalar"
            rows.append(f"{name}\tf8\t{shape}\t{offset}\t{ckpt.store.roles[name]}\t{int(name in ckpt.store.frozen)}")
            fh.write(raw)
            offset += len(raw)
    (path / "manifest.tsv").write_text("\n".join(rows) + "\n")
    ckpt.cfg.save(path / "config.cfg")
    ckpt.tokenizer.save(path / "vocab.txt")
    (path / "state.json").write_text(json.dumps(ckpt.state, indent=1, sort_keys=True) + "\n")
    lines = ["step\ttotal\ttext\tdistill\tlr"]
    for i, (tot, txt, dis, lr) in enumerate(ckpt.losses):
        lines.append(f"{i}\t{tot!r}\t{txt!r}\t{'' if dis is None else repr(dis)}\t{lr!r}")
    (path / "losses.tsv").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not (path / "manifest.tsv").exists():
        raise CheckpointError(f"{path} is not a checkpoint (manifest.tsv missing)")
    raw = (path / "params.bin").read_bytes()
    store = ParamStore()
    for line in (path / "manifest.tsv").read_text().splitlines()[1:]:
        name, dtype, shape, offset, role, frozen = line.split("\t")
        if dtype != "f8":
            raise CheckpointError(f"{name}: unsupported dtype {dtype}")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        n = int(np.prod(dims, dtype=np.int64))
        start = int(offset)
        if start + 8 * n > len(raw):
            raise CheckpointError(f"{name}: payload truncated")
        store.add(name, np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(dims).copy(), role)
        if frozen == "1":
            store.frozen.add(name)
    losses = []
    lpath = path / "losses.tsv"
    if lpath.exists():
        for line in lpath.read_text().splitlines()[1:]:
            _, tot, txt, dis, lr = line.split("\t")
            losses.append((float(tot), float(txt), float(dis) if dis else None, float(lr)))
    return Checkpoint(store, ModelConfig.load(path / "config.cfg"), Tokenizer.load(path / "vocab.txt"),
                      json.loads((path / "state.json").read_text()), losses)


def report_losses(report: TrainReport) -> list[tuple[float, float, float | None, float]]:
    return [(p.total, p.text, p.distill, lr) for p, lr in zip(report.losses, report.lrs)]


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def half_subset(samples, seed: int):
    """Deterministic ``floor(n/2)`` subset used by stage 1, kept in dataset order."""
    n = len(samples)
    idx = np.sort(np.random.default_rng([seed, 0x5EED]).choice(n, size=n // 2, replace=False))
    return [samples[i] for i in idx]


def run_pipeline(cfg: ModelConfig, stages: list[StageConfig], datasets: dict[int, list], tokenizer: Tokenizer,
                 out_dir: str | Path | None = None, resume: Checkpoint | None = None,
                 stage1_half: bool = True, allow_scratch: bool = False, log=None) -> Checkpoint:
    """Runs the given stages in order, each starting from the previous stage's parameters.

    Stage 1 trains on half of the stage-2 set when ``stage1_half`` is set and a
    stage-2 set is supplied. Starting after stage 1 needs ``resume`` unless
    ``allow_scratch`` is set (single-stage ablation runs).
    """
    stages = sorted(stages, key=lambda s: s.stage)
    if not stages:
        raise ValueError("no stages to run")
    first = stages[0].stage
    if resume is None:
        if first != 1 and not allow_scratch:
            raise CheckpointError(f"stage {first} needs the stage {first - 1} checkpoint")
        store = init_params(cfg)
    else:
        done = int(resume.state.get("stage", 0))
        if done != first - 1:
            raise CheckpointError(f"checkpoint is from stage {done}, cannot start stage {first}")
        if resume.cfg != cfg:
            raise CheckpointError("checkpoint config differs from the requested config")
        store = resume.store.copy()
    teacher = TeacherStub.for_config(cfg)
    ckpt = resume
    for scfg in stages:
        data = datasets.get(scfg.stage)
        if scfg.stage == 1 and stage1_half and 2 in datasets:
            data = half_subset(datasets[2], scfg.seed)
        if not data:
            raise ValueError(f"no data for stage {scfg.stage}")
        rep = run_stage(scfg, store, cfg, data, tokenizer, teacher, log)
        state = {"stage": scfg.stage, "seed": scfg.seed, "steps": rep.steps, "n_samples": len(data),
                 "rng": rep.rng_state}
        ckpt = Checkpoint(store.copy(), cfg, tokenizer, state, report_losses(rep))
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"stage{scfg.stage}", ckpt)
    return ckpt


def stage_configs(which, **overrides) -> list[StageConfig]:
    """``which`` is ``1``, ``2``, ``3`` or ``"all"``."""
    ids = (1, 2, 3) if which == "all" else (int(which),)
    return [StageConfig(stage=s, **overrides) for s in ids]


def with_stage(scfg: StageConfig, **kw) -> StageConfig:
    return replace(scfg, **kw)
