"""Synthetic video question answering data and its on-disk formats.

Layout of a dataset directory::

    clips/{id}.stvb    one ClipFile per sample
    samples.tsv        id, task, question ids, answer ids
    vocab.txt          one token per line, line number = id

``direction`` and ``order`` can only be answered from the frame order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .lm import Tokenizer

TASKS = ("color", "count", "direction", "order")
COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.92, 0.85, 0.10),
}
COUNTS = ("one", "two", "three", "four")
DIRECTIONS = ("left", "right", "up", "down")
QUESTIONS = {
    "color": "Q: what color is the square ? A:",
    "count": "Q: how many squares are there ? A:",
    "direction": "Q: which direction does the square move ? A:",
    "order": "Q: which color flashes first ? A:",
}
ANSWERS = {
    "color": tuple(COLORS),
    "count": COUNTS,
    "direction": DIRECTIONS,
    "order": tuple(COLORS),
}
BACKGROUND = 0.1
NOISE = 0.05


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# clip file
# ---------------------------------------------------------------------------

MAGIC = b"STVB"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHHHHH")


def write_clip(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 4 or data.shape[-1] != 3:
        raise DataError(f"clip must be [T, H, W, 3], got {data.shape}")
    T, H, W, _ = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, H, W, DTYPE_F32))
        fh.write(payload)


def read_clip(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, T, H, W, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION or tag != DTYPE_F32:
        raise DataError(f"{path}: unsupported version {version} / dtype tag {tag}")
    n = T * H * W * 3
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise DataError(f"{path}: payload has {len(body)} bytes, expected {4 * n}")
    return np.frombuffer(body, dtype="<f4").reshape(T, H, W, 3).copy()


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------


def frame_indices(T: int, T_target: int = 8) -> np.ndarray:
    """Round-half-up of ``linspace(0, T-1, T_target)``."""
    if T < 1:
        raise DataError("clip has no frames")
    return np.floor(np.linspace(0.0, T - 1, T_target) + 0.5).astype(np.int64)


def sample_frames(clip: np.ndarray, T_target: int = 8) -> np.ndarray:
    return clip[frame_indices(clip.shape[0], T_target)]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _canvas(rng, T, H, W):
    return BACKGROUND + NOISE * rng.random((T, H, W, 3))


def _paint(frame, y, x, size, color):
    frame[y:y + size, x:x + size] = color


def render(task: str, rng: np.random.Generator, T: int = 8, H: int = 32, W: int = 32):
    """Returns ``(clip, answer_word)``."""
    clip = _canvas(rng, T, H, W)
    if task == "color":
        name = rng.choice(ANSWERS["color"])
        size = max(1, min(H, W) // 4)
        y, x = rng.integers(0, H - size + 1), rng.integers(0, W - size + 1)
        for t in range(T):
            _paint(clip[t], y, x, size, COLORS[name])
        return clip, str(name)
    if task == "count":
        n = int(rng.integers(1, 5))
        name = rng.choice(ANSWERS["color"])
        cell = min(H, W) // 4
        size = max(1, cell * 3 // 4)
        slots = rng.choice(16, size=n, replace=False)
        for s in slots:
            gy, gx = divmod(int(s), 4)
            # offsets below cell - size keep a background gap between squares
            y = gy * cell + rng.integers(0, cell - size)
            x = gx * cell + rng.integers(0, cell - size)
            for t in range(T):
                _paint(clip[t], y, x, size, COLORS[name])
        return clip, COUNTS[n - 1]
    if task == "direction":
        name = str(rng.choice(DIRECTIONS))
        size = max(1, min(H, W) // 4)
        step = max(1, min(2, (min(H, W) - size) // max(1, T - 1)))
        travel = step * (T - 1)
        color = COLORS[str(rng.choice(ANSWERS["color"]))]
        y0 = int(rng.integers(0, H - size + 1))
        x0 = int(rng.integers(0, W - size + 1))
        if name in ("left", "right"):
            x0 = int(rng.integers(0, W - size - travel + 1))
        else:
            y0 = int(rng.integers(0, H - size - travel + 1))
        for t in range(T):
            y, x = y0, x0
            if name == "right":
                x = x0 + step * t
            elif name == "left":
                x = x0 + travel - step * t
            elif name == "down":
                y = y0 + step * t
            else:
                y = y0 + travel - step * t
            _paint(clip[t], y, x, size, color)
        return clip, name
    if task == "order":
        first, second = rng.choice(ANSWERS["order"], size=2, replace=False)
        size = max(1, min(H, W) * 5 // 16)
        # two back-to-back flashes of 1-3 frames each, blank before and after
        la, lb = (int(v) for v in rng.integers(1, 4, size=2))
        la, lb = min(la, max(1, T // 2)), min(lb, max(1, T - T // 2))
        start = int(rng.integers(0, T - la - lb + 1))
        y, x = rng.integers(0, H - size + 1), rng.integers(0, W - size + 1)
        for t in range(start, start + la):
            _paint(clip[t], y, x, size, COLORS[str(first)])
        for t in range(start + la, start + la + lb):
            _paint(clip[t], y, x, size, COLORS[str(second)])
        return clip, str(first)
    raise DataError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# independent rule-based labeler
# ---------------------------------------------------------------------------


def _foreground(frame):
    return frame.max(axis=-1) > BACKGROUND + 0.3


def _nearest_color(rgb):
    names = list(COLORS)
    dist = [np.linalg.norm(np.asarray(COLORS[n]) - rgb) for n in names]
    return names[int(np.argmin(dist))]


def label(task: str, clip: np.ndarray) -> str:
    """Recover the answer from pixels alone (used to audit the generator)."""
    if task == "color":
        fg = _foreground(clip[0])
        return _nearest_color(clip[0][fg].mean(axis=0))
    if task == "count":
        _, n = ndimage.label(_foreground(clip[0]))
        return COUNTS[min(max(n, 1), 4) - 1]
    if task == "direction":
        cents = [np.argwhere(_foreground(f)).mean(axis=0) for f in (clip[0], clip[-1])]
        dy, dx = cents[1] - cents[0]
        if abs(dx) >= abs(dy):
            return "right" if dx > 0 else "left"
        return "down" if dy > 0 else "up"
    if task == "order":
        for frame in clip:
            fg = _foreground(frame)
            if fg.any():
                return _nearest_color(frame[fg].mean(axis=0))
        raise DataError("order clip has no flash")
    raise DataError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    id: str
    task: str
    question: list[int]
    answer: list[int]
    clip: np.ndarray  # [T, H, W, 3] float32


def parse_tasks(tasks) -> tuple[str, ...]:
    names = [t.strip() for t in tasks.split(",")] if isinstance(tasks, str) else list(tasks)
    names = [t for t in names if t]
    if not names:
        raise DataError("no task given")
    for t in names:
        if t not in TASKS:
            raise DataError(f"unknown task {t!r}; choose from {', '.join(TASKS)}")
    return tuple(names)


def generate_samples(n: int, tasks, seed: int, T: int = 8, H: int = 32, W: int = 32,
                     tokenizer: Tokenizer | None = None) -> list[Sample]:
    if n < 1:
        raise DataError("n must be >= 1")
    tasks = parse_tasks(tasks)
    tok = tokenizer or Tokenizer()
    out = []
    for i in range(n):
        task = tasks[i % len(tasks)]
        rng = np.random.default_rng([seed, i])
        clip, answer = render(task, rng, T, H, W)
        out.append(Sample(f"{i:06d}", task, tok.encode(QUESTIONS[task]), tok.encode(answer), clip.astype(np.float32)))
    return out


def save_dataset(samples: list[Sample], out: str | Path, tokenizer: Tokenizer | None = None) -> Path:
    out = Path(out)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    tok = tokenizer or Tokenizer()
    rows = []
    for s in samples:
        write_clip(out / "clips" / f"{s.id}.stvb", s.clip)
        rows.append(f"{s.id}\t{s.task}\t{' '.join(map(str, s.question))}\t{' '.join(map(str, s.answer))}")
    (out / "samples.tsv").write_text("id\ttask\tquestion\tanswer\n" + "\n".join(rows) + "\n")
    tok.save(out / "vocab.txt")
    return out


def generate_dataset(n: int, tasks, seed: int, out: str | Path, **kw) -> Path:
    return save_dataset(generate_samples(n, tasks, seed, **kw), out)


def load_dataset(path: str | Path) -> tuple[list[Sample], Tokenizer]:
    path = Path(path)
    if not (path / "samples.tsv").exists():
        raise DataError(f"{path} is not a dataset directory (samples.tsv missing)")
    tok = Tokenizer.load(path / "vocab.txt")
    samples = []
    lines = (path / "samples.tsv").read_text().splitlines()[1:]
    for line in lines:
        if not line.strip():
            continue
        sid, task, q, a = line.split("\t")
        clip = read_clip(path / "clips" / f"{sid}.stvb")
        samples.append(Sample(sid, task, [int(v) for v in q.split()], [int(v) for v in a.split()], clip))
    if not samples:
        raise DataError(f"{path} has no samples")
    return samples, tok
