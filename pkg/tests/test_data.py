import math
import struct
from fractions import Fraction

import numpy as np
import pytest

from stavl.data import (
    ANSWERS,
    MAGIC,
    TASKS,
    DataError,
    frame_indices,
    generate_dataset,
    generate_samples,
    label,
    load_dataset,
    read_clip,
    render,
    sample_frames,
    write_clip,
)
from stavl.lm import Tokenizer


def linspace_oracle(T, n):
    """Round-half-up of evenly spaced positions, in exact arithmetic."""
    if n == 1:
        return [0]
    return [math.floor(Fraction(k * (T - 1), n - 1) + Fraction(1, 2)) for k in range(n)]


class TestSampleFrames:
    def test_identity(self, rng):
        clip = rng.random((8, 2, 2, 3))
        np.testing.assert_array_equal(sample_frames(clip), clip)

    @pytest.mark.parametrize("T", [1, 2, 3, 5, 9, 16, 17, 31, 100])
    def test_matches_linspace_oracle(self, T):
        assert list(frame_indices(T)) == linspace_oracle(T, 8)

    def test_stated_cases(self):
        assert list(frame_indices(16)) == [0, 2, 4, 6, 9, 11, 13, 15]
        assert list(frame_indices(3)) == [0, 0, 1, 1, 1, 1, 2, 2]

    def test_other_target(self):
        assert list(frame_indices(5, 3)) == [0, 2, 4]

    def test_empty(self):
        with pytest.raises(DataError):
            frame_indices(0)


class TestClipFile:
    def test_roundtrip(self, tmp_path, rng):
        data = rng.random((3, 5, 4, 3)).astype(np.float32)
        write_clip(tmp_path / "a.stvb", data)
        back = read_clip(tmp_path / "a.stvb")
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, data)

    def test_header(self, tmp_path):
        write_clip(tmp_path / "a.stvb", np.zeros((2, 3, 4, 3), np.float32))
        raw = (tmp_path / "a.stvb").read_bytes()
        magic, version, T, H, W, tag = struct.unpack_from("<4sHHHHH", raw)
        assert (magic, T, H, W) == (MAGIC, 2, 3, 4)
        assert len(raw) == 14 + 4 * 2 * 3 * 4 * 3

    def test_corrupt(self, tmp_path):
        write_clip(tmp_path / "a.stvb", np.zeros((1, 2, 2, 3), np.float32))
        raw = (tmp_path / "a.stvb").read_bytes()
        (tmp_path / "b.stvb").write_bytes(b"XXXX" + raw[4:])
        (tmp_path / "c.stvb").write_bytes(raw[:-4])
        for name in ("b.stvb", "c.stvb"):
            with pytest.raises(DataError):
                read_clip(tmp_path / name)

    def test_bad_shape(self, tmp_path):
        with pytest.raises(DataError):
            write_clip(tmp_path / "a.stvb", np.zeros((2, 2, 3)))


class TestGenerator:
    @pytest.mark.parametrize("task", TASKS)
    def test_labeler_agrees(self, task):
        samples = generate_samples(200, task, seed=3)
        tok = Tokenizer()
        for s in samples:
            assert label(task, s.clip) == tok.decode(s.answer)

    @pytest.mark.parametrize("task", TASKS)
    def test_answers_cover_the_closed_set(self, task):
        tok = Tokenizer()
        seen = {tok.decode(s.answer) for s in generate_samples(200, task, seed=4)}
        assert seen == set(ANSWERS[task])

    @pytest.mark.parametrize("size", [(8, 16, 16), (4, 32, 48), (3, 12, 12)])
    def test_other_sizes(self, size):
        T, H, W = size
        for task in TASKS:
            clip, ans = render(task, np.random.default_rng(0), T, H, W)
            assert clip.shape == (T, H, W, 3)
            assert label(task, clip) == ans

    @pytest.mark.parametrize("task", ["direction", "order"])
    def test_shuffled_frames_lose_the_answer(self, task):
        # with frames shuffled the labeler still sees which colours or which axis
        # occur but not their order, so it can only guess between two answers
        samples = generate_samples(200, task, seed=5)
        tok = Tokenizer()
        rng = np.random.default_rng(0)
        ordered = np.mean([label(task, s.clip) == tok.decode(s.answer) for s in samples])
        shuffled = np.mean([label(task, s.clip[rng.permutation(len(s.clip))]) == tok.decode(s.answer)
                            for s in samples])
        assert ordered == 1.0
        sigma = math.sqrt(0.25 / len(samples))
        assert abs(shuffled - 0.5) < 3 * sigma

    def test_deterministic(self, tmp_path):
        a = generate_dataset(12, "color,direction,order,count", 9, tmp_path / "a")
        b = generate_dataset(12, "color,direction,order,count", 9, tmp_path / "b")
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_layout_and_roundtrip(self, tmp_path):
        out = generate_dataset(5, "count", 1, tmp_path / "d")
        assert (out / "samples.tsv").exists() and (out / "vocab.txt").exists()
        assert len(list((out / "clips").glob("*.stvb"))) == 5
        samples, tok = load_dataset(out)
        ref = generate_samples(5, "count", 1)
        for s, r in zip(samples, ref):
            assert (s.id, s.task, s.question, s.answer) == (r.id, r.task, r.question, r.answer)
            np.testing.assert_array_equal(s.clip, r.clip)
        assert tok == Tokenizer()

    def test_unknown_task_is_named(self):
        with pytest.raises(DataError, match="bogus"):
            generate_samples(3, "color,bogus", 0)

    def test_bad_n(self):
        with pytest.raises(DataError):
            generate_samples(0, "color", 0)

    def test_not_a_dataset(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_values_in_unit_range(self):
        for s in generate_samples(40, TASKS, seed=2):
            assert s.clip.min() >= 0 and s.clip.max() <= 1
