"""Parameter counts, analytic FLOPs and latency of the visual path.

FLOPs count a multiply-accumulate as 2 and are reported per clip (all T
frames, batch of one). Only matmul-like work is counted: patch embedding,
LSTE convolutions, the LSD / resampler / FSRA / GSTRA projections and
attention products, the fusion projection and the sequencer MLP. Softmax,
normalisation, GELU and additions are left out, as usual.

Closed forms, with ``c = d / r`` and ``m`` the MLP width::

    patch      3 p^2 d + d
    lste       2 d c + 3 c^2 + 27 d + 2 c + 2 d
    lsd        (h_max/2)(w_max/2) d + 3 d^2      (resampler: d + 3 d^2)
    fsra       T_max d + 3 d^2
    gstra      d + 3 d^2
    fusion     [d] + d^2 + d                      (alpha only when both aggregators exist)
    sequencer  [d] + d m + m + m d_lm + d_lm      (<row> token unless no_row)
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .core import VideoClip, mac_counter
from .lsd import even_grid
from .params import ParamStore
from .sequencer import sequence_length

VISUAL_MODULES = ("patch", "lste", "lsd", "fsra", "gstra", "fusion", "sequencer")


def count_params(store: ParamStore, modules=VISUAL_MODULES) -> dict[str, int]:
    """Exact element counts per module from the tensors themselves."""
    out = {m: 0 for m in modules}
    for name, value in store.items():
        role = store.roles[name]
        if role in out:
            out[role] += int(value.size)
    return out


def closed_form_params(cfg: ModelConfig) -> dict[str, int]:
    """Per-module counts from the formulas in the module docstring."""
    sw, d, m, dl = cfg.ablate, cfg.d, cfg.mlp_width, cfg.d_lm
    c = d // cfg.r
    attn = 3 * d * d
    out = {"patch": 3 * cfg.p ** 2 * d + d}
    out["lste"] = 0 if sw.no_lste else 2 * d * c + 3 * c * c + 27 * d + 2 * c + 2 * d
    if sw.downsample == "lsd":
        out["lsd"] = (cfg.h_max // 2) * (cfg.w_max // 2) * d + attn
    elif sw.downsample == "resampler":
        out["lsd"] = d + attn
    else:
        out["lsd"] = 0
    out["fsra"] = 0 if sw.no_fsra else cfg.T_max * d + attn
    out["gstra"] = 0 if sw.no_gstra else d + attn
    both = not (sw.no_fsra or sw.no_gstra)
    out["fusion"] = (d if both else 0) + d * d + d
    out["sequencer"] = (0 if sw.no_row else d) + d * m + m + m * dl + dl
    return out


def lm_closed_form_params(cfg: ModelConfig) -> int:
    D, V = cfg.d_lm, cfg.vocab_size
    per_layer = 4 * D + 4 * D * D + 2 * 4 * D * D + 4 * D + D
    return V * D + cfg.lm_context * D + cfg.lm_layers * per_layer + 2 * D + D * V + V


def visual_grid_shape(cfg: ModelConfig, H: int, W: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """``(grid entering LSTE/downsampling, grid after downsampling)`` for full-frame input."""
    sw = cfg.ablate
    if sw.downsample == "half_resolution":
        H, W = H // 2, W // 2
    h, w = H // cfg.p, W // cfg.p
    if sw.downsample in ("lsd", "avg_pool"):
        h, w = even_grid((h, w))
        return (h, w), (h // 2, w // 2)
    if sw.downsample == "resampler":
        return (h, w), (1, 1)
    return (h, w), (h, w)


def estimate_macs(cfg: ModelConfig, T: int | None = None, H: int | None = None, W: int | None = None) -> dict[str, int]:
    """Multiply-accumulates per module for one clip of ``T`` frames at ``H x W``."""
    T = cfg.T_max if T is None else T
    H = cfg.H_max if H is None else H
    W = cfg.W_max if W is None else W
    sw, d, p = cfg.ablate, cfg.d, cfg.p
    c = d // cfg.r
    (h, w), (hd, wd) = visual_grid_shape(cfg, H, W)
    Hp, Wp = (H // 2, W // 2) if sw.downsample == "half_resolution" else (H, W)
    out = {m: 0 for m in VISUAL_MODULES}
    out["patch"] = T * (Hp // p) * (Wp // p) * 3 * p * p * d

    before = sw.position == "lsd_after_lste"
    full_sites = T * h * w
    down_sites = T * hd * wd
    if not sw.no_lste:
        n = full_sites if before else down_sites
        out["lste"] = n * (d * c + 3 * c * c + c * d + 27 * d)
    if sw.downsample == "lsd":
        out["lsd"] = hd * wd * d * d + 2 * full_sites * d * d + 2 * down_sites * 4 * d
    elif sw.downsample == "resampler":
        out["lsd"] = d * d + 2 * full_sites * d * d + 2 * full_sites * d
    if not sw.no_fsra:
        out["fsra"] = T * d * d + 2 * down_sites * d * d + 2 * down_sites * d
    if not sw.no_gstra:
        n = full_sites if (sw.gstra_pre_lsd and before) else down_sites
        out["gstra"] = d * d + 2 * n * d * d + 2 * n * d
    out["fusion"] = T * d * d
    M = sequence_length(T, hd, wd, sw.no_row)
    out["sequencer"] = M * (d * cfg.mlp_width + cfg.mlp_width * cfg.d_lm)
    return out


def estimate_flops(cfg: ModelConfig, T: int | None = None, H: int | None = None, W: int | None = None) -> int:
    return 2 * sum(estimate_macs(cfg, T, H, W).values())


_TAG_PREFIX = {"patchify": "patch", "lste": "lste", "lsd": "lsd", "resampler": "lsd", "fsra": "fsra",
               "gstra": "gstra", "fusion": "fusion", "mlp": "sequencer"}


def _module_of(tag: str) -> str:
    for prefix, module in _TAG_PREFIX.items():
        if tag.startswith(prefix):
            return module
    return "other"


def instrumented_macs(store: ParamStore, cfg: ModelConfig, clip: VideoClip) -> dict[str, int]:
    """Multiply-accumulates actually issued by one visual forward pass, per module."""
    from .stab import stab_forward

    out = {m: 0 for m in VISUAL_MODULES}
    with mac_counter() as rec:
        stab_forward(store, cfg, clip)
    for tag, n in rec:
        mod = _module_of(tag)
        out[mod] = out.get(mod, 0) + n
    return out


def _dummy_clip(cfg: ModelConfig, T: int, H: int, W: int, dtype=np.float64) -> VideoClip:
    rng = np.random.default_rng([cfg.seed, T, H, W])
    return VideoClip(rng.random((1, T, H, W, 3)).astype(dtype), (H, W))


@dataclass
class LatencyStats:
    median_ms: float
    p90_ms: float
    stdev_ms: float
    runs_ms: list[float]
    warmups: int
    config_hash: str


def measure_latency(cfg: ModelConfig, k_runs: int = 5, warmups: int = 2, T: int | None = None,
                    H: int | None = None, W: int | None = None, store: ParamStore | None = None,
                    dtype=np.float64) -> LatencyStats:
    """Wall-clock of the visual path (STAB + projection, no LM) on one clip."""
    if k_runs < 5 or warmups < 2:
        raise ValueError("need at least 5 timed runs and 2 warmups")
    from .stab import init_stab_params, stab_forward

    T = cfg.T_max if T is None else T
    H = cfg.H_max if H is None else H
    W = cfg.W_max if W is None else W
    store = init_stab_params(cfg) if store is None else store
    if dtype != np.float64:
        store = store.astype(dtype)
    clip = _dummy_clip(cfg, T, H, W, dtype)
    for _ in range(warmups):
        stab_forward(store, cfg, clip)
    runs = []
    for _ in range(k_runs):
        t0 = time.perf_counter()
        stab_forward(store, cfg, clip)
        runs.append(1e3 * (time.perf_counter() - t0))
    q = np.percentile(runs, [50, 90])
    return LatencyStats(float(q[0]), float(q[1]), statistics.pstdev(runs), runs, warmups, cfg.digest())


@dataclass
class CostReport:
    config_hash: str
    T: int
    H: int
    W: int
    params: dict[str, int]
    flops: dict[str, int]
    latency: LatencyStats | None = None
    lm_params: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def params_total(self) -> int:
        return sum(self.params.values())

    @property
    def flops_forward(self) -> int:
        return sum(self.flops.values())

    def to_kv(self) -> str:
        lines = [f"config_hash={self.config_hash}", f"clip={self.T}x{self.H}x{self.W}", "flops_unit=per_clip",
                 f"params_total={self.params_total}", f"flops_forward={self.flops_forward}",
                 f"lm_params={self.lm_params}"]
        lines += [f"params.{k}={v}" for k, v in self.params.items()]
        lines += [f"flops.{k}={v}" for k, v in self.flops.items()]
        if self.latency is not None:
            lat = self.latency
            lines += [f"latency_median_ms={lat.median_ms:.4f}", f"latency_p90_ms={lat.p90_ms:.4f}",
                      f"latency_stdev_ms={lat.stdev_ms:.4f}", f"latency_runs={len(lat.runs_ms)}",
                      f"latency_warmups={lat.warmups}"]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [f"visual path cost, config {self.config_hash}, one clip of {self.T} frames at {self.H}x{self.W}",
                f"{'module':<12}{'params':>12}{'GFLOPs':>12}"]
        for k in self.params:
            rows.append(f"{k:<12}{self.params[k]:>12,}{self.flops.get(k, 0) / 1e9:>12.4f}")
        rows.append(f"{'total':<12}{self.params_total:>12,}{self.flops_forward / 1e9:>12.4f}")
        rows.append(f"toy LM parameters (not part of the visual path): {self.lm_params:,}")
        if self.latency is not None:
            lat = self.latency
            rows.append(f"latency: median {lat.median_ms:.2f} ms, p90 {lat.p90_ms:.2f} ms, "
                        f"stdev {lat.stdev_ms:.2f} ms over {len(lat.runs_ms)} runs ({lat.warmups} warmups)")
        rows += self.notes
        return "\n".join(rows) + "\n"

    def save(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.txt").write_text(self.to_table())
        (out / "cost.kv").write_text(self.to_kv())
        return out / "cost.txt", out / "cost.kv"


def profile(cfg: ModelConfig, T: int | None = None, H: int | None = None, W: int | None = None,
            k_runs: int = 5, warmups: int = 2, latency: bool = True) -> CostReport:
    from .stab import init_stab_params

    T = cfg.T_max if T is None else T
    H = cfg.H_max if H is None else H
    W = cfg.W_max if W is None else W
    store = init_stab_params(cfg)
    flops = {k: 2 * v for k, v in estimate_macs(cfg, T, H, W).items()}
    lat = measure_latency(cfg, k_runs, warmups, T, H, W, store) if latency else None
    return CostReport(cfg.digest(), T, H, W, count_params(store), flops, lat, lm_closed_form_params(cfg))

