"""Command line: ``stavl {generate,train,eval,profile}``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ModelConfig, Switches, parse_kv, split_config_text, toy_config
from .core import ShapeError
from .data import ANSWERS, DataError, generate_dataset, load_dataset, parse_tasks
from .trainer import CheckpointError, NumericalError, StageConfig, load_checkpoint, run_pipeline

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 2, 3, 4

STAGE_KEYS = {"batch_size": int, "lr": float, "warmup_ratio": float, "weight_decay": float, "epochs": int,
              "lr_scale": float, "clip_norm": float, "distill": bool, "answer_only": bool, "stage1_half": bool}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             timeout=10, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    config: str = ""
    switches: str = ""
    git: str = field(default_factory=git_describe)
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir: str | Path) -> Path:
        """Stamp the end time and write ``run_manifest.json`` atomically."""
        self.finished = _now()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".run_manifest.", dir=out)
        with os.fdopen(fd, "w") as fh:
            json.dump(self.__dict__, fh, indent=1)
            fh.write("\n")
        target = out / "run_manifest.json"
        os.replace(tmp, target)
        return target


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def load_run_config(path: str | None, seed: int | None = None, ablate: str | None = None):
    """``(ModelConfig, stage settings)`` from an optional key=value file plus CLI overrides.

    Without a file the toy configuration is used.
    """
    model_kv: dict[str, str] = {}
    rest: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {path} does not exist")
        model_kv, rest = split_config_text(p.read_text())
    base = toy_config().to_text()
    kv = parse_kv(base)
    kv.update(model_kv)
    if seed is not None:
        kv["seed"] = str(seed)
    if ablate is not None:
        kv["ablate"] = ablate
    cfg = ModelConfig.from_mapping(kv)
    stage: dict = {}
    for k, v in rest.items():
        if k not in STAGE_KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        stage[k] = _bool(v) if STAGE_KEYS[k] is bool else STAGE_KEYS[k](v)
    return cfg, stage


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    parse_tasks(args.tasks)
    man = RunManifest("generate", args.argv, args.seed)
    out = generate_dataset(args.n, args.tasks, args.seed, args.out, T=args.T, H=args.H, W=args.W)
    man.outputs = [str(out)]
    man.config = f"n={args.n}\ntasks={args.tasks}\nT={args.T}\nH={args.H}\nW={args.W}\n"
    man.write(out)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _stage_overrides(args, file_stage: dict) -> tuple[dict, bool]:
    kw = {k: v for k, v in file_stage.items() if k != "stage1_half"}
    half = file_stage.get("stage1_half", True)
    for k in ("batch_size", "lr", "epochs", "lr_scale", "warmup_ratio"):
        v = getattr(args, k)
        if v is not None:
            kw[k] = v
    if args.no_stage1_half:
        half = False
    return kw, half


def cmd_train(args) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        if args.config:
            raise UsageError("--config cannot be combined with --resume (the checkpoint carries its config)")
        cfg = resume.cfg
        if args.ablate is not None and Switches.parse(args.ablate) != cfg.ablate:
            raise UsageError(f"--ablate {args.ablate!r} differs from the checkpoint's switches {cfg.ablate}")
        _, file_stage = load_run_config(None)
    else:
        cfg, file_stage = load_run_config(args.config, args.seed, args.ablate)
    seed = cfg.seed if args.seed is None else args.seed
    kw, half = _stage_overrides(args, file_stage)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    if resume is not None:
        done = int(resume.state.get("stage", 0))
        if done != stages[0] - 1:
            raise UsageError(f"--resume checkpoint is from stage {done}; stage {stages[0]} needs stage {stages[0] - 1}")

    samples, tok = load_dataset(args.data)
    datasets = {s: samples for s in stages}
    if 1 in stages and half:
        datasets[2] = samples
    if resume is not None and resume.tokenizer != tok:
        raise DataError("dataset vocabulary differs from the checkpoint's")
    if len(tok) > cfg.vocab_size:
        raise ConfigError(f"vocabulary of {len(tok)} words exceeds vocab_size={cfg.vocab_size}")
    scfgs = [StageConfig(stage=s, seed=seed, **kw) for s in stages]

    def log(stage, step, total, parts, lr):
        if args.verbose and (step % max(1, total // 10) == 0 or step == total - 1):
            dist = "" if parts.distill is None else f" distill {parts.distill:.4f}"
            print(f"stage {stage} step {step + 1}/{total} loss {parts.total:.4f} text {parts.text:.4f}{dist} lr {lr:.2e}")

    man = RunManifest("train", args.argv, seed, cfg.to_text(), str(cfg.ablate))
    out = Path(args.out)
    ckpt = run_pipeline(cfg, scfgs, datasets, tok, out, resume=resume, stage1_half=half,
                        allow_scratch=args.allow_scratch, log=log)
    man.outputs = [str(out / f"stage{s}") for s in stages]
    man.write(out)
    print(f"stage {ckpt.state['stage']} done: {ckpt.state['steps']} steps, final loss {ckpt.losses[-1][0]:.4f}")
    return EXIT_OK


def evaluate(ckpt, samples, batch_size: int = 32, constrained: bool = True):
    """Exact-match accuracy per task with greedy one-token answers."""
    from .model import greedy_answer

    tok, cfg = ckpt.tokenizer, ckpt.cfg
    rows = {}
    preds = {}
    for task in sorted({s.task for s in samples}):
        group = [s for s in samples if s.task == task]
        cands = np.array([tok.index[w] for w in ANSWERS[task]]) if constrained else None
        correct = 0
        for k in range(0, len(group), batch_size):
            chunk = group[k:k + batch_size]
            clips = np.stack([s.clip for s in chunk])
            qs = np.array([s.question for s in chunk])
            pred = greedy_answer(ckpt.store, cfg, clips, clips.shape[2:4], qs, len(chunk[0].answer), cands)
            for s, p in zip(chunk, pred):
                ok = list(p) == list(s.answer)
                correct += ok
                preds[s.id] = (task, tok.decode(p), tok.decode(s.answer), ok)
        rows[task] = (len(group), correct)
    return rows, preds


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    samples, tok = load_dataset(args.data)
    if tok != ckpt.tokenizer:
        raise DataError(f"vocabulary of {args.data} does not match the checkpoint {args.ckpt}")
    man = RunManifest("eval", args.argv, ckpt.cfg.seed, ckpt.cfg.to_text(), str(ckpt.cfg.ablate))
    rows, preds = evaluate(ckpt, samples, args.batch_size, not args.free)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["task\tn\tcorrect\taccuracy"]
    for task, (n, c) in rows.items():
        lines.append(f"{task}\t{n}\t{c}\t{c / n:.4f}")
    n_all = sum(n for n, _ in rows.values())
    c_all = sum(c for _, c in rows.values())
    lines.append(f"all\t{n_all}\t{c_all}\t{c_all / n_all:.4f}")
    (out / "metrics.tsv").write_text("\n".join(lines) + "\n")
    plines = ["id\ttask\tprediction\tanswer\tcorrect"]
    plines += [f"{sid}\t{t}\t{p}\t{a}\t{int(ok)}" for sid, (t, p, a, ok) in sorted(preds.items())]
    (out / "predictions.tsv").write_text("\n".join(plines) + "\n")
    man.outputs = [str(out / "metrics.tsv"), str(out / "predictions.tsv")]
    man.write(out)
    print("\n".join(lines))
    return EXIT_OK


def cmd_profile(args) -> int:
    from .profiler import profile

    if args.runs < 5 or args.warmups < 2:
        raise UsageError("latency needs --runs >= 5 and --warmups >= 2")
    cfg, _ = load_run_config(args.config, args.seed, args.ablate)
    man = RunManifest("profile", args.argv, cfg.seed, cfg.to_text(), str(cfg.ablate))
    rep = profile(cfg, args.T, args.H, args.W, args.runs, args.warmups, latency=not args.no_latency)
    rep.notes.append("FLOPs are per clip (all frames), one multiply-accumulate = 2 FLOPs")
    txt, kv = rep.save(args.out)
    man.outputs = [str(txt), str(kv)]
    man.write(args.out)
    print(rep.to_table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stavl", description="Desk-scale encoder-free video-language model")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic video QA dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--tasks", default="color,count,direction,order")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--T", type=int, default=8)
    g.add_argument("--H", type=int, default=32)
    g.add_argument("--W", type=int, default=32)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run one training stage or the whole pipeline")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="directory for stage checkpoints")
    t.add_argument("--config", help="key=value file with model and stage settings")
    t.add_argument("--ablate", help="comma separated ablation switches")
    t.add_argument("--resume", help="checkpoint of the previous stage")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float, help="peak learning rate (default: per-stage value)")
    t.add_argument("--lr-scale", dest="lr_scale", type=float)
    t.add_argument("--warmup-ratio", dest="warmup_ratio", type=float)
    t.add_argument("--no-stage1-half", action="store_true", help="stage 1 uses the whole dataset")
    t.add_argument("--allow-scratch", action="store_true", help="start stage 2 or 3 from fresh parameters")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="exact-match accuracy per task")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    e.add_argument("--free", action="store_true", help="decode over the whole vocabulary")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter count, FLOPs and latency of the visual path")
    p.add_argument("--config")
    p.add_argument("--ablate")
    p.add_argument("--seed", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--H", type=int)
    p.add_argument("--W", type=int)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmups", type=int, default=2)
    p.add_argument("--no-latency", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = ap.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
