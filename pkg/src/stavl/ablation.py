"""Fixed-budget ablation comparisons on the synthetic tasks.

One recipe is shared by every variant so differences come from the
architecture alone: a single end-to-end stage from fresh parameters, answer
tokens only, no distillation, the same data, budget and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, Switches, toy_config
from .data import generate_samples
from .lm import Tokenizer
from .model import init_params
from .trainer import Checkpoint, StageConfig, run_stage


@dataclass(frozen=True)
class Budget:
    n_train: int = 500
    n_test: int = 200
    epochs: int = 16
    batch_size: int = 16
    lr: float = 1e-3
    warmup_ratio: float = 0.01


def train_and_score(switches: str, tasks: str, seed: int, budget: Budget = Budget(),
                    base: ModelConfig | None = None) -> dict[str, float]:
    """Exact-match accuracy per task on held-out samples after one fixed-budget run."""
    from .cli import evaluate

    cfg = (base or toy_config()).replace(seed=seed, ablate=Switches.parse(switches))
    tok = Tokenizer()
    train = generate_samples(budget.n_train, tasks, seed=10_000 + seed)
    test = generate_samples(budget.n_test, tasks, seed=20_000 + seed)
    store = init_params(cfg)
    scfg = StageConfig(stage=3, batch_size=budget.batch_size, lr=budget.lr, warmup_ratio=budget.warmup_ratio,
                       epochs=budget.epochs, distill=False, answer_only=True, seed=seed)
    run_stage(scfg, store, cfg, train, tok)
    rows, _ = evaluate(Checkpoint(store, cfg, tok, {"stage": 3}), test)
    return {task: c / n for task, (n, c) in rows.items()}


def mean_accuracy(scores: list[dict[str, float]]) -> float:
    return float(np.mean([np.mean(list(s.values())) for s in scores]))
