"""The desk-scale training protocol: generate play data, train, score single-task success."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import Config
from .evaluator import DiffusionPolicy, single_task_success
from .playgen import generate_dataset
from .trainer import Trainer


@dataclass
class ToyResult:
    seed: int
    language: float
    image: float
    train_minutes: float
    final_loss: float


def run_toy_protocol(seed: int, cfg: Config | None = None, n_rollouts: int = 100,
                     eval_seed: int = 1234, log_every: int = 0) -> ToyResult:
    """Train on a fresh play dataset for ``cfg.train.steps`` steps and evaluate the final weights.

    The dataset and the training run both derive from ``seed``; the rollouts use ``eval_seed``
    so paired runs (e.g. an ablation) see identical start states and goals.
    """
    cfg = cfg or Config()
    pg = cfg.playgen
    episodes = generate_dataset(seed, pg.n_episodes, pg.n_tasks, pg.n_blocks, pg.p_label, pg.noise, pg.pause)
    train_cfg = cfg.replace("train", seed=seed).train
    with T.default_dtype(np.float32):
        trainer = Trainer(cfg.model, train_cfg, episodes, cfg.noise)

        def progress(rec):
            if log_every and rec["step"] % log_every == 0:
                print(f"  seed {seed} step {rec['step']:5d} total {rec['total']:.4f}", flush=True)

        t0 = time.perf_counter()
        trainer.run(on_step=progress if log_every else None)
        minutes = (time.perf_counter() - t0) / 60.0
        sched = cfg.schedule
        policy = DiffusionPolicy(trainer.agent.net, trainer.scaler, sched.steps, sched.sigma_min, sched.sigma_max)
        kw = dict(max_steps=cfg.evaluator.max_steps, execute=cfg.evaluator.execute or None,
                  n_blocks=pg.n_blocks, batch=cfg.evaluator.batch)
        lang = single_task_success(policy, n_rollouts, "language", eval_seed, **kw)
        image = single_task_success(policy, n_rollouts, "image", eval_seed, **kw)
    final = trainer.state.history[-1]["total"] if trainer.state.history else float("nan")
    return ToyResult(seed, lang, image, minutes, final)
