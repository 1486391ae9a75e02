"""Rollouts, instruction chains and the success / average-length metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .diffusion import ContractError, ddim_step, exponential_sigmas
from .model import GoalSpec, ImageGoal, LanguageGoal, PolicyNetwork
from .playgen import (ActionScaler, EnvState, TaskSpec, build_vocab, feasible_tasks, instruction_text,
                      random_state, render, run_task, scripted_action, step, success_detector, tokenize)
from .tensor import Tensor

MAX_STEPS = 120
CHAIN_LEN = 5


@dataclass
class Observation:
    state: EnvState          # privileged; only scripted baselines read it
    images: np.ndarray       # (V, H, W, C)
    goal: GoalSpec
    task: TaskSpec           # privileged


class Policy(Protocol):
    def act(self, obs: Sequence[Observation], rng: np.random.Generator) -> np.ndarray:
        """Return one action chunk per observation, shape (N, k, 3), in environment units."""


class OraclePolicy:
    """Scripted controller; plans ``k`` steps by simulating itself forward."""

    def __init__(self, k: int = 10):
        self.k = k

    def act(self, obs, rng):
        out = np.zeros((len(obs), self.k, 3))
        for n, o in enumerate(obs):
            s = o.state
            for t in range(self.k):
                a = scripted_action(s, o.task)
                out[n, t] = a
                s = step(s, a)
        return out


class RandomPolicy:
    def __init__(self, k: int = 10):
        self.k = k

    def act(self, obs, rng):
        return rng.uniform(-1.0, 1.0, size=(len(obs), self.k, 3))


class IdlePolicy:
    """Never moves, so never completes a feasible task."""

    def __init__(self, k: int = 10):
        self.k = k

    def act(self, obs, rng):
        return np.zeros((len(obs), self.k, 3))


class DiffusionPolicy:
    """Samples action chunks from a trained network.

    The encoder runs once per call and the decoder once per noise level, unless the
    network takes the noise level as an encoder token, in which case both run per level.
    """

    def __init__(self, net: PolicyNetwork, scaler: ActionScaler, n_steps: int = 10,
                 sigma_min: float = 0.001, sigma_max: float = 80.0):
        self.net = net
        self.scaler = scaler
        self.schedule = exponential_sigmas(n_steps, sigma_min, sigma_max)

    def sample(self, images: np.ndarray, proprio: np.ndarray, goals: Sequence[GoalSpec],
               rng: np.random.Generator) -> np.ndarray:
        """Normalised action chunks (N, k, action_dim)."""
        net, cfg = self.net, self.net.cfg
        dtype = net.encoder.lang_table.dtype
        n = len(images)
        was_training = net.training
        net.eval()
        with T.no_grad():
            img = Tensor(np.asarray(images), dtype=dtype)
            prop = Tensor(np.asarray(proprio), dtype=dtype)
            goal_tok = net.encoder.encode_goals(goals)
            a = rng.standard_normal((n, cfg.chunk_len, cfg.action_dim)) * self.schedule[0]
            latents = None if cfg.noise_as_token else net.encode(img, prop, goal_tok)
            for s, s_next in zip(self.schedule[:-1], self.schedule[1:]):
                if cfg.noise_as_token:
                    latents = net.encode(img, prop, goal_tok, sigma=np.full(n, s))
                d = net.denoise(Tensor(a, dtype=dtype), latents, float(s)).data.astype(np.float64)
                a = ddim_step(a, d, float(s), float(s_next))
        net.train(was_training)
        return a

    def act(self, obs, rng):
        images = np.stack([o.images for o in obs])
        proprio = np.stack([o.state.agent for o in obs])
        chunk = self.sample(images, proprio, [o.goal for o in obs], rng)
        return np.clip(self.scaler.denormalize(np.clip(chunk, -1.0, 1.0)), -1.0, 1.0)


# ------------------------------------------------------------------ rollouts
@dataclass
class RolloutResult:
    success: bool
    steps: int
    final_state: EnvState
    trajectory: list[EnvState] = field(default_factory=list)


def rollout_batch(policy: Policy, states: Sequence[EnvState], tasks: Sequence[TaskSpec],
                  goals: Sequence[GoalSpec], rng: np.random.Generator, max_steps: int = MAX_STEPS,
                  execute: int | None = None, keep_trajectory: bool = False) -> list[RolloutResult]:
    """Run several episodes in lockstep, re-planning every ``execute`` steps (default: whole chunk).

    An episode succeeds as soon as its task predicate holds after any step.
    """
    n = len(states)
    cur = [s.copy() for s in states]
    done = [False] * n
    ok = [False] * n
    used = [0] * n
    trajs = [[s.copy()] for s in states] if keep_trajectory else None
    while True:
        active = [i for i in range(n) if not done[i]]
        if not active:
            break
        obs = [Observation(cur[i], render(cur[i]), goals[i], tasks[i]) for i in active]
        chunks = np.asarray(policy.act(obs, rng))
        m = chunks.shape[1] if execute is None else min(execute, chunks.shape[1])
        if m < 1:
            raise ContractError("executed steps per chunk must be >= 1")
        for row, i in enumerate(active):
            for t in range(m):
                cur[i] = step(cur[i], chunks[row, t])
                used[i] += 1
                if trajs is not None:
                    trajs[i].append(cur[i].copy())
                if success_detector(cur[i], tasks[i]):
                    ok[i] = done[i] = True
                    break
                if used[i] >= max_steps:
                    done[i] = True
                    break
    return [RolloutResult(ok[i], used[i], cur[i], trajs[i] if trajs else []) for i in range(n)]


def rollout(policy: Policy, state: EnvState, task: TaskSpec, goal: GoalSpec, rng: np.random.Generator,
            max_steps: int = MAX_STEPS, execute: int | None = None) -> RolloutResult:
    return rollout_batch(policy, [state], [task], [goal], rng, max_steps, execute, keep_trajectory=True)[0]


# ------------------------------------------------------------------- goals
def image_goal_for(state: EnvState, task: TaskSpec) -> ImageGoal:
    """Static-view render of the state the scripted controller reaches when solving ``task``."""
    states, _, _ = run_task(state, task)
    return ImageGoal(render(states[-1])[0])


def language_goal_for(task: TaskSpec, template: int, vocab: Sequence[str]) -> LanguageGoal:
    return LanguageGoal(tokenize(instruction_text(task, template), vocab))


def make_goal(mode: str, state: EnvState, task: TaskSpec, template: int, vocab: Sequence[str]) -> GoalSpec:
    if mode == "language":
        return language_goal_for(task, template, vocab)
    if mode == "image":
        return image_goal_for(state, task)
    raise ContractError(f"unknown goal mode {mode!r}")


# ------------------------------------------------------------------ chains
@dataclass
class InstructionChain:
    start: EnvState
    tasks: list[TaskSpec]
    templates: list[int]

    def __post_init__(self):
        if len(self.tasks) < 1 or len(self.tasks) != len(self.templates):
            raise ContractError("chain needs matching, non-empty task and template lists")


def generate_chains(n: int, seed: int, n_blocks: int = 3, length: int = CHAIN_LEN) -> list[InstructionChain]:
    """Uniform feasible task sequences, checked by simulating the scripted controller."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31337]))
    chains = []
    while len(chains) < n:
        start = random_state(rng, n_blocks)
        state, tasks = start, []
        for _ in range(length):
            options = feasible_tasks(state)
            if not options:
                break
            task = options[rng.integers(len(options))]
            states, _, ok = run_task(state, task)
            if not ok:
                break
            tasks.append(task)
            state = states[-1]
        if len(tasks) == length:
            chains.append(InstructionChain(start, tasks, [int(t) for t in rng.integers(3, size=length)]))
    return chains


def generate_single_tasks(n: int, seed: int, n_blocks: int = 3) -> list[InstructionChain]:
    return generate_chains(n, seed, n_blocks, length=1)


@dataclass
class EvalReport:
    position_success: list[float]
    avg_len: float
    per_task: dict[int, list[int]]  # task_id -> [successes, attempts]
    n_chains: int
    seed: int
    mode: str

    def __post_init__(self):
        ps = self.position_success
        if any(b > a + 1e-12 for a, b in zip(ps, ps[1:])):
            raise AssertionError(f"position-wise success must be non-increasing: {ps}")
        if not 0.0 <= self.avg_len <= len(ps):
            raise AssertionError(f"avg_len {self.avg_len} outside [0, {len(ps)}]")

    def task_success(self) -> dict[int, float]:
        return {t: s / a for t, (s, a) in sorted(self.per_task.items()) if a}

    def to_records(self) -> list[dict]:
        recs = [{"kind": "summary", "avg_len": self.avg_len, "n_chains": self.n_chains, "seed": self.seed,
                 "mode": self.mode}]
        recs += [{"kind": "position", "position": i + 1, "success": s} for i, s in enumerate(self.position_success)]
        recs += [{"kind": "task", "task_id": t, "task": TaskSpec.from_id(t, 3).describe(), "successes": s,
                  "attempts": a} for t, (s, a) in sorted(self.per_task.items())]
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def format_table(self) -> str:
        head = " ".join(f"{i + 1:>6d}" for i in range(len(self.position_success)))
        vals = " ".join(f"{s * 100:5.1f}%" for s in self.position_success)
        lines = [f"mode={self.mode} chains={self.n_chains} seed={self.seed}",
                 f"tasks in a row  {head}", f"success         {vals}", f"avg length      {self.avg_len:.3f}"]
        for t, rate in self.task_success().items():
            s, a = self.per_task[t]
            lines.append(f"  {TaskSpec.from_id(t, 3).describe():<28s} {s:4d}/{a:<4d} {rate * 100:5.1f}%")
        return "\n".join(lines)


def evaluate_chains(policy: Policy, chains: Sequence[InstructionChain], mode: str, seed: int,
                    max_steps: int = MAX_STEPS, execute: int | None = None,
                    n_blocks: int = 3, batch: int = 64) -> EvalReport:
    """Issue each chain's goals in order; the next goal only after the previous one succeeded."""
    if not chains:
        raise ContractError("need at least one chain")
    vocab = build_vocab(n_blocks)
    length = len(chains[0].tasks)
    completed = np.zeros(len(chains), dtype=np.int64)
    per_task: dict[int, list[int]] = {}
    for lo in range(0, len(chains), batch):
        group = list(range(lo, min(lo + batch, len(chains))))
        # each chain group gets its own stream, so results do not depend on grouping order
        rng = np.random.default_rng(np.random.SeedSequence([seed, lo]))
        states = {c: chains[c].start.copy() for c in group}
        alive = list(group)
        for pos in range(length):
            if not alive:
                break
            tasks = [chains[c].tasks[pos] for c in alive]
            goals = [make_goal(mode, states[c], chains[c].tasks[pos], chains[c].templates[pos], vocab)
                     for c in alive]
            results = rollout_batch(policy, [states[c] for c in alive], tasks, goals, rng, max_steps, execute)
            nxt = []
            for c, task, res in zip(alive, tasks, results):
                rec = per_task.setdefault(task.task_id(n_blocks), [0, 0])
                rec[1] += 1
                if res.success:
                    rec[0] += 1
                    completed[c] += 1
                    states[c] = res.final_state
                    nxt.append(c)
            alive = nxt
    position = [float(np.mean(completed >= p)) for p in range(1, length + 1)]
    return EvalReport(position, float(completed.mean()), per_task, len(chains), seed, mode)


def single_task_success(policy: Policy, n: int, mode: str, seed: int, **kwargs) -> float:
    """Success rate over ``n`` independent single-task rollouts from random start states."""
    tasks = generate_single_tasks(n, seed, kwargs.get("n_blocks", 3))
    return evaluate_chains(policy, tasks, mode, seed, **kwargs).avg_len
