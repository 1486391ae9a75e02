"""Toy 2-D play environment, scripted teleoperator and training-window construction.

The scene is a unit square with one agent and ``M`` blocks. The agent moves by at
most ``STEP`` per step, can pick up a block within ``PICK_RADIUS`` and carry it.
Tasks are ``reach(block)`` or ``move(block, zone)`` for the four corner zones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import ContractError

log = logging.getLogger(__name__)

STEP = 0.05
PICK_RADIUS = 0.06
REACH_RADIUS = 0.06
ZONE_RADIUS = 0.05
PAUSE_STEPS = 6
ZONES = np.array([[0.15, 0.85], [0.85, 0.85], [0.15, 0.15], [0.85, 0.15]])
ZONE_NAMES = ["top left", "top right", "bottom left", "bottom right"]
BLOCK_NAMES = ["dark", "gray", "pale", "striped", "small", "round"]
BLOCK_SHADES = [0.3, 0.55, 0.8, 0.45, 0.65, 0.9]
IMAGE_SIZE = 32

GOAL_MIN, GOAL_MAX, GOAL_P = 20, 50, 0.1


# ----------------------------------------------------------------- state / tasks
@dataclass
class EnvState:
    agent: np.ndarray
    blocks: np.ndarray
    carried: np.ndarray

    def copy(self) -> "EnvState":
        return EnvState(self.agent.copy(), self.blocks.copy(), self.carried.copy())

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def carried_index(self) -> int:
        idx = np.flatnonzero(self.carried)
        return int(idx[0]) if idx.size else -1

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.agent, self.blocks.reshape(-1), self.carried.astype(np.float64)])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_blocks: int) -> "EnvState":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:2].copy(), vec[2:2 + 2 * n_blocks].reshape(n_blocks, 2).copy(),
                   vec[2 + 2 * n_blocks:2 + 3 * n_blocks] > 0.5)


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "reach" | "move"
    block: int
    zone: int = -1

    def task_id(self, n_blocks: int) -> int:
        if self.kind == "reach":
            return self.block
        return n_blocks + self.block * len(ZONES) + self.zone

    @classmethod
    def from_id(cls, task_id: int, n_blocks: int) -> "TaskSpec":
        if task_id < n_blocks:
            return cls("reach", task_id)
        rest = task_id - n_blocks
        return cls("move", rest // len(ZONES), rest % len(ZONES))

    def describe(self) -> str:
        if self.kind == "reach":
            return f"reach({BLOCK_NAMES[self.block]})"
        return f"move({BLOCK_NAMES[self.block]}, {ZONE_NAMES[self.zone]})"


def all_tasks(n_blocks: int) -> list[TaskSpec]:
    return [TaskSpec.from_id(i, n_blocks) for i in range(n_blocks * (1 + len(ZONES)))]


def success_detector(state: EnvState, task: TaskSpec) -> bool:
    if not 0 <= task.block < state.n_blocks:
        raise ContractError(f"task references block {task.block} of {state.n_blocks}")
    if task.kind == "reach":
        return float(np.linalg.norm(state.agent - state.blocks[task.block])) < REACH_RADIUS
    if not 0 <= task.zone < len(ZONES):
        raise ContractError(f"task references zone {task.zone}")
    dist = float(np.linalg.norm(state.blocks[task.block] - ZONES[task.zone]))
    return dist <= ZONE_RADIUS and not state.carried[task.block]


def is_feasible(state: EnvState, task: TaskSpec) -> bool:
    """Not already satisfied, and a move target zone is free of other blocks."""
    if success_detector(state, task):
        return False
    if task.kind == "move":
        others = np.delete(state.blocks, task.block, axis=0)
        if len(others) and np.min(np.linalg.norm(others - ZONES[task.zone], axis=1)) < 0.12:
            return False
    return True


def feasible_tasks(state: EnvState) -> list[TaskSpec]:
    return [t for t in all_tasks(state.n_blocks) if is_feasible(state, t)]


# ------------------------------------------------------------------ dynamics
def step(state: EnvState, action) -> EnvState:
    """Advance one step. Grip > 0 picks the nearest block within reach; grip < 0 drops."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    new = state.copy()
    new.agent = np.clip(state.agent + STEP * a[:2], 0.0, 1.0)
    held = new.carried_index
    if a[2] > 0 and held < 0:
        dist = np.linalg.norm(new.blocks - new.agent, axis=1)
        nearest = int(np.argmin(dist))
        if dist[nearest] < PICK_RADIUS:
            new.carried[nearest] = True
            held = nearest
    elif a[2] < 0 and held >= 0:
        new.carried[held] = False
        held = -1
    if held >= 0:
        new.blocks[held] = new.agent
    return new


def random_state(rng: np.random.Generator, n_blocks: int = 3) -> EnvState:
    """Blocks away from the zones and from each other; agent anywhere."""
    blocks = []
    while len(blocks) < n_blocks:
        p = rng.uniform(0.1, 0.9, size=2)
        if np.min(np.linalg.norm(ZONES - p, axis=1)) < 0.2:
            continue
        if blocks and np.min(np.linalg.norm(np.array(blocks) - p, axis=1)) < 0.2:
            continue
        blocks.append(p)
    return EnvState(rng.uniform(0.05, 0.95, size=2), np.array(blocks), np.zeros(n_blocks, dtype=bool))


def _toward(agent: np.ndarray, target: np.ndarray) -> np.ndarray:
    v = (target - agent) / STEP
    n = np.linalg.norm(v)
    return v / n if n > 1.0 else v


def scripted_action(state: EnvState, task: TaskSpec) -> np.ndarray:
    """Proportional controller: a stateless function of (state, task)."""
    held = state.carried_index
    if task.kind == "reach":
        if held >= 0:
            return np.array([0.0, 0.0, -1.0])
        return np.append(_toward(state.agent, state.blocks[task.block]), -1.0)
    if held >= 0 and held != task.block:
        return np.array([0.0, 0.0, -1.0])
    if held == task.block:
        zone = ZONES[task.zone]
        if np.linalg.norm(state.agent - zone) < 0.02:
            return np.array([0.0, 0.0, -1.0])
        return np.append(_toward(state.agent, zone), 1.0)
    target = state.blocks[task.block]
    grip = 1.0 if np.linalg.norm(state.agent - target) < 0.04 + STEP else -1.0
    return np.append(_toward(state.agent, target), grip)


# ----------------------------------------------------------------- rendering
_GRID = np.arange(IMAGE_SIZE) + 0.5


def _to_pixels(u, v):
    margin = 2.0
    scale = IMAGE_SIZE - 2 * margin
    return margin + u * scale, margin + (1.0 - v) * scale


def _disk(img: np.ndarray, cx: float, cy: float, radius: float, shade: float) -> None:
    dist = np.sqrt((_GRID[None, :] - cx) ** 2 + (_GRID[:, None] - cy) ** 2)
    cover = np.clip(radius - dist + 0.5, 0.0, 1.0)
    np.maximum(img, cover * shade, out=img)


def _ring(img: np.ndarray, cx: float, cy: float, radius: float, width: float, shade: float) -> None:
    dist = np.sqrt((_GRID[None, :] - cx) ** 2 + (_GRID[:, None] - cy) ** 2)
    cover = np.clip(width / 2 - np.abs(dist - radius) + 0.5, 0.0, 1.0)
    np.maximum(img, cover * shade, out=img)


def render(state: EnvState) -> np.ndarray:
    """Two 32x32x1 views: top-down and an oblique side strip. Shape (2, 32, 32, 1)."""
    top = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    side = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for b, pos in enumerate(state.blocks):
        shade = BLOCK_SHADES[b % len(BLOCK_SHADES)]
        _disk(top, *_to_pixels(*pos), 1.6, shade)
        depth = 0.6 + 0.4 * (1.0 - pos[1])
        su, sv = 0.5 + (pos[0] - 0.5) * depth, 0.2 + 0.6 * pos[1]
        _disk(side, *_to_pixels(su, sv), 1.2 + 0.8 * depth, shade)
    ax, ay = state.agent
    _ring(top, *_to_pixels(ax, ay), 3.0, 1.0, 1.0)
    depth = 0.6 + 0.4 * (1.0 - ay)
    _ring(side, *_to_pixels(0.5 + (ax - 0.5) * depth, 0.2 + 0.6 * ay), 2.0 + 1.5 * depth, 1.0, 1.0)
    return np.stack([top, side])[..., None]


# ----------------------------------------------------------------- language
_REACH_TEMPLATES = ["reach the {b} block", "go to the {b} block", "touch the {b} block"]
_MOVE_TEMPLATES = [
    "move the {b} block to the {z} corner",
    "put the {b} block in the {z} corner",
    "carry the {b} block into the {z} corner",
]


def build_vocab(n_blocks: int = 3) -> list[str]:
    words = set()
    for t in all_tasks(n_blocks):
        for k in range(3):
            words.update(instruction_text(t, k).split())
    return sorted(words)


def instruction_text(task: TaskSpec, template: int) -> str:
    if task.kind == "reach":
        return _REACH_TEMPLATES[template].format(b=BLOCK_NAMES[task.block])
    return _MOVE_TEMPLATES[template].format(b=BLOCK_NAMES[task.block], z=ZONE_NAMES[task.zone])


def tokenize(text: str, vocab: Sequence[str]) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    return [index[w] for w in text.split()]


# ----------------------------------------------------------------- episodes
@dataclass
class Annotation:
    start: int
    end: int
    task_id: int
    tokens: list[int]


@dataclass
class PlayEpisode:
    states: np.ndarray   # (T+1, 2 + 3M)
    actions: np.ndarray  # (T, 3)
    renders: np.ndarray  # (T+1, 2, 32, 32, 1)
    annotations: list[Annotation] = field(default_factory=list)
    intervals: list[tuple[int, int, int]] = field(default_factory=list)
    n_blocks: int = 3

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ContractError("states must be one longer than actions")

    def __len__(self) -> int:
        return len(self.actions)

    def state(self, t: int) -> EnvState:
        return EnvState.from_vector(self.states[t], self.n_blocks)

    def annotation_at(self, i: int) -> Annotation | None:
        for ann in self.annotations:
            if ann.start <= i < ann.end:
                return ann
        return None


def run_task(state: EnvState, task: TaskSpec, rng: np.random.Generator | None = None,
             noise: float = 0.0, max_steps: int = 150, pause: int = PAUSE_STEPS):
    """Scripted rollout of one task. Returns (states, actions, success).

    The operator holds still for ``pause`` steps after grasping the block, before releasing
    it in the zone, and after the task succeeds. The pauses keep the grasp, the release and
    the task boundary from landing mid-motion inside an action chunk.
    """
    states, actions = [state], []
    wait = held_at_zone = 0
    done = False
    for _ in range(max_steps + 3 * pause):
        if not done and success_detector(state, task):
            done, wait = True, pause
        if done and wait == 0:
            return states, actions, True
        if wait > 0:
            a = np.array([0.0, 0.0, 1.0 if state.carried_index >= 0 else -1.0])
            wait -= 1
        else:
            a = scripted_action(state, task)
            if task.kind == "move" and state.carried_index == task.block and a[2] < 0 and held_at_zone < pause:
                a = np.array([0.0, 0.0, 1.0])
                held_at_zone += 1
        if noise > 0 and rng is not None:
            a[:2] = a[:2] + rng.normal(0.0, noise, size=2)
        a = np.clip(a, -1.0, 1.0)
        was_free = state.carried_index != task.block
        state = step(state, a)
        if was_free and state.carried_index == task.block:
            wait = pause
        states.append(state)
        actions.append(a)
    return states, actions, success_detector(state, task)


def generate_play_episode(rng: np.random.Generator, n_tasks: int = 6, n_blocks: int = 3,
                          p_label: float = 0.02, noise: float = 0.1,
                          vocab: Sequence[str] | None = None, pause: int = PAUSE_STEPS) -> PlayEpisode:
    """Chain ``n_tasks`` uniformly drawn feasible tasks with the scripted teleoperator."""
    if n_tasks < 1:
        raise ContractError("n_tasks must be >= 1")
    vocab = vocab or build_vocab(n_blocks)
    state = random_state(rng, n_blocks)
    states, actions, intervals = [state], [], []
    for _ in range(n_tasks):
        options = feasible_tasks(state)
        task = options[rng.integers(len(options))]
        start = len(actions)
        seg_states, seg_actions, ok = run_task(state, task, rng, noise, pause=pause)
        states.extend(seg_states[1:])
        actions.extend(seg_actions)
        state = states[-1]
        if ok and len(actions) > start:
            intervals.append((start, len(actions), task.task_id(n_blocks)))
    annotations = []
    for start, end, tid in intervals:
        if rng.random() < p_label:
            text = instruction_text(TaskSpec.from_id(tid, n_blocks), int(rng.integers(3)))
            annotations.append(Annotation(start, end, tid, tokenize(text, vocab)))
    return PlayEpisode(
        states=np.array([s.to_vector() for s in states], dtype=np.float32),
        actions=np.array(actions, dtype=np.float32).reshape(-1, 3),
        renders=np.array([render(s) for s in states], dtype=np.float32),
        annotations=annotations,
        intervals=intervals,
        n_blocks=n_blocks,
    )


# ------------------------------------------------------------- goal sampling
def goal_offset_pmf(lo: int = GOAL_MIN, hi: int = GOAL_MAX, p: float = GOAL_P) -> np.ndarray:
    """Geometric pmf on j - lo, truncated to [lo, hi] and renormalised."""
    k = np.arange(hi - lo + 1)
    w = (1 - p) ** k * p
    return w / w.sum()


_GOAL_CDF = np.cumsum(goal_offset_pmf())


def sample_goal_offset(rng: np.random.Generator, size=None):
    u = rng.random(size)
    j = GOAL_MIN + np.minimum(np.searchsorted(_GOAL_CDF, u, side="right"), GOAL_MAX - GOAL_MIN)
    return int(j) if size is None else j


@dataclass
class TrainSample:
    images: np.ndarray        # (2, 32, 32, 1)
    proprio: np.ndarray       # (2,)
    actions: np.ndarray       # (k, 3)
    goal_image: np.ndarray    # (32, 32, 1)
    goal_index: int
    future: np.ndarray        # (32, 32, 1), static view
    lang_tokens: list[int] | None = None
    task_id: int = -1


def make_train_sample(episode: PlayEpisode, i: int, k: int = 10, v: int = 3,
                      rng: np.random.Generator | None = None, j: int | None = None) -> TrainSample:
    if not 0 <= i or i + k > len(episode):
        raise ContractError(f"window start {i} with chunk {k} outside episode of length {len(episode)}")
    if j is None:
        j = sample_goal_offset(rng)
    last = len(episode.states) - 1
    goal_idx = min(i + j, last)
    ann = episode.annotation_at(i)
    return TrainSample(
        images=episode.renders[i],
        proprio=episode.states[i, :2],
        actions=episode.actions[i:i + k],
        goal_image=episode.renders[goal_idx, 0],
        goal_index=goal_idx,
        future=episode.renders[min(i + v, last), 0],
        lang_tokens=list(ann.tokens) if ann else None,
        task_id=ann.task_id if ann else -1,
    )


# ------------------------------------------------------------ normalisation
@dataclass
class ActionScaler:
    low: np.ndarray
    high: np.ndarray

    @property
    def _gain(self) -> np.ndarray:
        span = self.high - self.low
        return np.where(span > 0, 2.0 / np.where(span > 0, span, 1.0), 0.0)

    def normalize(self, actions):
        a = np.asarray(actions, dtype=np.float64)
        span = self.high - self.low
        return np.where(span > 0, (a - self.low) * self._gain - 1.0, 0.0)

    def denormalize(self, actions):
        a = np.asarray(actions, dtype=np.float64)
        span = self.high - self.low
        mid = (self.high + self.low) / 2.0
        return np.where(span > 0, (a + 1.0) * span / 2.0 + self.low, a + mid)

    def to_dict(self) -> dict:
        return {"low": [float(x) for x in self.low], "high": [float(x) for x in self.high]}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionScaler":
        return cls(np.array(d["low"], dtype=np.float64), np.array(d["high"], dtype=np.float64))


def normalize_actions(actions_list: Sequence[np.ndarray]):
    """Fit a per-dimension [min, max] -> [-1, 1] map over all actions and apply it."""
    if not actions_list or sum(len(a) for a in actions_list) == 0:
        raise ContractError("cannot fit an action scaler on an empty dataset")
    allacts = np.concatenate([np.asarray(a, dtype=np.float64) for a in actions_list], axis=0)
    scaler = ActionScaler(allacts.min(axis=0), allacts.max(axis=0))
    degenerate = np.flatnonzero(scaler.high == scaler.low)
    if degenerate.size:
        log.warning("constant action dimensions %s map to 0", degenerate.tolist())
    return scaler, [scaler.normalize(a) for a in actions_list]


def episode_seeds(master_seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(master_seed).spawn(n)


def generate_dataset(master_seed: int, n_episodes: int, n_tasks: int = 6, n_blocks: int = 3,
                     p_label: float = 0.02, noise: float = 0.1, pause: int = PAUSE_STEPS) -> list[PlayEpisode]:
    vocab = build_vocab(n_blocks)
    return [generate_play_episode(np.random.default_rng(ss), n_tasks, n_blocks, p_label, noise, vocab, pause)
            for ss in episode_seeds(master_seed, n_episodes)]


def annotation_coverage(episodes: Sequence[PlayEpisode], k: int = 10) -> float:
    """Fraction of valid window starts covered by a language annotation."""
    total = covered = 0
    for ep in episodes:
        n = len(ep) - k + 1
        if n <= 0:
            continue
        total += n
        for ann in ep.annotations:
            covered += max(0, min(ann.end, n) - ann.start)
    return covered / total if total else 0.0


