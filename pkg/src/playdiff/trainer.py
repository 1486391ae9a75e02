"""Optimisation loop: batch assembly, the combined objective, AdamW, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .aux_losses import ForesightDecoder, MAPPool, cla_loss, map_pool, mgf_loss, total_loss
from .diffusion import ContractError, NoiseDist, sample_sigma
from .model import ModelConfig, PolicyNetwork
from .nn import Module
from .playgen import ActionScaler, PlayEpisode, make_train_sample, normalize_actions
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("full", "pretrain_actionfree")


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record.get('step')}: {record}")
        self.record = record


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.9)
    eps: float = 1e-8
    weight_decay: float = 0.05
    alpha: float = 0.1
    beta: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    eval_interval: int = 500
    val_fraction: float = 0.05
    val_batches: int = 4
    mode: str = "full"
    lang_per_batch: int = 8  # rows drawn from annotated windows, capped at batch_size
    mask_ratio: float = 0.75
    norm_pixel: bool = True
    foresight: int = 3
    temperature: float = 0.1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("steps", "batch_size", "lr", "eval_interval", "foresight", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "alpha", "beta", "grad_clip", "lang_per_batch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


# ------------------------------------------------------------------ optimizer
@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
                 lr: float, betas=(0.9, 0.9), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place AdamW: decay ``p *= 1 - lr*wd`` first, then the bias-corrected Adam step."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; return the old norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


# -------------------------------------------------------------------- model
class Agent(Module):
    """Policy network plus the auxiliary heads used only during training."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.net = PolicyNetwork(cfg, rng)
        self.mgf = ForesightDecoder(cfg, rng)
        if cfg.cla_pool == "map":
            self.cla = MAPPool(cfg.embed_dim, cfg.heads, rng)

    @property
    def cla_pool_module(self) -> MAPPool | None:
        return getattr(self, "cla", None)


# -------------------------------------------------------------------- data
@dataclass
class Batch:
    images: np.ndarray      # (B, V, H, W, C)
    proprio: np.ndarray     # (B, 2)
    actions: np.ndarray     # (B, k, 3), normalised
    goal_images: np.ndarray  # (B, H, W, C)
    future: np.ndarray      # (B, H, W, C)
    lang_rows: np.ndarray   # indices into the batch that carry a language goal
    lang_tokens: list[list[int]]
    task_ids: np.ndarray    # task id per language row

    def __len__(self) -> int:
        return len(self.images)


class WindowSampler:
    """Draws training windows from a list of episodes."""

    def __init__(self, episodes: Sequence[PlayEpisode], scaler: ActionScaler, k: int = 10, v: int = 3):
        self.episodes = list(episodes)
        self.k, self.v = k, v
        self.norm_actions = [scaler.normalize(ep.actions).astype(np.float32) for ep in self.episodes]
        index, lang = [], []
        for e, ep in enumerate(self.episodes):
            for i in range(len(ep) - k + 1):
                index.append((e, i))
                if ep.annotation_at(i) is not None:
                    lang.append((e, i))
        if not index:
            raise ContractError("no episode is long enough for one action chunk")
        self.index = np.array(index, dtype=np.int64)
        self.lang_index = np.array(lang, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.index)

    def sample(self, rng: np.random.Generator, batch_size: int, lang_per_batch: int = 0) -> Batch:
        picks = self.index[rng.integers(len(self.index), size=batch_size)]
        n_lang = min(lang_per_batch, batch_size)
        if n_lang and len(self.lang_index):
            picks[:n_lang] = self.lang_index[rng.integers(len(self.lang_index), size=n_lang)]
        offsets = rng.random(batch_size)
        return self.assemble(picks, offsets)

    def assemble(self, picks: np.ndarray, offsets: np.ndarray) -> Batch:
        """Build a batch from (episode, start) pairs; ``offsets`` are uniforms for the goal draw."""
        from .playgen import _GOAL_CDF, GOAL_MAX, GOAL_MIN
        js = GOAL_MIN + np.minimum(np.searchsorted(_GOAL_CDF, offsets, side="right"), GOAL_MAX - GOAL_MIN)
        samples = [make_train_sample(self.episodes[e], int(i), self.k, self.v, j=int(j))
                   for (e, i), j in zip(picks, js)]
        lang_rows = [n for n, s in enumerate(samples) if s.lang_tokens]
        actions = np.stack([self.norm_actions[e][i:i + self.k] for e, i in picks])
        return Batch(
            images=np.stack([s.images for s in samples]),
            proprio=np.stack([s.proprio for s in samples]),
            actions=actions,
            goal_images=np.stack([s.goal_image for s in samples]),
            future=np.stack([s.future for s in samples]),
            lang_rows=np.array(lang_rows, dtype=np.int64),
            lang_tokens=[samples[n].lang_tokens for n in lang_rows],
            task_ids=np.array([samples[n].task_id for n in lang_rows], dtype=np.int64),
        )


def split_episodes(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Hold out whole episodes; at least one stays in training."""
    n_val = min(int(round(n * val_fraction)), n - 1) if n > 1 else 0
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7919])).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# -------------------------------------------------------------------- losses
@dataclass
class Streams:
    """Independent rng streams so that switching one loss off leaves the others unchanged."""

    batch: np.random.Generator
    sigma: np.random.Generator
    mask: np.random.Generator
    dropout: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(c) for c in children))

    def get_state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("batch", "sigma", "mask", "dropout")}

    def set_state(self, state: dict) -> None:
        for k, s in state.items():
            getattr(self, k).bit_generator.state = s


def compute_losses(agent: Agent, batch: Batch, cfg: TrainConfig, streams: Streams,
                   dist: NoiseDist | None = None) -> dict[str, Tensor | float]:
    """Forward pass over every active objective.

    Each window is encoded once with its image goal; windows with a language label get a
    second encoding with the language goal. Both encodings feed the score-matching and
    foresight losses; the pair feeds the contrastive loss.
    """
    dist = dist or NoiseDist()
    net, enc = agent.net, agent.net.encoder
    dtype = enc.lang_table.dtype
    b = len(batch)
    rows = np.concatenate([np.arange(b), batch.lang_rows])
    n = len(rows)

    images = Tensor(batch.images, dtype=dtype)
    goal_tok = enc.encode_goal_images(Tensor(batch.goal_images, dtype=dtype))
    if len(batch.lang_rows):
        goal_tok = T.concat([goal_tok, enc.encode_language(batch.lang_tokens)], axis=0)
    obs = enc.encode_observation(images)
    if len(batch.lang_rows):
        obs = obs[rows]
    proprio = Tensor(batch.proprio[rows], dtype=dtype)

    sigma = sample_sigma(streams.sigma, dist, size=n)
    noise_vec = net.noise_vector(sigma) if net.cfg.noise_as_token else None
    latents = enc(obs, proprio, goal_tok, noise_vec, rng=streams.dropout)
    net.encoder_calls += 1

    out: dict[str, Tensor | float] = {}
    if cfg.mode == "full":
        actions = batch.actions[rows].astype(dtype)
        eps = streams.sigma.standard_normal(actions.shape).astype(dtype)
        noisy = Tensor(actions + eps * sigma.astype(dtype)[:, None, None], dtype=dtype)
        denoised = net.denoise(noisy, latents, sigma, rng=streams.dropout)
        weight = net.pc.loss_weight(sigma).astype(dtype)[:, None, None]
        diff = denoised - Tensor(actions, dtype=dtype)
        out["L_SM"] = (diff * diff * weight).reshape(n, -1).sum(axis=1).mean()
    else:
        out["L_SM"] = 0.0

    if cfg.alpha > 0:
        out["L_MGF"] = mgf_loss(latents, batch.future[rows], agent.mgf, streams.mask, cfg.mask_ratio,
                                cfg.norm_pixel, cfg.foresight)
    else:
        out["L_MGF"] = 0.0

    if cfg.beta > 0 and len(batch.lang_rows) >= 2:
        z_img = map_pool(latents[batch.lang_rows], agent.cla_pool_module, agent.cfg.cla_view)
        z_lang = map_pool(latents[b:], agent.cla_pool_module, agent.cfg.cla_view)
        out["L_CLA"] = cla_loss(z_img, z_lang, cfg.temperature, batch.task_ids)
    else:
        out["L_CLA"] = 0.0

    out["total"] = total_loss(out["L_SM"], out["L_MGF"], out["L_CLA"], cfg.alpha, cfg.beta)
    return out


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def train_step(agent: Agent, batch: Batch, opt: OptimizerState, streams: Streams, cfg: TrainConfig,
               dist: NoiseDist | None = None, step: int = 0, trainable: dict[str, Tensor] | None = None) -> dict:
    """One forward, one backward, one AdamW update. Returns the loss record."""
    agent.zero_grad()
    losses = compute_losses(agent, batch, cfg, streams, dist)
    record = {"step": step, **{k: _value(v) for k, v in losses.items()}}
    if not all(math.isfinite(record[k]) for k in ("L_SM", "L_MGF", "L_CLA", "total")):
        raise TrainingDiverged(record)
    total = losses["total"]
    params = trainable if trainable is not None else dict(agent.named_parameters())
    if isinstance(total, Tensor) and total.requires_grad:
        total.backward()
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        record["grad_norm"] = clip_grad_norm(grads, cfg.grad_clip)
        adamw_update(params, grads, opt, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return record


def trainable_parameters(agent: Agent, mode: str) -> dict[str, Tensor]:
    params = dict(agent.named_parameters())
    if mode == "pretrain_actionfree":
        return {k: p for k, p in params.items() if not k.startswith("net.decoder.")}
    return params


def validation_loss(agent: Agent, sampler: WindowSampler, cfg: TrainConfig, seed: int,
                    dist: NoiseDist | None = None) -> float:
    """Mean total loss over fixed validation batches (fixed rng, so comparable across calls)."""
    streams = Streams.from_seed(seed)
    was_training = agent.training
    agent.eval()
    total = 0.0
    with T.no_grad():
        for _ in range(cfg.val_batches):
            batch = sampler.sample(streams.batch, cfg.batch_size, cfg.lang_per_batch)
            total += _value(compute_losses(agent, batch, cfg, streams, dist)["total"])
    agent.train(was_training)
    return total / cfg.val_batches


# -------------------------------------------------------------------- trainer
@dataclass
class TrainState:
    step: int = 0
    best_val: float = math.inf
    best_step: int = -1
    history: list[dict] = field(default_factory=list)


class Trainer:
    """Owns model, optimizer, samplers and rng streams for one run."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, episodes: Sequence[PlayEpisode],
                 dist: NoiseDist | None = None, scaler: ActionScaler | None = None,
                 metrics_path: str | Path | None = None):
        self.model_cfg, self.cfg = model_cfg, train_cfg
        self.dist = dist or NoiseDist()
        train_idx, val_idx = split_episodes(len(episodes), train_cfg.val_fraction, train_cfg.seed)
        train_eps = [episodes[i] for i in train_idx]
        val_eps = [episodes[i] for i in val_idx]
        if scaler is None:
            scaler, _ = normalize_actions([ep.actions for ep in train_eps])
        self.scaler = scaler
        self.sampler = WindowSampler(train_eps, scaler, model_cfg.chunk_len, train_cfg.foresight)
        self.val_sampler = WindowSampler(val_eps, scaler, model_cfg.chunk_len, train_cfg.foresight) if val_eps else None
        init_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
        self.agent = Agent(model_cfg, init_rng)
        self.opt = OptimizerState()
        self.streams = Streams.from_seed(train_cfg.seed)
        self.state = TrainState()
        self.best_weights: dict[str, np.ndarray] | None = None
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.trainable = trainable_parameters(self.agent, train_cfg.mode)

    def reinit_decoder(self, seed: int) -> None:
        """Fresh decoder weights (used after loading pretrained encoder weights)."""
        from .model import ActionDecoder
        self.agent.net.decoder = ActionDecoder(self.model_cfg, np.random.default_rng(np.random.SeedSequence([seed, 2])))
        self.trainable = trainable_parameters(self.agent, self.cfg.mode)

    def run(self, steps: int | None = None, on_step=None) -> TrainState:
        """Train until ``steps`` total optimizer steps (default: config.steps)."""
        target = self.cfg.steps if steps is None else steps
        fh = self.metrics_path.open("a", encoding="utf-8") if self.metrics_path else None
        try:
            while self.state.step < target:
                t0 = time.perf_counter()
                batch = self.sampler.sample(self.streams.batch, self.cfg.batch_size, self.cfg.lang_per_batch)
                rec = train_step(self.agent, batch, self.opt, self.streams, self.cfg, self.dist,
                                 self.state.step, self.trainable)
                self.state.step += 1
                rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
                self.state.history.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if self.state.step % self.cfg.eval_interval == 0 or self.state.step == target:
                    self._validate()
                if on_step:
                    on_step(rec)
        finally:
            if fh:
                fh.close()
        return self.state

    def _validate(self) -> None:
        if self.val_sampler is None:
            return
        val = validation_loss(self.agent, self.val_sampler, self.cfg, self.cfg.seed + 104_729, self.dist)
        log.info("step %d validation loss %.5f", self.state.step, val)
        if val < self.state.best_val:
            self.state.best_val, self.state.best_step = val, self.state.step
            self.best_weights = {k: v.copy() for k, v in self.agent.state_dict().items()}

    # ---------------------------------------------------------- persistence
    def checkpoint_payload(self, weights: dict[str, np.ndarray] | None = None, resolved_config: dict | None = None):
        """(tensors, header) for io.save_checkpoint. Optimizer moments travel as tensors."""
        weights = weights if weights is not None else self.agent.state_dict()
        tensors = {f"param/{k}": v for k, v in weights.items()}
        for k in sorted(self.opt.m):
            tensors[f"adam_m/{k}"] = self.opt.m[k]
            tensors[f"adam_v/{k}"] = self.opt.v[k]
        header = {
            "config": resolved_config or {"model": asdict(self.model_cfg), "train": asdict(self.cfg),
                                          "noise": asdict(self.dist)},
            "scaler": self.scaler.to_dict(),
            "optimizer": {"step": self.opt.step},
            "rng": self.streams.get_state(),
            "train_state": {"step": self.state.step, "best_val": _json_float(self.state.best_val),
                            "best_step": self.state.best_step},
        }
        return tensors, header

    def save(self, path, best: bool = False, resolved_config: dict | None = None) -> None:
        from .io import save_checkpoint
        weights = self.best_weights if best and self.best_weights is not None else None
        save_checkpoint(path, *self.checkpoint_payload(weights, resolved_config))

    def restore(self, path) -> None:
        """Resume: weights, optimizer moments, rng streams and counters."""
        from .io import check_shapes, load_checkpoint
        header, tensors = load_checkpoint(path)
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        check_shapes(params, {k: v.shape for k, v in self.agent.state_dict().items()})
        self.agent.load_state_dict(params)
        self.opt = OptimizerState(
            m={k[len("adam_m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_m/")},
            v={k[len("adam_v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam_v/")},
            step=header["optimizer"]["step"])
        self.streams.set_state(header["rng"])
        ts = header["train_state"]
        self.state.step = ts["step"]
        self.state.best_val = math.inf if ts["best_val"] is None else ts["best_val"]
        self.state.best_step = ts["best_step"]
        self.scaler = ActionScaler.from_dict(header["scaler"])

    def init_from(self, path) -> list[str]:
        """Load encoder / foresight / contrastive weights from a checkpoint; re-initialise the decoder."""
        from .io import load_checkpoint
        _, tensors = load_checkpoint(path)
        own = self.agent.state_dict()
        loaded = {}
        for k, v in tensors.items():
            if not k.startswith("param/"):
                continue
            name = k[len("param/"):]
            if name.startswith("net.decoder.") or name not in own:
                continue
            if v.shape != own[name].shape:
                from .io import ShapeError
                raise ShapeError(f"tensor {name} has shape {v.shape}, model expects {own[name].shape}")
            loaded[name] = v
        self.agent.load_state_dict(loaded, strict=False)
        self.reinit_decoder(self.cfg.seed)
        return sorted(loaded)


def _json_float(x: float):
    return None if not math.isfinite(x) else x
