"""Finite-difference verification of every differentiable op and of the full training objective."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .model import ModelConfig
from .tensor import Tensor, grad_check


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int


def _weighted(op: Callable[..., Tensor], weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    # a random linear functional of the output avoids symmetric cancellation
    return lambda x: (op(x) * weights).sum()


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """(name, scalar function of x, x) covering each primitive and composite op."""
    def r(*shape):
        return rng.standard_normal(shape)

    pos = np.abs(r(3, 4)) + 0.5
    other = r(3, 4)
    mat = r(4, 5)
    batch_mat = r(2, 4, 5)
    mask = rng.random((3, 4)) < 0.4
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    gain, bias = r(4), r(4)
    keep = rng.random((3, 4)) > 0.3
    attn_mask = nn.causal_mask(4)
    k_in, v_in = r(2, 4, 8), r(2, 4, 8)

    def w(shape):
        return rng.standard_normal(shape)

    cases = [
        ("add", lambda x: T.add(x, Tensor(other)), r(3, 4)),
        ("add_broadcast_rhs", lambda x: T.add(Tensor(other), x), r(4)),
        ("sub", lambda x: T.sub(Tensor(other), x), r(3, 4)),
        ("mul", lambda x: T.mul(x, Tensor(other)), r(3, 4)),
        ("mul_broadcast", lambda x: T.mul(Tensor(other), x), r(3, 1)),
        ("div_numerator", lambda x: T.div(x, Tensor(pos)), r(3, 4)),
        ("div_denominator", lambda x: T.div(Tensor(other), x), pos),
        ("power", lambda x: T.power(x, 3.0), r(3, 4)),
        ("exp", T.exp, r(3, 4)),
        ("log", T.log, pos),
        ("sqrt", T.sqrt, pos),
        ("tanh", T.tanh, r(3, 4)),
        ("gelu", T.gelu, r(3, 4)),
        ("silu", T.silu, r(3, 4)),
        ("where_const", lambda x: T.where_const(mask, x, 0.0), r(3, 4)),
        ("sum_axis", lambda x: T.tsum(x, axis=1), r(3, 4)),
        ("mean_keepdims", lambda x: T.tmean(x, axis=0, keepdims=True), r(3, 4)),
        ("reshape", lambda x: T.reshape(x, (4, 3)), r(3, 4)),
        ("transpose", lambda x: T.transpose(x, (1, 0)), r(3, 4)),
        ("getitem_basic", lambda x: x[1:, ::2], r(3, 4)),
        ("getitem_advanced", lambda x: x[np.array([0, 2, 0])], r(3, 4)),
        ("concat", lambda x: T.concat([x, Tensor(other), x], axis=1), r(3, 4)),
        ("stack", lambda x: T.stack([x, x * 2.0], axis=0), r(3, 4)),
        ("embedding", lambda x: T.embedding(x, ids), r(4, 3)),
        ("matmul_left", lambda x: T.matmul(x, Tensor(mat)), r(3, 4)),
        ("matmul_right", lambda x: T.matmul(Tensor(other), x), r(4, 5)),
        ("matmul_batched", lambda x: T.matmul(x, Tensor(batch_mat)), r(2, 3, 4)),
        ("softmax", lambda x: T.softmax(x, axis=-1), r(3, 4)),
        ("softmax_axis0", lambda x: T.softmax(x, axis=0), r(3, 4)),
        ("log_softmax", lambda x: T.log_softmax(x, axis=-1), r(3, 4)),
        ("layer_norm", lambda x: T.layer_norm(x, Tensor(gain), Tensor(bias)), r(3, 4)),
        ("layer_norm_plain", lambda x: T.layer_norm(x), r(3, 4)),
        ("layer_norm_gain", lambda x: T.layer_norm(Tensor(other), x, Tensor(bias)), r(4)),
        ("l2_normalize", lambda x: T.l2_normalize(x, axis=-1), r(3, 4)),
        ("dropout_fixed_mask", lambda x: T.dropout(x, 0.3, np.random.default_rng(5)), r(3, 4)),
        ("mask_mix", lambda x: x * keep + x * x * (~keep), r(3, 4)),
        ("attention", lambda x: nn.attention(x, Tensor(k_in), Tensor(v_in), mask=attn_mask), r(2, 4, 8)),
        ("attention_keys", lambda x: nn.attention(Tensor(v_in), x, Tensor(k_in), mask=attn_mask), r(2, 4, 8)),
    ]
    out = []
    for name, fn, x in cases:
        with T.no_grad():
            shape = fn(Tensor(x)).shape
        out.append((name, _weighted(fn, Tensor(w(shape))), x))
    return out


def check_ops(seed: int = 0, h: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        return [CheckResult(name, grad_check(f, x, h=h), x.size) for name, f, x in op_cases(rng)]


def small_model_config(**overrides) -> ModelConfig:
    base = dict(embed_dim=16, heads=2, encoder_layers=1, decoder_layers=1, chunk_len=4, mlp_ratio=2,
                obs_mlp_layers=1, mgf_dim=16, mgf_layers=1, mgf_heads=2, vocab_size=19,
                attn_dropout=0.1, resid_dropout=0.1, mlp_dropout=0.1)
    base.update(overrides)
    return ModelConfig(**base)


def _set_param(module, path: str, value: Tensor) -> None:
    *parents, leaf = path.split(".")
    obj = module
    for part in parents:
        obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
    setattr(obj, leaf, value)


def check_full_loss(cfg: ModelConfig | None = None, seed: int = 0, per_tensor: int = 3,
                    h: float = 1e-6) -> CheckResult:
    """Check d(total loss)/d(theta) on a few elements of every parameter tensor."""
    from .playgen import generate_dataset, normalize_actions
    from .trainer import Agent, Streams, TrainConfig, WindowSampler, compute_losses

    cfg = cfg or small_model_config()
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        agent = Agent(cfg, rng)
        # zero-initialised gates would hide every path behind them
        for name, p in agent.named_parameters():
            if not np.any(p.data):
                p.data = rng.normal(0.0, 0.1, size=p.shape)
        episodes = generate_dataset(seed, 2, n_tasks=3, p_label=1.0)
        scaler, _ = normalize_actions([ep.actions for ep in episodes])
        sampler = WindowSampler(episodes, scaler, k=cfg.chunk_len)
        picks = sampler.lang_index[np.linspace(0, len(sampler.lang_index) - 1, 4).astype(int)]
        batch = sampler.assemble(picks, np.array([0.1, 0.5, 0.9, 0.99]))
        tcfg = TrainConfig(batch_size=4, alpha=0.1, beta=0.1)

        def loss() -> Tensor:
            return compute_losses(agent, batch, tcfg, Streams.from_seed(seed))["total"]

        worst, count = 0.0, 0
        params = list(agent.named_parameters())
        for name, p in params:
            n = min(per_tensor, p.size)
            idx = rng.choice(p.size, size=n, replace=False)

            def f(x: Tensor, name=name, p=p) -> Tensor:
                _set_param(agent, name, x)
                try:
                    return loss()
                finally:
                    _set_param(agent, name, p)

            worst = max(worst, grad_check(f, p, h=h, indices=idx))
            count += n
    return CheckResult(f"total_loss[{cfg.embed_dim}]", worst, count)


def run_suite(seed: int = 0, verbose: bool = False) -> list[CheckResult]:
    t0 = time.perf_counter()
    results = check_ops(seed)
    results.append(check_full_loss(small_model_config(), seed))
    results.append(check_full_loss(small_model_config(use_resampler=True, noise_as_token=True, cla_pool="map",
                                                      tie_view_encoders=True), seed + 1))
    results.append(check_full_loss(small_model_config(use_encoder=False), seed + 2))
    if verbose:
        for r in results:
            print(f"{r.name:<28s} n={r.n_checked:<5d} max_rel_err={r.max_rel_err:.3e}")
        print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return results
