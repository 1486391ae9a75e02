"""Command-line entry point: data generation, training, evaluation and self-checks."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config, ConfigError, load_config

log = logging.getLogger("playdiff")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; route it to the validation exit code instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--data", required=True, help="dataset file written by gen-data")
    p.add_argument("--out", required=True, help="checkpoint path (best validation weights)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--metrics", help="per-step JSONL metrics (default: <out>.metrics.jsonl)")
    p.add_argument("--pretrain-actionfree", action="store_true", help="foresight + contrastive losses only")
    p.add_argument("--init-from", metavar="CKPT", help="load encoder and auxiliary heads, fresh decoder")
    p.add_argument("--resume", metavar="CKPT", help="continue from a <out>.last checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="playdiff", description="Goal-conditioned diffusion policy on a toy play dataset.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a play dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--episodes", type=int, help="override playgen.n_episodes")

    _train_args(sub.add_parser("train", help="train a policy"))

    a = sub.add_parser("ablate", help="train with components switched off")
    _train_args(a)
    a.add_argument("--no-mgf", action="store_true", help="drop the foresight loss (alpha = 0)")
    a.add_argument("--no-cla", action="store_true", help="drop the contrastive loss (beta = 0)")
    a.add_argument("--no-encoder", action="store_true", help="replace the transformer encoder by an MLP")
    a.add_argument("--noise-as-token", action="store_true", help="noise level as an encoder token, no adaLN")

    e = sub.add_parser("eval", help="evaluate a checkpoint on instruction chains")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--chains", type=int, default=100)
    e.add_argument("--mode", choices=("language", "image"), default="language")
    e.add_argument("--seed", type=int, default=1234)
    e.add_argument("--length", type=int, default=5, help="tasks per chain (1 = single-task success)")
    e.add_argument("--execute", type=int, default=0, help="actions executed per chunk (0 = all)")
    e.add_argument("--max-steps", type=int, default=120)
    e.add_argument("--report", help="write the report as JSONL here")

    s = sub.add_parser("sample-check", help="sampler against the analytic Gaussian denoiser")
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    return parser


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    from .io import save_dataset
    from .playgen import annotation_coverage, generate_dataset

    cfg = load_config(args.config)
    pg = cfg.playgen
    n = args.episodes or pg.n_episodes
    if n < 1:
        raise ConfigError("--episodes must be >= 1")
    episodes = generate_dataset(args.seed, n, pg.n_tasks, pg.n_blocks, pg.p_label, pg.noise, pg.pause)
    meta = {"seed": args.seed, "playgen": asdict(pg) | {"n_episodes": n}}
    save_dataset(args.out, episodes, meta)
    steps = sum(len(ep) for ep in episodes)
    print(f"wrote {args.out}: {n} episodes, {steps} steps, "
          f"annotation coverage {annotation_coverage(episodes) * 100:.2f}%")
    return EXIT_OK


def _resolve_train_config(args, ablate: bool) -> Config:
    cfg = load_config(args.config)
    train = {}
    if args.seed is not None:
        train["seed"] = args.seed
    if args.steps is not None:
        train["steps"] = args.steps
    if args.pretrain_actionfree:
        train["mode"] = "pretrain_actionfree"
    if ablate:
        if args.no_mgf:
            train["alpha"] = 0.0
        if args.no_cla:
            train["beta"] = 0.0
        model = {}
        if args.no_encoder:
            model["use_encoder"] = False
        if args.noise_as_token:
            model["noise_as_token"] = True
        if model:
            cfg = cfg.replace("model", **model)
    if train:
        cfg = cfg.replace("train", **train)
    return cfg


def cmd_train(args, ablate: bool = False) -> int:
    from .io import load_dataset
    from .trainer import Trainer

    cfg = _resolve_train_config(args, ablate)
    if args.resume and args.init_from:
        raise ConfigError("--resume and --init-from are mutually exclusive")
    episodes, _ = load_dataset(args.data)
    with T.default_dtype(np.float32):
        return _run_training(args, cfg, episodes)


def _run_training(args, cfg: Config, episodes) -> int:
    from .trainer import Trainer

    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    if not args.resume and metrics.exists():
        metrics.unlink()
    trainer = Trainer(cfg.model, cfg.train, episodes, cfg.noise, metrics_path=metrics)
    if args.resume:
        trainer.restore(args.resume)
    if args.init_from:
        loaded = trainer.init_from(args.init_from)
        print(f"initialised {len(loaded)} tensors from {args.init_from}; decoder re-initialised")

    def progress(rec):
        if rec["step"] % 100 == 0:
            log.info("step %d total %.4f (sm %.4f mgf %.4f cla %.4f)", rec["step"], rec["total"], rec["L_SM"],
                     rec["L_MGF"], rec["L_CLA"])

    trainer.run(on_step=progress)
    resolved = cfg.to_dict()
    trainer.save(out.with_name(out.name + ".last"), resolved_config=resolved)
    trainer.save(out, best=True, resolved_config=resolved)
    last = trainer.state.history[-1] if trainer.state.history else {}
    print(f"trained to step {trainer.state.step}; final total {last.get('total', float('nan')):.4f}; "
          f"best validation {trainer.state.best_val:.4f} at step {trainer.state.best_step}; wrote {out}")
    return EXIT_OK


def load_policy(path):
    """Rebuild a sampling policy from a checkpoint's embedded config, weights and scaler."""
    from .evaluator import DiffusionPolicy
    from .io import check_shapes, load_checkpoint
    from .model import PolicyNetwork
    from .playgen import ActionScaler

    header, tensors = load_checkpoint(path)
    cfg = _config_from_header(header)
    with T.default_dtype(np.float32):
        net = PolicyNetwork(cfg.model, np.random.default_rng(0))
    weights = {k[len("param/net."):]: v for k, v in tensors.items() if k.startswith("param/net.")}
    check_shapes(weights, {k: v.shape for k, v in net.state_dict().items()})
    net.load_state_dict(weights)
    scaler = ActionScaler.from_dict(header["scaler"])
    return DiffusionPolicy(net, scaler, cfg.schedule.steps, cfg.schedule.sigma_min, cfg.schedule.sigma_max), cfg


def _config_from_header(header) -> Config:
    from .config import config_from_dict
    return config_from_dict(header["config"])


def cmd_eval(args) -> int:
    from .evaluator import evaluate_chains, generate_chains

    if args.chains < 1 or args.length < 1 or args.max_steps < 1 or args.execute < 0:
        raise ConfigError("--chains, --length and --max-steps must be >= 1; --execute >= 0")
    policy, cfg = load_policy(args.ckpt)
    chains = generate_chains(args.chains, args.seed, cfg.playgen.n_blocks, args.length)
    report = evaluate_chains(policy, chains, args.mode, args.seed, args.max_steps, args.execute or None,
                             cfg.playgen.n_blocks, cfg.evaluator.batch)
    print(report.format_table())
    if args.report:
        from .io import atomic_write
        atomic_write(args.report, report.to_jsonl().encode("utf-8"))
    return EXIT_OK


def cmd_sample_check(args) -> int:
    from .diffusion import run_sampler_oracle

    res = run_sampler_oracle(n_samples=args.samples, steps=args.steps, seed=args.seed)
    checks = {
        "|mean| < 0.02": abs(res["mean"]) < 0.02,
        "variance within 3% of 0.25": res["var_rel_err"] < 0.03,
        "per-trajectory |DDIM - Euler| < 1e-2": res["max_traj_diff"] < 1e-2,
    }
    print(json.dumps(res, sort_keys=True))
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if all(checks.values()) else EXIT_RUNTIME


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, verbose=True)
    worst = max(r.max_rel_err for r in results)
    ok = worst < 1e-4
    print(f"{'PASS' if ok else 'FAIL'}  max relative error {worst:.3e} (threshold 1e-4)")
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "ablate": lambda a: cmd_train(a, ablate=True),
        "eval": cmd_eval,
        "sample-check": cmd_sample_check,
        "gradcheck": cmd_gradcheck,
    }
    from .io import ContainerError
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
