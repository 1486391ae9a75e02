"""Masked future-frame reconstruction and contrastive goal alignment objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffusion import ContractError
from .model import ModelConfig, patchify
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock, param, trunc_normal
from .tensor import Tensor


@dataclass
class PatchSet:
    patches: np.ndarray  # (..., N_p, patch_dim)
    mask: np.ndarray | None = None  # (..., N_p) bool, True = masked

    @property
    def n_patches(self) -> int:
        return self.patches.shape[-2]


def mask_patches(ps: PatchSet, ratio: float, rng: np.random.Generator) -> PatchSet:
    """Flag exactly round(ratio * N_p) patches per image, uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError("mask ratio must lie in [0, 1]")
    n = ps.n_patches
    n_mask = int(round(ratio * n))
    lead = ps.patches.shape[:-2]
    # argsort of iid uniforms gives a uniform random permutation per row
    keys = rng.random(lead + (n,))
    ranks = np.argsort(np.argsort(keys, axis=-1), axis=-1)
    return PatchSet(ps.patches, ranks < n_mask)


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-patch standardisation: subtract the patch mean, divide by (std + eps)."""
    mu = patches.mean(axis=-1, keepdims=True)
    std = patches.std(axis=-1, keepdims=True)
    return (patches - mu) / (std + eps)


def masked_patch_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """(1/N_p) * sum_p mask_p * mean_pixels((p - p_hat)^2), averaged over the batch.

    Unmasked predictions are multiplied by an exact zero, so they never reach the value.
    """
    target = np.asarray(target, dtype=pred.dtype)
    n_p = target.shape[-2]
    diff = pred - Tensor(target, dtype=pred.dtype)
    per_patch = (diff * diff).mean(axis=-1)
    per_patch = T.where_const(~np.asarray(mask, dtype=bool), per_patch, 0.0)
    per_image = per_patch.sum(axis=-1) * (1.0 / n_p)
    return per_image.mean()


class ForesightDecoder(Module):
    """Small ViT that sees [latent context tokens; future patches with mask tokens]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dm = cfg.mgf_dim
        self.cfg = cfg
        self.context = Linear(cfg.embed_dim, dm, rng)
        self.embed = Linear(cfg.patch_dim, dm, rng)
        self.mask_token = param(trunc_normal(rng, (dm,), 0.02))
        self.pos = param(trunc_normal(rng, (cfg.n_patches, dm), 0.02))
        self.blocks = [TransformerBlock(dm, cfg.mgf_heads, rng, cfg.mlp_ratio) for _ in range(cfg.mgf_layers)]
        self.norm = LayerNorm(dm)
        self.head = Linear(dm, cfg.patch_dim, rng)

    def __call__(self, latents: Tensor, patches: np.ndarray, mask: np.ndarray) -> Tensor:
        """Predict every patch; (B, N_p, patch_dim)."""
        dtype = self.embed.weight.dtype
        b, n_ctx = latents.shape[0], latents.shape[1]
        tok = self.embed(Tensor(patches, dtype=dtype))
        m = np.asarray(mask, dtype=dtype)[..., None]
        tok = tok * (1.0 - m) + self.mask_token * m
        tok = tok + self.pos
        x = T.concat([self.context(latents), tok], axis=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x[:, n_ctx:])
        return self.head(x)


def mgf_loss(latents: Tensor, future_images: np.ndarray, decoder: ForesightDecoder,
             rng: np.random.Generator, mask_ratio: float = 0.75, norm_pixel: bool = True,
             foresight: int = 3) -> Tensor:
    """Reconstruct masked patches of the frame ``foresight`` steps ahead from the latents."""
    if foresight < 1:
        raise ContractError("foresight distance must be >= 1")
    patches = patchify(np.asarray(future_images), decoder.cfg.patch_size)
    ps = mask_patches(PatchSet(patches), mask_ratio, rng)
    pred = decoder(latents, patches, ps.mask)
    target = normalize_patches(patches) if norm_pixel else patches
    return masked_patch_loss(pred, target, ps.mask)


class MAPPool(Module):
    """Multi-head attention pooling with one learned query."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.query = param(trunc_normal(rng, (1, dim), 0.02))
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        b = tokens.shape[0]
        q = self.query.reshape(1, *self.query.shape) + T.zeros((b, 1, 1), dtype=tokens.dtype)
        return self.attn(q, context=self.norm(tokens)).reshape(b, -1)


def map_pool(tokens: Tensor, pool: MAPPool | None = None, view_index: int = 0) -> Tensor:
    """Reduce (B, n, d) latent tokens to unit vectors (B, d).

    Without a pool module the token at ``view_index`` (the static view) is used.
    """
    if tokens.shape[-2] < 1:
        raise ContractError("need at least one token")
    z = pool(tokens) if pool is not None else tokens[:, view_index]
    return T.l2_normalize(z, axis=-1)


def cla_loss(z_image: Tensor, z_lang: Tensor, temperature: float = 0.1,
             task_ids: np.ndarray | None = None) -> Tensor:
    """Symmetric InfoNCE over cosine similarities of paired unit vectors.

    With ``task_ids``, off-diagonal pairs sharing a task are removed from both denominators.
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    b = z_image.shape[0]
    if b < 1:
        raise ContractError("empty batch")
    logits = T.matmul(z_image, z_lang.T) * (1.0 / temperature)
    if task_ids is not None:
        ids = np.asarray(task_ids)
        same = (ids[:, None] == ids[None, :]) & ~np.eye(b, dtype=bool)
        if same.any():
            logits = T.where_const(same, logits, -np.inf)
    eye = np.eye(b, dtype=bool)
    row = T.log_softmax(logits, axis=1)
    col = T.log_softmax(logits, axis=0)
    diag_row = row[eye]
    diag_col = col[eye]
    return (diag_row.sum() + diag_col.sum()) * (-1.0 / (2 * b))


def total_loss(l_sm, l_mgf, l_cla, alpha: float = 0.1, beta: float = 0.1):
    return l_sm + alpha * l_mgf + beta * l_cla
