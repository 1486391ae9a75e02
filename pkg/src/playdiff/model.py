"""Goal-conditioned transformer encoder / diffusion decoder policy network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .diffusion import ContractError, Preconditioner, precondition_apply
from .nn import (LayerNorm, Linear, MLP, Module, MultiHeadAttention, TransformerBlock,
                 causal_mask, param, trunc_normal)
from .tensor import DimensionError, Tensor


@dataclass
class ModelConfig:
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    action_dim: int = 3
    chunk_len: int = 10
    n_latent_tokens: int = 3
    vocab_size: int = 32
    max_lang_len: int = 12
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    n_views: int = 2
    proprio_dim: int = 2
    mlp_ratio: int = 4
    obs_mlp_layers: int = 2
    obs_pool: str = "mean"
    attn_dropout: float = 0.0
    resid_dropout: float = 0.0
    mlp_dropout: float = 0.0
    sigma_data: float = 0.5
    use_resampler: bool = False
    resampler_layers: int = 1
    use_encoder: bool = True
    noise_as_token: bool = False
    tie_view_encoders: bool = False
    mgf_dim: int = 64
    mgf_layers: int = 2
    mgf_heads: int = 4
    cla_pool: str = "single"
    cla_view: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.obs_pool not in ("mean", "flatten"):
            raise ValueError("obs_pool must be 'mean' or 'flatten'")
        if self.cla_pool not in ("single", "map"):
            raise ValueError("cla_pool must be 'single' or 'map'")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def n_obs_tokens(self) -> int:
        return self.n_latent_tokens if self.use_resampler else self.n_views

    @property
    def n_tokens(self) -> int:
        """Encoder sequence length: observation tokens, proprio, goal (+ noise)."""
        extra = 1 if self.noise_as_token else 0
        return self.n_obs_tokens + 2 + extra


@dataclass
class ImageGoal:
    image: np.ndarray


@dataclass
class LanguageGoal:
    tokens: Sequence[int]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ContractError("language goal must contain at least one token")


GoalSpec = Union[ImageGoal, LanguageGoal]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N_p, patch*patch*C), raster order."""
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return np.ascontiguousarray(x.transpose(order)).reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, h: int, w: int, c: int) -> np.ndarray:
    *lead, n, _ = patches.shape
    gh, gw = h // patch, w // patch
    if gh * gw != n:
        raise DimensionError("patch count does not match image extents")
    x = patches.reshape(*lead, gh, gw, patch, patch, c)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return np.ascontiguousarray(x.transpose(order)).reshape(*lead, h, w, c)


def patchify_tensor(images: Tensor, patch: int) -> Tensor:
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    order = list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4]
    return x.transpose(order).reshape(*lead, gh * gw, patch * patch * c)


class PatchMLPEncoder(Module):
    """Patch embedding, residual per-patch MLPs, pooling to one token, output projection.

    ``mean`` pooling averages patch features; ``flatten`` projects the whole patch grid,
    so every grid cell has its own output weights and location survives pooling.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.patch = cfg.patch_size
        self.embed = Linear(cfg.patch_dim, d, rng, bias=False)
        self.pos = param(trunc_normal(rng, (cfg.n_patches, d), 0.02))
        self.norms = [LayerNorm(d) for _ in range(cfg.obs_mlp_layers)]
        self.mlps = [MLP(d, 2 * d, rng) for _ in range(cfg.obs_mlp_layers)]
        self.flatten = cfg.obs_pool == "flatten"
        self.out_norm = LayerNorm(d)
        self.out = Linear(d * cfg.n_patches if self.flatten else d, d, rng)

    def patch_tokens(self, images: Tensor) -> Tensor:
        x = self.embed(patchify_tensor(images, self.patch)) + self.pos
        for norm, mlp in zip(self.norms, self.mlps):
            x = x + mlp(norm(x))
        return x

    def pool(self, tokens: Tensor) -> Tensor:
        if self.flatten:
            x = self.out_norm(tokens)
            return self.out(x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1]))
        return self.out(self.out_norm(tokens.mean(axis=-2)))

    def __call__(self, images: Tensor) -> Tensor:
        return self.pool(self.patch_tokens(images))


class PerceiverResampler(Module):
    """Learned latent queries cross-attend to an unordered token set."""

    def __init__(self, dim: int, n_latents: int, heads: int, layers: int, rng: np.random.Generator):
        self.latents = param(trunc_normal(rng, (n_latents, dim), 0.02))
        self.norm_q = [LayerNorm(dim) for _ in range(layers)]
        self.norm_kv = [LayerNorm(dim) for _ in range(layers)]
        self.attn = [MultiHeadAttention(dim, heads, rng) for _ in range(layers)]
        self.norm_mlp = [LayerNorm(dim) for _ in range(layers)]
        self.mlp = [MLP(dim, 4 * dim, rng) for _ in range(layers)]

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-2] < 1:
            raise ContractError("resampler needs at least one input token")
        b = tokens.shape[0]
        lat = self.latents.reshape(1, *self.latents.shape) + T.zeros((b, 1, 1), dtype=tokens.dtype)
        for nq, nkv, attn, nm, mlp in zip(self.norm_q, self.norm_kv, self.attn, self.norm_mlp, self.mlp):
            lat = lat + attn(nq(lat), context=nkv(tokens))
            lat = lat + mlp(nm(lat))
        return lat


def perceiver_resample(tokens: Tensor, resampler: PerceiverResampler) -> Tensor:
    """Compress (B, n, d) tokens into (B, n_latents, d)."""
    if tokens.ndim == 2:
        return resampler(tokens.reshape(1, *tokens.shape)).reshape(*resampler.latents.shape)
    return resampler(tokens)


def sinusoidal_features(x: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """[sin(x f_i), cos(x f_i)] with geometrically spaced frequencies."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(x, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class NoiseEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(dim, 2 * dim, rng)
        self.fc2 = Linear(2 * dim, dim, rng)

    def __call__(self, c_noise: np.ndarray) -> Tensor:
        feats = Tensor(sinusoidal_features(c_noise, self.dim), dtype=self.fc1.weight.dtype)
        return self.fc2(T.silu(self.fc1(feats)))


def noise_embedding(sigma, embedder: NoiseEmbedding) -> Tensor:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("noise embedding needs sigma > 0")
    return embedder(0.25 * np.log(sigma))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def adaln_modulate(noise_vec: Tensor, head: Linear, n_sublayers: int) -> list[tuple[Tensor, Tensor, Tensor]]:
    """Split ``head(silu(noise_vec))`` into one (shift, scale, gate) triple per sublayer.

    Returned tensors have shape (B, 1, d) so they broadcast over the token axis.
    """
    mod = head(T.silu(noise_vec))
    b = mod.shape[0]
    d = mod.shape[-1] // (3 * n_sublayers)
    mod = mod.reshape(b, 1, 3 * n_sublayers, d)
    out = []
    for i in range(n_sublayers):
        out.append((mod[:, :, 3 * i], mod[:, :, 3 * i + 1], mod[:, :, 3 * i + 2]))
    return out


class DecoderBlock(Module):
    """Causal self-attention, cross-attention onto latent tokens, MLP.

    With adaLN each sublayer computes ``x + g * f(LN(x) * (1 + scale) + shift)`` where
    (shift, scale, g) come from a zero-initialised head on the noise embedding.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, adaln: bool = True):
        d = cfg.embed_dim
        self.adaln = adaln
        self.norm1 = LayerNorm(d, affine=not adaln, eps=1e-6)
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng, attn_dropout=cfg.attn_dropout)
        self.norm2 = LayerNorm(d, affine=not adaln, eps=1e-6)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng, attn_dropout=cfg.attn_dropout)
        self.norm3 = LayerNorm(d, affine=not adaln, eps=1e-6)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng, dropout=cfg.mlp_dropout)
        self.resid_dropout = cfg.resid_dropout
        if adaln:
            self.modulation = Linear(d, 9 * d, rng, init="zeros")

    def __call__(self, x: Tensor, memory: Tensor, noise_vec: Tensor | None,
                 rng: np.random.Generator | None = None) -> Tensor:
        n = x.shape[-2]
        mask = causal_mask(n)
        p = self.resid_dropout if self.training else 0.0
        sublayers = (
            (self.norm1, lambda h: self.self_attn(h, mask=mask, rng=rng)),
            (self.norm2, lambda h: self.cross_attn(h, context=memory, rng=rng)),
            (self.norm3, lambda h: self.mlp(h, rng=rng)),
        )
        if self.adaln:
            mods = adaln_modulate(noise_vec, self.modulation, 3)
            for (norm, fn), (shift, scale, gate) in zip(sublayers, mods):
                x = x + gate * T.dropout(fn(modulate(norm(x), shift, scale)), p, rng)
        else:
            for norm, fn in sublayers:
                x = x + T.dropout(fn(norm(x)), p, rng)
        return x


class ObservationGoalEncoder(Module):
    """Turns observations and one goal into the latent state tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.cfg = cfg
        n_view_encoders = 1 if cfg.tie_view_encoders else cfg.n_views
        self.views = [PatchMLPEncoder(cfg, rng) for _ in range(n_view_encoders)]
        if cfg.use_resampler:
            self.resampler = PerceiverResampler(d, cfg.n_latent_tokens, cfg.heads, cfg.resampler_layers, rng)
        self.proprio = Linear(cfg.proprio_dim, d, rng)
        self.goal_image = Linear(d, d, rng)
        self.lang_table = param(trunc_normal(rng, (cfg.vocab_size, d), 0.5))
        self.goal_lang = Linear(d, d, rng)
        self.pos = param(trunc_normal(rng, (cfg.n_tokens, d), 0.02))
        if cfg.use_encoder:
            self.blocks = [TransformerBlock(d, cfg.heads, rng, cfg.mlp_ratio, cfg.attn_dropout,
                                            cfg.resid_dropout, cfg.mlp_dropout)
                           for _ in range(cfg.encoder_layers)]
        else:
            self.cond_mlp = MLP(d, cfg.mlp_ratio * d, rng)
        self.norm = LayerNorm(d)

    def view_encoder(self, v: int) -> PatchMLPEncoder:
        return self.views[0 if self.cfg.tie_view_encoders else v]

    def encode_observation(self, images: Tensor) -> Tensor:
        """(B, V, H, W, C) -> (B, n_obs_tokens, d)."""
        cfg = self.cfg
        expect = (cfg.n_views, cfg.image_size, cfg.image_size, cfg.channels)
        if tuple(images.shape[1:]) != expect:
            raise DimensionError(f"observation extents {images.shape[1:]} != {expect}")
        if cfg.use_resampler:
            toks = [self.view_encoder(v).patch_tokens(images[:, v]) for v in range(cfg.n_views)]
            return self.resampler(T.concat(toks, axis=1))
        toks = [self.view_encoder(v)(images[:, v]) for v in range(cfg.n_views)]
        return T.stack(toks, axis=1)

    def encode_goal_images(self, images: Tensor) -> Tensor:
        """(B, H, W, C) -> (B, d); shares the static-view patch trunk."""
        return self.goal_image(self.view_encoder(0)(images))

    def encode_language(self, token_lists: Sequence[Sequence[int]]) -> Tensor:
        """Mean of token embeddings, projected; (B, d)."""
        if any(len(t) == 0 for t in token_lists):
            raise ContractError("empty language goal")
        length = max(len(t) for t in token_lists)
        ids = np.zeros((len(token_lists), length), dtype=np.int64)
        weights = np.zeros((len(token_lists), length, 1))
        for i, toks in enumerate(token_lists):
            ids[i, : len(toks)] = toks
            weights[i, : len(toks)] = 1.0 / len(toks)
        emb = T.embedding(self.lang_table, ids)
        pooled = (emb * weights.astype(emb.dtype)).sum(axis=1)
        return self.goal_lang(pooled)

    def encode_goals(self, goals: Sequence[GoalSpec]) -> Tensor:
        img_idx = [i for i, g in enumerate(goals) if isinstance(g, ImageGoal)]
        lang_idx = [i for i, g in enumerate(goals) if isinstance(g, LanguageGoal)]
        parts, order = [], []
        if img_idx:
            imgs = np.stack([goals[i].image for i in img_idx]).astype(self.lang_table.dtype)
            parts.append(self.encode_goal_images(Tensor(imgs, dtype=imgs.dtype)))
            order += img_idx
        if lang_idx:
            parts.append(self.encode_language([goals[i].tokens for i in lang_idx]))
            order += lang_idx
        out = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        if order != sorted(order):
            out = out[np.argsort(order)]
        return out

    def __call__(self, obs_tokens: Tensor, proprio: Tensor, goal_token: Tensor,
                 noise_vec: Tensor | None = None, rng: np.random.Generator | None = None) -> Tensor:
        b, _, d = obs_tokens.shape
        seq = [obs_tokens, self.proprio(proprio).reshape(b, 1, d), goal_token.reshape(b, 1, d)]
        if self.cfg.noise_as_token:
            seq.append(noise_vec.reshape(b, 1, d))
        x = T.concat(seq, axis=1) + self.pos
        if self.cfg.use_encoder:
            for blk in self.blocks:
                x = blk(x, rng=rng)
        else:
            x = x + self.cond_mlp(x)
        return self.norm(x)


class ActionDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.cfg = cfg
        self.noise = NoiseEmbedding(d, rng)
        self.embed = Linear(cfg.action_dim, d, rng)
        self.pos = param(trunc_normal(rng, (cfg.chunk_len, d), 0.02))
        adaln = not cfg.noise_as_token
        self.blocks = [DecoderBlock(cfg, rng, adaln=adaln) for _ in range(cfg.decoder_layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, cfg.action_dim, rng)

    def __call__(self, a_scaled: Tensor, memory: Tensor, noise_vec: Tensor | None,
                 rng: np.random.Generator | None = None) -> Tensor:
        x = self.embed(a_scaled) + self.pos
        for blk in self.blocks:
            x = blk(x, memory, noise_vec, rng=rng)
        return self.head(self.norm(x))


class PolicyNetwork(Module):
    """Encoder + diffusion decoder. ``encode`` once per state, ``denoise`` per noise level."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pc = Preconditioner(cfg.sigma_data)
        self.encoder = ObservationGoalEncoder(cfg, rng)
        self.decoder = ActionDecoder(cfg, rng)
        self.encoder_calls = 0
        self.decoder_calls = 0

    def noise_vector(self, sigma) -> Tensor:
        return noise_embedding(sigma, self.decoder.noise)

    def encode(self, obs_images: Tensor, proprio: Tensor, goal_token: Tensor, sigma=None,
               rng: np.random.Generator | None = None) -> Tensor:
        self.encoder_calls += 1
        obs = self.encoder.encode_observation(obs_images)
        noise_vec = None
        if self.cfg.noise_as_token:
            sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (obs.shape[0],))
            noise_vec = self.noise_vector(np.where(sig > 0, sig, 1.0))
        return self.encoder(obs, proprio, goal_token, noise_vec, rng=rng)

    def inner(self, a_scaled: Tensor, latents: Tensor, c_noise: np.ndarray,
              rng: np.random.Generator | None = None) -> Tensor:
        self.decoder_calls += 1
        noise_vec = None
        if not self.cfg.noise_as_token:
            noise_vec = self.decoder.noise(np.broadcast_to(c_noise, (a_scaled.shape[0],)))
        return self.decoder(a_scaled, latents, noise_vec, rng=rng)

    def denoise(self, a_noisy: Tensor, latents: Tensor, sigma, rng: np.random.Generator | None = None) -> Tensor:
        if a_noisy.shape[-2] != self.cfg.chunk_len or a_noisy.shape[-1] != self.cfg.action_dim:
            raise DimensionError(
                f"action chunk {a_noisy.shape[-2:]} != ({self.cfg.chunk_len}, {self.cfg.action_dim})")
        return precondition_apply(lambda a, mem, cn: self.inner(a, mem, cn, rng), a_noisy, latents,
                                  sigma, self.pc)


def closed_form_parameter_count(cfg: ModelConfig) -> int:
    """Parameter count of PolicyNetwork derived from the layer shapes."""
    d, r = cfg.embed_dim, cfg.mlp_ratio

    def linear(i, o, bias=True):
        return i * o + (o if bias else 0)

    def mlp(dim, hidden, out=None):
        return linear(dim, hidden) + linear(hidden, out or dim)

    ln = 2 * d
    mha = linear(d, d) + linear(d, 2 * d) + linear(d, d)
    patch_enc = (linear(cfg.patch_dim, d, bias=False) + cfg.n_patches * d
                 + cfg.obs_mlp_layers * (ln + mlp(d, 2 * d)) + ln
                 + linear(d * cfg.n_patches if cfg.obs_pool == "flatten" else d, d))
    n_view = 1 if cfg.tie_view_encoders else cfg.n_views
    enc = n_view * patch_enc
    if cfg.use_resampler:
        enc += cfg.n_latent_tokens * d + cfg.resampler_layers * (3 * ln + mha + mlp(d, 4 * d))
    enc += linear(cfg.proprio_dim, d) + linear(d, d) + cfg.vocab_size * d + linear(d, d)
    enc += cfg.n_tokens * d
    if cfg.use_encoder:
        enc += cfg.encoder_layers * (2 * ln + mha + mlp(d, r * d))
    else:
        enc += mlp(d, r * d)
    enc += ln
    dec = mlp(d, 2 * d) + linear(cfg.action_dim, d) + cfg.chunk_len * d
    block = 2 * mha + mlp(d, r * d)
    block += linear(d, 9 * d) if not cfg.noise_as_token else 3 * ln
    dec += cfg.decoder_layers * block + ln + linear(d, cfg.action_dim)
    return enc + dec
