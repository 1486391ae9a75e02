import numpy as np
import pytest

from playdiff import tensor as T
from playdiff.diffusion import ContractError
from playdiff.evaluator import DiffusionPolicy
from playdiff.gradcheck import _set_param, small_model_config
from playdiff.model import (ActionDecoder, DecoderBlock, ImageGoal, LanguageGoal, ModelConfig,
                            NoiseEmbedding, ObservationGoalEncoder, PatchMLPEncoder, PerceiverResampler,
                            PolicyNetwork, closed_form_parameter_count, noise_embedding,
                            perceiver_resample, sinusoidal_features)
from playdiff.nn import TransformerBlock
from playdiff.playgen import ActionScaler
from playdiff.tensor import DimensionError, Tensor, grad_check


@pytest.fixture(autouse=True)
def float64():
    with T.default_dtype(np.float64):
        yield


def cfg16(**kw):
    base = dict(attn_dropout=0.0, resid_dropout=0.0, mlp_dropout=0.0)
    base.update(kw)
    return small_model_config(**base)


def _randomise_zero_params(module, rng):
    for _, p in module.named_parameters():
        if not np.any(p.data):
            p.data = rng.normal(0, 0.1, size=p.shape)


# ---------------------------------------------------------- observation
def test_tied_views_give_identical_tokens():
    cfg = cfg16(tie_view_encoders=True)
    enc = ObservationGoalEncoder(cfg, np.random.default_rng(0))
    img = np.random.default_rng(1).random((1, 32, 32, 1))
    tokens = enc.encode_observation(Tensor(np.stack([img, img], axis=1))).data
    np.testing.assert_array_equal(tokens[:, 0], tokens[:, 1])


def test_zero_image_with_zero_biases_gives_zero_token():
    cfg = cfg16()
    enc = PatchMLPEncoder(cfg, np.random.default_rng(0))
    enc.pos.data[:] = 0
    for name, p in enc.named_parameters():
        if name.endswith("bias"):
            p.data[:] = 0
    out = enc(Tensor(np.zeros((2, 32, 32, 1)))).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_observation_extent_mismatch():
    enc = ObservationGoalEncoder(cfg16(), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        enc.encode_observation(Tensor(np.zeros((1, 2, 16, 16, 1))))


def test_observation_token_pixel_gradient():
    cfg = cfg16()
    enc = PatchMLPEncoder(cfg, np.random.default_rng(0))
    img = np.random.default_rng(1).random((1, 32, 32, 1))
    w = np.random.default_rng(2).normal(size=(1, 16))
    err = grad_check(lambda x: (enc(x) * w).sum(), img, indices=range(0, 1024, 37))
    assert err < 1e-4


# ---------------------------------------------------------------- goals
def test_equal_image_goals_equal_tokens():
    enc = ObservationGoalEncoder(cfg16(), np.random.default_rng(0))
    g = np.random.default_rng(1).random((32, 32, 1))
    out = enc.encode_goals([ImageGoal(g), ImageGoal(g.copy())]).data
    np.testing.assert_array_equal(out[0], out[1])


def test_language_mean_pool_idempotent_on_repeats():
    enc = ObservationGoalEncoder(cfg16(), np.random.default_rng(0))
    out = enc.encode_goals([LanguageGoal([4]), LanguageGoal([4, 4])]).data
    np.testing.assert_allclose(out[0], out[1], rtol=1e-12)


def test_empty_language_goal_rejected():
    with pytest.raises(ContractError):
        LanguageGoal([])


def test_mixed_goal_batch_keeps_order():
    enc = ObservationGoalEncoder(cfg16(), np.random.default_rng(0))
    g = np.random.default_rng(1).random((32, 32, 1))
    mixed = enc.encode_goals([LanguageGoal([1, 2]), ImageGoal(g), LanguageGoal([3])]).data
    np.testing.assert_allclose(mixed[0], enc.encode_goals([LanguageGoal([1, 2])]).data[0], rtol=1e-12)
    np.testing.assert_allclose(mixed[1], enc.encode_goals([ImageGoal(g)]).data[0], rtol=1e-12)
    np.testing.assert_allclose(mixed[2], enc.encode_goals([LanguageGoal([3])]).data[0], rtol=1e-12)


def test_distinct_instructions_give_distinct_tokens():
    for seed in range(100):
        enc = ObservationGoalEncoder(cfg16(), np.random.default_rng(seed))
        out = enc.encode_goals([LanguageGoal([1]), LanguageGoal([2])]).data
        assert not np.allclose(out[0], out[1])


# ------------------------------------------------------------ resampler
def test_resampler_shapes():
    rs = PerceiverResampler(16, 3, 2, 1, np.random.default_rng(0))
    assert perceiver_resample(Tensor(np.ones((1, 16))), rs).shape == (3, 16)
    assert perceiver_resample(Tensor(np.random.default_rng(1).normal(size=(196, 16))), rs).shape == (3, 16)


def test_resampler_permutation_invariant():
    rng = np.random.default_rng(0)
    rs = PerceiverResampler(16, 3, 2, 2, rng)
    tok = rng.normal(size=(2, 7, 16))
    base = rs(Tensor(tok)).data
    for _ in range(5):
        perm = rng.permutation(7)
        np.testing.assert_allclose(rs(Tensor(tok[:, perm])).data, base, rtol=1e-10, atol=1e-12)


def test_resampler_rejects_empty_input():
    rs = PerceiverResampler(16, 3, 2, 1, np.random.default_rng(0))
    with pytest.raises(ContractError):
        rs(Tensor(np.zeros((1, 0, 16))))


# --------------------------------------------------------------- encoder
def test_encoder_output_shape_matches_input():
    for kw in ({}, {"use_resampler": True}, {"noise_as_token": True}, {"use_encoder": False}):
        cfg = cfg16(**kw)
        net = PolicyNetwork(cfg, np.random.default_rng(0))
        lat = net.encode(Tensor(np.zeros((2, 2, 32, 32, 1))), Tensor(np.zeros((2, 2))),
                         net.encoder.encode_goals([LanguageGoal([1])] * 2), sigma=np.ones(2))
        assert lat.shape == (2, cfg.n_tokens, 16)


def test_zero_layer_encoder_passes_tokens_through():
    cfg = cfg16(encoder_layers=0)
    enc = ObservationGoalEncoder(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    obs, prop, goal = rng.normal(size=(2, 2, 16)), rng.normal(size=(2, 2)), rng.normal(size=(2, 16))
    out = enc(Tensor(obs), Tensor(prop), Tensor(goal)).data
    seq = np.concatenate([obs, enc.proprio(Tensor(prop)).data[:, None], goal[:, None]], axis=1)
    np.testing.assert_allclose(out, enc.norm(Tensor(seq + enc.pos.data)).data, rtol=1e-12)


def test_two_layer_encoder_grad_check():
    rng = np.random.default_rng(0)
    blocks = [TransformerBlock(16, 2, rng) for _ in range(2)]
    w = rng.normal(size=(2, 4, 16))

    def f(x):
        for blk in blocks:
            x = blk(x)
        return (x * w).sum()

    assert grad_check(f, rng.normal(size=(2, 4, 16))) < 1e-4


# ---------------------------------------------------------- noise embed
def test_sinusoidal_features_at_zero():
    feats = sinusoidal_features(np.array([0.0]), 16)
    np.testing.assert_array_equal(feats[0, :8], 0.0)
    np.testing.assert_array_equal(feats[0, 8:], 1.0)


def test_noise_embedding_deterministic_and_contract():
    emb = NoiseEmbedding(16, np.random.default_rng(0))
    np.testing.assert_array_equal(noise_embedding([0.3], emb).data, noise_embedding([0.3], emb).data)
    with pytest.raises(ContractError):
        noise_embedding([0.0], emb)


def test_noise_embedding_separates_extreme_levels():
    for seed in range(100):
        emb = NoiseEmbedding(16, np.random.default_rng(seed))
        lo = np.linalg.norm(noise_embedding([0.001], emb).data)
        hi = np.linalg.norm(noise_embedding([80.0], emb).data)
        assert abs(lo - hi) > 1e-3


# ----------------------------------------------------------------- adaLN
def test_zero_initialised_adaln_block_is_identity():
    cfg = cfg16()
    rng = np.random.default_rng(0)
    blk = DecoderBlock(cfg, rng)
    x = rng.normal(size=(2, 4, 16))
    out = blk(Tensor(x), Tensor(rng.normal(size=(2, 3, 16))), Tensor(rng.normal(size=(2, 16))))
    np.testing.assert_array_equal(out.data, x)


def test_unit_gate_zero_shift_scale_is_plain_prenorm_block():
    cfg = cfg16()
    rng = np.random.default_rng(0)
    blk = DecoderBlock(cfg, rng)
    d = 16
    # bias pattern (shift=0, scale=0, gate=1) per sublayer, independent of the noise vector
    blk.modulation.bias.data[:] = np.tile(np.concatenate([np.zeros(2 * d), np.ones(d)]), 3)
    x = Tensor(rng.normal(size=(1, 4, d)))
    mem = Tensor(rng.normal(size=(1, 3, d)))
    out = blk(x, mem, Tensor(rng.normal(size=(1, d)))).data
    h = x
    h = h + blk.self_attn(blk.norm1(h), mask=np.triu(np.ones((4, 4), dtype=bool), 1))
    h = h + blk.cross_attn(blk.norm2(h), context=mem)
    h = h + blk.mlp(blk.norm3(h))
    np.testing.assert_allclose(out, h.data, rtol=1e-12, atol=1e-12)


def test_gradient_reaches_noise_vector():
    cfg = cfg16()
    rng = np.random.default_rng(0)
    blk = DecoderBlock(cfg, rng)
    _randomise_zero_params(blk, rng)
    nv = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
    blk(Tensor(rng.normal(size=(2, 4, 16))), Tensor(rng.normal(size=(2, 3, 16))), nv).sum().backward()
    assert np.linalg.norm(nv.grad) > 0


# --------------------------------------------------------------- decoder
@pytest.mark.parametrize("layers", [1, 2, 3])
def test_decoder_is_causal(layers):
    cfg = cfg16(decoder_layers=layers)
    rng = np.random.default_rng(0)
    dec = ActionDecoder(cfg, rng)
    _randomise_zero_params(dec, rng)
    a = rng.normal(size=(1, cfg.chunk_len, 3))
    mem = Tensor(rng.normal(size=(1, 4, 16)))
    nv = Tensor(rng.normal(size=(1, 16)))
    base = dec(Tensor(a), mem, nv).data
    for j in range(cfg.chunk_len):
        pert = a.copy()
        pert[0, j] += 1.0
        diff = np.abs(dec(Tensor(pert), mem, nv).data - base).sum(axis=-1)[0]
        assert np.all(diff[:j] == 0)
        assert diff[j] > 0


def test_denoise_shapes_and_zero_sigma():
    for kw in ({}, {"noise_as_token": True}, {"use_encoder": False}):
        cfg = cfg16(**kw)
        net = PolicyNetwork(cfg, np.random.default_rng(0))
        lat = Tensor(np.random.default_rng(1).normal(size=(2, cfg.n_tokens, 16)))
        a = Tensor(np.random.default_rng(2).normal(size=(2, cfg.chunk_len, 3)))
        assert net.denoise(a, lat, 0.7).shape == (2, cfg.chunk_len, 3)
        assert net.denoise(a, lat, 0.0) is a


def test_wrong_chunk_length():
    cfg = cfg16()
    net = PolicyNetwork(cfg, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        net.denoise(Tensor(np.zeros((1, cfg.chunk_len + 1, 3))), Tensor(np.zeros((1, cfg.n_tokens, 16))), 1.0)


# -------------------------------------------------------------- sampling
def _policy(cfg):
    net = PolicyNetwork(cfg, np.random.default_rng(0))
    return DiffusionPolicy(net, ActionScaler(-np.ones(3), np.ones(3)), n_steps=10)


def test_one_encoder_pass_and_ten_decoder_passes_per_sample():
    pol = _policy(cfg16())
    imgs = np.zeros((3, 2, 32, 32, 1))
    pol.sample(imgs, np.zeros((3, 2)), [LanguageGoal([1])] * 3, np.random.default_rng(0))
    assert pol.net.encoder_calls == 1
    assert pol.net.decoder_calls == 10


def test_noise_token_mode_reencodes_every_level():
    pol = _policy(cfg16(noise_as_token=True))
    pol.sample(np.zeros((1, 2, 32, 32, 1)), np.zeros((1, 2)), [LanguageGoal([1])], np.random.default_rng(0))
    assert pol.net.encoder_calls == 10 and pol.net.decoder_calls == 10


def test_sampling_deterministic_given_seed():
    pol = _policy(cfg16())
    args = (np.zeros((2, 2, 32, 32, 1)), np.zeros((2, 2)), [LanguageGoal([1]), LanguageGoal([2])])
    a = pol.sample(*args, np.random.default_rng(5))
    b = pol.sample(*args, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------- parameters
@pytest.mark.parametrize("kw", [{}, {"use_resampler": True}, {"noise_as_token": True}, {"use_encoder": False},
                                {"tie_view_encoders": True}, {"embed_dim": 32, "heads": 4, "decoder_layers": 3}])
def test_parameter_count_matches_closed_form(kw):
    cfg = cfg16(**kw)
    net = PolicyNetwork(cfg, np.random.default_rng(0))
    assert net.num_parameters() == closed_form_parameter_count(cfg)


def test_default_parameter_count_regression():
    assert closed_form_parameter_count(ModelConfig()) == PolicyNetwork(ModelConfig(), np.random.default_rng(0)).num_parameters()
    assert closed_form_parameter_count(ModelConfig()) == 421_955


def test_end_to_end_score_matching_grad_check():
    cfg = cfg16()
    rng = np.random.default_rng(0)
    net = PolicyNetwork(cfg, rng)
    _randomise_zero_params(net, rng)
    images = Tensor(rng.random((2, 2, 32, 32, 1)))
    goal = [LanguageGoal([1, 2]), LanguageGoal([3])]
    a = rng.uniform(-1, 1, size=(2, cfg.chunk_len, 3))
    sigma = np.array([0.3, 2.0])
    noisy = a + rng.normal(size=a.shape) * sigma[:, None, None]
    weight = net.pc.loss_weight(sigma)[:, None, None]

    def loss():
        lat = net.encode(images, Tensor(np.array([[0.2, 0.3], [0.5, 0.9]])), net.encoder.encode_goals(goal))
        d = net.denoise(Tensor(noisy), lat, sigma)
        diff = d - Tensor(a)
        return (diff * diff * weight).sum() * 0.5

    for name in ("decoder.blocks.0.modulation.weight", "encoder.blocks.0.attn.q.weight", "encoder.lang_table",
                 "encoder.views.1.embed.weight", "decoder.noise.fc1.weight"):
        p = dict(net.named_parameters())[name]

        def f(x, name=name, p=p):
            _set_param(net, name, x)
            try:
                return loss()
            finally:
                _set_param(net, name, p)

        assert grad_check(f, p, indices=range(0, p.size, max(1, p.size // 12))) < 1e-4
