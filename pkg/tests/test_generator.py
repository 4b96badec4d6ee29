import math

import numpy as np
import pytest

import cytran.tensor as T
from cytran.generator import (
    EXPECTED_PARAMETERS, Generator, GeneratorConfig, attention_weights, self_attention,
)
from cytran.gradcheck import grad_check
from cytran.tensor import ShapeError, Tensor


def parameter_count_oracle(base=32, c=128, heads=6, d=64, hidden=512, blocks=9, cin=1):
    """Closed-form per-layer arithmetic (weights + biases + batch-norm scale/shift)."""
    bn = lambda ch: 2 * ch
    down = (
        cin * base * 49 + bn(base)          # 7x7 stem, bias-free ahead of batch-norm
        + base * base * 9 + bn(base)        # 3x3 stride-2 convs
        + base * 2 * base * 9 + bn(2 * base)
        + 2 * base * c * 9 + bn(c)
    )
    depthwise = c * 9 + bn(c)
    query = value = depthwise + c * d + d   # pointwise conv with bias
    key = c * 9 + c + c * d                 # key path: no norm shift, no pointwise bias
    block = (
        heads * (query + key + value)
        + heads * d * c + bn(c)             # head merge + residual norm
        + c * hidden + hidden + hidden * c + c
    )
    up = (
        c * c * 9 + bn(c)
        + c * 2 * base * 9 + bn(2 * base)
        + 2 * base * base * 9 + bn(base)
        + base * cin * 49 + cin             # final 7x7 conv with bias
    )
    return down + blocks * block + up


def test_parameter_count_matches_closed_form_and_claim():
    assert parameter_count_oracle() == EXPECTED_PARAMETERS == 3_530_369
    assert Generator(GeneratorConfig()).num_parameters() == EXPECTED_PARAMETERS
    assert abs(EXPECTED_PARAMETERS - 3.5e6) <= 0.15 * 3.5e6


def test_parameter_count_tracks_config():
    cfg = GeneratorConfig().scaled(8, n_blocks=2)
    assert Generator(cfg).num_parameters() == parameter_count_oracle(4, 16, 6, 8, 64, 2)


def test_config_rejects_sizes_not_divisible_by_eight():
    with pytest.raises(ValueError):
        GeneratorConfig(image_size=100)


def test_token_counts():
    cfg = GeneratorConfig()
    assert (cfg.grid, cfg.n_queries, cfg.n_keys) == (64, 4096, 1024)


@pytest.fixture(scope="module")
def small():
    return Generator(GeneratorConfig(image_size=128, n_blocks=1), seed=3)


def test_downsample_halves_three_times(small, rng):
    out = small.downsample(Tensor(rng.standard_normal((1, 1, 128, 128)).astype(np.float32)))
    assert out.shape == (1, 128, 16, 16)


def test_downsample_zero_input_is_zero():
    g = Generator(GeneratorConfig(image_size=64, n_blocks=1), seed=0).eval()
    with T.no_grad():
        assert not g.downsample(Tensor(np.zeros((1, 1, 64, 64), np.float32))).data.any()


def test_wrong_input_size(small):
    with pytest.raises(ShapeError):
        small(Tensor(np.zeros((1, 1, 64, 64), np.float32)))


def test_projection_shapes(small, rng):
    t = Tensor(rng.standard_normal((1, 128, 16, 16)).astype(np.float32))
    assert small.conv_projection(t, "Q", 0).shape == (1, 256, 64)
    assert small.conv_projection(t, "K", 5).shape == (1, 64, 64)
    assert small.conv_projection(t, "V", 2).shape == (1, 64, 64)
    with pytest.raises(IndexError):
        small.conv_projection(t, "Q", 6)


def test_projection_of_zero_grid_is_zero():
    g = Generator(GeneratorConfig(image_size=64, n_blocks=1), seed=0).eval()
    with T.no_grad():
        z = g.conv_projection(Tensor(np.zeros((1, 128, 8, 8), np.float32)), "V", 1)
    assert not z.data.any()


class TestSelfAttention:
    def test_equal_logits_average_values(self):
        q = T.tensor(np.zeros((1, 4)))
        k = T.tensor(np.ones((2, 4)))
        v = T.tensor(np.array([[1.0] * 4, [3.0] * 4]))
        np.testing.assert_allclose(self_attention(q, k, v).data, [[2.0] * 4])

    def test_saturated_logit_selects_row(self):
        d = 4
        q = T.tensor(np.full((1, d), 1.0))
        k = np.zeros((3, d))
        k[1] = 50 * math.sqrt(d) / d  # logit +50 against 0
        v = np.arange(12.0).reshape(3, 4)
        out = self_attention(q, T.tensor(k), T.tensor(v)).data
        np.testing.assert_allclose(out[0], v[1], atol=1e-6 * np.abs(v).max())

    def test_matches_brute_force_loops(self, rng, f64):
        q, k, v = rng.standard_normal((8, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        want = np.zeros((8, 4))
        for i in range(8):
            logits = [sum(q[i, c] * k[j, c] for c in range(4)) / math.sqrt(4) for j in range(6)]
            top = max(logits)
            w = [math.exp(a - top) for a in logits]
            total = sum(w)
            for c in range(4):
                want[i, c] = sum(w[j] / total * v[j, c] for j in range(6))
        got = self_attention(T.tensor(q), T.tensor(k), T.tensor(v)).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_scale_is_one_eighth_for_64_dims(self, f64):
        q = T.tensor(np.ones((1, 64)))
        k = T.tensor(np.array([np.ones(64) / 64, np.zeros(64)]))
        w = attention_weights(q, k).data[0]
        # logits 1/8 and 0
        assert w[0] / w[1] == pytest.approx(math.exp(1 / 8))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            self_attention(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 4))), T.tensor(np.ones((2, 4))))
        with pytest.raises(ShapeError):
            self_attention(T.tensor(np.ones((2, 4))), T.tensor(np.ones((3, 4))), T.tensor(np.ones((2, 4))))


def test_transformer_block_preserves_shape(small, rng):
    t = Tensor(rng.standard_normal((2, 128, 16, 16)).astype(np.float32))
    assert small.transformer_block(t).shape == (2, 128, 16, 16)


def test_zeroed_block_with_pass_through_norms_is_identity(rng):
    with T.precision(np.float64):
        g = Generator(GeneratorConfig(image_size=64, n_blocks=1), seed=0).eval()
    block = g.blocks[0]
    for conv in (block.merge, block.expand, block.contract):
        conv.weight.data[...] = 0
    block.norm.running_var[...] = 1 - block.norm.eps
    t = Tensor(rng.standard_normal((1, 128, 8, 8)))
    with T.no_grad():
        out = block(t).data
    norm_t = block.norm(t).data
    np.testing.assert_array_equal(norm_t, t.data)
    np.testing.assert_array_equal(out, norm_t)


def test_gradient_reaches_every_parameter(rng):
    with T.precision(np.float64):
        g = Generator(GeneratorConfig(image_size=32, n_blocks=2).scaled(4), seed=1)
        x = Tensor(rng.standard_normal((2, 1, 32, 32)))
    T.sum(g(x)).backward()
    scale = max(np.abs(p.grad).max() for p in g.parameters())
    dead = [n for n, p in g.named_parameters() if np.abs(p.grad).max() <= 1e-9 * scale]
    assert dead == []
    for h in range(6):
        head = g.blocks[0].heads[h]
        for proj in (head.query, head.key, head.value):
            assert np.abs(proj.pointwise.weight.grad).max() > 0


@pytest.mark.parametrize("size", [16, 64, 128])
def test_generate_preserves_shape(size, rng):
    g = Generator(GeneratorConfig(image_size=size), seed=0)
    with T.no_grad():
        assert g.generate(Tensor(rng.standard_normal((1, 1, size, size)).astype(np.float32))).shape == (1, 1, size, size)


def test_upsample_doubles_three_times(small, rng):
    out = small.upsample(Tensor(rng.standard_normal((1, 128, 16, 16)).astype(np.float32)))
    assert out.shape == (1, 1, 128, 128)


def test_upsample_zero_input_is_zero():
    g = Generator(GeneratorConfig(image_size=128, n_blocks=1), seed=2).eval()
    with T.no_grad():
        assert not g.upsample(Tensor(np.zeros((1, 128, 16, 16), np.float32))).data.any()


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 1, 32, 32)).astype(np.float32)
    outs = [Generator(GeneratorConfig(image_size=32, n_blocks=2), seed=9)(Tensor(x)).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_translate_matches_eval_forward(small, rng):
    x = rng.standard_normal((3, 128, 128)).astype(np.float32)
    out = small.translate(x, batch_size=2)
    small.eval()
    with T.no_grad():
        ref = small(Tensor(x[:, None])).data[:, 0]
    small.train()
    np.testing.assert_allclose(out, ref, atol=1e-5)
    assert small.training


def test_miniature_generator_gradient_check(rng):
    with T.precision(np.float64):
        g = Generator(GeneratorConfig().scaled(8, image_size=16), seed=4)
        x = Tensor(rng.standard_normal((2, 1, 16, 16)))
        w = Tensor(rng.standard_normal((2, 1, 16, 16)))
    params = g.parameters()
    report = grad_check(lambda: T.sum(T.mul(g(x), w)), [x] + params[::7], step=1e-6, samples=3)
    assert report.max_rel_error < 1e-4, report
