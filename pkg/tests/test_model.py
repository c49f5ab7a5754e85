import hashlib

import numpy as np
import pytest

from ddanet.model import (
    ModelConfig,
    build,
    count_params,
    forward,
    named_buffers,
    named_parameters,
)
from ddanet.tensor import Graph, Tensor

from conftest import rel_err

TINY = ModelConfig(channel_widths=(4, 8, 16, 32), se_ratio=4)

# frozen by the shape-walk oracle in TestBuild
TINY_PARAM_COUNT = 83264
DEFAULT_PARAM_COUNT = 5206241


def checksum(params) -> str:
    h = hashlib.sha256()
    for name, t in named_parameters(params):
        h.update(name.encode())
        h.update(t.data.tobytes())
    for name, buf in named_buffers(params):
        h.update(name.encode())
        h.update(buf.tobytes())
    return h.hexdigest()


def rand_input(size=64, n=1, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0, 1, (n, 3, size, size)).astype(dtype))


class TestConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.channel_widths == (32, 64, 128, 256)

    def test_wrong_width_count_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(channel_widths=(32, 64, 128))

    def test_ratio_must_divide_widths(self):
        with pytest.raises(ValueError):
            ModelConfig(channel_widths=(4, 8, 16, 32), se_ratio=8)

    def test_bad_attention_stage_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(attention_stages=frozenset({0, 1}))

    def test_roundtrip_dict(self):
        cfg = ModelConfig(channel_widths=(8, 16, 24, 32), se_ratio=4,
                          decoder_se=True, attention_stages=frozenset({2}))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBuild:
    def test_same_seed_identical_checksums(self):
        assert checksum(build(TINY, 7)) == checksum(build(TINY, 7))

    def test_different_seed_differs(self):
        assert checksum(build(TINY, 7)) != checksum(build(TINY, 8))

    def test_encoder_skip_channel_counts(self):
        params = build(ModelConfig(), 0)
        widths = [b.res.conv2.out_channels for b in params.encoder]
        assert widths == [32, 64, 128, 256]

    def test_param_count_matches_shape_walk_oracle(self):
        params = build(TINY, 0)
        expected = 0
        for _, t in named_parameters(params):
            n = 1
            for d in t.shape:
                n *= d
            expected += n
        assert count_params(params) == expected

        # independent closed-form walk for the tiny config
        def conv_n(i, o, k):
            return o * i * k * k + o

        def bn_n(c):
            return 2 * c

        def res_n(i, o):
            n = conv_n(i, o, 3) + conv_n(o, o, 3) + bn_n(o) + bn_n(o)
            if i != o:
                n += conv_n(i, o, 1) + bn_n(o)
            return n

        def se_n(c, r):
            s = c // r
            return s * c + s + c * s + c

        w = (4, 8, 16, 32)
        total = 0
        prev = 3
        for c in w:
            total += res_n(prev, c) + se_n(c, 4)
            prev = c
        for _ in range(2):  # two decoders
            prev = w[3]
            for j, out in enumerate([w[2], w[1], w[0], w[0]]):
                skip = w[3 - j]
                total += conv_n(prev, out, 4)  # transpose conv
                total += res_n(out + skip, out) + res_n(out, out)
                prev = out
        # attention 1x1 convs at stages 1..3 read stage outputs w2, w1, w0
        total += conv_n(w[2], 1, 1) + conv_n(w[1], 1, 1) + conv_n(w[0], 1, 1)
        total += 2 * conv_n(w[0], 1, 1)  # heads
        assert count_params(params) == total

    def test_param_count_frozen_regression(self):
        # values computed once by the shape-walk oracle above
        assert count_params(build(TINY, 0)) == TINY_PARAM_COUNT
        assert count_params(build(ModelConfig(), 0)) == DEFAULT_PARAM_COUNT

    def test_doubling_widths_roughly_quadruples_params(self):
        small = count_params(build(ModelConfig(channel_widths=(16, 32, 64, 128)), 0))
        big = count_params(build(ModelConfig(), 0))
        assert 3.0 < big / small < 4.5


class TestForward:
    def test_shapes_64(self):
        params = build(TINY, 0)
        trace = {}
        out = forward(params, rand_input(64), mode="eval", trace=trace)
        assert out.mask.shape == (1, 1, 64, 64)
        assert out.gray.shape == (1, 1, 64, 64)
        assert [a.shape for a in out.attention_maps] == [
            (1, 1, 8, 8), (1, 1, 16, 16), (1, 1, 32, 32)]
        assert trace["skip1"][2:] == (64, 64)
        assert trace["skip2"][2:] == (32, 32)
        assert trace["skip3"][2:] == (16, 16)
        assert trace["skip4"][2:] == (8, 8)
        assert trace["bottleneck"] == (1, 32, 4, 4)

    def test_eval_mode_is_pure_and_deterministic(self):
        params = build(TINY, 3)
        x = rand_input(32, seed=5)
        before = checksum(params)
        out1 = forward(params, x, mode="eval").mask.data
        out2 = forward(params, x, mode="eval").mask.data
        assert np.array_equal(out1, out2)
        assert checksum(params) == before

    def test_outputs_strictly_in_unit_interval(self):
        params = build(TINY, 1)
        out = forward(params, rand_input(32, seed=2), mode="eval")
        for t in [out.mask, out.gray] + out.attention_maps:
            assert np.all((t.data > 0) & (t.data < 1))

    def test_indivisible_size_rejected(self):
        params = build(TINY, 0)
        with pytest.raises(ValueError):
            forward(params, Tensor(np.zeros((1, 3, 60, 60), dtype=np.float32)))

    def test_wrong_channels_rejected(self):
        params = build(TINY, 0)
        with pytest.raises(ValueError):
            forward(params, Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))

    def test_zeroed_attention_conv_gives_uniform_half(self):
        params = build(TINY, 0)
        for spec in params.attention_convs.values():
            spec.weight.data[:] = 0.0
            spec.bias.data[:] = 0.0
        out = forward(params, rand_input(32, seed=1), mode="eval")
        for a in out.attention_maps:
            assert np.all(a.data == 0.5)

    def test_attention_disabled_config(self):
        cfg = ModelConfig(channel_widths=(4, 8, 16, 32), se_ratio=4,
                          attention_stages=frozenset())
        params = build(cfg, 0)
        out = forward(params, rand_input(32), mode="eval")
        assert out.attention_maps == []
        assert params.attention_convs == {}

    def test_decoder_se_flag(self):
        cfg = ModelConfig(channel_widths=(4, 8, 16, 32), se_ratio=4, decoder_se=True)
        params = build(cfg, 0)
        assert all(s.se is not None for s in params.decoder_seg + params.decoder_auto)
        out = forward(params, rand_input(32), mode="eval")
        assert out.mask.shape == (1, 1, 32, 32)

    def test_batch_forward(self):
        params = build(TINY, 0)
        out = forward(params, rand_input(32, n=3), mode="eval")
        assert out.mask.shape == (3, 1, 32, 32)


class TestEndToEndGradients:
    def test_sampled_parameter_gradients_match_finite_differences(self):
        from ddanet.losses import total_loss
        from ddanet.data import to_grayscale

        params = build(TINY, 3, dtype=np.float64)
        named = named_parameters(params)
        rng = np.random.default_rng(0)
        x = rng.uniform(0.1, 0.9, (1, 3, 16, 16))
        mask = (rng.uniform(0, 1, (1, 1, 16, 16)) > 0.5).astype(np.float64)
        gray = to_grayscale(x)

        def loss_value():
            out = forward(params, Tensor(x), mode="train")
            return total_loss(out, Tensor(mask), Tensor(gray))[0].item()

        with Graph() as g:
            out = forward(params, Tensor(x), mode="train")
            loss, _ = total_loss(out, Tensor(mask), Tensor(gray))
            g.backward(loss)

        # sample parameter entries, skipping conv biases that feed a
        # train-mode batch norm (their true gradient is identically zero)
        h = 1e-5
        checked = 0
        sampler = np.random.default_rng(1)
        while checked < 60:
            name, p = named[int(sampler.integers(len(named)))]
            if name.endswith((".conv1.bias", ".conv2.bias", ".shortcut_conv.bias")):
                continue
            flat = p.data.reshape(-1)
            j = int(sampler.integers(flat.size))
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_value()
            flat[j] = orig - h
            fm = loss_value()
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            analytic = p.grad.reshape(-1)[j]
            err = rel_err(analytic, numeric)
            assert err <= 1e-5, f"{name}[{j}]: analytic {analytic} vs numeric {numeric} ({err:.2e})"
            checked += 1
