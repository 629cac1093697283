import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from crafting import identity_conv_, identity_frb_, identity_frbs_, zero_biases_
from usdenoise.errors import ConfigError, ContractError, NumericError
from usdenoise.imagio import ImageTensor
from usdenoise.network import (FRB, MICRO_CONFIG, FULL_CONFIG, Bottleneck, DecoderStage, ModelConfig, build_model,
                               denoise, dump_stage_features, frb_apply)


def random_frb(channels, kernel, residual="original", seed=0):
    torch.manual_seed(seed)
    frb = FRB(channels, kernel, 0.2, residual).double()
    with torch.no_grad():
        for p in frb.parameters():
            p.copy_(torch.randn_like(p) * 0.3)
    return frb


def frb_oracle(frb, x):
    def wb(c):
        return c.weight.detach().numpy(), c.bias.detach().numpy()
    return oracles.frb(x, *wb(frb.conv_a), *wb(frb.skip_a), *wb(frb.conv_b), *wb(frb.skip_b),
                       frb.slope, frb.residual_source)


class TestFRB:
    @pytest.mark.parametrize("residual", ["original", "previous"])
    def test_matches_loop_oracle(self, residual, rng):
        frb = random_frb(4, 3, residual)
        x = rng.standard_normal((4, 8, 8))
        out = frb_apply(torch.from_numpy(x)[None], frb)[0].detach().numpy()
        assert np.max(np.abs(out - frb_oracle(frb, x))) < 1e-9

    def test_residual_sources_differ(self, rng):
        a, b = random_frb(2, 3, "original", 1), random_frb(2, 3, "previous", 1)
        x = torch.from_numpy(rng.standard_normal((1, 2, 6, 6)))
        assert not torch.allclose(a(x), b(x))

    def test_crafted_identity(self, rng):
        frb = random_frb(3, 5)
        identity_frb_(frb)
        x = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)))
        assert torch.equal(frb(x), x)

    def test_zero_input_zero_bias(self):
        frb = zero_biases_(random_frb(3, 3))
        x = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
        assert torch.equal(frb(x), x)

    def test_channel_mismatch(self):
        with pytest.raises(ContractError):
            FRB(3, 3)(torch.zeros(1, 4, 8, 8))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            FRB(3, 4)


class TestChains:
    def test_default_counts_and_kernels(self):
        model = build_model(ModelConfig())
        assert [len(c) for c in model.frb_chains] == [4, 3, 2, 1]
        assert [c[0].conv_a.kernel_size[0] for c in model.frb_chains] == [7, 5, 3, 3]

    def test_identity_chain_passthrough(self, micro_model, rng):
        identity_frbs_(micro_model)
        for i, dim in enumerate(MICRO_CONFIG.stage_dims, 1):
            s = MICRO_CONFIG.resolutions()[i - 1]
            x = torch.from_numpy(rng.standard_normal((1, dim, s, s)).astype(np.float32))
            assert torch.equal(micro_model.frb_chain(x, i), x)

    def test_no_frb_chain_is_empty_passthrough(self, rng):
        model = build_model(dataclasses.replace(MICRO_CONFIG, use_frb=False))
        assert sum(p.numel() for p in model.frb_chains.parameters()) == 0
        x = torch.from_numpy(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
        assert torch.equal(model.frb_chain(x, 1), x)

    def test_bad_stage_index(self, micro_model):
        with pytest.raises(ContractError):
            micro_model.frb_chain(torch.zeros(1, 4, 16, 16), 5)


class TestBlocks:
    def test_bottleneck_zero_and_identity(self, rng):
        b = zero_biases_(Bottleneck(6, 0.2))
        z = torch.zeros(1, 6, 8, 8)
        assert torch.equal(b(z), z)
        identity_conv_(b.conv1)
        identity_conv_(b.conv2)
        x = torch.from_numpy(rng.uniform(0, 1, (1, 6, 8, 8)).astype(np.float32))
        assert torch.equal(b(x), x)
        assert b(torch.randn(2, 6, 8, 8)).shape == (2, 6, 8, 8)

    def test_decoder_selector_reproduces_skip(self, rng):
        d = DecoderStage(8, 4, 4, 0.2, upsample=True)
        identity_conv_(d.fuse, offset=4)
        skip = torch.from_numpy(rng.uniform(0, 1, (1, 4, 16, 16)).astype(np.float32))
        assert torch.equal(d(torch.randn(1, 8, 8, 8), skip), skip)

    def test_decoder_zero_and_mismatch(self):
        d = zero_biases_(DecoderStage(8, 4, 4, 0.2, upsample=True))
        assert torch.equal(d(torch.zeros(1, 8, 8, 8), torch.zeros(1, 4, 16, 16)), torch.zeros(1, 4, 16, 16))
        with pytest.raises(ContractError):
            d(torch.zeros(1, 8, 8, 8), torch.zeros(1, 4, 8, 8))

    def test_decoder_ladder(self):
        model = build_model(ModelConfig())
        sizes = []
        hooks = [st_.register_forward_hook(lambda m, i, o: sizes.append(o.shape[-1])) for st_ in model.decoder]
        with torch.no_grad():
            model(torch.zeros(1, 1, 64, 64))
        for h in hooks:
            h.remove()
        assert sizes == [8, 16, 32, 64]


class TestShapes:
    def test_desk_schedule(self):
        model = build_model(ModelConfig())
        with torch.no_grad():
            skips = model.encode(torch.zeros(1, 1, 64, 64))
        assert [s.shape[-1] for s in skips] == [64, 32, 16, 8]
        assert [s.shape[1] for s in skips] == [24, 48, 96, 192]

    def test_stage4_has_no_down(self, micro_model):
        _, down = micro_model.encoder_stage(torch.zeros(1, 8, 2, 2), 4)
        assert down is None

    def test_stage_resolution_mismatch(self, micro_model):
        with pytest.raises(ConfigError):
            micro_model.encoder_stage(torch.zeros(1, 4, 8, 8), 1)

    def test_depth_zero_stage_passthrough(self, rng):
        model = build_model(dataclasses.replace(MICRO_CONFIG, stage_depths=(0, 1, 1, 1)))
        x = torch.from_numpy(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
        skip, _ = model.encoder_stage(x, 1)
        assert torch.equal(skip, x)

    @pytest.mark.slow
    def test_full_size_schedule_224(self):
        model = build_model(FULL_CONFIG)
        with torch.no_grad():
            skips = model.encode(torch.zeros(1, 1, 224, 224))
        assert [s.shape[-1] for s in skips] == [224, 112, 56, 28]

    @settings(max_examples=6, deadline=None)
    @given(st.sampled_from([16, 32, 64]), st.integers(1, 2), st.integers(0, 100))
    def test_shape_preserved(self, size, batch, seed):
        cfg = dataclasses.replace(MICRO_CONFIG, input_size=size)
        model = build_model(cfg, seed)
        x = torch.rand(batch, 1, size, size) * 2 - 1
        with torch.no_grad():
            assert model(x).shape == x.shape

    def test_wrong_input_shape(self, micro_model):
        with pytest.raises(ContractError):
            micro_model(torch.zeros(1, 1, 32, 32))
        with pytest.raises(ContractError):
            micro_model(torch.full((1, 1, 16, 16), 1.5))


class TestForward:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10**6))
    def test_tanh_bound(self, seed):
        model = build_model(MICRO_CONFIG, seed)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            out = model(torch.rand(2, 1, 16, 16, generator=g) * 2 - 1)
        assert float(out.abs().max()) <= 1 - 1e-7

    def test_nan_weights_raise(self, micro_model):
        with torch.no_grad():
            micro_model.head.bias.fill_(float("nan"))
        with pytest.raises(NumericError):
            micro_model(torch.zeros(1, 1, 16, 16))

    def test_parameter_count_is_config_function(self):
        a, b = build_model(ModelConfig(), 0), build_model(ModelConfig(), 7)
        assert a.parameter_count() == b.parameter_count() == 4720801

    def test_seeded_init(self):
        a, b = build_model(MICRO_CONFIG, 3), build_model(MICRO_CONFIG, 3)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_denoise_maps_back_to_unit(self, micro_model, rng):
        img = ImageTensor(rng.uniform(0, 1, (2, 1, 16, 16)))
        out = denoise(micro_model, img)
        assert out.range_tag == "unit" and out.shape == (2, 1, 16, 16)
        assert 0 < out.data.min() and out.data.max() < 1


class TestDumpFeatures:
    def test_identity_frb_same_maps(self, micro_model, rng):
        identity_frbs_(micro_model)
        img = ImageTensor(rng.uniform(0, 1, (16, 16)))
        for stage in range(1, 5):
            pre = dump_stage_features(micro_model, img, stage, False)
            post = dump_stage_features(micro_model, img, stage, True)
            assert all(np.array_equal(a, b) for a, b in zip(pre, post))

    def test_stage1_maps(self, micro_model, rng):
        maps = dump_stage_features(micro_model, ImageTensor(rng.uniform(0, 1, (16, 16))), 1, True)
        assert len(maps) == 4 and all(m.shape == (16, 16) for m in maps)
        assert all(0 <= m.min() and m.max() <= 1 for m in maps)

    def test_zero_model_gives_zero_maps(self, micro_model):
        zero_biases_(micro_model)
        maps = dump_stage_features(micro_model, ImageTensor(np.full((16, 16), 0.5)), 2, True)
        assert all(not m.any() for m in maps)

    def test_bad_stage(self, micro_model):
        with pytest.raises(ContractError):
            dump_stage_features(micro_model, ImageTensor(np.zeros((16, 16))), 0, True)


class TestConfig:
    @pytest.mark.parametrize("field,value", [
        ("input_size", 60), ("heads", (3, 2, 2, 2)), ("stripe_widths", (3, 2, 2, 2)),
        ("frb_kernels", (4, 3, 3, 3)), ("frb_counts", (1, 2, 3, 4)), ("encoder", "vit"),
        ("frb_residual_source", "x"), ("stage_dims", (4, 8, 8)), ("frb_kernels", (33, 3, 3, 3)),
    ])
    def test_invalid_fields_named(self, field, value):
        with pytest.raises(ConfigError, match=field):
            dataclasses.replace(MICRO_CONFIG, **{field: value})

    def test_dict_roundtrip(self):
        cfg = dataclasses.replace(MICRO_CONFIG, use_frb=False, encoder="cnn")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"bogus": 1})

    def test_counts_unconstrained_without_frb(self):
        dataclasses.replace(MICRO_CONFIG, use_frb=False, frb_counts=(0, 0, 0, 0))
