import pytest
import torch

from mtvnet.config import preset
from mtvnet.network import (MtvnetModel, analytic_param_count, icnr_init_,
                            load_params, params_to_bytes, pixel_shuffle_3d,
                            pixel_unshuffle_3d, save_params)
from mtvnet.tokenizer import GeometryError
from conftest import micro_model_config, micro_two_level_config
from gradcheck import assert_gradients_match, final_cat_dead_tags


def intra_block_variance(x: torch.Tensor, s: int) -> float:
    x = x.detach()
    b, c, h, w, d = x.shape
    blocks = x.view(b, c, h // s, s, w // s, s, d // s, s)
    blocks = blocks.permute(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        b, c, (h // s) * (w // s) * (d // s), s ** 3)
    return float(blocks.var(dim=-1, unbiased=False).max())


class TestPixelShuffle3d:
    def test_s1_identity(self):
        x = torch.randn(1, 4, 3, 3, 3)
        assert torch.equal(pixel_shuffle_3d(x, 1), x)

    def test_hand_index_map(self):
        x = torch.arange(8, dtype=torch.float32).reshape(1, 8, 1, 1, 1)
        out = pixel_shuffle_3d(x, 2)
        assert out.shape == (1, 1, 2, 2, 2)
        for a in range(2):
            for b in range(2):
                for e in range(2):
                    assert out[0, 0, a, b, e] == a * 4 + b * 2 + e

    def test_inverse_bijection(self):
        torch.manual_seed(30)
        x = torch.randn(2, 16, 3, 4, 5)
        assert torch.equal(pixel_unshuffle_3d(pixel_shuffle_3d(x, 2), 2), x)

    def test_divisibility(self):
        with pytest.raises(GeometryError, match="divisible"):
            pixel_shuffle_3d(torch.randn(1, 9, 2, 2, 2), 2)


class TestIcnrInit:
    @pytest.mark.parametrize("s", [2, 3])
    def test_shuffled_output_blockwise_constant(self, s):
        torch.manual_seed(31)
        conv = torch.nn.Conv3d(4, 4 * s ** 3, 3, padding=1)
        icnr_init_(conv, s)
        x = torch.randn(1, 4, 6, 6, 6)
        out = pixel_shuffle_3d(conv(x), s)
        assert intra_block_variance(out, s) == 0.0

    def test_constant_input_constant_blocks(self):
        torch.manual_seed(32)
        conv = torch.nn.Conv3d(2, 16, 3, padding=1)
        icnr_init_(conv, 2)
        with torch.no_grad():
            out = pixel_shuffle_3d(conv(torch.full((1, 2, 8, 8, 8), 0.5)), 2)
        # spatially constant per channel away from conv zero-padding
        inner = out[:, :, 4:-4, 4:-4, 4:-4]
        assert float(inner.var(dim=(2, 3, 4)).max()) == 0.0

    def test_checkerboard_metric_zero_then_positive(self):
        torch.manual_seed(33)
        conv = torch.nn.Conv3d(2, 16, 3, padding=1)
        icnr_init_(conv, 2)
        x = torch.randn(1, 2, 6, 6, 6)
        assert intra_block_variance(pixel_shuffle_3d(conv(x), 2), 2) == 0.0
        with torch.no_grad():
            conv.weight += 0.01 * torch.randn_like(conv.weight)
        assert intra_block_variance(pixel_shuffle_3d(conv(x), 2), 2) > 0.0

    def test_channel_divisibility(self):
        with pytest.raises(GeometryError, match="divisible"):
            icnr_init_(torch.nn.Conv3d(2, 10, 3), 2)


class TestForwardShapes:
    def test_desk_output(self, desk_configs):
        model_cfg, _ = desk_configs
        model = MtvnetModel(model_cfg)
        out = model([torch.randn(2, 1, 16, 16, 16)])
        assert out.shape == (2, 1, 32, 32, 32)

    def test_l2_output_128(self):
        model_cfg, _ = preset("L2")
        model = MtvnetModel(model_cfg).eval()
        ctx = [torch.randn(1, 1, e, e, e) for e in model.context_extents]
        with torch.no_grad():
            out = model(ctx)
        assert out.shape == (1, 1, 128, 128, 128)

    def test_scale_three_micro(self):
        cfg = micro_model_config(scale=3)
        model = MtvnetModel(cfg)
        out = model([torch.randn(1, 1, 8, 8, 8)])
        assert out.shape == (1, 1, 24, 24, 24)

    def test_context_mismatch_rejected(self):
        model = MtvnetModel(micro_model_config())
        with pytest.raises(GeometryError, match="extent"):
            model([torch.randn(1, 1, 16, 16, 16)])
        with pytest.raises(GeometryError, match="context crops"):
            model([torch.randn(1, 1, 8, 8, 8)] * 3)


class TestFreshHeadCheckerboardFree:
    @pytest.mark.parametrize("scale", [2, 3])
    def test_initial_output_blockwise_constant(self, scale):
        torch.manual_seed(34)
        cfg = micro_model_config(scale=scale)
        model = MtvnetModel(cfg).eval()
        with torch.no_grad():
            out = model([torch.rand(1, 1, 8, 8, 8)])
        assert intra_block_variance(out, scale) == 0.0

    def test_cascaded_scale4_constant_at_last_stage(self):
        # two ICNR x2 stages: exact constancy holds at the final stage's
        # granularity (2^3 blocks), not across the full 4^3 block
        torch.manual_seed(35)
        model = MtvnetModel(micro_model_config(scale=4)).eval()
        with torch.no_grad():
            out = model([torch.rand(1, 1, 8, 8, 8)])
        assert intra_block_variance(out, 2) == 0.0


class TestMulticontext:
    def test_off_equals_single_level_network(self):
        two_level = micro_two_level_config(use_multicontext=False)
        single = micro_model_config()   # identical finest level spec
        torch.manual_seed(36)
        model_a = MtvnetModel(two_level).eval()
        torch.manual_seed(36)
        model_b = MtvnetModel(single).eval()
        outer = torch.randn(1, 1, 16, 16, 16)
        inner = outer[:, :, 4:12, 4:12, 4:12]
        with torch.no_grad():
            out_a = model_a([outer, inner])     # outer context ignored
            out_b = model_b([inner])
        torch.testing.assert_close(out_a, out_b, atol=1e-6, rtol=0)

    def test_multicontext_consumes_all_levels(self):
        cfg = micro_two_level_config()
        model = MtvnetModel(cfg).eval()
        outer = torch.randn(1, 1, 16, 16, 16)
        with torch.no_grad():
            out_a = model([outer, outer[:, :, 4:12, 4:12, 4:12]])
            shuffled = torch.roll(outer, 3, dims=2)
            out_b = model([shuffled, outer[:, :, 4:12, 4:12, 4:12]])
        assert not torch.allclose(out_a, out_b)


class TestParameterCount:
    @pytest.mark.parametrize("name", ["L1", "L2", "L3", "desk"])
    def test_presets_match_analytic_formula(self, name):
        cfg, _ = preset(name)
        model = MtvnetModel(cfg)
        assert sum(p.numel() for p in model.parameters()) == analytic_param_count(cfg)

    @pytest.mark.parametrize("flags", [
        dict(use_cat=False), dict(use_cyclic_shift=False),
        dict(use_multicontext=False), dict(use_cat=False, use_multicontext=False)])
    def test_ablations_match_analytic_formula(self, flags):
        cfg = micro_two_level_config(**flags)
        model = MtvnetModel(cfg)
        assert sum(p.numel() for p in model.parameters()) == analytic_param_count(cfg)


class TestTranslationConsistency:
    def test_conv_path_equivariant_at_init_with_gated_attention(self):
        # with all gates zeroed the blocks are exact identities, leaving a
        # purely convolutional path: translating the input crop by the patch
        # size translates the output by patch_size * scale, exactly, outside
        # the receptive-field halo (5 LR voxels -> 10 HR voxels)
        torch.manual_seed(37)
        cfg, _ = preset("desk")
        model = MtvnetModel(cfg).eval()
        with torch.no_grad():
            for block in model.levels[0].group.blocks:
                block.ite_gate.weight.zero_()
                block.ite_gate.bias.zero_()
                block.cat_gate.weight.zero_()
                block.cat_gate.bias.zero_()
        source = torch.rand(1, 1, 20, 20, 20)
        shift = 2 * cfg.scale               # patch size 2, scale 2
        with torch.no_grad():
            out_a = model([source[:, :, 2:18, 2:18, 2:18]])
            out_b = model([source[:, :, 0:16, 0:16, 0:16]])
        trim = 10
        n = out_a.shape[-1]
        a = out_a[:, :, trim:n - trim - shift, trim:n - trim - shift,
                  trim:n - trim - shift]
        b = out_b[:, :, trim + shift:n - trim, trim + shift:n - trim,
                  trim + shift:n - trim]
        assert torch.equal(a, b)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        torch.manual_seed(38)
        model = MtvnetModel(micro_model_config())
        path = tmp_path / "model.params"
        save_params(model, path)
        state = load_params(path)
        for name, tensor in model.state_dict().items():
            assert torch.equal(state[name], tensor), name
        fresh = MtvnetModel(micro_model_config())
        fresh.load_state_dict(state)
        assert params_to_bytes(fresh.state_dict()) == path.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.params"
        path.write_bytes(b"WRONG\nend\n")
        with pytest.raises(ValueError, match="MTVCKPT1"):
            load_params(path)


class ListInputWrapper(torch.nn.Module):
    """Adapts MtvnetModel's list-of-contexts signature for the FD checker."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def forward(self, *contexts):
        return self.inner(list(contexts))


def test_micro_network_gradients():
    torch.manual_seed(39)
    model = MtvnetModel(micro_model_config())
    gen = torch.Generator().manual_seed(5)
    ctx = torch.rand(1, 1, 8, 8, 8, generator=gen, dtype=torch.float64)
    dead = tuple("inner." + tag for tag in final_cat_dead_tags(model))
    assert_gradients_match(ListInputWrapper(model), [ctx], allow_dead=dead)
