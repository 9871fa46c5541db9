"""Denoiser backbones, critics and inverse-dynamics bodies."""

import numpy as np
import pytest

from diffplan import tensor as T
from diffplan.gradcheck import finite_diff_check
from diffplan.nets import (
    DenoiserSpec,
    DiT1D,
    RegressionInvDyn,
    TransformerCritic,
    UNetCritic,
    build_denoiser,
    diffusion_invdyn,
    dit1d_denoise,
    mlp_denoise,
    unet1d_denoise,
)
from diffplan.nn import randomize_
from diffplan.tensor import no_grad

SPECS = {
    "MLP": DenoiserSpec(backbone="MLP", hidden=32),
    "UNet1D": DenoiserSpec(backbone="UNet1D", base_channels=8),
    "DiT1D": DenoiserSpec(backbone="DiT1D", hidden=32, blocks=2, head_dim=16),
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def forward(model, x, t, cond=None):
    args = (x, t) if cond is None else (x, t, cond)
    with no_grad():
        return model(*args).data


@pytest.mark.parametrize("backbone", sorted(SPECS))
class TestBackboneContracts:
    def test_shape_preserved(self, backbone, rng):
        m = build_denoiser(SPECS[backbone], 4, 8, rng)
        x = rng.normal(size=(3, 8, 4))
        assert forward(m, x, np.array([0, 5, 99])).shape == (3, 8, 4)

    def test_deterministic(self, backbone, rng):
        m = build_denoiser(SPECS[backbone], 3, 8, rng)
        randomize_(m, rng)
        x = rng.normal(size=(2, 8, 3))
        assert np.array_equal(forward(m, x, 7), forward(m, x, 7))

    def test_timestep_changes_output(self, backbone, rng):
        m = build_denoiser(SPECS[backbone], 3, 8, rng)
        randomize_(m, rng)
        x = rng.normal(size=(1, 8, 3))
        assert not np.allclose(forward(m, x, 1), forward(m, x, 500))

    def test_time_permutation_sensitive(self, backbone, rng):
        m = build_denoiser(SPECS[backbone], 3, 8, rng)
        changed = 0
        for trial in range(5):
            randomize_(m, np.random.default_rng(trial))
            x = rng.normal(size=(1, 8, 3))
            perm = rng.permutation(8)
            changed += not np.allclose(forward(m, x[:, perm], 3), forward(m, x, 3)[:, perm], atol=1e-8)
        assert changed == 5

    def test_cond_without_cond_dim_rejected(self, backbone, rng):
        m = build_denoiser(SPECS[backbone], 3, 8, rng)
        with pytest.raises(ValueError, match="cond"):
            m(rng.normal(size=(2, 8, 3)), 1, np.ones((2, 1)))

    def test_condition_changes_output(self, backbone, rng):
        spec = DenoiserSpec(**{**SPECS[backbone].to_dict(), "cond_dim": 1})
        m = build_denoiser(spec, 3, 8, rng)
        randomize_(m, rng)
        x = rng.normal(size=(1, 8, 3))
        assert not np.allclose(forward(m, x, 3, np.array([[1.0]])), forward(m, x, 3, np.array([[-1.0]])))

    def test_gradcheck_small(self, backbone, rng):
        spec = DenoiserSpec(**{**SPECS[backbone].to_dict(), "cond_dim": 2})
        H = 8 if backbone != "DiT1D" else 4
        m = build_denoiser(spec, 2, H, rng)
        randomize_(m, rng, 0.1, zeros_only=True)
        x, tgt = rng.uniform(-1, 1, (2, H, 2)), rng.uniform(-1, 1, (2, H, 2))
        c = rng.uniform(-1, 1, (2, 2))
        drop = np.array([False, True])
        if backbone == "UNet1D":
            pytest.skip("U-Net gradient check runs at H=32 in the acceptance suite")
        report = finite_diff_check(lambda: T.mse_loss(m(x, np.array([3, 40]), c, drop=drop), tgt), m.named_parameters())
        assert report.passed, report


class TestMLP:
    def test_zero_output_layer_returns_bias(self, rng):
        m = build_denoiser(SPECS["MLP"], 2, 4, rng)
        last = m.body.layers[-1]
        last.weight.data[...] = 0.0
        last.bias.data[...] = np.arange(8.0)
        out = forward(m, rng.normal(size=(3, 4, 2)), 11)
        np.testing.assert_array_equal(out, np.broadcast_to(np.arange(8.0).reshape(4, 2), (3, 4, 2)))

    def test_flat_input(self, rng):
        m = build_denoiser(SPECS["MLP"], 5, 1, rng)
        assert mlp_denoise(m, rng.normal(size=(4, 5)), 0).shape == (4, 5)

    def test_wrong_width_rejected(self, rng):
        m = build_denoiser(SPECS["MLP"], 2, 4, rng)
        with pytest.raises(ValueError, match="features"):
            m(rng.normal(size=(1, 5, 2)), 0)


class TestUNet:
    def test_shape_case(self, rng):
        m = build_denoiser(DenoiserSpec(backbone="UNet1D", base_channels=8), 4, 8, rng)
        assert unet1d_denoise(m, rng.normal(size=(1, 8, 4)), 3).shape == (1, 8, 4)

    @pytest.mark.parametrize("H", [4, 12])
    def test_bad_horizon_names_minimum(self, H, rng):
        with pytest.raises(ValueError, match="minimum H is 8"):
            build_denoiser(SPECS["UNet1D"], 4, H, rng)

    def test_doubling_base_channels_quadruples_conv_weights(self, rng):
        def conv_params(base):
            m = build_denoiser(DenoiserSpec(backbone="UNet1D", base_channels=base), 4, 8, rng)
            return sum(p.size for n, p in m.named_parameters() if n.endswith("conv.weight"))

        # every conv is c_out * c_in * k; only the input and output convs scale by 2 instead of 4
        ratio = conv_params(16) / conv_params(8)
        assert 3.9 < ratio <= 4.0


class TestDiT:
    def test_attention_rows_stochastic(self, rng):
        m = build_denoiser(SPECS["DiT1D"], 3, 8, rng)
        randomize_(m, rng)
        out, maps = dit1d_denoise(m, rng.normal(size=(2, 8, 3)), 4, capture_attention=True)
        assert out.shape == (2, 8, 3)
        assert len(maps) == 2
        for a in maps:
            assert a.shape == (2, 8, 8)
            assert ((a >= 0) & (a <= 1)).all()
            np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)

    def test_depth_parameter_difference_is_one_block(self, rng):
        one = build_denoiser(DenoiserSpec(backbone="DiT1D", hidden=64, blocks=1), 4, 16, rng)
        two = build_denoiser(DenoiserSpec(backbone="DiT1D", hidden=64, blocks=2), 4, 16, rng)
        h, r = 64, 4
        # qkv + proj + ffn + adaLN modulation, weights and biases
        block = (h * 3 * h + 3 * h) + (h * h + h) + (h * r * h + r * h) + (r * h * h + h) + (h * 6 * h + 6 * h)
        assert two.num_parameters() - one.num_parameters() == block
        assert block == sum(p.size for p in two.blocks[1].parameters())

    def test_head_dim_must_divide_hidden(self):
        with pytest.raises(ValueError, match="divisible"):
            DenoiserSpec(backbone="DiT1D", hidden=48, head_dim=32)

    def test_wrong_horizon_rejected(self, rng):
        m = DiT1D(SPECS["DiT1D"], 3, 8, rng)
        with pytest.raises(ValueError, match="expected input"):
            m(rng.normal(size=(1, 6, 3)), 0)

    def test_maps_require_capture(self, rng):
        m = DiT1D(SPECS["DiT1D"], 3, 8, rng)
        with pytest.raises(RuntimeError, match="capture"):
            m.attention_maps()


@pytest.mark.parametrize("spec_kw", [{"kernel": 4}, {"channel_mult": ()}, {"backbone": "RNN"}, {"predict": "v"}])
def test_spec_invariants(spec_kw):
    with pytest.raises(ValueError):
        DenoiserSpec(**spec_kw)


class TestCriticsAndInvDyn:
    def test_transformer_critic_scalar_per_plan(self, rng):
        c = TransformerCritic(3, 8, rng, hidden=32, blocks=1)
        assert forward(c, rng.normal(size=(5, 8, 3)), None).shape == (5,)

    def test_noised_critic_uses_timestep(self, rng):
        c = TransformerCritic(3, 8, rng, hidden=32, blocks=1, noised=True)
        randomize_(c, rng)
        x = rng.normal(size=(2, 8, 3))
        assert c.noised
        assert not np.allclose(forward(c, x, 0), forward(c, x, 300))

    def test_unet_critic(self, rng):
        c = UNetCritic(DenoiserSpec(backbone="UNet1D", base_channels=8), 3, rng)
        assert forward(c, rng.normal(size=(2, 8, 3)), None).shape == (2,)

    def test_critic_gradcheck(self, rng):
        c = TransformerCritic(2, 4, rng, hidden=32, blocks=1, head_dim=16)
        randomize_(c, rng, 0.1, zeros_only=True)
        x, y = rng.uniform(-1, 1, (3, 4, 2)), rng.uniform(-1, 1, 3)
        assert finite_diff_check(lambda: T.mse_loss(c(x), y), c.named_parameters()).passed

    def test_invdyn_bodies(self, rng):
        pair = rng.normal(size=(6, 8))
        with no_grad():
            assert RegressionInvDyn(8, 2, rng, 32)(pair).shape == (6, 2)
            assert diffusion_invdyn(8, 2, rng, 32)(rng.normal(size=(6, 2)), 3, pair).shape == (6, 2)
