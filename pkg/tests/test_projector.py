import math

import numpy as np
import pytest
import torch

from gradcheck import finite_difference_grad, max_relative_error
from discover.projector import (Projector, ProjectorConfig, depth_trace, project,
                                projector_param_count)


def _rand_volume(x, y, z, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((1, 3, x, y, z), generator=g, dtype=dtype)


class TestShapes:
    def test_paper_channel_progression_and_enface_size(self):
        config = ProjectorConfig(phi=8)
        assert config.block_channels() == [8, 16, 32]
        model = Projector(config).eval()
        with torch.no_grad():
            out = model(_rand_volume(6, 224, 7))
        assert out.shape == (1, 3, 6, 7)

    def test_depth_trace_224(self):
        # oracle: apply the ceil-division rule per block independently
        expected = [224]
        for _ in range(3):
            expected.append(math.ceil(math.ceil(expected[-1] / 2) / 2))
        assert expected == [224, 56, 14, 4]
        assert depth_trace(224) == expected

        # and confirm the network's actual activation depths
        model = Projector(ProjectorConfig(phi=2)).eval()
        seen = []
        for blk in model.blocks:
            blk.register_forward_hook(lambda m, i, o: seen.append(o.shape[3]))
        with torch.no_grad():
            model(_rand_volume(2, 224, 2))
        assert seen == [56, 14, 4]

    def test_desk_shape_and_open_range(self):
        model = Projector(ProjectorConfig(phi=4)).eval()
        with torch.no_grad():
            out = model(_rand_volume(64, 56, 64))
        assert out.shape == (1, 3, 64, 64)
        assert 0.0 < float(out.min()) and float(out.max()) < 1.0

    def test_depth_too_small_rejected(self):
        model = Projector(ProjectorConfig(phi=1))
        with pytest.raises(ValueError, match="depth"):
            model(_rand_volume(2, 8, 2))


class TestParamCount:
    def test_hand_enumeration_phi1_k1(self):
        # conv layers (in*out*k + out), batch norms (2*out), head (4*phi*3 + 3)
        by_hand = ((3 * 1 * 1 + 1) + (1 * 1 * 1 + 1) + 2        # block 1
                   + (1 * 2 * 1 + 2) + (2 * 2 * 1 + 2) + 4      # block 2
                   + (2 * 4 * 1 + 4) + (4 * 4 * 1 + 4) + 8      # block 3
                   + (4 * 3 + 3))                               # head
        config = ProjectorConfig(phi=1, kernel_depth=1)
        assert projector_param_count(config) == by_hand

    @pytest.mark.parametrize("config", [
        ProjectorConfig(phi=1, kernel_depth=1),
        ProjectorConfig(phi=4),
        ProjectorConfig(phi=8, use_skip=True),
        ProjectorConfig(phi=3, kernel_depth=5),
    ])
    def test_matches_instantiated_network(self, config):
        model = Projector(config)
        assert projector_param_count(config) == sum(p.numel() for p in model.parameters())

    def test_quadratic_scaling(self):
        wide = projector_param_count(ProjectorConfig(phi=64))
        half = projector_param_count(ProjectorConfig(phi=32))
        assert 3.5 < wide / half < 4.05


class TestEquivariance:
    def test_enface_permutation_commutes_bitwise(self):
        torch.manual_seed(0)
        model = Projector(ProjectorConfig(phi=2)).eval()
        vol = _rand_volume(5, 32, 4, seed=3)
        perm_x = torch.randperm(5)
        perm_z = torch.randperm(4)
        with torch.no_grad():
            out = model(vol)
            out_perm = model(vol[:, :, perm_x][:, :, :, :, perm_z])
        assert torch.equal(out[:, :, perm_x][:, :, :, perm_z], out_perm)

    def test_eval_forward_bit_reproducible(self):
        model = Projector(ProjectorConfig(phi=2)).eval()
        vol = _rand_volume(3, 48, 3, seed=1)
        with torch.no_grad():
            assert torch.equal(model(vol), model(vol))


class TestGradients:
    # seeds chosen away from max-pool tie points, which the contract excludes
    @pytest.mark.parametrize("use_skip, vol_seed", [(False, 5), (True, 8)])
    def test_input_gradients_match_central_differences(self, use_skip, vol_seed):
        torch.manual_seed(4)
        model = Projector(ProjectorConfig(phi=1, use_skip=use_skip)).double().eval()
        vol = _rand_volume(2, 32, 2, seed=vol_seed, dtype=torch.float64)
        weights = torch.randn(1, 3, 2, 2, dtype=torch.float64)

        def loss_fn(v):
            return (model(v) * weights).sum()

        leaf = vol.clone().requires_grad_(True)
        analytic = torch.autograd.grad(loss_fn(leaf), leaf)[0]
        numeric = finite_difference_grad(lambda: loss_fn(vol), vol)
        assert max_relative_error(analytic, numeric) <= 1e-3

    def test_parameter_gradients_match_central_differences(self):
        torch.manual_seed(6)
        model = Projector(ProjectorConfig(phi=1)).double().eval()
        vol = _rand_volume(2, 32, 2, seed=7, dtype=torch.float64)
        weights = torch.randn(1, 3, 2, 2, dtype=torch.float64)

        def loss_fn():
            return (model(vol) * weights).sum()

        loss = loss_fn()
        loss.backward()
        for name, param in model.named_parameters():
            numeric = finite_difference_grad(loss_fn, param.data)
            assert max_relative_error(param.grad, numeric) <= 1e-3, name


class TestConfig:
    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            ProjectorConfig(phi=0).validate()
        with pytest.raises(ValueError):
            ProjectorConfig(kernel_depth=2).validate()

    def test_project_wrapper(self, tiny_volume):
        image = project(tiny_volume, Projector(ProjectorConfig(phi=2)))
        assert image.data.shape == (3, 16, 16)
        assert image.data.dtype == np.float32
