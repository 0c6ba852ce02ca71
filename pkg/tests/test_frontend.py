import numpy as np
import pytest

from vsrkit.frontend import FrontendConfig, FrontendConfigError, ResNet3DFrontend, frontend_receptive_shift_check
from vsrkit.gradcheck import check_gradients
from vsrkit import ops
from vsrkit.tensor import Tensor, grad, no_grad


def test_spatial_trajectories():
    cfg = FrontendConfig()
    assert cfg.spatial_trajectory(112) == [112, 56, 28, 14, 7, 3]
    assert cfg.spatial_trajectory(48) == [48, 24, 12, 6, 3, 1]
    assert cfg.output_dim == 256


def test_pooling_to_zero_names_the_block():
    with pytest.raises(FrontendConfigError, match="block 4"):
        FrontendConfig().spatial_trajectory(16)
    small = ResNet3DFrontend(FrontendConfig([2, 2, 2], num_blocks=3), np.random.default_rng(0))
    with pytest.raises(FrontendConfigError, match="block 2"):
        small(Tensor(np.zeros((1, 2, 4, 4))))


def test_config_validation():
    with pytest.raises(FrontendConfigError):
        FrontendConfig([4, 8], num_blocks=3)
    with pytest.raises(FrontendConfigError):
        FrontendConfig([4, 0], num_blocks=2)
    with pytest.raises(FrontendConfigError):
        FrontendConfig(kernel=2)


def test_output_shape_preserves_time():
    fe = ResNet3DFrontend(FrontendConfig([4, 8, 8, 16], num_blocks=4), np.random.default_rng(0))
    for t in (1, 3, 7):
        out = fe(Tensor(np.random.default_rng(t).random((1, t, 32, 32))))
        assert out.shape == (t, 16)


def test_default_config_shapes_on_crop_48():
    fe = ResNet3DFrontend(FrontendConfig(), np.random.default_rng(0))
    with no_grad():
        out = fe(Tensor(np.random.default_rng(0).random((1, 2, 48, 48))))
    assert out.shape == (2, 256)


def test_zero_input_gives_time_constant_interior():
    cfg = FrontendConfig([4, 4], num_blocks=2)
    fe = ResNet3DFrontend(cfg, np.random.default_rng(1))
    t = 2 * cfg.boundary_frames + 4
    with no_grad():
        out = fe(Tensor(np.zeros((1, t, 8, 8)))).data
    b = cfg.boundary_frames
    interior = out[b : t - b]
    assert np.allclose(interior, interior[0], rtol=1e-6, atol=1e-7)


def test_shift_check():
    cfg = FrontendConfig([4, 6], num_blocks=2)
    fe = ResNet3DFrontend(cfg, np.random.default_rng(2))
    video = np.random.default_rng(3).random((1, 20, 8, 8))
    assert cfg.boundary_frames == 5
    assert frontend_receptive_shift_check(fe, video, 0)
    assert frontend_receptive_shift_check(fe, video, 2)
    with pytest.raises(ValueError):
        frontend_receptive_shift_check(fe, video[:, :10], 0)


def test_projection_only_when_channels_change():
    fe = ResNet3DFrontend(FrontendConfig([4, 4, 8], num_blocks=3), np.random.default_rng(0))
    assert fe.blocks[0].proj is None and fe.blocks[1].proj is None
    assert fe.blocks[2].proj is not None


def test_frontend_gradients_two_blocks():
    fe = ResNet3DFrontend(FrontendConfig([2, 3], num_blocks=2), np.random.default_rng(4)).astype(np.float64)
    x = Tensor(np.random.default_rng(5).random((1, 6, 8, 8)), requires_grad=True, dtype=np.float64)
    w = np.random.default_rng(6).normal(size=(6, 3))

    def loss():
        return ops.sum(ops.mul(fe(x), Tensor(w, dtype=np.float64)))

    # a conv bias feeding a per-frame norm is cancelled by it: its true gradient is zero
    cancelled = [fe.stem.bias] + [c.bias for b in fe.blocks for c in (b.conv1, b.conv2)]
    for g in grad(loss(), cancelled):
        assert np.abs(g).max() < 1e-10
    probed = [p for p in [x, *fe.parameters()] if all(p is not c for c in cancelled)]
    # small step: ReLU and max-pool kinks sit close to the probe points
    errors = check_gradients(loss, probed, step=1e-5, max_entries=12)
    assert max(errors) < 1e-4
