"""ResNet3D visual frontend: stem conv, residual blocks with spatial max-pooling,
then spatial average pooling to one feature vector per frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Module, parameter, uniform_init
from .tensor import Tensor, no_grad


class FrontendConfigError(ValueError):
    pass


@dataclass
class FrontendConfig:
    block_channels: list[int] = field(default_factory=lambda: [32, 64, 64, 128, 256])
    kernel: int = 3
    num_blocks: int = 5
    input_channels: int = 1

    def __post_init__(self):
        self.block_channels = [int(c) for c in self.block_channels]
        if len(self.block_channels) != self.num_blocks:
            raise FrontendConfigError(
                f"block_channels has {len(self.block_channels)} entries but num_blocks={self.num_blocks}"
            )
        if any(c < 1 for c in self.block_channels) or self.input_channels < 1:
            raise FrontendConfigError("channel counts must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise FrontendConfigError(f"kernel must be odd and positive, got {self.kernel}")

    @property
    def output_dim(self) -> int:
        return self.block_channels[-1]

    def spatial_trajectory(self, n: int) -> list[int]:
        """Spatial side after the stem and after each block's pooling."""
        sizes = [n]
        for i in range(self.num_blocks):
            nxt = sizes[-1] // 2
            if nxt == 0:
                raise FrontendConfigError(f"block {i}: spatial size {sizes[-1]} pools to zero")
            sizes.append(nxt)
        return sizes

    @property
    def boundary_frames(self) -> int:
        """Frames per side influenced by temporal zero padding (stem + two convs per block)."""
        return (self.kernel // 2) * (1 + 2 * self.num_blocks)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        fan_in = c_in * k**3
        self.weight = uniform_init(rng, (c_out, c_in, k, k, k), fan_in)
        self.bias = uniform_init(rng, (c_out,), fan_in)
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, 1, self.padding)


class FrameNorm(Module):
    def __init__(self, c: int):
        self.gamma = parameter(np.ones(c))
        self.beta = parameter(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.frame_instance_norm(x, self.gamma, self.beta)


class ResBlock3D(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.conv1 = Conv3d(c_in, c_out, k, rng)
        self.norm1 = FrameNorm(c_out)
        self.conv2 = Conv3d(c_out, c_out, k, rng)
        self.norm2 = FrameNorm(c_out)
        self.proj = Conv3d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        skip = self.proj(x) if self.proj is not None else x
        return ops.max_pool_hw(ops.relu(h + skip))


class ResNet3DFrontend(Module):
    def __init__(self, config: FrontendConfig, rng: np.random.Generator):
        self.config = config
        ch = config.block_channels
        self.stem = Conv3d(config.input_channels, ch[0], config.kernel, rng)
        self.stem_norm = FrameNorm(ch[0])
        self.blocks = [
            ResBlock3D(ch[max(i - 1, 0)], ch[i], config.kernel, rng) for i in range(config.num_blocks)
        ]

    def __call__(self, video: Tensor) -> Tensor:
        """[C,T,N,N] -> [T, block_channels[-1]]."""
        if video.ndim != 4 or video.shape[0] != self.config.input_channels:
            raise FrontendConfigError(
                f"expected [C={self.config.input_channels},T,H,W] input, got {video.shape}"
            )
        self.config.spatial_trajectory(min(video.shape[2], video.shape[3]))
        h = ops.relu(self.stem_norm(self.stem(video)))
        for block in self.blocks:
            h = block(h)
        return ops.transpose(ops.avg_pool_hw(h), (1, 0))


def frontend_receptive_shift_check(frontend: ResNet3DFrontend, video: np.ndarray, shift: int) -> bool:
    """True iff dropping the first ``shift`` frames shifts interior outputs by ``shift``.

    Frames within ``boundary_frames`` of either end see temporal padding and are excluded.
    """
    if shift < 0:
        raise ValueError("shift must be >= 0")
    b = frontend.config.boundary_frames
    t = video.shape[1]
    if t - shift < 2 * b + 1:
        raise ValueError(f"need at least {2 * b + 1 + shift} frames for shift {shift}, got {t}")
    with no_grad():
        full = frontend(Tensor(video)).data
        shifted = frontend(Tensor(video[:, shift:])).data
    lo, hi = b, t - shift - b
    return bool(np.allclose(shifted[lo:hi], full[lo + shift : hi + shift], rtol=1e-5, atol=1e-6))
