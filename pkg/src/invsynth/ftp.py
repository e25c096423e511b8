"""Feature Transfer Pyramid: turns teacher taps into an image-shaped enhancement map.

With teacher taps f_1 (finest) ... f_N (coarsest) the blocks are

    m_1 = W1(up(f_N))
    m_l = W1(up(W3(m_{l-1} + f_{N-l+1})))     1 < l < N
    m_N = W1(W3(m_{N-1} + f_1))               no upsampling, W1 emits 3 channels

so every sum pairs a block output with the tap of the same spatial size. The
output block adds m_N to the generator image, then applies a 1x1 conv and tanh.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifier_zoo import ClassifierSpec, FeaturePyramid, ShapeError


class FtpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, conv3: bool, upsample: bool):
        super().__init__()
        self.conv3 = nn.Conv2d(cin, cin, 3, 1, 1) if conv3 else None
        self.upsample = upsample
        self.conv1 = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        if self.conv3 is not None:
            x = self.conv3(x)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv1(x)


class FeatureTransferPyramid(nn.Module):
    def __init__(self, tap_channels, levels: int | None = None, conv_tanh: bool = True,
                 seed: int = 0):
        super().__init__()
        n = len(tap_channels)
        if n < 2:
            raise ValueError("the pyramid needs at least two teacher taps")
        self.tap_channels = tuple(tap_channels)
        self.levels = n if levels is None else int(levels)
        if not 1 <= self.levels <= n:
            raise ValueError(f"levels must be in [1, {n}]")
        self.conv_tanh = conv_tanh
        self.seed = seed
        c = self.tap_channels
        blocks = [FtpBlock(c[n - 1], c[n - 2], conv3=False, upsample=True)]
        for l in range(2, n):
            blocks.append(FtpBlock(c[n - l], c[n - l - 1], conv3=True, upsample=True))
        blocks.append(FtpBlock(c[0], 3, conv3=True, upsample=False))
        self.blocks = nn.ModuleList(blocks)
        self.out_conv = nn.Conv2d(3, 3, 1)

    def uses_tap(self, index: int) -> bool:
        """Whether tap ``index`` (0 = finest) feeds the pyramid under ``levels``."""
        return index >= len(self.tap_channels) - self.levels

    def forward(self, pyramid) -> list[torch.Tensor]:
        maps = list(pyramid.maps if isinstance(pyramid, FeaturePyramid) else pyramid)
        n = len(self.tap_channels)
        if len(maps) != n:
            raise ShapeError(f"expected {n} taps, got {len(maps)}")
        for i, (f, c) in enumerate(zip(maps, self.tap_channels)):
            if f.shape[1] != c:
                raise ShapeError(f"tap {i} has {f.shape[1]} channels, expected {c}")
        out = [self.blocks[0](maps[n - 1])]
        for l in range(2, n + 1):
            prev = out[-1]
            tap_index = n - l
            if self.uses_tap(tap_index):
                f = maps[tap_index]
                if f.shape != prev.shape:
                    raise ShapeError(f"cannot add block output {tuple(prev.shape)} "
                                     f"to tap {tuple(f.shape)}")
                prev = prev + f
            out.append(self.blocks[l - 1](prev))
        return out

    def compose(self, m_last: torch.Tensor, gen_output: torch.Tensor) -> torch.Tensor:
        if m_last.shape != gen_output.shape:
            raise ShapeError(f"enhancement map {tuple(m_last.shape)} does not match "
                             f"generator output {tuple(gen_output.shape)}")
        x = m_last + gen_output
        if self.conv_tanh:
            x = torch.tanh(self.out_conv(x))
        return x


@dataclass
class EnhancementMaps:
    maps: list

    @property
    def last(self) -> torch.Tensor:
        return self.maps[-1]

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]


def init_ftp(teacher_spec: ClassifierSpec, seed: int, levels: int | None = None,
             conv_tanh: bool = True) -> FeatureTransferPyramid:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FeatureTransferPyramid(teacher_spec.stage_channels, levels, conv_tanh, seed)


def ftp_forward(state: FeatureTransferPyramid, pyramid) -> EnhancementMaps:
    return EnhancementMaps(state(pyramid))


def compose_output(state: FeatureTransferPyramid, m_last: torch.Tensor,
                   gen_output: torch.Tensor) -> torch.Tensor:
    return state.compose(m_last, gen_output)
