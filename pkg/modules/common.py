import math
import torch
import torch.nn as nn
from utils import tensor_core as tc
from typing import Optional


class ConvAct(nn.Module):
    def __init__(
            self,
            in_channels: int,
            out_channels: int,
            kernel_size: int,
            stride: int=1,
            padding: Optional[int]=None,
            activation: bool=True,
            bias: bool=True
        ):
        super(ConvAct, self).__init__()

        self.in_channels  = in_channels
        self.out_channels = out_channels
        self.kernel_size  = kernel_size
        self.stride       = stride
        self.padding      = kernel_size // 2 if padding is None else padding
        self.activation   = activation

        self.conv         = nn.Conv2d(
            in_channels,
            out_channels,
            kernel_size=kernel_size,
            stride=stride,
            padding=self.padding,
            bias=bias
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # weights are read off the submodule at call time so functional_call can substitute them
        x = tc.conv2d(x, self.conv.weight, self.conv.bias, stride=self.stride, padding=self.padding)
        if self.activation:
            x = tc.relu(x)
        return x


class StageBlock(nn.Module):
    """
    One backbone stage: a 3x3 conv at the incoming resolution followed by a strided
    3x3 conv, so every stage halves the spatial size.
    """
    def __init__(self, in_channels: int, out_channels: int):
        super(StageBlock, self).__init__()

        self.in_channels  = in_channels
        self.out_channels = out_channels
        self.conv1        = ConvAct(in_channels, out_channels, kernel_size=3, stride=1)
        self.conv2        = ConvAct(out_channels, out_channels, kernel_size=3, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(self.conv1(x))


class ExitHead(nn.Module):
    def __init__(self, in_channels: int, mid_channels: int, num_classes: int, stride: int=1):
        super(ExitHead, self).__init__()

        self.in_channels  = in_channels
        self.mid_channels = mid_channels
        self.num_classes  = num_classes
        self.stride       = stride

        self.conv         = ConvAct(in_channels, mid_channels, kernel_size=3, stride=stride, padding=1)
        self.fc           = nn.Linear(mid_channels, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """
        Input
        --------------------------------
        :x: (N, in_channels, H, W), stage (or fused) feature map

        Returns
        --------------------------------
        :logits: (N, num_classes)
        """
        x = self.conv(x)
        x = tc.global_avg_pool(x)
        return tc.linear(x, self.fc.weight, self.fc.bias)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """
    Fan-in scaled normal init (std = sqrt(2 / fan_in)) for every conv and linear
    weight, zero biases. Modules are visited in registration order so the draw is
    reproducible from the seed alone.
    """
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if not isinstance(m, (nn.Conv2d, nn.Linear)):
                continue
            fan_in = m.weight[0].numel()
            std    = math.sqrt(2.0 / fan_in)
            noise  = torch.randn(m.weight.shape, generator=generator, dtype=torch.float64)
            m.weight.copy_(noise * std)
            if m.bias is not None:
                m.bias.zero_()
    return module
