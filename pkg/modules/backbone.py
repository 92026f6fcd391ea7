import torch
import torch.nn as nn
from dataclasses import dataclass, field
from utils import tensor_core as tc
from utils.errors import DimensionError
from .base import BaseModule
from .common import StageBlock, ExitHead
from typing import List, Sequence


@dataclass
class MultiExitOutput:
    """
    Attributes:
    -----------------------------------------
    exit_logits: K - 1 tensors of shape (N, num_classes), one per intermediate exit head.
        Empty when the forward pass skipped the exits.

    final_logits: (N, num_classes), output of the final head on the last stage.

    features: K stage feature maps, stage k has shape (N, c_k, H / 2^k, W / 2^k)
    """
    exit_logits: List[torch.Tensor]
    final_logits: torch.Tensor
    features: List[torch.Tensor] = field(default_factory=list)

    @property
    def all_logits(self) -> List[torch.Tensor]:
        return [*self.exit_logits, self.final_logits]


class MultiExitNet(BaseModule):
    def __init__(self, widths: Sequence[int], num_classes: int, in_channels: int=3):
        super(MultiExitNet, self).__init__()

        if len(widths) < 2:
            raise DimensionError(f"a multi-exit model needs at least 2 stages, got widths {list(widths)}")
        if any(b < a for a, b in zip(widths[:-1], widths[1:])):
            raise DimensionError(f"stage widths must be non-decreasing, got {list(widths)}")

        self.widths          = tuple(widths)
        self.num_stages      = len(widths)
        self.num_classes     = num_classes
        self.in_channels     = in_channels
        self.exit_head_calls = 0

        channels             = [in_channels, *self.widths]
        self.stages          = nn.ModuleList([
            StageBlock(channels[k], channels[k + 1]) for k in range(self.num_stages)
        ])
        # exit k sees a map 2^(K-k) times larger than the last stage, its conv strides down to that size
        self.exit_heads      = nn.ModuleList([
            ExitHead(self.widths[k], self.widths[-1], num_classes, stride=2 ** (self.num_stages - 1 - k))
            for k in range(self.num_stages - 1)
        ])
        self.final_fc        = nn.Linear(self.widths[-1], num_classes)

    def forward(self, x: torch.Tensor, with_exits: bool=True) -> MultiExitOutput:
        """
        Input
        --------------------------------
        :x: (N, in_channels, H, W), H and W divisible by 2^K

        :with_exits: if False, the intermediate exit heads are not evaluated

        Returns
        --------------------------------
        :output: MultiExitOutput
        """
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"expected input of shape (N, {self.in_channels}, H, W), got {tuple(x.shape)}")
        divisor = 2 ** self.num_stages
        if x.shape[2] % divisor or x.shape[3] % divisor:
            raise DimensionError(
                f"input spatial size {tuple(x.shape[2:])} is not divisible by 2^{self.num_stages}"
            )

        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)

        exit_logits = []
        if with_exits:
            self.exit_head_calls += 1
            exit_logits = [head(f) for head, f in zip(self.exit_heads, features[:-1])]

        pooled       = tc.global_avg_pool(features[-1])
        final_logits = tc.linear(pooled, self.final_fc.weight, self.final_fc.bias)
        return MultiExitOutput(exit_logits=exit_logits, final_logits=final_logits, features=features)

    def strip_exits(self) -> "MultiExitNet":
        # deployment copy without the intermediate heads; forward must then skip exits
        stripped = MultiExitNet(self.widths, self.num_classes, self.in_channels)
        stripped = stripped.to(dtype=self.final_fc.weight.dtype)
        stripped.exit_heads = nn.ModuleList()
        state = {k: v for k, v in self.state_dict().items() if not k.startswith("exit_heads.")}
        stripped.load_state_dict(state)
        return stripped


def ensemble_output(logits: Sequence[torch.Tensor], tau: float=1.0) -> torch.Tensor:
    """
    Uniform average of per-exit tempered softmax probabilities.

    Input
    --------------------------------
    :logits: sequence of (N, num_classes) tensors, one per exit

    Returns
    --------------------------------
    :probs: (N, num_classes), rows sum to 1
    """
    if len(logits) == 0:
        raise DimensionError("ensemble needs at least one output")
    shape = logits[0].shape
    for l in logits:
        if l.ndim != 2 or l.shape != shape:
            raise DimensionError(f"ensemble outputs must share a (N, C) shape, got {tuple(l.shape)} vs {tuple(shape)}")
    probs = torch.stack([tc.softmax_tempered(l, tau) for l in logits], dim=0)
    return probs.mean(dim=0)
