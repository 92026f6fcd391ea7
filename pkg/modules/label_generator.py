import torch
import torch.nn as nn
from dataclasses import dataclass
from utils import tensor_core as tc
from utils.errors import DimensionError
from .base import BaseModule
from .common import ConvAct, ExitHead
from typing import List, Sequence


@dataclass
class FusionOutput:
    """
    Attributes:
    -----------------------------------------
    fused: K - 1 fused feature maps, fused[k] has the spatial size of stage feature k
        and c_fuse channels

    targets: K - 1 soft target distributions of shape (N, num_classes), rows sum to 1
    """
    fused: List[torch.Tensor]
    targets: List[torch.Tensor]


class LabelGenerator(BaseModule):
    """
    Top-down fusion network. The deepest stage map is projected by a 1x1 conv, then
    for k = K-1 .. 1 the running map is upsampled 2x, added to the 1x1 projection of
    stage k and refined by a 3x3 conv. A head per fused map turns it into a soft
    target distribution.
    """
    def __init__(self, widths: Sequence[int], num_classes: int, tau: float=1.0):
        super(LabelGenerator, self).__init__()

        if len(widths) < 2:
            raise DimensionError(f"label generator needs at least 2 stages, got widths {list(widths)}")

        self.widths        = tuple(widths)
        self.num_stages    = len(widths)
        self.num_classes   = num_classes
        self.tau           = tau
        self.fuse_channels = self.widths[-1]

        self.lateral_convs = nn.ModuleList([
            ConvAct(c, self.fuse_channels, kernel_size=1, padding=0, activation=False) for c in self.widths
        ])
        self.refine_convs  = nn.ModuleList([
            ConvAct(self.fuse_channels, self.fuse_channels, kernel_size=3, padding=1, activation=False)
            for _ in range(self.num_stages - 1)
        ])
        self.target_heads  = nn.ModuleList([
            ExitHead(
                self.fuse_channels,
                self.fuse_channels,
                num_classes,
                stride=2 ** (self.num_stages - 1 - k)
            ) for k in range(self.num_stages - 1)
        ])

    def _check_features(self, features: Sequence[torch.Tensor]):
        if len(features) != self.num_stages:
            raise DimensionError(f"expected {self.num_stages} stage features, got {len(features)}")
        for k, (f, c) in enumerate(zip(features, self.widths)):
            if f.ndim != 4 or f.shape[1] != c:
                raise DimensionError(f"stage {k + 1} feature should have {c} channels, got shape {tuple(f.shape)}")
        for k in range(self.num_stages - 1):
            hw, deeper_hw = features[k].shape[2:], features[k + 1].shape[2:]
            if hw[0] != 2 * deeper_hw[0] or hw[1] != 2 * deeper_hw[1]:
                raise DimensionError(
                    f"stage {k + 1} map {tuple(hw)} is not twice the size of stage {k + 2} map {tuple(deeper_hw)}"
                )

    def fuse_topdown(self, features: Sequence[torch.Tensor]) -> FusionOutput:
        """
        Input
        --------------------------------
        :features: K stage feature maps F_1 .. F_K from the backbone

        Returns
        --------------------------------
        :output: FusionOutput with fused maps and soft targets for stages 1 .. K-1
        """
        self._check_features(features)

        fused = [None] * (self.num_stages - 1)
        f_hat = self.lateral_convs[-1](features[-1])
        for k in range(self.num_stages - 2, -1, -1):
            lateral = self.lateral_convs[k](features[k])
            f_hat   = self.refine_convs[k](tc.add(tc.bilinear_upsample2x(f_hat), lateral))
            fused[k] = f_hat

        targets = [tc.softmax_tempered(head(f), self.tau) for head, f in zip(self.target_heads, fused)]
        return FusionOutput(fused=fused, targets=targets)

    def soft_targets(self, features: Sequence[torch.Tensor], stop_grad_into_model: bool) -> List[torch.Tensor]:
        # detached targets for the model update, differentiable ones for the meta step
        if stop_grad_into_model:
            with torch.no_grad():
                return self.fuse_topdown([f.detach() for f in features]).targets
        return self.fuse_topdown(features).targets

    def forward(self, features: Sequence[torch.Tensor]) -> FusionOutput:
        return self.fuse_topdown(features)
