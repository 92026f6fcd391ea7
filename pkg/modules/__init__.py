from constants import BACKBONE_WIDTHS
from utils.errors import ConfigError
from .backbone import MultiExitNet, MultiExitOutput, ensemble_output
from .label_generator import LabelGenerator, FusionOutput
from .common import init_params
from typing import Optional, Sequence, Tuple


def resolve_widths(arch: str, widths: Optional[Sequence[int]]=None) -> Tuple[int, ...]:
    if widths:
        return tuple(int(w) for w in widths)
    if arch not in BACKBONE_WIDTHS:
        raise ConfigError("model.arch", f"unknown backbone {arch!r}, expected one of {sorted(BACKBONE_WIDTHS)}")
    return BACKBONE_WIDTHS[arch]


def build_model_and_generator(
        widths: Sequence[int],
        num_classes: int,
        in_channels: int=3,
        tau: float=1.0,
        seed: int=0
    ) -> Tuple[MultiExitNet, LabelGenerator]:
    model     = init_params(MultiExitNet(widths, num_classes, in_channels=in_channels), seed)
    generator = init_params(LabelGenerator(widths, num_classes, tau=tau), seed + 1)
    return model, generator
