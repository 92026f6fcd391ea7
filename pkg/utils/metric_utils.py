import hashlib
import torch
import torch.nn as nn
from typing import Iterable


def count_correct(logits_or_probs: torch.Tensor, labels: torch.Tensor) -> int:
    return int((logits_or_probs.argmax(dim=-1) == labels).sum().item())


def entropy(probs: torch.Tensor) -> torch.Tensor:
    """Per-row Shannon entropy (nats) of (N, C) probabilities, 0 * ln 0 = 0."""
    return -torch.xlogy(probs, probs).sum(dim=-1)


def tensors_checksum(tensors: Iterable[torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def params_checksum(module: nn.Module) -> str:
    return tensors_checksum(p for _, p in sorted(module.named_parameters()))


def optimizer_checksum(optimizer: torch.optim.Optimizer) -> str:
    buffers = []
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            for key in sorted(state):
                value = state[key]
                if isinstance(value, torch.Tensor):
                    buffers.append(value)
                else:
                    buffers.append(torch.tensor(float(value)))
    return tensors_checksum(buffers)
