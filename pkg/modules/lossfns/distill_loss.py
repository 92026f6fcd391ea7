import torch
import torch.nn as nn
import torch.nn.functional as F
from dataclasses import dataclass
from constants import PROB_EPS, STOCHASTIC_ATOL, TRAIN_MODES
from utils import tensor_core as tc
from utils.errors import InputError, ParameterError
from typing import Optional, Sequence, Union


@dataclass
class LossConfig:
    alpha: float = 0.5
    tau: float = 1.0
    mode: str = "metadistill"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.mode not in TRAIN_MODES:
            raise ParameterError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    logits: (N, C)

    labels: (N, ) class indexes in [0, C)
    """
    num_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes}), got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels.long())


def _check_stochastic(p: torch.Tensor, name: str):
    row_sums = p.detach().sum(dim=-1)
    if bool((p.detach() < 0).any()) or not torch.allclose(row_sums, torch.ones_like(row_sums), atol=STOCHASTIC_ATOL, rtol=0):
        raise InputError(f"{name} rows must be probability distributions")


def kl_divergence(p_teacher: torch.Tensor, q_student: torch.Tensor, eps: float=PROB_EPS) -> torch.Tensor:
    """
    Batch mean of sum_c p * ln(p / q), i.e. KL(teacher || student). Zero-probability
    teacher entries contribute 0; student probabilities are clamped at eps before the log.
    """
    if p_teacher.shape != q_student.shape:
        raise InputError(f"teacher and student shapes differ: {tuple(p_teacher.shape)} vs {tuple(q_student.shape)}")
    _check_stochastic(p_teacher, "teacher")
    _check_stochastic(q_student, "student")
    kl = torch.xlogy(p_teacher, p_teacher) - p_teacher * tc.log(q_student.clamp_min(eps))
    return kl.sum(dim=-1).mean()


def combine_stage_terms(
        ce: Union[float, torch.Tensor],
        kl: Union[float, torch.Tensor],
        alpha: float,
        tau: float
    ) -> Union[float, torch.Tensor]:
    return alpha * ce + (1.0 - alpha) * (tau ** 2) * kl


def stage_loss(
        logits: torch.Tensor,
        labels: torch.Tensor,
        target: torch.Tensor,
        alpha: float,
        tau: float
    ) -> torch.Tensor:
    """alpha * CE(y, S_k) + (1 - alpha) * tau^2 * KL(T_k || softmax(S_k / tau))"""
    ce = cross_entropy(logits, labels)
    kl = kl_divergence(target, tc.softmax_tempered(logits, tau))
    return combine_stage_terms(ce, kl, alpha, tau)


def self_boost_loss(
        logits: Sequence[torch.Tensor],
        labels: torch.Tensor,
        targets: Optional[Sequence[torch.Tensor]],
        config: LossConfig
    ) -> torch.Tensor:
    """
    Input
    --------------------------------
    :logits: S_1 .. S_K, each (N, C); S_K is the final output. In baseline mode a
        single final output is accepted.

    :labels: (N, ) hard labels

    :targets: T_1 .. T_{K-1} soft targets for metadistill mode, ignored otherwise

    :config: LossConfig

    Returns
    --------------------------------
    :loss: scalar, CE on the final output plus one stage loss per intermediate exit
    """
    logits = list(logits)
    final  = logits[-1]
    loss   = cross_entropy(final, labels)
    if config.mode == "baseline":
        return loss
    if config.mode == "classic_kd":
        raise InputError("classic_kd mode is trained with classic_kd_loss, not self_boost_loss")
    if len(logits) < 2:
        raise InputError(f"{config.mode} mode needs at least 2 outputs, got {len(logits)}")

    exits = logits[:-1]
    if config.mode == "dsn":
        for s in exits:
            loss = loss + cross_entropy(s, labels)
        return loss

    if config.mode == "self_distill":
        final_probs = tc.softmax_tempered(final.detach(), config.tau)
        targets     = [final_probs] * len(exits)
    elif targets is None or len(targets) != len(exits):
        got = 0 if targets is None else len(targets)
        raise InputError(f"expected {len(exits)} soft targets, got {got}")

    for s, t in zip(exits, targets):
        loss = loss + stage_loss(s, labels, t, config.alpha, config.tau)
    return loss


def classic_kd_loss(
        student_logits: torch.Tensor,
        teacher_logits: torch.Tensor,
        labels: torch.Tensor,
        alpha: float,
        tau: float
    ) -> torch.Tensor:
    teacher_probs = tc.softmax_tempered(teacher_logits.detach(), tau)
    return stage_loss(student_logits, labels, teacher_probs, alpha, tau)


class SelfBoostLoss(nn.Module):
    def __init__(self, alpha: float=0.5, tau: float=1.0, mode: str="metadistill"):
        super(SelfBoostLoss, self).__init__()
        self.config           = LossConfig(alpha=alpha, tau=tau, mode=mode)
        self.stage_loss_calls = 0

    def forward(
            self,
            logits: Sequence[torch.Tensor],
            labels: torch.Tensor,
            targets: Optional[Sequence[torch.Tensor]]=None
        ) -> torch.Tensor:
        if self.config.mode != "baseline":
            self.stage_loss_calls += len(logits) - 1
        return self_boost_loss(logits, labels, targets, self.config)
