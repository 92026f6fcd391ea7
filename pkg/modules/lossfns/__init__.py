from .distill_loss import (
    LossConfig,
    SelfBoostLoss,
    classic_kd_loss,
    combine_stage_terms,
    cross_entropy,
    kl_divergence,
    self_boost_loss,
    stage_loss,
)
