"""
Differentiable inner step and generator meta-gradient.

The model is evaluated with substituted parameter tensors through
torch.func.functional_call, so the inner step theta_s+ = theta_s - zeta * g stays on
the tape while the module's own parameters (and the SGD state that tracks them)
are never written to.
"""
import torch
import logging
from torch.func import functional_call
from modules.backbone import MultiExitNet
from modules.label_generator import LabelGenerator
from modules.lossfns.distill_loss import SelfBoostLoss, cross_entropy
from utils import tensor_core as tc
from utils.errors import NumericError, ParameterError
from dataset._container import Batch
from typing import Callable, Dict


LOGGER = logging.getLogger(__name__)

Params = Dict[str, torch.Tensor]


def sgd_step(params: Params, grads: Params, zeta: float) -> Params:
    return {name: p - zeta * grads[name] for name, p in params.items()}


def inner_update(
        loss_fn: Callable[[Params], torch.Tensor],
        params: Params,
        zeta: float,
        create_graph: bool=True
    ) -> Params:
    """
    One plain gradient step (no momentum, no weight decay) on loss_fn.

    Input
    --------------------------------
    :loss_fn: maps a {name: tensor} parameter dict to a scalar loss

    :params: current parameters, left untouched

    :zeta: inner learning rate

    :create_graph: keep the gradient on the tape so the stepped parameters can be
        differentiated w.r.t. anything the loss depended on

    Returns
    --------------------------------
    :stepped: {name: params[name] - zeta * d loss / d params[name]}
    """
    if zeta < 0:
        raise ParameterError(f"inner learning rate must be >= 0, got {zeta}")
    loss = loss_fn(params)
    try:
        grads = tc.backward(loss, list(params.values()), create_graph=create_graph)
    except NumericError:
        LOGGER.error("non-finite gradient in the inner step, step aborted")
        raise
    return sgd_step(params, dict(zip(params.keys(), grads)), zeta)


def _train_loss_fn(
        model: MultiExitNet,
        generator: LabelGenerator,
        criterion: SelfBoostLoss,
        batch: Batch
    ) -> Callable[[Params], torch.Tensor]:
    def loss_fn(params: Params) -> torch.Tensor:
        output  = functional_call(model, params, (batch.images, ))
        targets = generator.soft_targets(output.features, stop_grad_into_model=False)
        return criterion(output.all_logits, batch.labels, targets)
    return loss_fn


def _test_loss(model: MultiExitNet, params: Params, batch: Batch) -> torch.Tensor:
    output = functional_call(model, params, (batch.images, ), {"with_exits": False})
    return cross_entropy(output.final_logits, batch.labels)


def held_out_loss(
        model: MultiExitNet,
        generator: LabelGenerator,
        criterion: SelfBoostLoss,
        train_batch: Batch,
        test_batch: Batch,
        zeta: float
    ) -> torch.Tensor:
    """CE of the final output on the test batch after one inner step on the train batch."""
    params = dict(model.named_parameters())
    stepped = inner_update(_train_loss_fn(model, generator, criterion, train_batch), params, zeta, create_graph=False)
    return _test_loss(model, {k: v.detach() for k, v in stepped.items()}, test_batch)


def meta_gradient(
        model: MultiExitNet,
        generator: LabelGenerator,
        criterion: SelfBoostLoss,
        train_batch: Batch,
        test_batch: Batch,
        zeta: float,
        order: str="second",
        fd_radius: float=1e-2
    ) -> Params:
    """
    Gradient of the held-out CE at theta_s+ w.r.t. every generator parameter.

    order="second" differentiates exactly through the inner step (nested backward).
    order="first" runs first-order backward passes only: v = grad of the test loss at
    theta_s+ (with the inner gradient held constant), then the mixed derivative
    d/d theta_g <grad_s L_train, v> is replaced by a central difference of generator
    gradients at theta_s +- r * v, r = fd_radius / |v|.

    Returns
    --------------------------------
    :grads: {generator parameter name: gradient}, zeros where a parameter has no
        influence on the held-out loss
    """
    params     = dict(model.named_parameters())
    gen_params = dict(generator.named_parameters())
    loss_fn    = _train_loss_fn(model, generator, criterion, train_batch)

    if order == "second":
        stepped = inner_update(loss_fn, params, zeta, create_graph=True)
        loss    = _test_loss(model, stepped, test_batch)
        grads   = tc.backward(loss, list(gen_params.values()), allow_unused=True)
        return dict(zip(gen_params.keys(), grads))

    if order != "first":
        raise ParameterError(f"meta order must be 'second' or 'first', got {order!r}")

    stepped = inner_update(loss_fn, params, zeta, create_graph=False)
    stepped = {k: v.detach().requires_grad_(True) for k, v in stepped.items()}
    loss    = _test_loss(model, stepped, test_batch)
    v       = dict(zip(stepped.keys(), tc.backward(loss, list(stepped.values()), allow_unused=True)))

    v_norm  = torch.sqrt(sum((t.detach() ** 2).sum() for t in v.values()))
    if float(v_norm) == 0.0:
        return {k: torch.zeros_like(p) for k, p in gen_params.items()}
    radius  = fd_radius / v_norm

    def generator_grads(sign: float) -> Params:
        shifted = {k: (p.detach() + sign * radius * v[k].detach()) for k, p in params.items()}
        grads   = tc.backward(loss_fn(shifted), list(gen_params.values()), allow_unused=True)
        return dict(zip(gen_params.keys(), grads))

    plus, minus = generator_grads(1.0), generator_grads(-1.0)
    return {k: -zeta * (plus[k] - minus[k]) / (2 * radius) for k in gen_params}


def finite_difference_hypergradient(
        model: MultiExitNet,
        generator: LabelGenerator,
        criterion: SelfBoostLoss,
        train_batch: Batch,
        test_batch: Batch,
        zeta: float,
        h: float=1e-5
    ) -> Params:
    """Central differences of held_out_loss over every generator coordinate (slow, for checks)."""
    grads = {}
    for name, p in generator.named_parameters():
        grad = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i]  = original + h
            up       = held_out_loss(model, generator, criterion, train_batch, test_batch, zeta).item()
            flat[i]  = original - h
            down     = held_out_loss(model, generator, criterion, train_batch, test_batch, zeta).item()
            flat[i]  = original
            grad.view(-1)[i] = (up - down) / (2 * h)
        grads[name] = grad
    return grads
