"""Built-in gradient check items for the ops, losses and hypergrad scopes."""
import torch
from modules import build_model_and_generator
from modules.lossfns.distill_loss import (
    LossConfig, SelfBoostLoss, cross_entropy, kl_divergence, self_boost_loss, stage_loss
)
from trainer.meta_step import finite_difference_hypergradient, meta_gradient
from dataset._container import Batch
from . import tensor_core as tc
from .gradcheck_utils import register, register_comparison


def _randn(gen: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=gen)


def _away_from_zero(gen: torch.Generator, *shape: int) -> torch.Tensor:
    # keeps relu kinks out of the finite-difference stencil
    x = _randn(gen, *shape)
    return torch.sign(x) * (0.1 + x.abs())


def _projection(gen: torch.Generator, shape: torch.Size) -> torch.Tensor:
    return _randn(gen, *shape)


def _project(out: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (out * w).sum()


@register("ops", "conv2d")
def _conv2d(gen):
    x, k, b = _randn(gen, 2, 3, 5, 5), _randn(gen, 4, 3, 3, 3), _randn(gen, 4)
    w = _projection(gen, (2, 4, 3, 3))
    return (lambda x, k, b: _project(tc.conv2d(x, k, b, stride=2, padding=1), w)), [x, k, b]


@register("ops", "conv2d_1x1")
def _conv2d_1x1(gen):
    x, k, b = _randn(gen, 2, 3, 4, 4), _randn(gen, 2, 3, 1, 1), _randn(gen, 2)
    w = _projection(gen, (2, 2, 4, 4))
    return (lambda x, k, b: _project(tc.conv2d(x, k, b), w)), [x, k, b]


@register("ops", "bilinear_upsample2x")
def _upsample(gen):
    x = _randn(gen, 2, 2, 3, 3)
    w = _projection(gen, (2, 2, 6, 6))
    return (lambda x: _project(tc.bilinear_upsample2x(x), w)), [x]


@register("ops", "softmax_tempered")
def _softmax(gen):
    x = _randn(gen, 3, 5)
    w = _projection(gen, (3, 5))
    return (lambda x: _project(tc.softmax_tempered(x, 2.0), w)), [x]


@register("ops", "add")
def _add(gen):
    a, b = _randn(gen, 3, 4), _randn(gen, 3, 4)
    w = _projection(gen, (3, 4))
    return (lambda a, b: _project(tc.add(a, b), w)), [a, b]


@register("ops", "mul")
def _mul(gen):
    a, b = _randn(gen, 3, 4), _randn(gen, 3, 4)
    w = _projection(gen, (3, 4))
    return (lambda a, b: _project(tc.mul(a, b), w)), [a, b]


@register("ops", "relu")
def _relu(gen):
    x = _away_from_zero(gen, 4, 5)
    w = _projection(gen, (4, 5))
    return (lambda x: _project(tc.relu(x), w)), [x]


@register("ops", "log")
def _log(gen):
    x = 0.5 + torch.rand(4, 5, generator=gen)
    w = _projection(gen, (4, 5))
    return (lambda x: _project(tc.log(x), w)), [x]


@register("ops", "global_avg_pool")
def _gap(gen):
    x = _randn(gen, 2, 3, 4, 4)
    w = _projection(gen, (2, 3))
    return (lambda x: _project(tc.global_avg_pool(x), w)), [x]


@register("ops", "avg_pool2x")
def _avg_pool(gen):
    x = _randn(gen, 2, 3, 4, 4)
    w = _projection(gen, (2, 3, 2, 2))
    return (lambda x: _project(tc.avg_pool2x(x), w)), [x]


@register("ops", "matmul")
def _matmul(gen):
    a, b = _randn(gen, 3, 4), _randn(gen, 4, 2)
    w = _projection(gen, (3, 2))
    return (lambda a, b: _project(tc.matmul(a, b), w)), [a, b]


@register("ops", "linear")
def _linear(gen):
    x, wt, b = _randn(gen, 3, 4), _randn(gen, 5, 4), _randn(gen, 5)
    w = _projection(gen, (3, 5))
    return (lambda x, wt, b: _project(tc.linear(x, wt, b), w)), [x, wt, b]


@register("ops", "softmax_tempered/second", second_order=True)
def _softmax_second(gen):
    x = _randn(gen, 3, 5)
    w = _projection(gen, (3, 5))
    return (lambda x: _project(tc.softmax_tempered(x, 0.5), w)), [x]


@register("ops", "mul/second", second_order=True)
def _mul_second(gen):
    a, b = _randn(gen, 3, 4), _randn(gen, 3, 4)
    w = _projection(gen, (3, 4))
    return (lambda a, b: _project(tc.mul(a, b), w)), [a, b]


@register("ops", "conv_upsample_softmax/second", second_order=True)
def _chain_second(gen):
    x, k = _randn(gen, 1, 2, 2, 2), _randn(gen, 3, 2, 3, 3)
    w = _projection(gen, (1, 3 * 4 * 4))

    def fn(x, k):
        y = tc.bilinear_upsample2x(tc.conv2d(x, k, padding=1))
        return _project(tc.softmax_tempered(y.reshape(1, -1)), w)
    return fn, [x, k]


@register("losses", "cross_entropy")
def _ce(gen):
    logits = _randn(gen, 4, 3)
    labels = torch.tensor([0, 2, 1, 2])
    return (lambda z: cross_entropy(z, labels)), [logits]


@register("losses", "kl_divergence/student")
def _kl_student(gen):
    p = tc.softmax_tempered(_randn(gen, 4, 5))
    z = _randn(gen, 4, 5)
    return (lambda z: kl_divergence(p, tc.softmax_tempered(z, 2.0))), [z]


@register("losses", "kl_divergence/teacher")
def _kl_teacher(gen):
    q = tc.softmax_tempered(_randn(gen, 4, 5))
    z = _randn(gen, 4, 5)
    return (lambda z: kl_divergence(tc.softmax_tempered(z), q)), [z]


@register("losses", "stage_loss")
def _stage_loss(gen):
    logits, target_logits = _randn(gen, 4, 3), _randn(gen, 4, 3)
    labels = torch.tensor([1, 0, 2, 1])
    return (lambda s, t: stage_loss(s, labels, tc.softmax_tempered(t, 2.0), alpha=0.3, tau=2.0)), [logits, target_logits]


@register("losses", "self_boost_loss/dsn")
def _dsn(gen):
    s1, s2, s3 = _randn(gen, 4, 3), _randn(gen, 4, 3), _randn(gen, 4, 3)
    labels = torch.tensor([2, 0, 1, 1])
    config = LossConfig(alpha=0.5, tau=1.0, mode="dsn")
    return (lambda a, b, c: self_boost_loss([a, b, c], labels, None, config)), [s1, s2, s3]


@register("losses", "self_boost_loss/metadistill")
def _metadistill(gen):
    s1, s2, t1 = _randn(gen, 4, 3), _randn(gen, 4, 3), _randn(gen, 4, 3)
    labels = torch.tensor([0, 1, 2, 0])
    config = LossConfig(alpha=0.5, tau=1.5, mode="metadistill")
    return (lambda a, b, t: self_boost_loss([a, b], labels, [tc.softmax_tempered(t, 1.5)], config)), [s1, s2, t1]


@register("losses", "stage_loss/second", second_order=True)
def _stage_loss_second(gen):
    logits, target_logits = _randn(gen, 4, 3), _randn(gen, 4, 3)
    labels = torch.tensor([1, 2, 0, 0])
    return (lambda s, t: stage_loss(s, labels, tc.softmax_tempered(t), alpha=0.5, tau=1.0)), [logits, target_logits]


def tiny_instance(gen: torch.Generator, seed: int=0):
    """K=2, widths (2, 4), C=3, 8x8 images, batches of 4; built under the caller's dtype."""
    model, generator = build_model_and_generator((2, 4), num_classes=3, in_channels=3, seed=seed)
    criterion = SelfBoostLoss(alpha=0.5, tau=1.0, mode="metadistill")

    def batch(offset: int) -> Batch:
        return Batch(
            images=torch.randn(4, 3, 8, 8, generator=gen),
            labels=torch.randint(0, 3, (4, ), generator=gen),
            indices=torch.arange(offset, offset + 4),
        )
    return model, generator, criterion, batch(0), batch(4)


def _flat(grads) -> list:
    return [grads[k] for k in sorted(grads)]


@register_comparison("hypergrad", "meta_gradient/second_vs_fd", tolerance=1e-3)
def _hypergrad_fd(gen):
    model, generator, criterion, train_batch, test_batch = tiny_instance(gen)
    zeta     = 0.1
    analytic = meta_gradient(model, generator, criterion, train_batch, test_batch, zeta, order="second")
    numeric  = finite_difference_hypergradient(model, generator, criterion, train_batch, test_batch, zeta)
    return _flat(analytic), _flat(numeric)


@register_comparison("hypergrad", "meta_gradient/first_vs_second", tolerance=0.1)
def _hypergrad_orders(gen):
    model, generator, criterion, train_batch, test_batch = tiny_instance(gen)
    zeta   = 1e-3
    second = meta_gradient(model, generator, criterion, train_batch, test_batch, zeta, order="second")
    first  = meta_gradient(model, generator, criterion, train_batch, test_batch, zeta, order="first")
    return _flat(first), _flat(second)
