"""
Validated tensor operations over torch autograd.

Every op checks its shape contract (no broadcasting), runs the torch kernel and
refuses to hand back non-finite values. Gradients come from the torch tape, so
any composition of these ops supports nested (second-order) differentiation.
"""
import contextlib
import torch
import torch.nn.functional as F
from .errors import DimensionError, GraphError, NumericError, ParameterError
from typing import Iterator, List, Optional, Sequence


def _check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"{op} produced non-finite values")
    return t


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op} expects equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")


def _check_ndim(t: torch.Tensor, ndim: int, op: str, name: str="input"):
    if t.ndim != ndim:
        raise DimensionError(f"{op} expects a {ndim}D {name}, got shape {tuple(t.shape)}")


@contextlib.contextmanager
def verification_mode() -> Iterator[torch.dtype]:
    """
    64-bit default dtype for finite-difference checks. Tensors and modules created
    inside the block are float64; the previous default is restored on exit.
    """
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield torch.float64
    finally:
        torch.set_default_dtype(previous)


def conv2d(
        input: torch.Tensor,
        kernel: torch.Tensor,
        bias: Optional[torch.Tensor]=None,
        stride: int=1,
        padding: int=0
    ) -> torch.Tensor:
    """
    Input
    --------------------------------
    :input: (N, C, H, W)

    :kernel: (O, C, kH, kW)

    :bias: (O, ) or None

    Returns
    --------------------------------
    :output: (N, O, (H + 2*padding - kH) // stride + 1, (W + 2*padding - kW) // stride + 1)
    """
    _check_ndim(input, 4, "conv2d")
    _check_ndim(kernel, 4, "conv2d", name="kernel")
    if input.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d input has {input.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0], ):
        raise DimensionError(f"conv2d bias must have shape ({kernel.shape[0]},), got {tuple(bias.shape)}")
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"conv2d padding must be >= 0, got {padding}")
    kh, kw = kernel.shape[-2:]
    if input.shape[2] + 2 * padding < kh or input.shape[3] + 2 * padding < kw:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {tuple(input.shape[2:])}")
    return _check_finite(F.conv2d(input, kernel, bias, stride=stride, padding=padding), "conv2d")


def bilinear_upsample2x(input: torch.Tensor) -> torch.Tensor:
    # half-pixel centers: output i samples input coordinate (i + 0.5) / 2 - 0.5, clamped to the border
    _check_ndim(input, 4, "bilinear_upsample2x")
    output = F.interpolate(input, scale_factor=2, mode="bilinear", align_corners=False)
    return _check_finite(output, "bilinear_upsample2x")


def softmax_tempered(logits: torch.Tensor, tau: float=1.0) -> torch.Tensor:
    """
    Softmax of logits / tau over the last axis. torch.softmax subtracts the row
    maximum before exponentiating.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    _check_finite(logits, "softmax_tempered")
    return _check_finite(torch.softmax(logits / tau, dim=-1), "softmax_tempered")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b, "add")
    return _check_finite(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b, "mul")
    return _check_finite(a * b, "mul")


def relu(input: torch.Tensor) -> torch.Tensor:
    # torch.relu has subgradient 0 at 0
    return _check_finite(torch.relu(input), "relu")


def log(input: torch.Tensor) -> torch.Tensor:
    return _check_finite(torch.log(input), "log")


def global_avg_pool(input: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, C)"""
    _check_ndim(input, 4, "global_avg_pool")
    return _check_finite(input.mean(dim=(-2, -1)), "global_avg_pool")


def avg_pool2x(input: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, C, H // 2, W // 2), H and W must be even"""
    _check_ndim(input, 4, "avg_pool2x")
    if input.shape[2] % 2 or input.shape[3] % 2:
        raise DimensionError(f"avg_pool2x needs even spatial dims, got {tuple(input.shape[2:])}")
    return _check_finite(F.avg_pool2d(input, kernel_size=2, stride=2), "avg_pool2x")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_ndim(a, 2, "matmul", name="left operand")
    _check_ndim(b, 2, "matmul", name="right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _check_finite(a @ b, "matmul")


def linear(input: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor]=None) -> torch.Tensor:
    """
    Input
    --------------------------------
    :input: (N, in_features)

    :weight: (out_features, in_features)

    :bias: (out_features, ) or None

    Returns
    --------------------------------
    :output: (N, out_features)
    """
    _check_ndim(input, 2, "linear")
    _check_ndim(weight, 2, "linear", name="weight")
    if input.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} input features, got {input.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0], ):
        raise DimensionError(f"linear bias must have shape ({weight.shape[0]},), got {tuple(bias.shape)}")
    return _check_finite(F.linear(input, weight, bias), "linear")


def backward(
        loss: torch.Tensor,
        leaves: Sequence[torch.Tensor],
        create_graph: bool=False,
        allow_unused: bool=False
    ) -> List[torch.Tensor]:
    """
    Reverse-mode gradients of a scalar loss w.r.t. each leaf, shape-equal to the leaf.

    With create_graph=True the returned gradients stay on the tape and can be
    differentiated again (w.r.t. the same or any upstream leaf). Leaves with no
    path to the loss raise GraphError unless allow_unused, in which case they get
    zero gradients.
    """
    if loss.numel() != 1:
        raise DimensionError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    leaves = list(leaves)
    if not loss.requires_grad:
        if allow_unused:
            return [torch.zeros_like(leaf) for leaf in leaves]
        raise GraphError("loss is not attached to the tape")
    grads = torch.autograd.grad(
        loss.reshape(()),
        leaves,
        create_graph=create_graph,
        retain_graph=True,
        allow_unused=True
    )
    output = []
    for i, (leaf, grad) in enumerate(zip(leaves, grads)):
        if grad is None:
            if not allow_unused:
                raise GraphError(f"leaf {i} with shape {tuple(leaf.shape)} is unreachable from the loss")
            grad = torch.zeros_like(leaf)
        output.append(_check_finite(grad, "backward"))
    return output
