"""
Finite-difference gradient checks.

Each check item builds a scalar function and the leaf tensors it depends on; the
analytic gradient from tensor_core.backward is compared against central differences
with a norm-wise relative error. Second-order items check the gradient of
<grad f, v> for a fixed random direction v, i.e. a Hessian-vector product.
"""
import logging
import torch
from dataclasses import dataclass
from . import tensor_core as tc
from .errors import ParameterError
from typing import Callable, Dict, List, Optional, Sequence, Tuple


LOGGER = logging.getLogger(__name__)

GRADCHECK_SCOPES = ("ops", "losses", "hypergrad")
FD_STEP          = 1e-5

ScalarFn = Callable[..., torch.Tensor]
Builder  = Callable[[torch.Generator], Tuple[ScalarFn, List[torch.Tensor]]]


@dataclass
class GradcheckItem:
    name: str
    build: Optional[Builder]
    tolerance: float = 1e-4
    second_order: bool = False
    # items that compute both gradients themselves return (analytic, numeric)
    compare: Optional[Callable[[torch.Generator], Tuple[List[torch.Tensor], List[torch.Tensor]]]] = None


@dataclass
class GradcheckResult:
    scope: str
    name: str
    rel_error: float
    tolerance: float
    passed: bool


GRADCHECK_REGISTRY: Dict[str, List[GradcheckItem]] = {scope: [] for scope in GRADCHECK_SCOPES}


def register(scope: str, name: str, tolerance: float=1e-4, second_order: bool=False):
    def decorator(build: Builder) -> Builder:
        GRADCHECK_REGISTRY[scope].append(GradcheckItem(name, build, tolerance, second_order))
        return build
    return decorator


def register_comparison(scope: str, name: str, tolerance: float):
    def decorator(compare):
        GRADCHECK_REGISTRY[scope].append(GradcheckItem(name, None, tolerance, compare=compare))
        return compare
    return decorator


def central_difference(fn: ScalarFn, inputs: Sequence[torch.Tensor], h: float=FD_STEP) -> List[torch.Tensor]:
    grads = []
    with torch.no_grad():
        for x in inputs:
            grad = torch.zeros_like(x)
            flat = x.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i]  = original + h
                up       = fn(*inputs).item()
                flat[i]  = original - h
                down     = fn(*inputs).item()
                flat[i]  = original
                grad.view(-1)[i] = (up - down) / (2 * h)
            grads.append(grad)
    return grads


def relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    """||a - n|| / max(||a||, ||n||) over all tensors concatenated; 0 when both vanish."""
    a = torch.cat([t.detach().reshape(-1) for t in analytic])
    n = torch.cat([t.detach().reshape(-1) for t in numeric])
    scale = max(a.norm().item(), n.norm().item())
    if scale == 0.0:
        return 0.0
    return (a - n).norm().item() / scale


def directional_gradient_fn(fn: ScalarFn, inputs: Sequence[torch.Tensor], gen: torch.Generator) -> ScalarFn:
    """Returns x -> <grad f(x), v> for a fixed random v, differentiable again."""
    directions = [torch.randn(x.shape, generator=gen, dtype=x.dtype) for x in inputs]

    def fn2(*xs: torch.Tensor) -> torch.Tensor:
        with torch.enable_grad():
            leaves = [x if x.requires_grad else x.detach().requires_grad_(True) for x in xs]
            grads  = tc.backward(fn(*leaves), leaves, create_graph=True)
            return sum((g * v).sum() for g, v in zip(grads, directions))
    return fn2


def check_item(scope: str, item: GradcheckItem, seed: int=0, h: float=FD_STEP) -> GradcheckResult:
    gen = torch.Generator().manual_seed(seed)
    if item.compare is not None:
        analytic, numeric = item.compare(gen)
    else:
        fn, inputs = item.build(gen)
        inputs = [x.detach().requires_grad_(True) for x in inputs]
        if item.second_order:
            fn = directional_gradient_fn(fn, inputs, gen)
        analytic = tc.backward(fn(*inputs), inputs, allow_unused=True)
        numeric  = central_difference(fn, inputs, h=h)
    err = relative_error(analytic, numeric)
    return GradcheckResult(scope, item.name, err, item.tolerance, err < item.tolerance)


def run_gradcheck(scope: str, items: Optional[Sequence[GradcheckItem]]=None, seed: int=0) -> List[GradcheckResult]:
    """
    Runs every item of a scope (or the given items) in 64-bit mode.
    """
    if scope not in GRADCHECK_SCOPES:
        raise ParameterError(f"unknown gradcheck scope {scope!r}, expected one of {GRADCHECK_SCOPES}")
    if items is None:
        _load_builtin_items()
        items = GRADCHECK_REGISTRY[scope]
    results = []
    with tc.verification_mode():
        for item in items:
            result = check_item(scope, item, seed=seed)
            LOGGER.info(
                f"[{scope}] {item.name}: rel. error {result.rel_error:.3e} "
                f"({'ok' if result.passed else 'FAILED'}, tol {item.tolerance:g})"
            )
            results.append(result)
    return results


def _load_builtin_items():
    # the item definitions import model code, which imports this package
    from . import gradcheck_items  # noqa: F401
