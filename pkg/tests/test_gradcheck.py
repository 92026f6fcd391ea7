import pytest
import torch
import cli
from utils import gradcheck_utils
from utils.errors import ParameterError
from utils.gradcheck_utils import GradcheckItem, central_difference, relative_error, run_gradcheck


class _BrokenSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x, ) = ctx.saved_tensors
        return grad * x


def _broken_item():
    def build(gen):
        x = torch.randn(3, 4, generator=gen)
        return (lambda x: _BrokenSquare.apply(x).sum()), [x]
    return GradcheckItem("broken_square", build)


class TestHelpers:
    def test_central_difference_of_quadratic(self, f64):
        x = torch.tensor([1.0, -2.0, 3.0])
        (g, ) = central_difference(lambda x: (x ** 2).sum(), [x])
        assert torch.allclose(g, 2 * x, atol=1e-8)

    def test_relative_error(self):
        assert relative_error([torch.ones(3)], [torch.ones(3)]) == 0.0
        assert relative_error([torch.zeros(3)], [torch.zeros(3)]) == 0.0
        assert relative_error([torch.tensor([1.0, 0.0])], [torch.tensor([0.0, 0.0])]) == pytest.approx(1.0)


class TestSuites:
    def test_ops(self):
        results = run_gradcheck("ops")
        assert len(results) >= 12
        assert all(r.passed for r in results), [(r.name, r.rel_error) for r in results if not r.passed]
        assert max(r.rel_error for r in results) < 1e-4

    def test_losses(self):
        results = run_gradcheck("losses")
        assert all(r.passed for r in results), [(r.name, r.rel_error) for r in results if not r.passed]

    def test_hypergrad(self):
        results = {r.name: r for r in run_gradcheck("hypergrad")}
        assert results["meta_gradient/second_vs_fd"].rel_error < 1e-3
        assert results["meta_gradient/first_vs_second"].passed

    def test_unknown_scope(self):
        with pytest.raises(ParameterError):
            run_gradcheck("layers")


class TestFaultInjection:
    def test_corrupted_backward_fails(self):
        (result, ) = run_gradcheck("ops", items=[_broken_item()])
        assert not result.passed
        assert result.name == "broken_square"

    def test_cli_exits_with_failure(self, monkeypatch, caplog):
        import utils.gradcheck_items  # noqa: F401
        monkeypatch.setitem(gradcheck_utils.GRADCHECK_REGISTRY, "ops", [_broken_item()])
        assert cli.main(["gradcheck", "--scope", "ops"]) == cli.EXIT_CHECK_FAILED
        assert "broken_square" in caplog.text
