import pytest
import torch
import torch.nn.functional as F
from modules import LabelGenerator, build_model_and_generator
from modules.lossfns import stage_loss
from utils import tensor_core as tc
from utils.errors import DimensionError
from utils.metric_utils import entropy


@pytest.fixture
def pair(f64):
    return build_model_and_generator((2, 4, 8), num_classes=5, seed=3)


class TestLabelGenerator:
    def test_targets_are_distributions(self, pair, gen):
        model, generator = pair
        out = model(torch.randn(3, 3, 16, 16, generator=gen))
        targets = generator.soft_targets(out.features, stop_grad_into_model=True)
        assert len(targets) == 2
        for t in targets:
            assert t.shape == (3, 5)
            assert torch.allclose(t.sum(-1), torch.ones(3), atol=1e-9)
            assert (t >= 0).all()

    def test_fused_maps_follow_stage_sizes(self, pair, gen):
        model, generator = pair
        out = generator(model(torch.randn(2, 3, 16, 16, generator=gen)).features)
        assert [tuple(f.shape) for f in out.fused] == [(2, 8, 8, 8), (2, 8, 4, 4)]

    def test_topdown_recursion_two_stages(self, f64, gen):
        model, generator = build_model_and_generator((2, 4), num_classes=3, seed=1)
        features = model(torch.randn(2, 3, 8, 8, generator=gen)).features

        def conv(layer, x, padding):
            return F.conv2d(x, layer.conv.weight, layer.conv.bias, padding=padding)

        top   = conv(generator.lateral_convs[1], features[1], 0)
        up    = F.interpolate(top, scale_factor=2, mode="bilinear", align_corners=False)
        fused = conv(generator.refine_convs[0], up + conv(generator.lateral_convs[0], features[0], 0), 1)
        assert torch.allclose(generator(features).fused[0], fused, atol=1e-12)

    def test_stop_gradient(self, pair, gen):
        model, generator = pair
        out = model(torch.randn(2, 3, 16, 16, generator=gen))
        detached = generator.soft_targets(out.features, stop_grad_into_model=True)
        assert not any(t.requires_grad for t in detached)

        attached = generator.soft_targets(out.features, stop_grad_into_model=False)
        grads = torch.autograd.grad(attached[0][:, 0].sum(), [out.features[0]])
        assert grads[0].abs().sum() > 0

    def test_zero_generator_gives_uniform_targets(self, pair, gen):
        model, generator = pair
        with torch.no_grad():
            for p in generator.parameters():
                p.zero_()
        features = [torch.zeros_like(f) for f in model(torch.randn(2, 3, 16, 16, generator=gen)).features]
        for t in generator.soft_targets(features, stop_grad_into_model=True):
            assert torch.allclose(t, torch.full((2, 5), 0.2, dtype=t.dtype), atol=1e-12)

    def test_detached_targets_send_no_gradient_to_generator(self, pair, gen):
        model, generator = pair
        out = model(torch.randn(2, 3, 16, 16, generator=gen))
        targets = generator.soft_targets(out.features, stop_grad_into_model=True)
        loss = stage_loss(out.exit_logits[0], torch.tensor([0, 4]), targets[0], alpha=0.5, tau=1.0)
        assert loss.requires_grad
        grads = tc.backward(loss, list(generator.parameters()), allow_unused=True)
        assert all(torch.count_nonzero(g) == 0 for g in grads)

    def test_stop_gradient_leaves_values_unchanged(self, pair, gen):
        model, generator = pair
        features = model(torch.randn(2, 3, 16, 16, generator=gen)).features
        detached = generator.soft_targets(features, stop_grad_into_model=True)
        attached = generator.soft_targets(features, stop_grad_into_model=False)
        for a, b in zip(detached, attached):
            assert torch.equal(a, b)

    def test_temperature_softens_targets(self, f64, gen):
        model, sharp = build_model_and_generator((2, 4), num_classes=4, tau=1.0, seed=2)
        soft = LabelGenerator((2, 4), num_classes=4, tau=5.0)
        soft.load_state_dict(sharp.state_dict())
        features = model(torch.randn(6, 3, 8, 8, generator=gen) * 3).features
        h_sharp = entropy(sharp.soft_targets(features, True)[0]).mean()
        h_soft  = entropy(soft.soft_targets(features, True)[0]).mean()
        assert h_soft > h_sharp

    def test_feature_validation(self, pair, gen):
        model, generator = pair
        features = model(torch.randn(1, 3, 16, 16, generator=gen)).features
        with pytest.raises(DimensionError):
            generator(features[:2])
        with pytest.raises(DimensionError):
            generator([features[0], features[1], features[1]])
        with pytest.raises(DimensionError):
            generator([features[0][:, :, :4, :4], features[1], features[2]])
