import math
import struct
import pytest
import torch
import torch.nn as nn
from constants import BACKBONE_WIDTHS, CHECKPOINT_MAGIC
from modules import MultiExitNet, LabelGenerator, build_model_and_generator, ensemble_output, init_params
from utils import tensor_core as tc
from utils.errors import DimensionError, FormatError, InputError
from utils.io_utils import has_prefix, load_checkpoint, load_module_state, module_state, save_checkpoint


@pytest.fixture
def desk_model():
    model, _ = build_model_and_generator(BACKBONE_WIDTHS["desk-cnn-4"], num_classes=10)
    return model


class TestMultiExitNet:
    def test_output_shapes(self, desk_model):
        out = desk_model(torch.randn(2, 3, 32, 32))
        assert len(out.exit_logits) == 3
        assert all(s.shape == (2, 10) for s in out.all_logits)
        assert [tuple(f.shape) for f in out.features] == [
            (2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)
        ]

    def test_without_exits(self, desk_model):
        out = desk_model(torch.randn(2, 3, 32, 32), with_exits=False)
        assert out.exit_logits == []
        assert desk_model.exit_head_calls == 0
        desk_model(torch.randn(2, 3, 32, 32))
        assert desk_model.exit_head_calls == 1

    def test_final_logits_do_not_depend_on_exits(self, desk_model):
        x = torch.randn(2, 3, 32, 32)
        with torch.no_grad():
            a = desk_model(x).final_logits
            b = desk_model(x, with_exits=False).final_logits
        assert torch.equal(a, b)

    def test_bad_input_channels(self, desk_model):
        with pytest.raises(DimensionError):
            desk_model(torch.randn(1, 1, 32, 32))

    def test_indivisible_spatial_size(self, desk_model):
        with pytest.raises(DimensionError):
            desk_model(torch.randn(1, 3, 30, 30))

    @pytest.mark.parametrize("widths", [(16, ), (32, 16)])
    def test_bad_widths(self, widths):
        with pytest.raises(DimensionError):
            MultiExitNet(widths, num_classes=3)

    def test_strip_exits(self, desk_model):
        x = torch.randn(2, 3, 32, 32)
        stripped = desk_model.strip_exits()
        assert len(stripped.exit_heads) == 0
        assert stripped.num_params() < desk_model.num_params()
        with torch.no_grad():
            assert torch.equal(stripped(x, with_exits=False).final_logits, desk_model(x).final_logits)

    def test_init_is_seeded(self):
        a = init_params(MultiExitNet((2, 4), 3), seed=7)
        b = init_params(MultiExitNet((2, 4), 3), seed=7)
        c = init_params(MultiExitNet((2, 4), 3), seed=8)
        for (_, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
            assert torch.equal(pa, pb)
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_init_scale_follows_fan_in(self):
        conv = init_params(nn.Conv2d(64, 64, 3), seed=0)
        expected = math.sqrt(2.0 / (3 * 3 * 64))
        assert abs(conv.weight.std().item() - expected) <= 0.2 * expected
        assert torch.count_nonzero(conv.bias) == 0

    def test_zero_final_layers_give_uniform_softmax(self, desk_model):
        with torch.no_grad():
            for fc in [desk_model.final_fc] + [head.fc for head in desk_model.exit_heads]:
                fc.weight.zero_()
                fc.bias.zero_()
            out = desk_model(torch.zeros(2, 3, 32, 32))
        for logits in out.all_logits:
            assert torch.count_nonzero(logits) == 0
            assert torch.allclose(torch.softmax(logits, dim=-1), torch.full((2, 10), 0.1))

    def test_same_seed_same_logits(self):
        x = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        a, _ = build_model_and_generator((2, 4, 8), num_classes=5, seed=7)
        b, _ = build_model_and_generator((2, 4, 8), num_classes=5, seed=7)
        with torch.no_grad():
            for la, lb in zip(a(x).all_logits, b(x).all_logits):
                assert torch.equal(la, lb)


class TestEnsemble:
    def test_uniform_probability_average(self, f64, gen):
        logits = [torch.randn(5, 4, generator=gen) for _ in range(3)]
        expected = sum(torch.softmax(l, dim=-1) for l in logits) / 3
        assert torch.allclose(ensemble_output(logits), expected, atol=1e-12)

    def test_single_output(self, f64, gen):
        logits = torch.randn(5, 4, generator=gen)
        assert torch.allclose(ensemble_output([logits]), torch.softmax(logits, dim=-1), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ensemble_output([torch.randn(2, 3), torch.randn(2, 4)])
        with pytest.raises(DimensionError):
            ensemble_output([])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model, generator = build_model_and_generator((2, 4), num_classes=3, seed=0)
        path = str(tmp_path / "ckpt.mdck")
        save_checkpoint({**module_state(model, "model"), **module_state(generator, "generator")}, path)

        tensors = load_checkpoint(path)
        assert has_prefix(tensors, "model") and has_prefix(tensors, "generator")
        other_model, other_generator = build_model_and_generator((2, 4), num_classes=3, seed=5)
        load_module_state(other_model, tensors, "model")
        load_module_state(other_generator, tensors, "generator")
        for a, b in zip(model.parameters(), other_model.parameters()):
            assert torch.equal(a, b)
        for a, b in zip(generator.parameters(), other_generator.parameters()):
            assert torch.equal(a, b)

    def test_layout(self, tmp_path):
        path = str(tmp_path / "one.mdck")
        save_checkpoint({"model.w": torch.tensor([[1.0, 2.0, 3.0]])}, path)
        raw = open(path, "rb").read()
        expected = (
            CHECKPOINT_MAGIC
            + struct.pack("<I", 7) + b"model.w"
            + struct.pack("<I", 2) + struct.pack("<2I", 1, 3)
            + struct.pack("<3f", 1.0, 2.0, 3.0)
        )
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mdck"
        path.write_bytes(b"NOPE!" + b"\x00" * 8)
        with pytest.raises(FormatError) as e:
            load_checkpoint(str(path))
        assert e.value.offset == 0

    def test_truncated(self, tmp_path):
        path = str(tmp_path / "trunc.mdck")
        save_checkpoint({"model.w": torch.ones(4)}, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-2])
        header = len(CHECKPOINT_MAGIC) + 4 + len("model.w") + 4 + 4
        with pytest.raises(FormatError) as e:
            load_checkpoint(path)
        assert e.value.offset == header

    def test_undecodable_name(self, tmp_path):
        path = tmp_path / "name.mdck"
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 2) + b"\xff\xfe")
        with pytest.raises(FormatError) as e:
            load_checkpoint(str(path))
        assert e.value.offset == len(CHECKPOINT_MAGIC) + 4

    def test_shape_mismatch(self, tmp_path):
        model, _ = build_model_and_generator((2, 4), num_classes=3)
        bigger, _ = build_model_and_generator((4, 8), num_classes=3)
        path = str(tmp_path / "big.mdck")
        save_checkpoint(module_state(bigger, "model"), path)
        with pytest.raises(DimensionError):
            load_module_state(model, load_checkpoint(path), "model")

    def test_missing_entries(self, tmp_path):
        _, generator = build_model_and_generator((2, 4), num_classes=3)
        model, _ = build_model_and_generator((2, 4), num_classes=3)
        path = str(tmp_path / "model_only.mdck")
        save_checkpoint(module_state(model, "model"), path)
        with pytest.raises(InputError):
            load_module_state(generator, load_checkpoint(path), "generator")
