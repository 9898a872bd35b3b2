import numpy as np
import pytest
from numpy.testing import assert_array_equal

from shrinknet.gradcheck import check_parameter_gradients
from shrinknet.layers import ThresholdResult, softmax_cross_entropy, threshold_override
from shrinknet.models import (
    ModelConfig,
    ModelKind,
    ResidualShrinkageBlock,
    build_cnn_baseline,
    build_drsn,
    count_parameters,
)
from shrinknet.options import Precision, ShrinkageMode
from shrinknet.tensor import Tensor
from shrinknet.test_util import toy_batch, toy_config, warm_up_batch_norm
from shrinknet.util import CheckpointShapeError, ConfigurationError, DimensionError


def test_output_shape_for_two_stage_network() -> None:
    config = ModelConfig(stage_channels=(4, 8), blocks_per_stage=(2, 2), input_width=1200)
    model = build_drsn(config)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 1200)))
    assert model.forward(x).shape == (2, 8)
    assert build_cnn_baseline(config).forward(x).shape == (2, 8)


def test_same_seed_gives_identical_parameters() -> None:
    first = build_drsn(toy_config()).state_dict()
    second = build_drsn(toy_config()).state_dict()
    assert list(first) == list(second)
    for name in first:
        assert first[name].tobytes() == second[name].tobytes()
    other = build_drsn(toy_config(seed=2)).state_dict()
    assert not np.array_equal(first["stem.weight"], other["stem.weight"])


@pytest.mark.parametrize(
    "config",
    [
        ModelConfig(),
        ModelConfig(mode=ShrinkageMode.cs),
        ModelConfig(fc_hidden=3, kernel_width=5),
        toy_config(),
        toy_config(ShrinkageMode.cs, stage_channels=(3, 3), blocks_per_stage=(1, 3)),
    ],
)
def test_parameter_count_matches_closed_form(config) -> None:
    drsn = build_drsn(config)
    cnn = build_cnn_baseline(config)
    assert drsn.parameter_count() == count_parameters(config)
    assert cnn.parameter_count() == count_parameters(config, shrinkage=False)
    subnet_params = sum(
        p.size for name, p in drsn.named_parameters() if ".shrink." in name
    )
    assert cnn.parameter_count() == drsn.parameter_count() - subnet_params


def test_default_architecture() -> None:
    model = build_drsn(ModelConfig())
    assert model.stem.weight.shape == (4, 8, 3)
    assert [b.conv2.weight.shape[0] for b in model.blocks] == [4, 4, 8, 8, 16, 16]
    assert [b.conv1.stride for b in model.blocks] == [2, 1, 2, 1, 2, 1]
    assert ModelConfig().stage_widths() == [1200, 600, 300, 150]


def test_cnn_and_drsn_share_weights() -> None:
    drsn = dict(build_drsn(toy_config()).named_parameters())
    cnn = dict(build_cnn_baseline(toy_config()).named_parameters())
    assert set(cnn) < set(drsn)
    for name, param in cnn.items():
        assert_array_equal(param.values, drsn[name].values)


def test_zero_main_path_passes_the_shortcut_through() -> None:
    rng = np.random.default_rng(3)
    block = ResidualShrinkageBlock(
        3, 3, 1, 3, ShrinkageMode.cw, None, rng, np.random.default_rng(4)
    )
    for conv in (block.conv1, block.conv2):
        conv.weight.assign(np.zeros(conv.weight.shape))
    x = rng.normal(size=(2, 3, 10))
    assert_array_equal(block.forward(Tensor(x)).values, x)


@pytest.mark.demo
@pytest.mark.parametrize("mode", list(ShrinkageMode))
def test_zero_threshold_reproduces_the_cnn(mode) -> None:
    config = ModelConfig(stage_channels=(4, 8), blocks_per_stage=(2, 2), input_width=64, mode=mode)
    x = Tensor(np.random.default_rng(5).normal(size=(3, 8, 64)))
    with threshold_override(0.0):
        drsn_logits = build_drsn(config).forward(x).values
    cnn_logits = build_cnn_baseline(config).forward(x).values
    assert np.max(np.abs(drsn_logits - cnn_logits)) <= 1e-12
    assert not np.allclose(build_drsn(config).forward(x).values, cnn_logits)


@pytest.mark.parametrize("mode,width", [(ShrinkageMode.cs, 1), (ShrinkageMode.cw, None)])
def test_thresholds_per_block(mode, width) -> None:
    config = toy_config(mode)
    model = build_drsn(config)
    x, _ = toy_batch(config, batch=5)
    thresholds: list = []
    model.forward(x, thresholds)
    assert len(thresholds) == len(model.blocks)
    for result, block in zip(thresholds, model.blocks):
        assert isinstance(result, ThresholdResult)
        channels = block.conv2.weight.shape[0]
        assert result.tau.shape == (5, width or channels)
        assert len(np.unique(result.tau.values, axis=0)) == 5


def test_cnn_reports_no_thresholds() -> None:
    config = toy_config()
    thresholds: list = []
    build_cnn_baseline(config).forward(toy_batch(config)[0], thresholds)
    assert thresholds == []


@pytest.mark.parametrize(
    "field,kw",
    [
        ("blocks_per_stage", dict(blocks_per_stage=(2,))),
        ("stage_channels", dict(stage_channels=(4, 0), blocks_per_stage=(1, 1))),
        ("input_width", dict(input_width=0)),
        ("num_classes", dict(num_classes=0)),
        ("fc_hidden", dict(fc_hidden=0)),
    ],
)
def test_invalid_config_names_the_field(field, kw) -> None:
    with pytest.raises(ConfigurationError) as exc_info:
        build_drsn(ModelConfig(**kw))
    assert exc_info.value.field == field


def test_forward_rejects_wrong_input_shape() -> None:
    model = build_drsn(toy_config())
    with pytest.raises(DimensionError, match=r"\[batch, 2, 16\]"):
        model.forward(Tensor(np.zeros((2, 3, 16))))


def test_forward_is_deterministic() -> None:
    config = toy_config()
    model = build_drsn(config).eval()
    x, _ = toy_batch(config)
    assert model.forward(x).values.tobytes() == model.forward(x).values.tobytes()


def test_state_dict_round_trip() -> None:
    config = toy_config()
    source = build_drsn(config)
    x, _ = toy_batch(config)
    warm_up_batch_norm(source, x)
    target = build_drsn(toy_config(seed=9)).eval()
    target.load_state_dict(source.state_dict())
    assert target.forward(x).values.tobytes() == source.forward(x).values.tobytes()
    assert "blocks.0.bn1.running_var" in source.state_dict()


def test_load_state_dict_rejects_mismatches() -> None:
    model = build_drsn(toy_config())
    state = model.state_dict()
    state["stem.weight"] = np.zeros((1, 1, 1))
    with pytest.raises(CheckpointShapeError, match="stem.weight"):
        model.load_state_dict(state)
    state = model.state_dict()
    del state["fc.bias"]
    with pytest.raises(CheckpointShapeError, match="fc.bias"):
        model.load_state_dict(state)


def test_float32_models() -> None:
    config = toy_config(precision=Precision.float32)
    model = build_drsn(config)
    assert all(p.dtype == np.float32 for p in model.parameters())
    assert model.forward(toy_batch(config)[0]).dtype == np.float32
    assert model.kind is ModelKind.drsn


@pytest.mark.parametrize("mode", list(ShrinkageMode))
def test_end_to_end_parameter_gradients(mode) -> None:
    config = toy_config(mode)
    model = build_drsn(config)
    x, labels = toy_batch(config, batch=4)
    warm_up_batch_norm(model, x)
    errors = check_parameter_gradients(
        dict(model.named_parameters()),
        lambda: softmax_cross_entropy(model.forward(x), labels),
    )
    assert set(errors) == {name for name, _ in model.named_parameters()}
    worst = max(errors, key=errors.__getitem__)
    assert errors[worst] < 1e-4, worst
