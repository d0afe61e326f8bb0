import numpy as np
import pytest

from hgrnet.blocks import (
    ASPP,
    STREAM_MIN_INPUT,
    ASPPSpec,
    ResGroup,
    ResidualUnit,
    ResidualUnitSpec,
    StreamBody,
    aspp_parameter_count,
)
from hgrnet.errors import ConfigurationError, ShapeError
from hgrnet.models import SegmentationNet
from hgrnet.tensor import Tensor


class TestSegmentationShapes:
    """Every row of the segmentation trunk at the nominal 320 x 320 input."""

    @pytest.fixture(scope="class")
    def rows(self):
        return dict(SegmentationNet(320).trace_shapes())

    @pytest.mark.parametrize(
        "row,shape",
        [
            ("conv", (1, 320, 320, 16)),
            ("resgroup1", (1, 320, 320, 32)),
            ("resgroup2", (1, 160, 160, 64)),
            ("resgroup3", (1, 80, 80, 128)),
            ("aspp", (1, 80, 80, 160)),
            ("score", (1, 80, 80, 1)),
            ("upsample", (1, 320, 320, 1)),
        ],
    )
    def test_row(self, rows, row, shape):
        assert rows[row] == shape

    def test_convolution_census(self):
        net = SegmentationNet(320)
        assert net.convolution_count == 28
        assert net.shortcut_count == 3
        assert SegmentationNet(320, projection_shortcuts="all").shortcut_count == 9

    def test_without_aspp_scores_resgroup3(self):
        rows = dict(SegmentationNet(320, use_aspp=False).trace_shapes())
        assert "aspp" not in rows
        assert rows["score"] == (1, 80, 80, 1)


class TestStreamShapes:
    @pytest.mark.parametrize("channels", [1, 3])
    def test_rows_at_320(self, rng, channels):
        rows = StreamBody(channels, rng).trace_shapes((1, 320, 320, channels))
        assert rows == [
            ("conv1", (1, 318, 318, 16)),
            ("pool1", (1, 106, 106, 16)),
            ("conv2", (1, 104, 104, 32)),
            ("pool2", (1, 34, 34, 32)),
            ("conv3", (1, 32, 32, 64)),
            ("pool3", (1, 10, 10, 64)),
            ("conv4", (1, 8, 8, 128)),
            ("global_avg_pool", (1, 128)),
            ("fc1", (1, 64)),
            ("fc2", (1, 64)),
        ]

    def test_forward_matches_trace(self, rng):
        body = StreamBody(3, rng).eval()
        assert body(Tensor(rng.uniform(size=(2, 108, 108, 3)))).shape == (2, 64)
        assert body.output_shape((2, 108, 108, 3)) == (2, 64)

    def test_minimum_input(self, rng):
        body = StreamBody(1, rng)
        assert body.trace_shapes((1, STREAM_MIN_INPUT, STREAM_MIN_INPUT, 1))[6] == ("conv4", (1, 1, 1, 128))
        with pytest.raises(ConfigurationError):
            body.trace_shapes((1, STREAM_MIN_INPUT - 1, STREAM_MIN_INPUT - 1, 1))

    def test_channel_count_checked(self, rng):
        with pytest.raises(ConfigurationError):
            StreamBody(2, rng)
        with pytest.raises(ShapeError):
            StreamBody(1, rng)(Tensor(np.zeros((1, 108, 108, 3))))


class TestResidualUnits:
    @pytest.mark.parametrize(
        "spec,size,expected",
        [
            (ResidualUnitSpec(32, 8, 32, 1), 40, (1, 40, 40, 32)),
            (ResidualUnitSpec(32, 16, 64, 2), 40, (1, 20, 20, 64)),
            (ResidualUnitSpec(64, 32, 128, 2), 20, (1, 10, 10, 128)),
        ],
    )
    def test_unit_shapes(self, rng, spec, size, expected):
        unit = ResidualUnit(spec, rng)
        out = unit(Tensor(rng.normal(size=(1, size, size, spec.in_channels))))
        assert out.shape == expected == unit.output_shape((1, size, size, spec.in_channels))

    def test_projection_only_when_shape_changes(self, rng):
        assert ResidualUnit(ResidualUnitSpec(32, 8, 32, 1), rng).shortcut is None
        assert ResidualUnit(ResidualUnitSpec(16, 8, 32, 1), rng).shortcut is not None
        assert ResidualUnit(ResidualUnitSpec(32, 8, 32, 1), rng, projection=True).shortcut is not None

    def test_shape_change_requires_projection(self, rng):
        with pytest.raises(ConfigurationError):
            ResidualUnit(ResidualUnitSpec(16, 8, 32, 1), rng, projection=False)

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            ResidualUnitSpec(32, 8, 24, 1)
        with pytest.raises(ConfigurationError):
            ResidualUnitSpec(32, 8, 32, 3)

    def test_group_has_three_units(self, rng):
        group = ResGroup(ResidualUnitSpec(16, 8, 32, 1), rng)
        assert len(group.units()) == 3
        assert group.output_shape((1, 24, 24, 16)) == (1, 24, 24, 32)
        with pytest.raises(ConfigurationError):
            ResGroup(ResidualUnitSpec(16, 8, 32, 1), rng, unit_count=2)


class TestASPP:
    def test_closed_form_count(self):
        assert aspp_parameter_count(128) == 32 * 128 + 4 * 32 * 9 * 128 + 5 * 32 == 151712

    def test_module_count_matches_closed_form(self, rng):
        aspp = ASPP(128, rng)
        assert sum(v.size for v in aspp.variables()) == aspp_parameter_count(128)

    def test_concatenates_five_branches(self, rng):
        aspp = ASPP(8, rng, ASPPSpec(filters=4))
        out = aspp(Tensor(rng.normal(size=(1, 20, 20, 8))))
        assert out.shape == (1, 20, 20, 20)
        assert [b.dilation for b in aspp.branches()] == [1, 3, 6, 12, 18]
        assert np.all(out.data >= 0.0)

    def test_rates_validated(self):
        with pytest.raises(ConfigurationError):
            ASPPSpec(rates=(3, 6, 12, 18, 24))
