import math

import pytest
from pydantic import ValidationError

from emcel_const import ConfigurationError, ModelSpec
from emcel_measure import is_brownian, measure_of_interval
from emcel_models import DENSITIES, MODELS, build_density, build_model, list_models


@pytest.mark.parametrize("model_id", [m for m in MODELS if m != "custom"])
def test_builtin_models_build(model_id):
    spec = ModelSpec(id=model_id, sigma=2.0) if model_id == "scaled_brownian" \
        else ModelSpec(id=model_id)
    m, space = build_model(spec)
    assert m.space is space


def test_scaled_brownian():
    m, _ = build_model(ModelSpec(id="scaled_brownian", sigma=2.0))
    assert is_brownian(m) == pytest.approx(2.0)
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec(id="scaled_brownian"))


def test_sticky_defaults():
    m, _ = build_model(ModelSpec(id="sticky_brownian"))
    assert measure_of_interval(m, -0.5, 0.5) == pytest.approx(4.0)


def test_cantor_mass():
    m, _ = build_model(ModelSpec(id="cantor_slowed", mass=3.0))
    assert measure_of_interval(m, 0.0, 1.0) == pytest.approx(5.0)


def test_absorbing_halfline():
    _, space = build_model(ModelSpec(id="absorbing_halfline"))
    assert space.left == 0.0
    assert space.left_accessible
    assert math.isinf(space.right)


def test_custom_model():
    spec = ModelSpec(id="custom", left=0.0, right=1.0,
                     left_kind="inaccessible", density="constant",
                     density_params=[3.0], atoms=[(0.5, 1.0)],
                     cantor_mass=0.5, cantor_left=0.0, cantor_right=1.0)
    m, space = build_model(spec)
    assert not space.left_accessible
    assert space.right_accessible
    assert measure_of_interval(m, 0.25, 0.75) == pytest.approx(
        1.5 + 1.0 + 0.5 / 3.0)


def test_custom_needs_density():
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec(id="custom"))


def test_unknown_model():
    with pytest.raises(ConfigurationError):
        build_model(ModelSpec(id="ornstein"))


def test_negative_parameter():
    with pytest.raises(ValidationError):
        ModelSpec(id="sticky_brownian", rho=-1.0)


class TestDensities:

    def test_sde_eta_at_origin(self):
        density = build_density("sde_eta", [0.5, 1.0])
        assert density(0.0) == pytest.approx(2.0 / 0.25)
        assert density(-1.0) == pytest.approx(2.0 / 1.5 ** 2)
        assert 0.0 in density.breakpoints

    def test_sde_eta_parameters(self):
        with pytest.raises(ConfigurationError):
            build_density("sde_eta", [0.0, 1.0])
        with pytest.raises(ConfigurationError):
            build_density("sde_eta", [1.0, -1.0])

    def test_registry_values(self):
        assert build_density("constant", [1.5])(7.0) == 1.5
        assert build_density("rational_1px2", [2.0])(1.0) == pytest.approx(1.0)
        assert build_density("exp_quadratic", [3.0])(0.0) == pytest.approx(3.0)

    def test_wrong_parameter_count(self):
        with pytest.raises(ConfigurationError):
            build_density("rational_1px2", [1.0, 2.0])

    def test_unknown_density(self):
        with pytest.raises(ConfigurationError):
            build_density("lognormal", [1.0])


def test_list_models():
    text = list_models()
    positions = [text.index(name) for name in MODELS]
    assert positions == sorted(positions)
    for name in DENSITIES:
        assert name in text
    assert text == list_models()
