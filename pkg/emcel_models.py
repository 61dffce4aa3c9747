#!/usr/bin/env python3

import logging
logger = logging.getLogger(__name__)
import math
from typing import Callable, Dict, List, Tuple

import numpy as np

from emcel_const import ConfigurationError, ModelSpec
from emcel_measure import Density, SelfSimilarMeasure, SpeedMeasure, StateSpace


def _constant(value: float) -> Density:
    return Density.uniform(value)


def _rational_1px2(scale: float) -> Density:
    return Density(lambda x: scale / (1.0 + x * x), vectorized=True)


def _sde_eta(c0: float, c1: float) -> Density:
    """ Speed density 2 / eta^2 of dY = eta(Y) dW with eta = c0 + c1 |x|.
    """
    if c0 <= 0 or c1 < 0:
        raise ConfigurationError("sde_eta needs c0 > 0 and c1 >= 0")
    return Density(lambda x: 2.0 / (c0 + c1 * np.abs(x)) ** 2,
                   breakpoints=[0.0], vectorized=True)


def _exp_quadratic(scale: float) -> Density:
    return Density(lambda x: scale * np.exp(-x * x), vectorized=True)


# registry id -> (factory, parameter names, description)
DENSITIES: Dict[str, Tuple[Callable[..., Density], List[str], str]] = {
    "constant": (_constant, ["value"], "value"),
    "rational_1px2": (_rational_1px2, ["scale"], "scale / (1 + x^2)"),
    "sde_eta": (_sde_eta, ["c0", "c1"], "2 / (c0 + c1 |x|)^2"),
    "exp_quadratic": (_exp_quadratic, ["scale"], "scale exp(-x^2)"),
}

# model id -> parameter schema, in display order
MODELS: Dict[str, str] = {
    "brownian": "no parameters; m = 2 dx on the real line",
    "scaled_brownian": "sigma > 0; m = 2 / sigma^2 dx on the real line",
    "sticky_brownian": "rho > 0 (default 2), site (default 0); "
                       "m = 2 dx + rho delta_site",
    "cantor_slowed": "mass > 0 (default 1); m = 2 dx + mass Cantor[0, 1]",
    "absorbing_halfline": "no parameters; m = 2 dx on [0, inf), "
                          "absorbing at 0",
    "custom": "left, right, left_kind, right_kind, density, "
              "density_params, atoms, cantor_mass, cantor_left, "
              "cantor_right",
}


def build_density(name: str, params: List[float]) -> Density:
    """ Instantiate a density of the registry.

    :param name: the registry id
    :param params: the positional parameters
    """
    if name not in DENSITIES:
        raise ConfigurationError("unknown density %s (known: %s)"
                                 % (name, ", ".join(DENSITIES)))
    factory, names, _ = DENSITIES[name]
    if len(params) != len(names):
        raise ConfigurationError("density %s expects parameters %s"
                                 % (name, ", ".join(names)))
    return factory(*params)


def build_model(spec: ModelSpec) -> Tuple[SpeedMeasure, StateSpace]:
    """ Build the speed measure and the state space of a model.

    :return: (m, I)

    :param spec: the model section of a configuration
    """
    model_id = spec.id
    if model_id == "brownian":
        space = StateSpace()
        m = SpeedMeasure(space, Density.uniform(2.0))
    elif model_id == "scaled_brownian":
        if spec.sigma is None:
            raise ConfigurationError("scaled_brownian needs sigma")
        space = StateSpace()
        m = SpeedMeasure(space, Density.uniform(2.0 / spec.sigma ** 2))
    elif model_id == "sticky_brownian":
        rho = spec.rho if spec.rho is not None else 2.0
        site = spec.site if spec.site is not None else 0.0
        space = StateSpace()
        m = SpeedMeasure(space, Density.uniform(2.0), atoms=[(site, rho)])
    elif model_id == "cantor_slowed":
        mass = spec.mass if spec.mass is not None else 1.0
        space = StateSpace()
        m = SpeedMeasure(space, Density.uniform(2.0),
                         singular_parts=[SelfSimilarMeasure.cantor(0.0, 1.0,
                                                                   mass)])
    elif model_id == "absorbing_halfline":
        space = StateSpace(0.0, math.inf)
        m = SpeedMeasure(space, Density.uniform(2.0))
    elif model_id == "custom":
        if spec.density is None:
            raise ConfigurationError("custom model needs a density id")
        space = StateSpace(spec.left if spec.left is not None else -math.inf,
                           spec.right if spec.right is not None else math.inf,
                           spec.left_kind, spec.right_kind)
        parts = []
        if spec.cantor_mass is not None:
            parts.append(SelfSimilarMeasure.cantor(spec.cantor_left,
                                                   spec.cantor_right,
                                                   spec.cantor_mass))
        m = SpeedMeasure(space,
                         build_density(spec.density, spec.density_params),
                         atoms=spec.atoms, singular_parts=parts)
    else:
        raise ConfigurationError("unknown model %s (known: %s)"
                                 % (model_id, ", ".join(MODELS)))
    logger.debug("model %s: %s" % (model_id, m))
    return m, space


def list_models() -> str:
    """ The model ids and density ids with their parameters, in a fixed order.
    """
    lines = ["models:"]
    for name, schema in MODELS.items():
        lines.append("  %-20s %s" % (name, schema))
    lines.append("densities (custom):")
    for name, (_, params, formula) in DENSITIES.items():
        lines.append("  %-20s (%s) %s" % (name, ", ".join(params), formula))
    return "\n".join(lines)
