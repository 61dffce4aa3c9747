#!/usr/bin/env python3

from typing import List, Optional, Tuple
from pydantic import BaseModel, Field, field_validator, model_validator


class BoundaryKind:
    """  Possible classifications of an endpoint of the state space.
    """
    INACCESSIBLE = "inaccessible"
    ABSORBING = "absorbing"


class State:
    """  Possible states for a study task.
    """
    WAITING = "Waiting"
    STARTED = "Started"
    COMPLETED = "Completed"
    ERROR = "Error"


class ExitCode:
    """  Exit codes of the command line runner.
    """
    OK = 0
    VALIDATION = 2
    RUNTIME = 3


# default EMCEL root tolerance: h -> min(1e-10, 0.1 h^{3/2})
TOL_CAP = 1e-10
TOL_FACTOR = 0.1

QUAD_TOL = 1e-12
# scalar scale factors memoized per scheme
SCALE_CACHE_SIZE = 4096
# pieces kept when a self-similar part is flattened
MAX_PIECES = 1 << 21
# Gauss-Legendre orders compared by the vectorized density quadrature
GAUSS_ORDERS = (20, 40)
BOOTSTRAP_RESAMPLES = 200
AUDIT_GRID_SIZE = 4096
EXIT_TIME_VARIANCE = 2.0 / 3.0
EXIT_TIME_SECOND_MOMENT = 5.0 / 3.0


class EmcelError(Exception):
    """ Base class of all errors raised by the package.
    """


class ArgumentError(EmcelError, ValueError):
    """ An argument is outside the contract of the operation.
    """


class DomainError(EmcelError, ValueError):
    """ A point or an interval lies outside the state space.
    """


class ConfigurationError(EmcelError):
    """ A model or an experiment configuration is not usable.
    """


class BoundaryInconsistencyError(EmcelError):
    """ The scale-factor bracket cannot reach the time step inside the state space.
    """


class InternalConsistencyError(EmcelError):
    """ A simulated node left the state space beyond the rounding guard.
    """


class UnsupportedModelError(EmcelError):
    """ The requested study is only available for other models.
    """


class ModelSpec(BaseModel):
    """ Defines the model section of an experiment configuration.
    """
    id: str = Field(...,
                    title="Model identifier",
                    description="One of the ids printed by list-models")
    sigma: Optional[float] = Field(None, gt=0,
                                   title="Volatility of scaled_brownian")
    rho: Optional[float] = Field(None, gt=0,
                                 title="Atom weight of sticky_brownian")
    site: Optional[float] = Field(None,
                                  title="Atom position of sticky_brownian")
    mass: Optional[float] = Field(None, gt=0,
                                  title="Cantor mass of cantor_slowed")
    left: Optional[float] = Field(None, title="Left endpoint (custom)")
    right: Optional[float] = Field(None, title="Right endpoint (custom)")
    left_kind: Optional[str] = Field(None, title="Left boundary kind (custom)")
    right_kind: Optional[str] = Field(None,
                                      title="Right boundary kind (custom)")
    density: Optional[str] = Field(None,
                                   title="Density registry id (custom)")
    density_params: List[float] = Field(default_factory=list,
                                        title="Density parameters (custom)")
    atoms: List[Tuple[float, float]] = Field(default_factory=list,
                                             title="Atoms as (x, w) pairs")
    cantor_mass: Optional[float] = Field(None, gt=0,
                                         title="Optional Cantor component")
    cantor_left: float = Field(0.0, title="Left end of the Cantor support")
    cantor_right: float = Field(1.0, title="Right end of the Cantor support")


class ExperimentConfig(BaseModel):
    """ Defines a full experiment: the model and the run parameters.
    """
    model: ModelSpec
    y0: float = Field(0.0, title="Starting point")
    T: float = Field(1.0, gt=0, title="Horizon")
    h_list: List[float] = Field(...,
                                title="Time steps",
                                description="Strictly decreasing, in (0, h_max)")
    h_max: float = Field(0.5, gt=0, lt=1, title="Upper bound of the time steps")
    n_paths: int = Field(1000, ge=1, title="Number of paths per time step")
    p: float = Field(2.0, ge=1, title="Wasserstein order")
    seed: int = Field(0, ge=0, lt=2 ** 64, title="Master seed")
    output: str = Field("out", title="Output directory")
    reflect_at: Optional[float] = Field(None,
                                        title="Fold simulated paths at this level")
    reference_factor: int = Field(16, ge=2,
                                  title="h_ref = min(h_list) / reference_factor")
    k1: float = Field(1.0, gt=0, title="Condition (C) constant k1")
    k2: int = Field(1, ge=0, le=1, title="Condition (C) constant k2")
    lam: float = Field(0.5, gt=0, title="Condition (A) exponent")
    grid_size: int = Field(512, ge=2, title="Audit grid size")
    scale_h: Optional[float] = Field(None, gt=0,
                                     title="Time step of the scale command")
    y_grid: Optional[Tuple[float, float, int]] = Field(
        None, title="(start, stop, num) points of the scale command")

    @field_validator('h_list')
    @classmethod
    def check_h_list(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("h_list must not be empty")
        for a, b in zip(value, value[1:]):
            if not b < a:
                raise ValueError("h_list must be strictly decreasing")
        if value[-1] <= 0:
            raise ValueError("time steps must be positive")
        return value

    @field_validator('y_grid')
    @classmethod
    def check_y_grid(cls, value):
        if value is not None and value[2] < 1:
            raise ValueError("y_grid needs at least one point")
        return value

    @model_validator(mode='after')
    def check_h_max(self):
        if self.h_list[0] >= self.h_max:
            raise ValueError("every time step must be below h_max=%g" % self.h_max)
        if self.scale_h is not None and self.scale_h >= self.h_max:
            raise ValueError("scale h=%g must be below h_max=%g"
                             % (self.scale_h, self.h_max))
        return self
