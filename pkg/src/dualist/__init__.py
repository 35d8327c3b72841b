"""Stochastic simulator of pilot-wave particles coupled to random phase events."""
from . import config, dynamics, ensemble, grw, macro, quantum, ste
from .errors import (ConfigError, DomainError, DualistError, InstabilityError, ModelError, NodeError,
                     NonFiniteError, QuadratureError, SamplerError)

__version__ = "0.1.0"
