"""Exception hierarchy shared by the simulator modules."""


class DualistError(Exception):
    pass


class ModelError(DualistError, ValueError):
    """Invalid model specification (unsupported kind, empty selection, ...)."""


class DomainError(DualistError, ValueError):
    """A configuration point lies outside the system's domain."""


class QuadratureError(DualistError):
    """Quadrature grid too coarse to reproduce orthonormality."""


class NonFiniteError(DualistError, FloatingPointError):
    """Non-finite value produced during evaluation or integration.

    ``state`` carries the last valid state when one is available.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class NodeError(DualistError):
    """The STE normaliser vanishes: the particle sits on a common node."""


class SamplerError(DualistError):
    """Rejection sampler exceeded its trial cap."""


class InstabilityError(DualistError):
    """Fokker-Planck integration produced negative mass; reduce dt."""


class ConfigError(DualistError, ValueError):
    """Configuration document failed to parse or validate.

    ``errors`` is the exhaustive list of field-level messages.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
