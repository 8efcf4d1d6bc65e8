"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data/schema problems exit 3,
numeric failures exit 4, usage problems exit 2.
"""


class GeofieldError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GeofieldError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(GeofieldError):
    """An API precondition was violated (e.g. non-scalar loss in backward)."""


class ConfigError(GeofieldError):
    """A configuration value is invalid or inconsistent."""


class DomainError(GeofieldError):
    """A value lies outside its documented domain (coordinates, ranges)."""


class SchemaError(GeofieldError):
    """Data does not match the expected file or record schema."""


class RegistryError(GeofieldError):
    """An unknown modality or task id was requested."""


class RoutingError(GeofieldError):
    """A prediction row could not be routed to a modality slice."""


class ProtocolError(GeofieldError):
    """An evaluation protocol's preconditions are not met."""


class CheckpointError(GeofieldError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class NumericError(GeofieldError):
    """A non-finite value appeared where a finite one is required."""
