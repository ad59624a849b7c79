"""Exception types shared across the simulator."""


class FedsimError(Exception):
    """Base class for all simulator errors."""


class DimensionError(FedsimError):
    """Shape or length mismatch between tensors, masks or payloads."""


class NumericsError(FedsimError):
    """Non-finite value encountered; message carries round/client provenance."""


class GateError(FedsimError):
    """Invalid gate parameterization (e.g. implied threshold not positive)."""


class FormatError(FedsimError):
    """Malformed binary input (bad magic number, truncated file)."""


class ConsistencyError(FedsimError):
    """Inputs that parse individually but disagree with each other."""


class PartitionError(FedsimError):
    """Federated partitioning could not satisfy its constraints."""


class ProtocolError(FedsimError):
    """Wire message violates the expected layout or payload arithmetic."""


class ConfigError(FedsimError):
    """Experiment configuration failed schema validation."""
