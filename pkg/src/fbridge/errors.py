"""Exception types shared across the package."""


class FbridgeError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FbridgeError):
    """A run configuration or model setup is invalid or inconsistent."""


class NumericError(FbridgeError):
    """A numeric computation failed (non-finite values, singular matrices)."""


class KernelBuildError(NumericError):
    """A guiding kernel could not be assembled at some grid time."""


class ProposalFailure(NumericError):
    """A forward proposal produced non-finite states.

    Samplers catch this and treat the proposal as rejected.
    """
