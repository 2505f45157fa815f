"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range; names the field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class PlacementError(ValueError):
    """A pose was requested outside the lumen."""


class GuidanceUnavailableError(RuntimeError):
    """Preoperative guidance was queried with no buffered priors."""


class AdvisorError(RuntimeError):
    """The external advisor failed to produce a usable plan."""


class DegenerateInputError(ValueError):
    """Statistical input has no usable variance."""
