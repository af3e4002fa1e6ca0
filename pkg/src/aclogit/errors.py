"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ContractError(ValueError):
    """An input violates a structural precondition (e.g. not normalized)."""


class ConfigurationError(ValueError):
    """A game or experiment is configured inconsistently."""
