"""Shared exception types."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""
