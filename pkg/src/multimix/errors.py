"""Shared exception types.

Plain ``ValueError`` covers ordinary argument validation; the subclasses below
exist so callers (and the CLI exit-code mapping) can tell capacity and parse
failures apart from the rest.
"""


class CapacityError(ValueError):
    """A requested computation exceeds a documented size cap."""


class ParseError(ValueError):
    """A text input (config, model file, distribution file) is malformed."""
