"""Shared exception taxonomy.

Two broad families drive CLI exit codes: validation problems (bad input,
bad references, bad config) exit 1; provider and I/O failures exit 2.
"""

from __future__ import annotations


class TmfError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TmfError):
    """Input, schema, or referential-integrity violation."""


class ProviderError(TmfError):
    """Remote provider or I/O failure."""


class MalformedId(ValidationError):
    """String does not match the technique-id grammar."""
