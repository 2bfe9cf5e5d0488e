"""Exception hierarchy shared by every layer of the codec."""

from __future__ import annotations


class StegoError(Exception):
    """Base class for all codec errors."""


class ContextOverflowError(StegoError):
    """The conditioning context is longer than the provider accepts."""


class DegenerateModelError(StegoError):
    """Training parameters cannot produce a usable model."""


class ModelFormatError(StegoError):
    """A serialized model or codebook container is malformed."""


class TransportError(StegoError):
    """The remote inference endpoint could not be reached."""


class ProtocolError(StegoError):
    """The remote inference endpoint returned a malformed response."""


class DistributionValidationError(StegoError):
    """A distribution violates the normalization invariant."""


class RankRangeError(StegoError, ValueError):
    """A rank does not index into the vocabulary."""


class SymbolRangeError(StegoError, ValueError):
    """A beta-bit symbol does not fit in beta bits."""


class ParameterError(StegoError, ValueError):
    """An invalid codec or session parameter."""


class DesyncError(StegoError):
    """Sender and receiver disagree on model, context, key or configuration."""


class CapacityExhaustedError(StegoError):
    """The generation cap was reached with payload symbols still pending."""
