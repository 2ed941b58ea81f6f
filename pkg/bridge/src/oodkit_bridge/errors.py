"""Bridge-side failure types.

These deliberately do not reuse oodkit's exception hierarchy: a tap that
cannot be resolved is a modelling mistake on the caller's side, not a
toolkit validation failure, and the two should not be caught by the same
handler.
"""


class BridgeError(Exception):
    """Base class for everything raised by the bridge."""


class UnresolvableTap(BridgeError):
    """The requested layer name does not resolve to exactly one activation site."""


class GeometryMismatch(BridgeError):
    """The bridge's patch walk disagrees with the toolkit's grid for the same geometry."""
