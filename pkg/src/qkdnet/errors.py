"""Exception types shared across the simulator."""


class QkdNetError(Exception):
    """Base class for all simulator errors."""


# --- broker ---------------------------------------------------------------

class DuplicateName(QkdNetError):
    """Service name already registered under a different token."""


class InvalidToken(QkdNetError):
    """Known service presented the wrong token."""


class Unauthenticated(QkdNetError):
    """Caller is not a registered service."""


class UnknownService(QkdNetError):
    """Unicast destination is not registered."""


class BackPressure(QkdNetError):
    """A subscriber queue hit its configured capacity cap."""


# --- quantum links --------------------------------------------------------

class UnknownLink(QkdNetError):
    """No link with that id."""


class NotEndpoint(QkdNetError):
    """Caller does not terminate the link it addressed."""


class EmptyGroup(QkdNetError):
    """Switch group has no receivers to rotate over."""


# --- key store / KMM ------------------------------------------------------

class StoreFull(QkdNetError):
    """Key store pool is at capacity; the block was rejected."""


class InsufficientKeyMaterial(QkdNetError):
    """Not enough key material to satisfy the request (503 on the wire)."""


class UnknownKeyId(QkdNetError):
    """Key id was never pinned here, or was already delivered."""


class ExpiredKey(QkdNetError):
    """Key lifetime elapsed; the material has been destroyed."""


class InvalidSize(QkdNetError):
    """Requested key size is not a positive multiple of 8 bits."""


class UnknownSlave(QkdNetError):
    """No key manager serves the named application entity."""


class AdmissionRejected(QkdNetError):
    """Reservation would exceed the admissible fraction of link rate."""


class IllegalTransition(QkdNetError):
    """Key state machine was asked for a transition outside the legal set."""


# --- controller -----------------------------------------------------------

class UnknownNode(QkdNetError):
    """Node id is not part of the discovered topology."""


class NoPath(QkdNetError):
    """No usable path between the requested endpoints."""


# --- applications ---------------------------------------------------------

class KeyMismatch(QkdNetError):
    """Peers ended up holding different material for the same key id."""


# --- scenarios ------------------------------------------------------------

class ScenarioError(QkdNetError):
    """Base for scenario file problems."""


class ParseError(ScenarioError):
    """Scenario file is syntactically or structurally malformed."""


class DanglingReference(ScenarioError):
    """Scenario references a node, link, or SAE that is not defined."""
