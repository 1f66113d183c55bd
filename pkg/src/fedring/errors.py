"""Exception and warning types shared across the package.

Wire-level faults each get their own class so a peer can log the precise
failure mode instead of a generic parse error.
"""


class FedringError(Exception):
    """Base class for all package errors."""


# -- wire protocol ----------------------------------------------------------

class BadMagic(FedringError):
    """Frame does not start with the protocol magic bytes."""


class TruncatedFrame(FedringError):
    """Byte string ends before the frame it announces is complete."""


class UnknownMsgType(FedringError):
    """Message type tag is not one of the defined values."""


class LengthMismatch(FedringError):
    """Declared lengths disagree with the actual byte counts."""


class InvariantViolation(FedringError):
    """A value violates its type invariants (bad field combination)."""


class NonFiniteWeight(FedringError):
    """A weight tensor contains NaN or Inf."""


# -- aggregation ------------------------------------------------------------

class ShapeMismatch(FedringError):
    """Weight entry names or shapes differ where they must agree."""


class QuorumNotMet(FedringError):
    """Fewer submissions than the configured minimum number of clients."""


class ZeroSampleCount(FedringError):
    """Sample-weighted aggregation received a submission with count 0."""


# -- ml core ----------------------------------------------------------------

class ShapeError(FedringError):
    """Tensor shape is incompatible with the model configuration."""


class NonPositiveSigma(FedringError):
    """Standard deviation input must be strictly positive."""


# -- preprocessing ----------------------------------------------------------

class DegenerateRange(FedringError):
    """Intensity clipping range has hu_min >= hu_max."""


class EmptyVolume(FedringError):
    """Volume has no voxels or non-positive spacing."""


class NoForegroundVoxels(UserWarning):
    """Patch sampling found no labeled foreground; patches fall back to
    background centers.  A warning, not an error: it usually signals a
    data-generation bug upstream rather than a reason to abort training."""


# -- server / client --------------------------------------------------------

class HookDataUnreadable(FedringError):
    """Server validation hook could not load its held-out dataset."""


class AuthFailure(FedringError):
    """Server rejected the session token."""


class DuplicateSubmission(FedringError):
    """Client pushed twice in the same round."""


class ConnectionLost(FedringError):
    """Transport failed after exhausting reconnect attempts."""
