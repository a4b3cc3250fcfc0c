"""Exception hierarchy shared by every component."""


class WeipsError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"


class InvalidSlotError(WeipsError):
    kind = "invalid-slot"


class NumericOverflowError(WeipsError):
    kind = "numeric-overflow"


class RoutingError(WeipsError):
    kind = "routing"


class AppendFailedError(WeipsError):
    kind = "append-failed"


class PartitionError(WeipsError):
    kind = "no-such-partition"


class OutOfRangeError(WeipsError):
    kind = "out-of-range"


class CheckpointError(WeipsError):
    kind = "checkpoint-failed"


class CorruptCheckpointError(CheckpointError):
    kind = "corrupt-checkpoint"


class IncompleteCheckpointError(CheckpointError):
    kind = "incomplete-set"


class UnavailableError(WeipsError):
    """The addressed component is dead or not serving."""

    kind = "unavailable"


class ShardDownError(WeipsError):
    """No healthy replica is left for a serving shard."""

    kind = "shard-down"


class RecoveryNeededError(WeipsError):
    kind = "recovery-needed"


class RegistryConflictError(WeipsError):
    kind = "cas-conflict"


class DuplicateRegistrationError(WeipsError):
    kind = "duplicate-registration"


class ConfigError(WeipsError):
    kind = "config"


class DowngradeAbortedError(WeipsError):
    kind = "downgrade-aborted"


ERROR_KINDS = {
    cls.kind: cls
    for cls in (
        WeipsError,
        InvalidSlotError,
        NumericOverflowError,
        RoutingError,
        AppendFailedError,
        PartitionError,
        OutOfRangeError,
        CheckpointError,
        CorruptCheckpointError,
        IncompleteCheckpointError,
        UnavailableError,
        ShardDownError,
        RecoveryNeededError,
        RegistryConflictError,
        DuplicateRegistrationError,
        ConfigError,
        DowngradeAbortedError,
    )
}
