"""Exception hierarchy. Each error carries the CLI exit code it maps to."""


class MCTIError(Exception):
    exit_code = 2


class ConfigError(MCTIError):
    pass


class PlaceholderError(MCTIError, ValueError):
    pass


class UnknownPseudoWordError(MCTIError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyStringError(MCTIError, ValueError):
    pass


class OutOfVocabularyError(MCTIError, ValueError):
    pass


class SequenceTooLongError(MCTIError, ValueError):
    pass


class DecodeError(MCTIError):
    pass


class ShapeError(MCTIError, ValueError):
    pass


class TimestepError(MCTIError, ValueError):
    pass


class UnreadablePathError(MCTIError, OSError):
    pass


class EmptyClassError(MCTIError, ValueError):
    pass


class DuplicateSampleError(MCTIError, ValueError):
    pass


class InsufficientSamplesError(MCTIError, ValueError):
    pass


class ChecksumMismatchError(MCTIError):
    pass


class FingerprintMismatchError(MCTIError):
    pass


class ZeroNormError(MCTIError, ValueError):
    pass


class CacheIncompleteError(MCTIError):
    pass


class MissingTokenError(MCTIError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing tokens for class indices {self.missing}")


class EmptyTestSetError(MCTIError, ValueError):
    pass


class PhaseError(MCTIError, RuntimeError):
    pass


class SamplingUnsupportedError(MCTIError):
    exit_code = 3


class PartialTrainingError(MCTIError):
    exit_code = 4

    def __init__(self, failed, store=None):
        self.failed = dict(failed)
        self.store = store
        names = ", ".join(f"{k}: {v}" for k, v in sorted(self.failed.items()))
        super().__init__(f"training failed for classes {names}")
