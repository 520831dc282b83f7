class AdvCapError(Exception):
    pass


class ConfigError(AdvCapError, ValueError):
    pass


class DimensionError(AdvCapError, ValueError):
    pass


class SequenceLengthError(AdvCapError, ValueError):
    pass


class DegenerateBatchError(AdvCapError, ValueError):
    pass


class PairingError(AdvCapError, ValueError):
    pass


class TrainingError(AdvCapError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, trial: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.trial = trial


class ParseError(AdvCapError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ManifestError(AdvCapError, FileNotFoundError):
    pass


class EmptyCorpusError(AdvCapError, ValueError):
    pass


class VocabularyMismatchError(AdvCapError, ValueError):
    pass
