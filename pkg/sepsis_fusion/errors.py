class SepsisFusionError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(SepsisFusionError, ValueError):
    pass


class SchemaError(SepsisFusionError, ValueError):
    def __init__(self, message, record_id=None):
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)
        self.record_id = record_id


class CohortFormatError(SepsisFusionError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OutputError(SepsisFusionError, OSError):
    pass


class SplitError(SepsisFusionError, ValueError):
    pass


class GenSpecError(SepsisFusionError, ValueError):
    pass


class LexiconError(SepsisFusionError, ValueError):
    pass


class GuardError(SepsisFusionError, ValueError):
    pass


class ModelError(SepsisFusionError, ValueError):
    pass


class ModalityMissingError(SepsisFusionError):
    def __init__(self, modality, record_id=None):
        message = f"{modality} modality absent"
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)
        self.modality = modality
        self.record_id = record_id


class FoldError(SepsisFusionError, ValueError):
    pass


class MetricError(SepsisFusionError, ValueError):
    pass
