"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AuditError(Exception):
    exit_code = 3


class ConfigError(AuditError, ValueError):
    """Invalid configuration or a contract/shape violation at an API boundary."""

    exit_code = 2


class DatasetError(AuditError):
    """Dataset could not be fetched, verified or parsed."""

    def __init__(self, dataset, message):
        super().__init__(f"{dataset}: {message}")
        self.dataset = dataset


class TrainingError(AuditError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


class NumericalError(AuditError, FloatingPointError):
    def __init__(self, term, message="non-finite value"):
        super().__init__(f"{term}: {message}")
        self.term = term


class IntegrityError(AuditError):
    """Checkpoint or artifact digest does not match its manifest."""

    exit_code = 4
