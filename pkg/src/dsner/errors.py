"""Exception types shared across the toolkit."""


class DsnerError(Exception):
    """Base class for all toolkit errors."""


class ConllParseError(DsnerError):
    def __init__(self, message, line_no=None, path=None):
        self.line_no = line_no
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line_no is not None:
            where += f"{line_no}: "
        elif where:
            where += " "
        super().__init__(where + message)


class AlignmentError(DsnerError):
    """Two annotation layers do not describe the same token sequence."""


class ConfigError(DsnerError):
    """A configuration value is missing or out of range."""


class CheckpointError(DsnerError):
    """A checkpoint file is unreadable or incompatible."""


class DataStoreError(DsnerError):
    """A KNN datastore is empty, corrupt, or built from another model."""


class TrainingError(DsnerError):
    """Training cannot start or produced a non-finite loss."""
