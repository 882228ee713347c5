"""Exception types shared across the package."""


class DataError(Exception):
    """Raised for unreadable or structurally invalid input data."""


class ArtifactError(Exception):
    """Raised when a required checkpoint or input file is missing/unreadable."""


class TrainingError(Exception):
    """Raised when a training run diverges (non-finite loss).

    Carries the path of the last-finite checkpoint when one could be written.
    """

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
