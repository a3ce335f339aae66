"""Exception types raised across the package."""


class SpawnlabError(Exception):
    """Base class for all package errors."""


class ModelError(SpawnlabError):
    """Invalid graph, edge model or scenario parameters."""


class SingularInformationError(SpawnlabError):
    """A covariance or information matrix could not be inverted safely.

    ``node`` names the node whose update failed, ``edge`` the offending
    (i, j) pair when the failure is tied to a single message, and
    ``iteration`` is filled in by the iteration drivers.
    """

    def __init__(self, message, node=None, edge=None, iteration=None):
        super().__init__(message)
        self.node = node
        self.edge = edge
        self.iteration = iteration

    def __str__(self):
        parts = [super().__str__()]
        if self.iteration is not None:
            parts.append(f"iteration={self.iteration}")
        return " ".join(parts)


class GeometryError(SpawnlabError):
    """Degenerate path geometry (e.g. parallel paths, zero angle gap)."""


class ConfigError(SpawnlabError):
    """Experiment configuration does not match the documented schema."""
