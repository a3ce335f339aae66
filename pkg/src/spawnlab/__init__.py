"""Cooperative estimation over sensor networks: gSPAWN, ATC diffusion and their analysis."""

from .exceptions import (ConfigError, GeometryError, ModelError, SingularInformationError,
                         SpawnlabError)
from .model import (EdgeModel, GroundTruth, MeasurementStream, NetworkGraph, Regressor, Scenario,
                    build_regular_graph, validate_assumptions)

__version__ = "0.1.0"
