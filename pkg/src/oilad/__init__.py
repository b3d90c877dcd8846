"""Anomaly detection for sequential decisions by offline imitation learning.

A causal transformer is fitted to normal trajectories by behavioural cloning
with an extra loss that makes state values rise along a trajectory.  Its
Q values and state values give two features per sliding window (action
optimality and sequential association); an isolation forest over those
features flags anomalous windows and trajectories.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateDataError, InjectionError, NumericalError,
                     OiladError, ParseError, ShapeError, VersionError)
from .trajectory import (ANOMALY_LABELS, LABELS, NORMAL, PERTURBED_ANOMALY, POLICY_ANOMALY,
                         Dataset, Trajectory)

__all__ = [
    "__version__", "ConfigError", "DegenerateDataError", "InjectionError", "NumericalError",
    "OiladError", "ParseError", "ShapeError", "VersionError", "ANOMALY_LABELS", "LABELS",
    "NORMAL", "PERTURBED_ANOMALY", "POLICY_ANOMALY", "Dataset", "Trajectory",
]
