"""Queue-aware MIMO precoder/decorrelator control for multimedia streaming.

The package simulates K transmitter/receiver pairs sharing a band: each
receiver consumes a constant-rate media stream from its playback buffer and
the controller picks per-slot precoders and decorrelators from instantaneous
fading and buffer levels, trading transmit power against playback
interruption and buffer overflow.  A closed-form approximate value function
supplies per-flow urgency weights, a weighted-MMSE iteration solves each
slot, and a discretised dynamic-programming oracle bounds the optimality gap
on small instances.
"""

__version__ = "0.1.0"

from .config import SystemConfig, config_from_dict, load_config
from .errors import ConfigurationError, MimostreamError, NumericalError

__all__ = [
    "SystemConfig",
    "config_from_dict",
    "load_config",
    "ConfigurationError",
    "MimostreamError",
    "NumericalError",
    "__version__",
]
