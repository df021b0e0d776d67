"""Carrier-grade QKD network key management.

The package models a three-tier KMS chain (user, access and carrier nodes),
an SDN-style controller, an AAA service and a network manager on top of
simulated QKD links, and drives them through reproducible scenarios.
"""

from .config import ConfigInvalid, load_config, reference_config, validate_config
from .controller import compute_path, link_weight
from .harness import (MetricsReport, Scenario, compute_throughput_budget, requirements_trace,
                      run_scenario)
from .network import Network, telemetry_week

__all__ = [
    "ConfigInvalid", "MetricsReport", "Network", "Scenario", "compute_path",
    "compute_throughput_budget", "link_weight", "load_config", "reference_config",
    "requirements_trace", "run_scenario", "telemetry_week", "validate_config",
]
__version__ = "0.1.0"
