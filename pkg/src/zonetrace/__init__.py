"""Indoor contaminant release simulation, emulation and source inference.

The package covers the full chain: steady multizone airflow with one
grid-resolved room, transient contaminant transport, Gaussian-process
emulation of the simulator, Metropolis-Hastings source characterization
from noisy sensor readings, and a staged sensor-network protocol built on
top of the inference.
"""

from .buildingio import load_building, parse_building, seven_room
from .harness import (
    CampaignConfig,
    load_campaign,
    make_observations,
    reproduce,
    train_campaign,
)
from .inference import (
    EmulatorPredictor,
    InferenceSettings,
    ObservationSet,
    ParameterRanges,
    SimulatorPredictor,
    StateSpace,
    run_inference,
)
from .netflow import (
    BuildingNetwork,
    FlowPath,
    PressureSolution,
    SourceScenario,
    TransientTrace,
    Zone,
    simulate,
    solve_pressures,
    step_transport,
)
from .sensornet import SensorDeployment, dynamic_protocol

__version__ = "0.1.0"

__all__ = [
    "BuildingNetwork",
    "CampaignConfig",
    "EmulatorPredictor",
    "FlowPath",
    "InferenceSettings",
    "ObservationSet",
    "ParameterRanges",
    "PressureSolution",
    "SensorDeployment",
    "SimulatorPredictor",
    "SourceScenario",
    "StateSpace",
    "TransientTrace",
    "Zone",
    "dynamic_protocol",
    "load_building",
    "load_campaign",
    "make_observations",
    "parse_building",
    "reproduce",
    "run_inference",
    "seven_room",
    "simulate",
    "solve_pressures",
    "step_transport",
    "train_campaign",
    "__version__",
]
