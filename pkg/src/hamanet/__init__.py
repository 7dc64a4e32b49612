"""Deterministic discrete-event simulator of community-based service routing."""

from .core import (
    BROADCAST,
    CommunityTable,
    MachineId,
    MalformedPath,
    NodeId,
    PacketEnvelope,
    SocietyTable,
    format_path,
    parse_path,
    society_lookup,
    table_digest,
)
from .fabric import ArtDef, ArtRegistry, CultureDef, MachineInstance, accepts
from .scenario import Scenario, load_scenario, loads_scenario, validate
from .services import compare_overhead
from .sim import RunResult, Simulation, run

__version__ = "0.1.0"

__all__ = [
    "BROADCAST",
    "ArtDef",
    "ArtRegistry",
    "CommunityTable",
    "CultureDef",
    "MachineId",
    "MachineInstance",
    "MalformedPath",
    "NodeId",
    "PacketEnvelope",
    "RunResult",
    "Scenario",
    "Simulation",
    "SocietyTable",
    "accepts",
    "compare_overhead",
    "format_path",
    "load_scenario",
    "loads_scenario",
    "parse_path",
    "run",
    "society_lookup",
    "table_digest",
    "validate",
]
