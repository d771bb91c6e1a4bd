"""B-link tree on simulated disaggregated memory, with a baseline engine."""
from .baseline import FGPlusTree, HostSpinLock
from .cache import IndexCache
from .client import ClientThread, Cluster, ComputeServer, ThreadStats
from .fabric import (Fabric, FabricConfig, GlobalAddress, Region, create_fabric)
from .hocl import HOCL, MutualExclusionViolation
from .sim import Livelock, SimulationError, Simulator
from .tree import ROOT_POINTER, BLinkTree, Session, ShermanTree, TreeConfig, TreeError

ENGINES = {"sherman": ShermanTree, "fgplus": FGPlusTree}

__all__ = [
    "BLinkTree", "ClientThread", "Cluster", "ComputeServer", "ENGINES", "FGPlusTree",
    "Fabric", "FabricConfig", "GlobalAddress", "HOCL", "HostSpinLock", "IndexCache",
    "Livelock", "MutualExclusionViolation", "ROOT_POINTER", "Region", "Session",
    "ShermanTree", "SimulationError", "Simulator", "ThreadStats", "TreeConfig",
    "TreeError", "create_fabric",
]
