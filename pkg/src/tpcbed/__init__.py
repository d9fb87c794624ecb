"""Desk-scale simulator and controller for computational RFID tags.

The package models a small shared testbed: battery-free tags harvesting
reader power, a three-antenna bench, an interrogator with a compact
binary control protocol, wireless firmware transfer with verification,
and a multi-user controller that leases the bench to one client at a
time.  Every experiment is a deterministic function of (configuration,
seed).
"""

from .config import TestbedConfig, default_config, load_config
from .controller import (
    ControlClient,
    ControlServer,
    ExperimentLog,
    SessionManager,
    TestbedController,
    write_inventory_csv,
    write_reprogram_csv,
)
from .gen2 import InventoryConfig, run_inventory_round
from .rfchannel import LinkBudgetParams, TestbedGeometry, default_geometry, link_quality
from .reader import Reader, ReaderClient, ReaderServer, RemoteReaderSession
from .tag import CrfidTag, MemoryMap, ones_complement_sum16
from .wisent import (
    FirmwareImage,
    TransferPolicy,
    TransferStats,
    choose_antennas,
    load_firmware,
    parse_ti_txt,
    reprogram,
    serialize_ti_txt,
)
from .world import VirtualClock, World

__version__ = "0.1.0"

__all__ = [
    "ControlClient",
    "ControlServer",
    "CrfidTag",
    "ExperimentLog",
    "FirmwareImage",
    "InventoryConfig",
    "LinkBudgetParams",
    "MemoryMap",
    "Reader",
    "ReaderClient",
    "ReaderServer",
    "RemoteReaderSession",
    "SessionManager",
    "TestbedConfig",
    "TestbedController",
    "TestbedGeometry",
    "TransferPolicy",
    "TransferStats",
    "VirtualClock",
    "World",
    "choose_antennas",
    "default_config",
    "default_geometry",
    "link_quality",
    "load_config",
    "load_firmware",
    "ones_complement_sum16",
    "parse_ti_txt",
    "reprogram",
    "run_inventory_round",
    "serialize_ti_txt",
    "write_inventory_csv",
    "write_reprogram_csv",
    "__version__",
]
