"""Untrusted host model: OS allocator, image loader, driver, attacker, demos and scenarios."""

from .driver import Host, HostConfig, HostPolicy, Scheduler
from .image import EnclaveImage, ImageError, Segment, random_image
from .osmodel import OutOfPhysicalMemory, PhysAllocator
from .remote import run_wordcount
from .scenario import ScenarioParseError, ScenarioResult, run_scenario

__all__ = [
    "Host", "HostConfig", "HostPolicy", "Scheduler", "EnclaveImage", "ImageError", "Segment",
    "random_image", "OutOfPhysicalMemory", "PhysAllocator", "run_wordcount",
    "ScenarioParseError", "ScenarioResult", "run_scenario",
]
