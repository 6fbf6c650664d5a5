"""Detect and characterise IoT software-update traffic in packet captures."""

__version__ = "0.1.0"
