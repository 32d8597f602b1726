"""Co-simulation of CAN traffic, ECU schedules and schedule obfuscation against bus-off attacks."""

__version__ = "0.1.0"
