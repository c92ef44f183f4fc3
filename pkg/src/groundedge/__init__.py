"""Edge detection for low-flying quadrotors from ground-effect signatures in flight telemetry."""

__version__ = "0.1.0"
