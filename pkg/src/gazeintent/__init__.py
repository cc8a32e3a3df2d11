"""Intent prediction (inspection vs manipulation) from egocentric gaze."""

__version__ = "0.1.0"
