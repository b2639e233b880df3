"""Twin-guided pilot-beam selection, zoning and calibration for UPA channel estimation."""

__version__ = "0.1.0"
