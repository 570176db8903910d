"""HRTEM FFT phase identification, component mapping and stack profiling."""

__version__ = "0.1.0"
