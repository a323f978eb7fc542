"""ML-aware WLAN architecture: MLFO, ML pipeline, sandbox and AP association."""

__version__ = "0.1.0"
