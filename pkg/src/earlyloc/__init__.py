"""Early-exit CNN inference for WiFi-fingerprint indoor localization."""

__version__ = "0.1.0"
