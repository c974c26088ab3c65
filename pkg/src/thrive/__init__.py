"""Privacy-preserving biometric verification with threshold GM encryption and biohashing."""

__version__ = "0.1.0"
