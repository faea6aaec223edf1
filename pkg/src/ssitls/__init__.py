"""TLS 1.3 handshake with self-sovereign identity authentication modes."""

__version__ = "0.1.0"
