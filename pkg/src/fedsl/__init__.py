"""Discrete-event simulator for federated split learning over lossy wireless links."""

__version__ = "0.1.0"
