"""CapSeal: capability-sealed secret mediation broker for untrusted agent clients."""

__version__ = "0.1.0"
