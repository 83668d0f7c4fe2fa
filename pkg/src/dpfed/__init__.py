"""Client-level differentially private federated averaging, simulated in-process."""

__version__ = "0.1.0"
