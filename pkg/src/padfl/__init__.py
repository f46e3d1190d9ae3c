"""padfl: simulator for personalized federated learning across
capacity-heterogeneous clients, built on channel-aware parameter
decomposition, width pruning, and hyper-network parameter generation."""

__version__ = "0.1.0"
