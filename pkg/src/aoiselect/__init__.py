"""Age-based client selection for federated learning: policies, Markov
chain analysis, selection metrics and a FedAvg simulator."""

__version__ = "0.1.0"
