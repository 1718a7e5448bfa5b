"""Deterministic federated-learning simulator.

Strategies: FedAvg, FedProx, FedBABU, and two hierarchical-Bayes strategies
(a Normal-Inverse-Wishart global posterior with closed-form aggregation and a
mixture-of-prototypes posterior with EM aggregation) that reduce to the
baselines in the appropriate limits.
"""

__version__ = "0.1.0"
