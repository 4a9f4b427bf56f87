"""
FedUP Simulation - Unit Tests Package

Tests for the model core, data and attacks, federated rounds, unlearning,
baselines, configuration, metrics and the experiment runner.
"""
