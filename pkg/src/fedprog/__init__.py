"""Federated LSTM health prognostics with FedAvg and matched averaging."""

__version__ = "0.1.0"
