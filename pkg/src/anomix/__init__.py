"""Semi-supervised acoustic anomaly detection toolkit.

Trains an adversarial autoencoder with an auxiliary encoder and a
mixture-membership estimation head on normal audio only, then scores
test samples by their latent reconstruction distance (or, optionally,
by mixture energy).
"""

__version__ = "0.1.0"
