"""Multi-network contrastive pretraining with global and local (patch) views."""
__version__ = "0.1.0"
