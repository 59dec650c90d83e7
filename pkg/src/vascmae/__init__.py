"""Vessel-guided masked-autoencoder pre-training and query-based lesion
detection on synthetic 3D vascular phantoms."""

__version__ = "0.1.0"
