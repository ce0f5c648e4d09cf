"""Single- and multi-modal 3D CNNs with a random-pairing evaluation harness."""

__version__ = "0.1.0"
