"""Power-grid critical link identification: complex-network oracle and graph attention classifier."""

__version__ = "0.1.0"
