"""Unpaired image transfer with patch invariance and Laplace uncertainty maps."""

__version__ = "0.1.0"
