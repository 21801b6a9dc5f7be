"""Singular integrals of homogeneous kernels over self-similar sets in
Heisenberg and Euclidean groups."""

__version__ = "0.1.0"
