"""Sparse diffusion precision estimation for traits evolving on phylogenies."""

__version__ = "0.1.0"
