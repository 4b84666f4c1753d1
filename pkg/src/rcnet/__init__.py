"""Recurrent-convolution networks with banked batch normalization.

Kept import-free so the CLI can cap BLAS thread counts (RCNET_THREADS)
before numpy is loaded; import submodules directly.
"""

__version__ = "0.1.0"
