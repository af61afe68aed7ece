"""Building footprint segmentation with DSFE features and gated graph convolutions.

A small numpy implementation: reverse-mode autodiff, grid graphs and spectral
filters, GCN / GGCN / GGNN heads, a dense encoder-decoder feature extractor,
preprocessing and a training loop.
"""

__version__ = "0.1.0"
