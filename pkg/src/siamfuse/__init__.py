"""Siamese visual tracker with attention-based template fusion, built on a
self-contained numpy autodiff core."""

__version__ = "0.1.0"
