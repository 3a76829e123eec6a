"""Unpaired image-to-image translation with multi-crop contrastive negatives,
a domain-consistency loss and dual coordinate attention."""

__version__ = "0.1.0"
