"""Batch pipeline mining PubMed abstracts for IHC tumour-marker positivity profiles."""

__version__ = "0.1.0"
