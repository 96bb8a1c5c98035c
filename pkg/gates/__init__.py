"""Gating functions, one module per routing rule."""
