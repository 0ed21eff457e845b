"""Monodomain UQ."""
