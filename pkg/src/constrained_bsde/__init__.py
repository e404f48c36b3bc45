"""Minimal super-solutions of BSDEs under convex gains constraints."""
__version__ = "0.1.0"
