"""Desk-scale offline RL laboratory: behavior-prior state representations,
conservative offline agents, and spectral/bound diagnostics."""

__version__ = "0.1.0"
