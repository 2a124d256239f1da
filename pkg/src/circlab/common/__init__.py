"""Shared helpers for circlab (config, errors, logging, filesystem)."""
