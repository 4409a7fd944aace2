"""Symbolic regression with a learned prior over coefficient-abstracted
postfix templates."""

__version__ = "0.1.0"
