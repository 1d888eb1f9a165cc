"""Encoder-only open-vocabulary visual relationship detection at desk scale."""

__version__ = "0.1.0"
