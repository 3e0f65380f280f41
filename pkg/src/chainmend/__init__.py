"""Redactable, repairable account-based blockchain with an approval-gated repair layer."""

__version__ = "0.1.0"
