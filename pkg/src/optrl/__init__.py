"""Desk-scale offline-to-online reinforcement learning with an online pre-training phase."""

from ._alloc import tune_allocator

__version__ = "0.1.0"

tune_allocator()
