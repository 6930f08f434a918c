"""Desk-scale NF4 + LoRA fine-tuning and closed-loop deployment of a chunked-action VLA policy."""

__version__ = "0.1.0"
