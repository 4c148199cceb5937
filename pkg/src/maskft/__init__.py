"""Masked and low-rank finetuning of small pretrained networks under distribution shift."""

__version__ = "0.1.0"
